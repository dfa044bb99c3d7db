//! Status codes and the per-thread last-error message.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, UnwindSafe};
use std::path::PathBuf;

use trustdd::error::Error;

/// Result of every fallible call. Zero is success.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrustddStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Load = 4,
    Write = 5,
    Validation = 6,
    Compute = 7,
    BufferTooSmall = 8,
    Io = 9,
    Panic = 10,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

pub(crate) fn set_last_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

pub(crate) fn last_error() -> String {
    LAST_ERROR.with(|e| e.borrow().clone())
}

/// A failure carried to the boundary: a status plus its message.
pub(crate) struct Failure {
    pub status: TrustddStatus,
    pub message: String,
}

impl Failure {
    pub fn new(status: TrustddStatus, message: impl Into<String>) -> Self {
        Failure {
            status,
            message: message.into(),
        }
    }
}

pub(crate) fn status_of(e: &Error) -> TrustddStatus {
    match e {
        Error::Load { .. } | Error::Parse { .. } | Error::Incompatible { .. } => TrustddStatus::Load,
        Error::Write { .. } => TrustddStatus::Write,
        Error::Config(_) | Error::Spec(_) => TrustddStatus::Config,
        Error::Validation(_) | Error::Initialization(_) | Error::Corruption(_) => TrustddStatus::Validation,
        Error::Io(_) => TrustddStatus::Io,
        Error::Run { source, .. } => status_of(source),
        _ => TrustddStatus::Compute,
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::new(status_of(&e), e.to_string())
    }
}

/// Runs `f`, recording any error or panic as the thread's last error.
pub(crate) fn guard(f: impl FnOnce() -> Result<(), Failure> + UnwindSafe) -> TrustddStatus {
    match catch_unwind(f) {
        Ok(Ok(())) => {
            set_last_error("");
            TrustddStatus::Ok
        }
        Ok(Err(fail)) => {
            set_last_error(fail.message);
            fail.status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {msg}"));
            TrustddStatus::Panic
        }
    }
}

/// Borrows a NUL-terminated UTF-8 argument.
///
/// # Safety
/// `p` must be null or point to a NUL-terminated string that outlives the call.
pub(crate) unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::new(TrustddStatus::NullArgument, format!("`{name}` is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::new(TrustddStatus::InvalidUtf8, format!("`{name}` is not UTF-8")))
}

/// # Safety
/// As for [`str_arg`].
pub(crate) unsafe fn path_arg(p: *const c_char, name: &str) -> Result<PathBuf, Failure> {
    str_arg(p, name).map(PathBuf::from)
}

pub(crate) fn null(name: &str) -> Failure {
    Failure::new(TrustddStatus::NullArgument, format!("`{name}` is null"))
}

/// Copies `s` plus a NUL into `buf` when it fits.
///
/// # Safety
/// `buf` must be null or valid for `len` writable bytes.
pub(crate) unsafe fn write_str(s: &str, buf: *mut c_char, len: usize) -> Result<(), Failure> {
    let bytes = s.as_bytes();
    if buf.is_null() || len < bytes.len() + 1 {
        return Err(Failure::new(
            TrustddStatus::BufferTooSmall,
            format!("need {} bytes", bytes.len() + 1),
        ));
    }
    std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf.cast::<u8>(), bytes.len());
    *buf.add(bytes.len()) = 0;
    Ok(())
}
