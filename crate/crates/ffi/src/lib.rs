//! C ABI over the trustdd toolkit.
//!
//! Configs and distilled sets cross the boundary as opaque handles that the
//! caller releases with the matching `_free` function. Every fallible call
//! returns a [`TrustddStatus`]; the message of the most recent failure on the
//! calling thread is available from [`trustdd_last_error`].

use std::ffi::c_char;
use std::path::Path;

use trustdd::config::ExperimentConfig;
use trustdd::data::{load_distilled, DistilledSet};
use trustdd::runner;

mod status;

pub use status::TrustddStatus;
use status::{guard, last_error, null, path_arg, str_arg, write_str, Failure};

/// Opaque experiment configuration.
pub struct TrustddConfig {
    inner: ExperimentConfig,
}

/// Opaque distilled set loaded from a container directory.
pub struct TrustddDistilled {
    inner: DistilledSet,
}

/// Plain-data summary of a distilled set.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TrustddDistilledInfo {
    pub num_classes: usize,
    pub ipc: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub s_in_count: usize,
    pub s_out_count: usize,
    pub lambda: f64,
    pub rng_seed: u64,
}

/// In-distribution accuracy and mean OOD metrics for the first configured score.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TrustddEvalSummary {
    pub accuracy: f64,
    pub fpr95: f64,
    pub auroc: f64,
    pub aupr_in: f64,
    pub aupr_out: f64,
}

unsafe fn out_ptr<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(name))
}

unsafe fn handle<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(name))
}

/// Copies the calling thread's last error message into `buf` (NUL-terminated)
/// and returns the buffer size it needs. Passing a null or short buffer only
/// reports the size.
///
/// # Safety
/// `buf` must be null or valid for `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn trustdd_last_error(buf: *mut c_char, len: usize) -> usize {
    let msg = last_error();
    let _ = write_str(&msg, buf, len);
    msg.len() + 1
}

/// Parses config text; relative paths resolve against `base_dir`.
///
/// # Safety
/// `text` and `base_dir` must be NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn trustdd_config_parse(
    text: *const c_char,
    base_dir: *const c_char,
    out: *mut *mut TrustddConfig,
) -> TrustddStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let text = str_arg(text, "text")?;
        let base = path_arg(base_dir, "base_dir")?;
        let inner = ExperimentConfig::parse(text, &base)?;
        *out = Box::into_raw(Box::new(TrustddConfig { inner }));
        Ok(())
    })
}

/// Reads a config file; relative paths resolve against its directory.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn trustdd_config_from_file(path: *const c_char, out: *mut *mut TrustddConfig) -> TrustddStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let path = path_arg(path, "path")?;
        let inner = ExperimentConfig::from_file(&path)?;
        *out = Box::into_raw(Box::new(TrustddConfig { inner }));
        Ok(())
    })
}

/// Overrides one key. On error the config is left unchanged.
///
/// # Safety
/// `cfg` must be a live handle; `key` and `value` NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn trustdd_config_set(
    cfg: *mut TrustddConfig,
    key: *const c_char,
    value: *const c_char,
) -> TrustddStatus {
    guard(|| {
        let cfg = out_ptr(cfg, "cfg")?;
        let key = str_arg(key, "key")?;
        let value = str_arg(value, "value")?;
        cfg.inner = cfg.inner.with(key, value)?;
        Ok(())
    })
}

/// Writes the 64-hex-digit config checksum and a NUL into `buf` (65 bytes).
///
/// # Safety
/// `cfg` must be a live handle; `buf` valid for `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn trustdd_config_checksum(
    cfg: *const TrustddConfig,
    buf: *mut c_char,
    len: usize,
) -> TrustddStatus {
    guard(|| {
        let cfg = handle(cfg, "cfg")?;
        write_str(&cfg.inner.checksum(), buf, len)
    })
}

/// Releases a config handle. Null is ignored.
///
/// # Safety
/// `cfg` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn trustdd_config_free(cfg: *mut TrustddConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Distills every configured run into `output/run{r}` and stores the run
/// count in `runs`.
///
/// # Safety
/// `cfg` must be a live handle; `runs` null or writable.
#[no_mangle]
pub unsafe extern "C" fn trustdd_distill(cfg: *const TrustddConfig, runs: *mut usize) -> TrustddStatus {
    guard(|| {
        let cfg = handle(cfg, "cfg")?;
        let dirs = runner::cmd_distill(&cfg.inner)?;
        if let Some(r) = runs.as_mut() {
            *r = dirs.len();
        }
        Ok(())
    })
}

/// Evaluates the runs under `dir` as arm `name`, writes the reports into the
/// config's output directory and summarizes the first score.
///
/// # Safety
/// `cfg` must be a live handle; strings NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn trustdd_eval(
    cfg: *const TrustddConfig,
    name: *const c_char,
    dir: *const c_char,
    out: *mut TrustddEvalSummary,
) -> TrustddStatus {
    guard(|| {
        let cfg = handle(cfg, "cfg")?;
        let name = str_arg(name, "name")?;
        let dir = path_arg(dir, "dir")?;
        let out = out_ptr(out, "out")?;
        let arm = runner::Arm::load(name, &dir)?;
        let reports = runner::cmd_eval(&cfg.inner, &[arm])?;
        let report = &reports[0].1;
        let score = report.scores[0];
        let m = report
            .mean_row(score, cfg.inner.eval.include_noise)
            .or_else(|| report.mean_row(score, true))
            .ok_or_else(|| Failure::new(TrustddStatus::Compute, "report has no rows"))?;
        *out = TrustddEvalSummary {
            accuracy: report.ind_accuracy,
            fpr95: m.fpr95,
            auroc: m.auroc,
            aupr_in: m.aupr_in,
            aupr_out: m.aupr_out,
        };
        Ok(())
    })
}

/// Writes a tiled PPM of the distilled set in `dir`.
///
/// # Safety
/// `dir` and `out` must be NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn trustdd_export_grid(dir: *const c_char, out: *const c_char) -> TrustddStatus {
    guard(|| {
        let dir = path_arg(dir, "dir")?;
        let out = path_arg(out, "out")?;
        runner::cmd_export_grid(&dir, &out)?;
        Ok(())
    })
}

/// Loads a distilled-set container directory.
///
/// # Safety
/// `dir` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn trustdd_distilled_load(dir: *const c_char, out: *mut *mut TrustddDistilled) -> TrustddStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let dir = path_arg(dir, "dir")?;
        let inner = load_distilled(Path::new(&dir))?;
        *out = Box::into_raw(Box::new(TrustddDistilled { inner }));
        Ok(())
    })
}

/// # Safety
/// `set` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn trustdd_distilled_info(
    set: *const TrustddDistilled,
    out: *mut TrustddDistilledInfo,
) -> TrustddStatus {
    guard(|| {
        let s = &handle(set, "set")?.inner;
        let out = out_ptr(out, "out")?;
        let shape = s.shape();
        *out = TrustddDistilledInfo {
            num_classes: s.num_classes,
            ipc: s.ipc,
            channels: shape.channels,
            height: shape.height,
            width: shape.width,
            s_in_count: s.s_in_labels.len(),
            s_out_count: s.s_out_len(),
            lambda: s.lambda,
            rng_seed: s.rng_seed,
        };
        Ok(())
    })
}

unsafe fn copy_into<T: Copy>(src: &[T], buf: *mut T, len: usize) -> Result<(), Failure> {
    if buf.is_null() || len < src.len() {
        return Err(Failure::new(
            TrustddStatus::BufferTooSmall,
            format!("need {} elements", src.len()),
        ));
    }
    std::ptr::copy_nonoverlapping(src.as_ptr(), buf, src.len());
    Ok(())
}

/// Copies `S_in` pixels (row-major count × channels × height × width).
///
/// # Safety
/// `set` must be a live handle; `buf` valid for `len` floats.
#[no_mangle]
pub unsafe extern "C" fn trustdd_distilled_copy_s_in(
    set: *const TrustddDistilled,
    buf: *mut f32,
    len: usize,
) -> TrustddStatus {
    guard(|| {
        let s = &handle(set, "set")?.inner;
        let px: Vec<f32> = s.s_in_images.iter().copied().collect();
        copy_into(&px, buf, len)
    })
}

/// Copies `S_out` pixels (row-major count × channels × height × width).
///
/// # Safety
/// `set` must be a live handle; `buf` valid for `len` floats.
#[no_mangle]
pub unsafe extern "C" fn trustdd_distilled_copy_s_out(
    set: *const TrustddDistilled,
    buf: *mut f32,
    len: usize,
) -> TrustddStatus {
    guard(|| {
        let s = &handle(set, "set")?.inner;
        let px: Vec<f32> = s.s_out_images.iter().copied().collect();
        copy_into(&px, buf, len)
    })
}

/// Copies the `S_in` class labels.
///
/// # Safety
/// `set` must be a live handle; `buf` valid for `len` integers.
#[no_mangle]
pub unsafe extern "C" fn trustdd_distilled_copy_labels(
    set: *const TrustddDistilled,
    buf: *mut u32,
    len: usize,
) -> TrustddStatus {
    guard(|| {
        let s = &handle(set, "set")?.inner;
        let labels: Vec<u32> = s.s_in_labels.iter().map(|&l| l as u32).collect();
        copy_into(&labels, buf, len)
    })
}

/// Releases a distilled-set handle. Null is ignored.
///
/// # Safety
/// `set` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn trustdd_distilled_free(set: *mut TrustddDistilled) {
    if !set.is_null() {
        drop(Box::from_raw(set));
    }
}
