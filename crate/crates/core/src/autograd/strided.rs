//! Strided copy and reduction kernels over flat row-major buffers.
//!
//! A walk visits `shape` in row-major order while tracking an offset into a
//! second buffer with arbitrary (possibly zero) strides. Adjacent axes that
//! are contiguous in both buffers are merged first, so broadcasts and
//! reductions over trailing axes run as whole slices.

/// Row-major strides of `shape`.
pub fn standard_strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![0; shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        s[i] = acc;
        acc *= shape[i];
    }
    s
}

/// Merged `(extent, stride)` axes; always at least one.
fn coalesce(shape: &[usize], strides: &[usize]) -> Vec<(usize, usize)> {
    let mut dims: Vec<(usize, usize)> = Vec::with_capacity(shape.len());
    for (&n, &s) in shape.iter().zip(strides) {
        if n == 1 {
            continue;
        }
        match dims.last_mut() {
            // Merging is valid when the outer stride spans the inner axis.
            Some(last) if last.1 == s * n => *last = (last.0 * n, s),
            _ => dims.push((n, s)),
        }
    }
    if dims.is_empty() {
        dims.push((1, 0));
    }
    dims
}

/// Calls `f(dense_offset, strided_offset)` at the start of every innermost
/// run and returns the run's `(length, stride)`.
fn walk(shape: &[usize], strides: &[usize], mut f: impl FnMut(usize, usize, usize, usize)) {
    if shape.iter().any(|&n| n == 0) {
        return;
    }
    let dims = coalesce(shape, strides);
    let nd = dims.len();
    let (run, step) = dims[nd - 1];
    let mut idx = vec![0usize; nd - 1];
    let (mut dense, mut off) = (0usize, 0usize);
    loop {
        f(dense, off, run, step);
        dense += run;
        let mut k = nd - 1;
        loop {
            if k == 0 {
                return;
            }
            k -= 1;
            idx[k] += 1;
            off += dims[k].1;
            if idx[k] < dims[k].0 {
                break;
            }
            off -= dims[k].1 * dims[k].0;
            idx[k] = 0;
        }
    }
}

/// `out[i] = src[offset(i)]` where `offset` uses `strides` over `shape`.
pub fn gather(src: &[f64], shape: &[usize], strides: &[usize]) -> Vec<f64> {
    let total: usize = shape.iter().product();
    // Runs arrive in dense order, so the output is built by appending.
    let mut out = Vec::with_capacity(total);
    walk(shape, strides, |_, off, run, step| match step {
        1 => out.extend_from_slice(&src[off..off + run]),
        0 => out.resize(out.len() + run, src[off]),
        _ => out.extend((0..run).map(|j| src[off + j * step])),
    });
    out
}

/// `out[offset(i)] += src[i]`, the adjoint of [`gather`].
pub fn scatter_add(src: &[f64], shape: &[usize], strides: &[usize], out: &mut [f64]) {
    walk(shape, strides, |dense, off, run, step| {
        let s = &src[dense..dense + run];
        match step {
            1 => {
                for (d, v) in out[off..off + run].iter_mut().zip(s) {
                    *d += v;
                }
            }
            0 => out[off] += s.iter().sum::<f64>(),
            _ => {
                for (j, v) in s.iter().enumerate() {
                    out[off + j * step] += v;
                }
            }
        }
    });
}

/// Strides that read a right-aligned `from` tensor as `shape`, with zero
/// stride on broadcast axes.
pub fn broadcast_strides(from: &[usize], shape: &[usize]) -> Vec<usize> {
    let src = standard_strides(from);
    let lead = shape.len() - from.len();
    (0..shape.len())
        .map(|i| {
            if i < lead || from[i - lead] == 1 {
                0
            } else {
                src[i - lead]
            }
        })
        .collect()
}
