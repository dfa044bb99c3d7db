use std::rc::Rc;

use ndarray::{ArrayD, Axis, Ix2, IxDyn, Slice};

use super::strided;
use super::Var;

/// Shape bookkeeping for a stride-1 square-kernel convolution lowered to a
/// matrix product.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        self.height + 2 * self.pad + 1 - self.kernel
    }

    pub fn out_width(&self) -> usize {
        self.width + 2 * self.pad + 1 - self.kernel
    }

    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn cols(&self) -> usize {
        self.batch * self.out_height() * self.out_width()
    }
}

/// A fixed sparse linear map between `height × width` planes. Each output
/// pixel is a weighted sum of a few input pixels (bilinear sampling, integer
/// shifts, flips). Applied identically to every leading index.
#[derive(Debug, Clone, PartialEq)]
pub struct ResampleMap {
    pub height: usize,
    pub width: usize,
    offsets: Vec<usize>,
    sources: Vec<usize>,
    weights: Vec<f64>,
}

impl ResampleMap {
    /// Builds the map from a per-output-pixel list of `(source_index, weight)`.
    pub fn from_taps(height: usize, width: usize, taps: Vec<Vec<(usize, f64)>>) -> Self {
        assert_eq!(taps.len(), height * width);
        let mut offsets = Vec::with_capacity(taps.len() + 1);
        let mut sources = Vec::new();
        let mut weights = Vec::new();
        offsets.push(0);
        for t in taps {
            for (s, w) in t {
                assert!(s < height * width);
                sources.push(s);
                weights.push(w);
            }
            offsets.push(sources.len());
        }
        ResampleMap {
            height,
            width,
            offsets,
            sources,
            weights,
        }
    }

    fn apply(&self, input: &[f64], out: &mut [f64]) {
        for (p, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for t in self.offsets[p]..self.offsets[p + 1] {
                acc += self.weights[t] * input[self.sources[t]];
            }
            *o = acc;
        }
    }

    fn apply_adjoint(&self, input: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (p, &g) in input.iter().enumerate() {
            for t in self.offsets[p]..self.offsets[p + 1] {
                out[self.sources[t]] += self.weights[t] * g;
            }
        }
    }
}

#[derive(Clone)]
pub(crate) enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    AddScalar,
    MulScalar(f64),
    Exp,
    Ln,
    Sqrt,
    Relu,
    Clamp(f64, f64),
    MatMul,
    Transpose,
    Reshape(Vec<usize>),
    Permute(Vec<usize>),
    BroadcastTo(Vec<usize>),
    SumTo(Vec<usize>),
    Narrow { axis: usize, start: usize, full: usize },
    Embed { axis: usize, start: usize, len: usize },
    Gather(Rc<Vec<usize>>),
    ScatterAdd(Rc<Vec<usize>>),
    Im2Col(ConvGeometry),
    Col2Im(ConvGeometry),
    Resample(Rc<ResampleMap>),
    ResampleAdjoint(Rc<ResampleMap>),
    Pool2,
    Unpool2,
}

fn std_layout(a: ArrayD<f64>) -> ArrayD<f64> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            panic!("cannot broadcast {a:?} with {b:?}");
        };
    }
    out
}

fn flat(a: &ArrayD<f64>) -> std::borrow::Cow<'_, [f64]> {
    match a.as_slice() {
        Some(s) => s.into(),
        None => a.iter().copied().collect::<Vec<_>>().into(),
    }
}

fn check_broadcast(from: &[usize], shape: &[usize]) {
    let ok = from.len() <= shape.len()
        && from
            .iter()
            .zip(&shape[shape.len() - from.len()..])
            .all(|(&f, &s)| f == s || f == 1);
    assert!(ok, "cannot broadcast {from:?} to {shape:?}");
}

fn sum_to_value(src: &ArrayD<f64>, target: &[usize]) -> ArrayD<f64> {
    check_broadcast(target, src.shape());
    let mut out = vec![0.0; target.iter().product()];
    let strides = strided::broadcast_strides(target, src.shape());
    strided::scatter_add(&flat(src), src.shape(), &strides, &mut out);
    ArrayD::from_shape_vec(IxDyn(target), out).unwrap()
}

fn permute_value(src: &ArrayD<f64>, axes: &[usize]) -> ArrayD<f64> {
    let from = src.shape();
    assert_eq!(axes.len(), from.len(), "permutation rank mismatch");
    let st = strided::standard_strides(from);
    let shape: Vec<usize> = axes.iter().map(|&a| from[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| st[a]).collect();
    let v = strided::gather(&flat(src), &shape, &strides);
    ArrayD::from_shape_vec(IxDyn(&shape), v).unwrap()
}

fn binary_operands(a: &Var, b: &Var) -> (Var, Var) {
    if a.shape() == b.shape() {
        return (a.clone(), b.clone());
    }
    let shape = broadcast_shape(a.shape(), b.shape());
    (a.broadcast_to(&shape), b.broadcast_to(&shape))
}

impl Var {
    pub fn add(&self, other: &Var) -> Var {
        let (a, b) = binary_operands(self, other);
        let v = a.value() + b.value();
        Var::from_op(v, Op::Add, vec![a, b])
    }

    pub fn sub(&self, other: &Var) -> Var {
        let (a, b) = binary_operands(self, other);
        let v = a.value() - b.value();
        Var::from_op(v, Op::Sub, vec![a, b])
    }

    pub fn mul(&self, other: &Var) -> Var {
        let (a, b) = binary_operands(self, other);
        let v = a.value() * b.value();
        Var::from_op(v, Op::Mul, vec![a, b])
    }

    pub fn div(&self, other: &Var) -> Var {
        let (a, b) = binary_operands(self, other);
        let v = a.value() / b.value();
        Var::from_op(v, Op::Div, vec![a, b])
    }

    pub fn neg(&self) -> Var {
        Var::from_op(self.value().mapv(|x| -x), Op::Neg, vec![self.clone()])
    }

    pub fn add_scalar(&self, c: f64) -> Var {
        Var::from_op(self.value().mapv(|x| x + c), Op::AddScalar, vec![self.clone()])
    }

    pub fn mul_scalar(&self, c: f64) -> Var {
        Var::from_op(self.value().mapv(|x| x * c), Op::MulScalar(c), vec![self.clone()])
    }

    pub fn square(&self) -> Var {
        self.mul(self)
    }

    pub fn exp(&self) -> Var {
        Var::from_op(self.value().mapv(f64::exp), Op::Exp, vec![self.clone()])
    }

    pub fn ln(&self) -> Var {
        Var::from_op(self.value().mapv(f64::ln), Op::Ln, vec![self.clone()])
    }

    pub fn sqrt(&self) -> Var {
        Var::from_op(self.value().mapv(f64::sqrt), Op::Sqrt, vec![self.clone()])
    }

    pub fn relu(&self) -> Var {
        Var::from_op(self.value().mapv(|x| x.max(0.0)), Op::Relu, vec![self.clone()])
    }

    /// Elementwise clamp; gradient passes only where the input is strictly inside.
    pub fn clamp(&self, lo: f64, hi: f64) -> Var {
        Var::from_op(
            self.value().mapv(|x| x.clamp(lo, hi)),
            Op::Clamp(lo, hi),
            vec![self.clone()],
        )
    }

    /// 2-D matrix product.
    pub fn matmul(&self, other: &Var) -> Var {
        let a = self.value().view().into_dimensionality::<Ix2>().expect("matmul lhs must be 2-D");
        let b = other.value().view().into_dimensionality::<Ix2>().expect("matmul rhs must be 2-D");
        assert_eq!(a.ncols(), b.nrows(), "matmul inner dimension mismatch");
        let v = a.dot(&b).into_dyn();
        Var::from_op(v, Op::MatMul, vec![self.clone(), other.clone()])
    }

    /// 2-D transpose.
    pub fn t(&self) -> Var {
        assert_eq!(self.value().ndim(), 2);
        let v = permute_value(self.value(), &[1, 0]);
        Var::from_op(v, Op::Transpose, vec![self.clone()])
    }

    pub fn reshape(&self, shape: &[usize]) -> Var {
        if self.shape() == shape {
            return self.clone();
        }
        let from = self.shape().to_vec();
        let v = std_layout(self.value().clone())
            .into_shape_with_order(IxDyn(shape))
            .unwrap_or_else(|_| panic!("cannot reshape {from:?} into {shape:?}"));
        Var::from_op(v, Op::Reshape(from), vec![self.clone()])
    }

    pub fn permute(&self, axes: &[usize]) -> Var {
        let v = permute_value(self.value(), axes);
        Var::from_op(v, Op::Permute(axes.to_vec()), vec![self.clone()])
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Var {
        if self.shape() == shape {
            return self.clone();
        }
        let from = self.shape().to_vec();
        check_broadcast(&from, shape);
        let v = strided::gather(&flat(self.value()), shape, &strided::broadcast_strides(&from, shape));
        let v = ArrayD::from_shape_vec(IxDyn(shape), v).unwrap();
        Var::from_op(v, Op::BroadcastTo(from), vec![self.clone()])
    }

    /// Sums over leading axes and over axes where `shape` has extent 1.
    pub fn sum_to(&self, shape: &[usize]) -> Var {
        if self.shape() == shape {
            return self.clone();
        }
        let from = self.shape().to_vec();
        let v = sum_to_value(self.value(), shape);
        assert_eq!(v.shape(), shape, "sum_to {from:?} -> {shape:?}");
        Var::from_op(v, Op::SumTo(from), vec![self.clone()])
    }

    /// Sum of all elements as a 0-d tensor.
    pub fn sum(&self) -> Var {
        let from = self.shape().to_vec();
        let v = ArrayD::from_elem(IxDyn(&[]), self.value().sum());
        Var::from_op(v, Op::SumTo(from), vec![self.clone()])
    }

    pub fn mean(&self) -> Var {
        let n = self.len().max(1) as f64;
        self.sum().mul_scalar(1.0 / n)
    }

    /// Contiguous sub-range along one axis.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Var {
        let full = self.shape()[axis];
        if start == 0 && len == full {
            return self.clone();
        }
        assert!(start + len <= full, "narrow out of range");
        let v = self
            .value()
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .as_standard_layout()
            .into_owned();
        Var::from_op(v, Op::Narrow { axis, start, full }, vec![self.clone()])
    }

    /// Places this tensor at `start` along `axis` in a zero tensor of extent `full`.
    pub fn embed(&self, axis: usize, start: usize, full: usize) -> Var {
        let len = self.shape()[axis];
        let mut shape = self.shape().to_vec();
        shape[axis] = full;
        let mut v = ArrayD::zeros(IxDyn(&shape));
        v.slice_axis_mut(Axis(axis), Slice::from(start..start + len))
            .assign(self.value());
        Var::from_op(v, Op::Embed { axis, start, len }, vec![self.clone()])
    }

    /// Rows `rows` of the leading axis, in that order (repeats allowed).
    pub fn gather_rows(&self, rows: &[usize]) -> Var {
        let v = std_layout(self.value().select(Axis(0), rows));
        Var::from_op(v, Op::Gather(Rc::new(rows.to_vec())), vec![self.clone()])
    }

    /// Adjoint of [`Var::gather_rows`]: row `i` is added into row `rows[i]`
    /// of a zero tensor with `full` rows.
    pub fn scatter_add_rows(&self, rows: &Rc<Vec<usize>>, full: usize) -> Var {
        let mut shape = self.shape().to_vec();
        shape[0] = full;
        let mut v = ArrayD::zeros(IxDyn(&shape));
        for (i, &r) in rows.iter().enumerate() {
            let mut dst = v.index_axis_mut(Axis(0), r);
            dst += &self.value().index_axis(Axis(0), i);
        }
        Var::from_op(
            v,
            Op::ScatterAdd(rows.clone()),
            vec![self.clone()],
        )
    }

    /// `[N, C, H, W]` → `[C·k·k, N·Ho·Wo]` patch matrix.
    pub fn im2col(&self, geom: ConvGeometry) -> Var {
        assert_eq!(
            self.shape(),
            &[geom.batch, geom.channels, geom.height, geom.width][..]
        );
        let v = im2col_value(self.value(), geom);
        Var::from_op(v, Op::Im2Col(geom), vec![self.clone()])
    }

    /// Adjoint of [`Var::im2col`].
    pub fn col2im(&self, geom: ConvGeometry) -> Var {
        assert_eq!(self.shape(), &[geom.rows(), geom.cols()][..]);
        let v = col2im_value(self.value(), geom);
        Var::from_op(v, Op::Col2Im(geom), vec![self.clone()])
    }

    /// Applies `map` to every trailing `H × W` plane.
    pub fn resample(&self, map: &Rc<ResampleMap>) -> Var {
        let v = resample_value(self.value(), map, false);
        Var::from_op(v, Op::Resample(map.clone()), vec![self.clone()])
    }

    pub fn resample_adjoint(&self, map: &Rc<ResampleMap>) -> Var {
        let v = resample_value(self.value(), map, true);
        Var::from_op(v, Op::ResampleAdjoint(map.clone()), vec![self.clone()])
    }

    /// Sums each 2×2 block of the trailing `H × W` planes (both even).
    pub fn pool2(&self) -> Var {
        let v = pool2_value(self.value(), false);
        Var::from_op(v, Op::Pool2, vec![self.clone()])
    }

    /// Adjoint of [`Var::pool2`]: copies each pixel into a 2×2 block.
    pub fn unpool2(&self) -> Var {
        let v = pool2_value(self.value(), true);
        Var::from_op(v, Op::Unpool2, vec![self.clone()])
    }
}

fn im2col_value(x: &ArrayD<f64>, g: ConvGeometry) -> ArrayD<f64> {
    let x = x.as_standard_layout();
    let xs = x.as_slice().unwrap();
    let (ho, wo) = (g.out_height(), g.out_width());
    let (rows, cols) = (g.rows(), g.cols());
    // Filled strictly in output order; skipping the zero fill matters for
    // the large patch matrices of early layers.
    let mut out = Vec::with_capacity(rows * cols);
    let plane = g.height * g.width;
    for c in 0..g.channels {
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                for n in 0..g.batch {
                    let src = &xs[(n * g.channels + c) * plane..(n * g.channels + c + 1) * plane];
                    for oy in 0..ho {
                        let iy = oy as isize + ki as isize - g.pad as isize;
                        if iy < 0 || iy >= g.height as isize {
                            out.resize(out.len() + wo, 0.0);
                            continue;
                        }
                        let src_row = &src[iy as usize * g.width..(iy as usize + 1) * g.width];
                        // Valid output columns satisfy 0 <= ox + kj - pad < width.
                        let lo = g.pad.saturating_sub(kj).min(wo);
                        let hi = (g.width + g.pad).saturating_sub(kj).clamp(lo, wo);
                        out.resize(out.len() + lo, 0.0);
                        if hi > lo {
                            let start = lo + kj - g.pad;
                            out.extend_from_slice(&src_row[start..start + (hi - lo)]);
                        }
                        out.resize(out.len() + (wo - hi), 0.0);
                    }
                }
            }
        }
    }
    debug_assert_eq!(out.len(), rows * cols);
    ArrayD::from_shape_vec(IxDyn(&[rows, cols]), out).unwrap()
}

fn col2im_value(cols_arr: &ArrayD<f64>, g: ConvGeometry) -> ArrayD<f64> {
    let cols_arr = cols_arr.as_standard_layout();
    let cs = cols_arr.as_slice().unwrap();
    let (ho, wo) = (g.out_height(), g.out_width());
    let cols = g.cols();
    let plane = g.height * g.width;
    let mut out = vec![0.0; g.batch * g.channels * plane];
    for c in 0..g.channels {
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let src_row = &cs[row * cols..(row + 1) * cols];
                for n in 0..g.batch {
                    let dst = &mut out[(n * g.channels + c) * plane..(n * g.channels + c + 1) * plane];
                    for oy in 0..ho {
                        let iy = oy as isize + ki as isize - g.pad as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        let base = (n * ho + oy) * wo;
                        let dst_row = &mut dst[iy as usize * g.width..(iy as usize + 1) * g.width];
                        for ox in 0..wo {
                            let ix = ox as isize + kj as isize - g.pad as isize;
                            if ix >= 0 && ix < g.width as isize {
                                dst_row[ix as usize] += src_row[base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[g.batch, g.channels, g.height, g.width]), out).unwrap()
}

fn pool2_value(x: &ArrayD<f64>, adjoint: bool) -> ArrayD<f64> {
    let nd = x.ndim();
    assert!(nd >= 2);
    let mut shape = x.shape().to_vec();
    let xs = flat(x);
    let (mut out, h, w) = if adjoint {
        let (h, w) = (shape[nd - 2], shape[nd - 1]);
        shape[nd - 2] *= 2;
        shape[nd - 1] *= 2;
        (vec![0.0; xs.len() * 4], h, w)
    } else {
        let (h, w) = (shape[nd - 2] / 2, shape[nd - 1] / 2);
        assert!(shape[nd - 2] % 2 == 0 && shape[nd - 1] % 2 == 0, "pool2 needs even planes");
        shape[nd - 2] = h;
        shape[nd - 1] = w;
        (vec![0.0; xs.len() / 4], h, w)
    };
    let (small, big) = (h * w, 4 * h * w);
    let planes = if small == 0 { 0 } else { xs.len() / if adjoint { small } else { big } };
    for p in 0..planes {
        for y in 0..h {
            for x in 0..w {
                let s = p * small + y * w + x;
                let b0 = p * big + 2 * y * 2 * w + 2 * x;
                let b1 = b0 + 2 * w;
                if adjoint {
                    let g = xs[s];
                    out[b0] = g;
                    out[b0 + 1] = g;
                    out[b1] = g;
                    out[b1 + 1] = g;
                } else {
                    out[s] = xs[b0] + xs[b0 + 1] + xs[b1] + xs[b1 + 1];
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&shape), out).unwrap()
}

fn resample_value(x: &ArrayD<f64>, map: &ResampleMap, adjoint: bool) -> ArrayD<f64> {
    let nd = x.ndim();
    assert!(nd >= 2);
    assert_eq!(&x.shape()[nd - 2..], &[map.height, map.width]);
    let x = x.as_standard_layout();
    let xs = x.as_slice().unwrap();
    let plane = map.height * map.width;
    let mut out = vec![0.0; xs.len()];
    for (src, dst) in xs.chunks(plane).zip(out.chunks_mut(plane)) {
        if adjoint {
            map.apply_adjoint(src, dst);
        } else {
            map.apply(src, dst);
        }
    }
    ArrayD::from_shape_vec(x.raw_dim(), out).unwrap()
}

fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

/// Parent gradients for one recorded node. Every rule is expressed with
/// recorded operations so that it can be differentiated again.
pub(crate) fn backward(op: &Op, parents: &[Var], out: &Var, g: &Var, needs: &[bool]) -> Vec<Option<Var>> {
    let need = |i: usize| needs.get(i).copied().unwrap_or(false);
    match op {
        Op::Leaf => vec![],
        Op::Add => vec![Some(g.clone()), Some(g.clone())],
        Op::Sub => vec![Some(g.clone()), need(1).then(|| g.neg())],
        Op::Mul => {
            let (a, b) = (&parents[0], &parents[1]);
            vec![need(0).then(|| g.mul(b)), need(1).then(|| g.mul(a))]
        }
        Op::Div => {
            let (a, b) = (&parents[0], &parents[1]);
            vec![
                need(0).then(|| g.div(b)),
                need(1).then(|| g.mul(a).div(&b.square()).neg()),
            ]
        }
        Op::Neg => vec![Some(g.neg())],
        Op::AddScalar => vec![Some(g.clone())],
        Op::MulScalar(c) => vec![Some(g.mul_scalar(*c))],
        Op::Exp => vec![Some(g.mul(out))],
        Op::Ln => vec![Some(g.div(&parents[0]))],
        Op::Sqrt => vec![Some(g.div(out).mul_scalar(0.5))],
        Op::Relu => {
            let mask = parents[0].value().mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
            vec![Some(g.mul(&Var::constant(mask)))]
        }
        Op::Clamp(lo, hi) => {
            let (lo, hi) = (*lo, *hi);
            let mask = parents[0]
                .value()
                .mapv(|x| if x > lo && x < hi { 1.0 } else { 0.0 });
            vec![Some(g.mul(&Var::constant(mask)))]
        }
        Op::MatMul => {
            let (a, b) = (&parents[0], &parents[1]);
            vec![
                need(0).then(|| g.matmul(&b.t())),
                need(1).then(|| a.t().matmul(g)),
            ]
        }
        Op::Transpose => vec![Some(g.t())],
        Op::Reshape(from) => vec![Some(g.reshape(from))],
        Op::Permute(axes) => vec![Some(g.permute(&inverse_permutation(axes)))],
        Op::BroadcastTo(from) => vec![Some(g.sum_to(from))],
        Op::SumTo(from) => {
            // Re-insert reduced axes so broadcasting lines up.
            let mut shape = g.shape().to_vec();
            let lead = from.len() - shape.len();
            let mut full = vec![1; lead];
            full.append(&mut shape);
            vec![Some(g.reshape(&full).broadcast_to(from))]
        }
        Op::Narrow { axis, start, full } => vec![Some(g.embed(*axis, *start, *full))],
        Op::Embed { axis, start, len } => vec![Some(g.narrow(*axis, *start, *len))],
        Op::Gather(rows) => vec![Some(g.scatter_add_rows(rows, parents[0].shape()[0]))],
        Op::ScatterAdd(rows) => vec![Some(g.gather_rows(rows))],
        Op::Im2Col(geom) => vec![Some(g.col2im(*geom))],
        Op::Col2Im(geom) => vec![Some(g.im2col(*geom))],
        Op::Resample(map) => vec![Some(g.resample_adjoint(map))],
        Op::ResampleAdjoint(map) => vec![Some(g.resample(map))],
        Op::Pool2 => vec![Some(g.unpool2())],
        Op::Unpool2 => vec![Some(g.pool2())],
    }
}
