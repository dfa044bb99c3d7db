//! Classification and outlier losses on logits.

use ndarray::{Array2, ArrayD, Axis, IxDyn};

use crate::autograd::Var;
use crate::error::{Error, Result};

/// Row-wise log-softmax of `[B, C]` logits. The row max is held constant,
/// which leaves values and derivatives of every order unchanged.
pub fn log_softmax(logits: &Var) -> Var {
    let (b, _) = dims2(logits);
    let max = logits
        .value()
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap()
        .map_axis(Axis(1), |r| r.fold(f64::NEG_INFINITY, |m, &v| m.max(v)));
    let max = Var::constant(max.into_shape_with_order(IxDyn(&[b, 1])).unwrap());
    let shifted = logits.sub(&max);
    let lse = shifted.exp().sum_to(&[b, 1]).ln();
    shifted.sub(&lse)
}

fn dims2(v: &Var) -> (usize, usize) {
    match v.shape() {
        [b, c] => (*b, *c),
        s => panic!("expected [batch, classes] logits, got {s:?}"),
    }
}

fn one_hot(labels: &[usize], classes: usize) -> Result<Var> {
    let mut m = Array2::<f64>::zeros((labels.len(), classes));
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::Validation(format!("label {l} outside [0, {classes})")));
        }
        m[[i, l]] = 1.0;
    }
    Ok(Var::constant(m.into_dyn()))
}

/// Mean cross-entropy.
pub fn cross_entropy(logits: &Var, labels: &[usize]) -> Result<Var> {
    let (b, c) = dims2(logits);
    if labels.len() != b {
        return Err(Error::Validation(format!("{} labels for {b} logit rows", labels.len())));
    }
    let oh = one_hot(labels, c)?;
    Ok(log_softmax(logits).mul(&oh).sum().mul_scalar(-1.0 / b as f64))
}

/// Mean over the batch of the cross-entropy between the uniform
/// distribution and the softmax output: `-(1/C) Σ_c log softmax_c`.
/// Always at least `log C`, with equality exactly for constant rows.
pub fn uniformity_loss(logits: &Var) -> Var {
    let (b, c) = dims2(logits);
    log_softmax(logits)
        .sum()
        .mul_scalar(-1.0 / (b as f64 * c as f64))
}

/// Components of an integrated loss evaluation.
#[derive(Debug, Clone)]
pub struct IntegratedLoss {
    pub total: Var,
    pub ce: f64,
    pub uniformity: f64,
}

/// `CE(in) + λ·H(U; out)`; the outlier term is dropped when `λ = 0` or
/// there are no outlier logits, so the result is then plain cross-entropy.
pub fn integrated_loss(in_logits: &Var, labels: &[usize], out_logits: Option<&Var>, lambda: f64) -> Result<IntegratedLoss> {
    if in_logits.shape()[0] == 0 {
        return Err(Error::Validation("integrated loss needs a non-empty InD batch".into()));
    }
    let ce = cross_entropy(in_logits, labels)?;
    let ce_value = ce.item();
    match out_logits {
        Some(o) if lambda != 0.0 && o.shape()[0] > 0 => {
            let u = uniformity_loss(o);
            let uv = u.item();
            Ok(IntegratedLoss {
                total: ce.add(&u.mul_scalar(lambda)),
                ce: ce_value,
                uniformity: uv,
            })
        }
        _ => Ok(IntegratedLoss {
            total: ce,
            ce: ce_value,
            uniformity: 0.0,
        }),
    }
}

/// Plain-array log-softmax, for scoring.
pub fn log_softmax_rows(logits: &ArrayD<f64>) -> Array2<f64> {
    let l = logits.view().into_dimensionality::<ndarray::Ix2>().unwrap();
    let mut out = l.to_owned();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}
