//! The distillation loop: gradient matching (DSA), trajectory matching (MTT)
//! and the single-set variant, each with the outlier uniformity term.

mod telemetry;

use std::path::PathBuf;
use std::time::Instant;

use ndarray::{Array1, Array4, ArrayD, IxDyn};
use rand::seq::index;
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::{augment_each, diff_augment, AugmentDraw, AugmentPolicy};
use crate::autograd::{grad, Var};
use crate::data::{init_distilled, rows_f64, DistillMethod, DistilledSet, LabeledImageSet, UnlabeledImageSet};
use crate::error::{Error, Result};
use crate::loss::integrated_loss;
use crate::nn::{build_network, forward_logits, LayerSlot, NetworkSpec, TrajectoryBuffer};

pub use telemetry::{TelemetryRow, TelemetrySink};

/// Guard inside the cosine distance denominator.
pub const COSINE_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct MttConfig {
    pub buffer_path: Option<PathBuf>,
    /// Expert segment length `M`, in expert training steps.
    pub expert_steps: usize,
    /// Latest start step; `None` covers the first half of the trajectory.
    pub max_start_step: Option<usize>,
}

impl Default for MttConfig {
    fn default() -> Self {
        MttConfig {
            buffer_path: None,
            expert_steps: 20,
            max_start_step: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillConfig {
    pub method: DistillMethod,
    pub lambda: f64,
    /// α1: learning rate of the inner network.
    pub lr_net: f64,
    /// α2: learning rate of the distilled images, for pixels in `[0, 1]`.
    pub lr_img: f64,
    pub net_momentum: f64,
    pub img_momentum: f64,
    /// N: network updates per outer iteration (unrolled steps for MTT).
    pub inner_steps: usize,
    /// N_S: image updates per outer iteration.
    pub image_steps: usize,
    pub iterations: usize,
    pub ipc: usize,
    /// |S_out|; `None` matches |S_in|.
    pub outlier_count: Option<usize>,
    /// Real InD images per class for gradient matching.
    pub batch_real: usize,
    /// Real outliers paired with each class; `None` equals `batch_real`.
    pub batch_real_out: Option<usize>,
    /// Synthetic rows per unrolled MTT step; `None` uses the whole set.
    pub batch_syn: Option<usize>,
    /// DSA inner-network restart period; `None` is `iterations / 10`.
    pub restart_every: Option<usize>,
    pub augment: AugmentPolicy,
    pub mtt: MttConfig,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            method: DistillMethod::Dsa,
            lambda: 0.5,
            lr_net: 0.01,
            lr_img: 0.01,
            net_momentum: 0.5,
            img_momentum: 0.5,
            inner_steps: 10,
            image_steps: 1,
            iterations: 1000,
            ipc: 10,
            outlier_count: None,
            batch_real: 256,
            batch_real_out: None,
            batch_syn: None,
            restart_every: None,
            augment: AugmentPolicy::standard(false),
            mtt: MttConfig::default(),
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("λ must lie in [0, 1], got {}", self.lambda)));
        }
        if !(self.lr_net > 0.0 && self.lr_img > 0.0) {
            return Err(Error::Config("learning rates α1 and α2 must be positive".into()));
        }
        if self.inner_steps == 0 || self.image_steps == 0 || self.iterations == 0 {
            return Err(Error::Config("N, N_S and iterations must be at least 1".into()));
        }
        if self.ipc == 0 || self.batch_real == 0 {
            return Err(Error::Config("ipc and batch_real must be positive".into()));
        }
        if self.method == DistillMethod::Mtt && self.inner_steps >= self.mtt.expert_steps {
            return Err(Error::Config(format!(
                "MTT needs N < M (N = {}, M = {})",
                self.inner_steps, self.mtt.expert_steps
            )));
        }
        Ok(())
    }

    fn restart_period(&self) -> usize {
        self.restart_every.unwrap_or(self.iterations / 10).max(1)
    }
}

/// Derived seeds for the independent random streams of one run.
struct Streams {
    net: ChaCha8Rng,
    real: ChaCha8Rng,
    outliers: ChaCha8Rng,
    augment: ChaCha8Rng,
}

impl Streams {
    fn new(seed: u64) -> Self {
        let derive = |tag: u64| ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ tag);
        Streams {
            net: derive(0x6e6574),
            real: derive(0x7265616c),
            outliers: derive(0x6f7574),
            augment: derive(0x617567),
        }
    }
}

/// One side of a gradient-matching comparison.
pub struct MatchSide<'a> {
    pub images: &'a Var,
    pub labels: &'a [usize],
    pub outliers: Option<&'a Var>,
}

/// Sum over layers with at least two axes, and over the output-channel rows
/// of each, of `1 - <a, b> / sqrt(max(|a|²|b|², ε²))`. Rows where both
/// gradients vanish are left out.
pub fn gradient_distance(layout: &[LayerSlot], syn: &Var, real: &ArrayD<f64>) -> Result<Var> {
    if syn.shape() != real.shape() {
        return Err(Error::Internal(format!(
            "gradient shapes differ: {:?} vs {:?}",
            syn.shape(),
            real.shape()
        )));
    }
    let real = Var::constant(real.clone());
    let mut total = Var::scalar(0.0);
    for slot in layout.iter().filter(|s| s.shape.len() >= 2) {
        let rows = slot.shape[0];
        let cols = slot.len() / rows;
        let gs = syn.narrow(0, slot.offset, slot.len()).reshape(&[rows, cols]);
        let gr = real.narrow(0, slot.offset, slot.len()).reshape(&[rows, cols]);
        let dot = gs.mul(&gr).sum_to(&[rows, 1]);
        let ns = gs.square().sum_to(&[rows, 1]);
        let nr = gr.square().sum_to(&[rows, 1]);
        let mask: Vec<f64> = ns
            .value()
            .iter()
            .zip(nr.value().iter())
            .map(|(&a, &b)| if a == 0.0 && b == 0.0 { 0.0 } else { 1.0 })
            .collect();
        let kept: f64 = mask.iter().sum();
        let mask = Var::from_vec(&[rows, 1], mask);
        let denom = ns.mul(&nr).clamp(COSINE_EPS * COSINE_EPS, f64::INFINITY).sqrt();
        let cos = dot.div(&denom).mul(&mask).sum();
        total = total.add(&cos.neg().add_scalar(kept));
    }
    Ok(total)
}

fn side_loss(spec: &NetworkSpec, theta: &Var, side: &MatchSide<'_>, lambda: f64, draw_in: &AugmentDraw, draw_out: &AugmentDraw) -> Result<crate::loss::IntegratedLoss> {
    let logits = forward_logits(spec, theta, &diff_augment(side.images, draw_in)?)?;
    let out_logits = match side.outliers {
        Some(o) if lambda != 0.0 && o.shape()[0] > 0 => {
            Some(forward_logits(spec, theta, &diff_augment(o, draw_out)?)?)
        }
        _ => None,
    };
    integrated_loss(&logits, side.labels, out_logits.as_ref(), lambda)
}

/// Gradient-matching loss at inner parameters `theta` (a flat vector).
/// The returned components are those of the synthetic side.
pub fn dsa_match_loss(
    spec: &NetworkSpec,
    theta: &ArrayD<f64>,
    syn: &MatchSide<'_>,
    real: &MatchSide<'_>,
    lambda: f64,
    draw_in: &AugmentDraw,
    draw_out: &AugmentDraw,
) -> Result<(Var, crate::loss::IntegratedLoss)> {
    let layout = spec.layout();
    let theta_real = Var::leaf(theta.clone());
    let real_loss = side_loss(spec, &theta_real, real, lambda, draw_in, draw_out)?;
    let g_real = grad(&real_loss.total, &[&theta_real], false).remove(0);
    let theta_syn = Var::leaf(theta.clone());
    let syn_loss = side_loss(spec, &theta_syn, syn, lambda, draw_in, draw_out)?;
    let g_syn = grad(&syn_loss.total, &[&theta_syn], true).remove(0);
    Ok((gradient_distance(&layout, &g_syn, g_real.value())?, syn_loss))
}

/// Unrolled trajectory-matching loss
/// `|θ̂_N - θ*_target|² / |θ*_start - θ*_target|²`, where θ̂ starts at
/// `θ*_start` and takes `n_steps` SGD steps on the distilled set.
#[allow(clippy::too_many_arguments)]
pub fn mtt_match_loss(
    spec: &NetworkSpec,
    s_in: &Var,
    labels: &[usize],
    s_out: Option<&Var>,
    buffer: &TrajectoryBuffer,
    start: usize,
    target: usize,
    n_steps: usize,
    lr: f64,
    lambda: f64,
    batch_syn: Option<usize>,
    policy: &AugmentPolicy,
    rng: &mut impl Rng,
) -> Result<(Var, Option<crate::loss::IntegratedLoss>)> {
    if start >= buffer.snapshots.len() || target >= buffer.snapshots.len() || target <= start {
        return Err(Error::Config(format!(
            "snapshots {start} -> {target} not available in a buffer of {}",
            buffer.snapshots.len()
        )));
    }
    let theta_start = Var::leaf(buffer.snapshots[start].1.flat.clone().into_dyn());
    let theta_target = Var::constant(buffer.snapshots[target].1.flat.clone().into_dyn());
    let denom = theta_start.sub(&theta_target).square().sum();
    if denom.item() == 0.0 {
        return Err(Error::DegenerateTrajectory {
            start: buffer.snapshots[start].0,
            target: buffer.snapshots[target].0,
        });
    }
    let (h, w) = (spec.input.height, spec.input.width);
    let n = labels.len();
    let batch = batch_syn.unwrap_or(n).clamp(1, n);
    let n_out = s_out.map_or(0, |o| o.shape()[0]);
    let mut theta = theta_start;
    let mut first = None;
    let mut order: Vec<usize> = Vec::new();
    for step in 0..n_steps {
        if order.len() < batch {
            let mut fresh: Vec<usize> = (0..n).collect();
            fresh.shuffle(rng);
            order.extend(fresh);
        }
        let rows: Vec<usize> = order.drain(..batch).collect();
        let x = s_in.gather_rows(&rows);
        let y: Vec<usize> = rows.iter().map(|&r| labels[r]).collect();
        let draw_in = policy.sample(h, w, rng);
        let draw_out = policy.sample(h, w, rng);
        let out = match s_out {
            Some(o) if lambda != 0.0 && n_out > 0 => {
                let k = batch.min(n_out);
                let picks = index::sample(rng, n_out, k).into_vec();
                Some(o.gather_rows(&picks))
            }
            _ => None,
        };
        let side = MatchSide {
            images: &x,
            labels: &y,
            outliers: out.as_ref(),
        };
        let theta_leaf = theta.clone();
        let loss = side_loss(spec, &theta_leaf, &side, lambda, &draw_in, &draw_out)?;
        let g = grad(&loss.total, &[&theta_leaf], true).remove(0);
        theta = theta.sub(&g.mul_scalar(lr));
        if step == 0 {
            first = Some(loss);
        }
    }
    let num = theta.sub(&theta_target).square().sum();
    Ok((num.div(&denom), first))
}

/// Momentum SGD on an image array.
struct ImageOptimizer {
    lr: f64,
    momentum: f64,
    velocity: ArrayD<f64>,
}

impl ImageOptimizer {
    fn new(lr: f64, momentum: f64, shape: &[usize]) -> Self {
        ImageOptimizer {
            lr,
            momentum,
            velocity: ArrayD::zeros(IxDyn(shape)),
        }
    }

    fn step(&mut self, images: &mut ArrayD<f64>, grad: &ArrayD<f64>) {
        self.velocity.zip_mut_with(grad, |v, &g| *v = self.momentum * *v + g);
        images.scaled_add(-self.lr, &self.velocity);
        images.mapv_inplace(|v| v.clamp(0.0, 1.0));
    }
}

fn to_f32(a: &ArrayD<f64>) -> Array4<f32> {
    a.mapv(|v| v as f32).into_dimensionality().unwrap()
}

/// Rows of class `c` in an `init_distilled` layout (class-ascending blocks).
fn class_block(c: usize, ipc: usize) -> (usize, usize) {
    (c * ipc, ipc)
}

/// Even split of `n` outlier rows across `classes` chunks.
fn outlier_chunk(c: usize, classes: usize, n: usize) -> (usize, usize) {
    let start = c * n / classes;
    let end = (c + 1) * n / classes;
    (start, end - start)
}

/// Runs the full loop and returns the learned set. `t_out` may be empty.
pub fn run_trustdd(
    t_in: &LabeledImageSet,
    t_out: &UnlabeledImageSet,
    spec: &NetworkSpec,
    cfg: &DistillConfig,
    sink: &mut TelemetrySink,
) -> Result<DistilledSet> {
    let buffer = match cfg.method {
        DistillMethod::Mtt => {
            let path = cfg.mtt.buffer_path.as_ref().ok_or_else(|| {
                Error::Config("MTT needs an expert buffer path".into())
            })?;
            Some(TrajectoryBuffer::load(path)?)
        }
        _ => None,
    };
    run_with_buffer(t_in, t_out, spec, cfg, buffer.as_ref(), sink)
}

/// As [`run_trustdd`], with an in-memory expert buffer for MTT.
pub fn run_with_buffer(
    t_in: &LabeledImageSet,
    t_out: &UnlabeledImageSet,
    spec: &NetworkSpec,
    cfg: &DistillConfig,
    buffer: Option<&TrajectoryBuffer>,
    sink: &mut TelemetrySink,
) -> Result<DistilledSet> {
    cfg.validate()?;
    spec.validate()?;
    if t_in.shape() != spec.input || t_in.num_classes() != spec.num_classes {
        return Err(Error::Config(format!(
            "dataset {} with {} classes does not fit {spec}",
            t_in.shape(),
            t_in.num_classes()
        )));
    }
    let single = cfg.method == DistillMethod::SingleSetDsa;
    let outlier_count = if single || t_out.is_empty() {
        0
    } else {
        cfg.outlier_count.unwrap_or(cfg.ipc * t_in.num_classes())
    };
    let mut set = init_distilled(t_in, t_out, cfg.ipc, outlier_count, cfg.seed)?;
    set.method = cfg.method;
    // Without outliers on either side the uniformity term is vacuous.
    let lambda = if t_out.is_empty() || (!single && outlier_count == 0) { 0.0 } else { cfg.lambda };
    set.lambda = lambda;

    let mut s_in = crate::data::all_f64(&set.s_in_images);
    let mut s_out = crate::data::all_f64(&set.s_out_images);
    let mut opt_in = ImageOptimizer::new(cfg.lr_img, cfg.img_momentum, s_in.shape());
    let mut opt_out = ImageOptimizer::new(cfg.lr_img, cfg.img_momentum, s_out.shape());
    let mut rngs = Streams::new(cfg.seed);
    let start = Instant::now();

    let mut theta = build_network(spec, rngs.net.next_u64())?.flat;
    let mut net_velocity = Array1::<f64>::zeros(theta.len());
    let class_rows: Vec<Vec<usize>> = (0..t_in.num_classes()).map(|c| t_in.class_indices(c)).collect();
    let (h, w) = (spec.input.height, spec.input.width);

    for it in 0..cfg.iterations {
        let mut loss_sum = 0.0;
        let mut ce_sum = 0.0;
        let mut unif_sum = 0.0;
        match cfg.method {
            DistillMethod::Dsa | DistillMethod::SingleSetDsa => {
                if it > 0 && it % cfg.restart_period() == 0 {
                    theta = build_network(spec, rngs.net.next_u64())?.flat;
                    net_velocity.fill(0.0);
                }
                for _ in 0..cfg.inner_steps {
                    let g = network_step_grad(spec, &theta, &s_in, &set.s_in_labels, &s_out, lambda, &cfg.augment, &mut rngs)?;
                    net_velocity.zip_mut_with(&g, |v, &gi| *v = cfg.net_momentum * *v + gi);
                    theta.scaled_add(-cfg.lr_net, &net_velocity);
                }
                for _ in 0..cfg.image_steps {
                    let s_in_var = Var::leaf(s_in.clone());
                    let s_out_var = Var::leaf(s_out.clone());
                    let mut g_in = ArrayD::<f64>::zeros(s_in.raw_dim());
                    let mut g_out = ArrayD::<f64>::zeros(s_out.raw_dim());
                    let classes = t_in.num_classes();
                    let (mut l, mut ce, mut un) = (0.0, 0.0, 0.0);
                    for (c, members) in class_rows.iter().enumerate() {
                        let k = cfg.batch_real.min(members.len());
                        let picks: Vec<usize> = index::sample(&mut rngs.real, members.len(), k)
                            .into_iter()
                            .map(|i| members[i])
                            .collect();
                        let real_x = Var::constant(rows_f64(t_in.images(), &picks));
                        let real_y = vec![c; k];
                        let real_out = if lambda != 0.0 {
                            let k_out = cfg.batch_real_out.unwrap_or(cfg.batch_real).min(t_out.len());
                            let rows = index::sample(&mut rngs.outliers, t_out.len(), k_out).into_vec();
                            Some(Var::constant(rows_f64(t_out.images(), &rows)))
                        } else {
                            None
                        };
                        let (off, len) = class_block(c, cfg.ipc);
                        let syn_x = s_in_var.narrow(0, off, len);
                        let syn_y = vec![c; len];
                        let (o_off, o_len) = outlier_chunk(c, classes, s_out.shape()[0]);
                        let syn_out = (o_len > 0).then(|| s_out_var.narrow(0, o_off, o_len));
                        let draw_in = cfg.augment.sample(h, w, &mut rngs.augment);
                        let draw_out = cfg.augment.sample(h, w, &mut rngs.augment);
                        let (dist, parts) = dsa_match_loss(
                            spec,
                            &theta.clone().into_dyn(),
                            &MatchSide {
                                images: &syn_x,
                                labels: &syn_y,
                                outliers: syn_out.as_ref(),
                            },
                            &MatchSide {
                                images: &real_x,
                                labels: &real_y,
                                outliers: real_out.as_ref(),
                            },
                            lambda,
                            &draw_in,
                            &draw_out,
                        )?;
                        l += dist.item();
                        ce += parts.ce;
                        un += parts.uniformity;
                        let wrt: Vec<&Var> = if syn_out.is_some() {
                            vec![&s_in_var, &s_out_var]
                        } else {
                            vec![&s_in_var]
                        };
                        let gs = grad(&dist, &wrt, false);
                        g_in += gs[0].value();
                        if let Some(go) = gs.get(1) {
                            g_out += go.value();
                        }
                    }
                    if !l.is_finite() {
                        return Err(Error::Distill {
                            iteration: it,
                            reason: format!("non-finite matching loss {l}"),
                        });
                    }
                    opt_in.step(&mut s_in, &g_in);
                    if s_out.shape()[0] > 0 {
                        opt_out.step(&mut s_out, &g_out);
                    }
                    loss_sum += l;
                    ce_sum += ce / classes as f64;
                    unif_sum += un / classes as f64;
                }
            }
            DistillMethod::Mtt => {
                let buffer = buffer.ok_or_else(|| Error::Config("MTT needs an expert buffer".into()))?;
                let (start_idx, target_idx) = pick_segment(buffer, &cfg.mtt, &mut rngs.net)?;
                for _ in 0..cfg.image_steps {
                    let s_in_var = Var::leaf(s_in.clone());
                    let s_out_var = Var::leaf(s_out.clone());
                    let has_out = s_out.shape()[0] > 0;
                    let (loss, parts) = mtt_match_loss(
                        spec,
                        &s_in_var,
                        &set.s_in_labels,
                        has_out.then_some(&s_out_var),
                        buffer,
                        start_idx,
                        target_idx,
                        cfg.inner_steps,
                        cfg.lr_net,
                        lambda,
                        cfg.batch_syn,
                        &cfg.augment,
                        &mut rngs.augment,
                    )?;
                    let l = loss.item();
                    if !l.is_finite() {
                        return Err(Error::Distill {
                            iteration: it,
                            reason: format!("non-finite matching loss {l}"),
                        });
                    }
                    let wrt: Vec<&Var> = if has_out { vec![&s_in_var, &s_out_var] } else { vec![&s_in_var] };
                    let gs = grad(&loss, &wrt, false);
                    opt_in.step(&mut s_in, gs[0].value());
                    if let Some(go) = gs.get(1) {
                        opt_out.step(&mut s_out, go.value());
                    }
                    loss_sum += l;
                    if let Some(p) = parts {
                        ce_sum += p.ce;
                        unif_sum += p.uniformity;
                    }
                }
            }
        }
        let k = cfg.image_steps as f64;
        sink.record(TelemetryRow {
            iteration: it,
            distill_loss: loss_sum / k,
            ce_component: ce_sum / k,
            uniformity_component: unif_sum / k,
            wall_ms: start.elapsed().as_millis() as u64,
        })?;
    }

    set.s_in_images = to_f32(&s_in);
    set.s_out_images = to_f32(&s_out);
    set.validate()?;
    Ok(set)
}

/// Gradient of `CE(A(s_in)) + λ·H(A(s_out))` with respect to θ, with a
/// fresh per-image augmentation.
#[allow(clippy::too_many_arguments)]
fn network_step_grad(
    spec: &NetworkSpec,
    theta: &Array1<f64>,
    s_in: &ArrayD<f64>,
    labels: &[usize],
    s_out: &ArrayD<f64>,
    lambda: f64,
    policy: &AugmentPolicy,
    rngs: &mut Streams,
) -> Result<Array1<f64>> {
    let p = Var::leaf(theta.clone().into_dyn());
    let x = Var::constant(augment_each(s_in, policy, &mut rngs.augment)?);
    let logits = forward_logits(spec, &p, &x)?;
    let out_logits = if lambda != 0.0 && s_out.shape()[0] > 0 {
        let o = Var::constant(augment_each(s_out, policy, &mut rngs.augment)?);
        Some(forward_logits(spec, &p, &o)?)
    } else {
        None
    };
    let loss = integrated_loss(&logits, labels, out_logits.as_ref(), lambda)?;
    let g = grad(&loss.total, &[&p], false).remove(0);
    Ok(g.value().clone().into_shape_with_order(theta.len()).unwrap())
}

/// Uniform start snapshot with step ≤ max_start_step whose `+M` partner exists.
fn pick_segment(buffer: &TrajectoryBuffer, cfg: &MttConfig, rng: &mut ChaCha8Rng) -> Result<(usize, usize)> {
    let last = buffer.snapshots.last().map_or(0, |s| s.0);
    let max_start = cfg.max_start_step.unwrap_or(last / 2);
    let candidates: Vec<(usize, usize)> = buffer
        .snapshots
        .iter()
        .enumerate()
        .filter(|(_, (step, _))| *step <= max_start)
        .filter_map(|(i, (step, _))| buffer.index_of(step + cfg.expert_steps).map(|j| (i, j)))
        .collect();
    if candidates.is_empty() {
        return Err(Error::Config(format!(
            "no expert snapshot pair (t, t + {}) with t ≤ {max_start}",
            cfg.expert_steps
        )));
    }
    Ok(candidates[rng.random_range(0..candidates.len())])
}

/// Condenses InD data and outliers into one labeled set: the synthetic side
/// matches plain cross-entropy gradients against the integrated-loss
/// gradients of the real data.
pub fn single_set_distill(
    t_in: &LabeledImageSet,
    t_out: &UnlabeledImageSet,
    spec: &NetworkSpec,
    cfg: &DistillConfig,
    sink: &mut TelemetrySink,
) -> Result<DistilledSet> {
    if cfg.method != DistillMethod::SingleSetDsa {
        return Err(Error::Config("single-set distillation needs method single-set-dsa".into()));
    }
    run_with_buffer(t_in, t_out, spec, cfg, None, sink)
}
