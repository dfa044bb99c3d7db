//! ConvNet over a flat parameter vector, evaluation-time training and
//! expert trajectories.
//!
//! The network is `depth` blocks of
//! conv3x3(pad 1) → instance norm → ReLU → 2x2 average pool, then a linear
//! classifier. All parameters live in one flat vector so that trajectory
//! matching can treat θ as a single point.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use ndarray::{Array1, Array2, Array4, ArrayD, Ix2, IxDyn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::{augment_each, AugmentPolicy};
use crate::autograd::{grad, no_grad, ConvGeometry, Var};
use crate::data::{rows_f64, DistilledSet, ImageShape, LabeledImageSet, Manifest, UnlabeledImageSet, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::loss::integrated_loss;

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub depth: usize,
    pub width: usize,
    pub num_classes: usize,
    pub input: ImageShape,
    /// Learned per-channel scale and shift after instance norm.
    pub affine: bool,
    pub eps: f64,
}

impl NetworkSpec {
    pub fn new(depth: usize, width: usize, num_classes: usize, input: ImageShape) -> Self {
        NetworkSpec {
            depth,
            width,
            num_classes,
            input,
            affine: false,
            eps: 1e-5,
        }
    }

    /// Spatial extent after every pooling stage.
    pub fn feature_size(&self) -> (usize, usize) {
        (self.input.height >> self.depth, self.input.width >> self.depth)
    }

    pub fn feature_len(&self) -> usize {
        let (h, w) = self.feature_size();
        self.width * h * w
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.width == 0 || self.num_classes < 2 {
            return Err(Error::Spec(format!(
                "depth, width must be positive and classes at least 2 (got {self})"
            )));
        }
        let (h, w) = self.feature_size();
        if h == 0 || w == 0 {
            return Err(Error::Spec(format!(
                "{} input cannot be halved {} times",
                self.input, self.depth
            )));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Spec("instance norm eps must be positive".into()));
        }
        Ok(())
    }

    pub fn layout(&self) -> Vec<LayerSlot> {
        let mut slots = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, shape: Vec<usize>| {
            let len = shape.iter().product::<usize>();
            slots.push(LayerSlot { name, shape, offset });
            offset += len;
        };
        let mut cin = self.input.channels;
        for i in 0..self.depth {
            push(format!("conv{i}.weight"), vec![self.width, cin, 3, 3]);
            push(format!("conv{i}.bias"), vec![self.width]);
            if self.affine {
                push(format!("norm{i}.weight"), vec![self.width]);
                push(format!("norm{i}.bias"), vec![self.width]);
            }
            cin = self.width;
        }
        push("fc.weight".into(), vec![self.num_classes, self.feature_len()]);
        push("fc.bias".into(), vec![self.num_classes]);
        slots
    }

    pub fn parameter_count(&self) -> usize {
        self.layout().iter().map(LayerSlot::len).sum()
    }
}

impl fmt::Display for NetworkSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "convnet depth={} width={} classes={} input={}{}",
            self.depth,
            self.width,
            self.num_classes,
            self.input,
            if self.affine { " affine" } else { "" }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSlot {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl LayerSlot {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Flat parameter state θ plus its layer layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector {
    pub flat: Array1<f64>,
    pub layout: Arc<Vec<LayerSlot>>,
}

impl ParameterVector {
    pub fn new(flat: Array1<f64>, layout: Arc<Vec<LayerSlot>>) -> Result<Self> {
        let total: usize = layout.iter().map(LayerSlot::len).sum();
        if total != flat.len() {
            return Err(Error::Validation(format!(
                "layout covers {total} values, vector holds {}",
                flat.len()
            )));
        }
        Ok(ParameterVector { flat, layout })
    }

    pub fn len(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    /// One tensor per layer slot.
    pub fn unflatten(&self) -> Vec<ArrayD<f64>> {
        self.layout
            .iter()
            .map(|s| {
                self.flat
                    .slice(ndarray::s![s.offset..s.offset + s.len()])
                    .to_owned()
                    .into_shape_with_order(IxDyn(&s.shape))
                    .unwrap()
            })
            .collect()
    }

    pub fn flatten(tensors: &[ArrayD<f64>], layout: Arc<Vec<LayerSlot>>) -> Result<Self> {
        if tensors.len() != layout.len() {
            return Err(Error::Validation("tensor count differs from layout".into()));
        }
        let mut flat = Vec::new();
        for (t, s) in tensors.iter().zip(layout.iter()) {
            if t.shape() != s.shape.as_slice() {
                return Err(Error::Validation(format!(
                    "{}: expected shape {:?}, got {:?}",
                    s.name,
                    s.shape,
                    t.shape()
                )));
            }
            flat.extend(t.iter().copied());
        }
        Self::new(Array1::from(flat), layout)
    }

    pub fn slot(&self, name: &str) -> Option<&LayerSlot> {
        self.layout.iter().find(|s| s.name == name)
    }

    pub fn to_var(&self) -> Var {
        Var::leaf(self.flat.clone().into_dyn())
    }

    pub fn squared_distance(&self, other: &ParameterVector) -> f64 {
        self.flat
            .iter()
            .zip(other.flat.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }
}

/// Fan-in scaled uniform initialization `U(-1/√fan_in, 1/√fan_in)`;
/// instance-norm scales start at 1 and shifts at 0.
pub fn build_network(spec: &NetworkSpec, rng_seed: u64) -> Result<ParameterVector> {
    spec.validate()?;
    let layout = Arc::new(spec.layout());
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut flat = Vec::with_capacity(spec.parameter_count());
    let mut fan_in = spec.input.channels * 9;
    for slot in layout.iter() {
        let n = slot.len();
        if slot.name.starts_with("norm") {
            let v = if slot.name.ends_with("weight") { 1.0 } else { 0.0 };
            flat.extend(std::iter::repeat_n(v, n));
            continue;
        }
        if slot.name == "fc.weight" {
            fan_in = spec.feature_len();
        }
        let bound = 1.0 / (fan_in as f64).sqrt();
        flat.extend((0..n).map(|_| rng.random_range(-bound..bound)));
        if slot.name.starts_with("conv") && slot.name.ends_with("bias") {
            fan_in = spec.width * 9;
        }
    }
    ParameterVector::new(Array1::from(flat), layout)
}

fn check_finite(v: &Var, layer: &str) -> Result<()> {
    if v.value().iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric { layer: layer.into() })
    }
}

/// Logits `[batch, classes]`, differentiable in both `params` (flat) and
/// `images` (`[batch, C, H, W]`).
pub fn forward_logits(spec: &NetworkSpec, params: &Var, images: &Var) -> Result<Var> {
    forward_inner(spec, params, images, &mut None)
}

/// Smallest `|z|` over all ReLU inputs. Finite-difference checks with step
/// `h` are only meaningful when this margin is well above `h`.
pub fn relu_margin(spec: &NetworkSpec, params: &Var, images: &Var) -> Result<f64> {
    let mut margin = Some(f64::INFINITY);
    no_grad(|| forward_inner(spec, params, images, &mut margin))?;
    Ok(margin.unwrap())
}

fn forward_inner(spec: &NetworkSpec, params: &Var, images: &Var, margin: &mut Option<f64>) -> Result<Var> {
    let shape = images.shape().to_vec();
    if shape.len() != 4 || ImageShape::new(shape[1], shape[2], shape[3]) != spec.input {
        return Err(Error::Validation(format!(
            "network expects [N, {}] images, got {shape:?}",
            spec.input
        )));
    }
    if params.shape() != [spec.parameter_count()] {
        return Err(Error::Validation(format!(
            "network expects {} parameters, got {:?}",
            spec.parameter_count(),
            params.shape()
        )));
    }
    let layout = spec.layout();
    let mut slots = layout.iter();
    let mut take = || {
        let s = slots.next().expect("layout exhausted");
        params.narrow(0, s.offset, s.len()).reshape(&s.shape)
    };
    let n = shape[0];
    let (mut c, mut h, mut w) = (spec.input.channels, spec.input.height, spec.input.width);
    let mut x = images.clone();
    for i in 0..spec.depth {
        let weight = take().reshape(&[spec.width, c * 9]);
        let bias = take().reshape(&[spec.width, 1]);
        let geom = ConvGeometry {
            batch: n,
            channels: c,
            height: h,
            width: w,
            kernel: 3,
            pad: 1,
        };
        let y = weight.matmul(&x.im2col(geom)).add(&bias);
        c = spec.width;
        x = y.reshape(&[c, n, h, w]).permute(&[1, 0, 2, 3]);

        let hw = (h * w) as f64;
        let mean = x.sum_to(&[n, c, 1, 1]).mul_scalar(1.0 / hw);
        let centred = x.sub(&mean);
        let var = centred.square().sum_to(&[n, c, 1, 1]).mul_scalar(1.0 / hw);
        x = centred.div(&var.add_scalar(spec.eps).sqrt());
        if spec.affine {
            let gamma = take().reshape(&[1, c, 1, 1]);
            let beta = take().reshape(&[1, c, 1, 1]);
            x = x.mul(&gamma).add(&beta);
        }
        check_finite(&x, &format!("block{i}"))?;
        if let Some(m) = margin.as_mut() {
            *m = x.value().iter().fold(*m, |a, v| a.min(v.abs()));
        }
        x = x.relu();

        let (h2, w2) = (h / 2, w / 2);
        if h % 2 == 1 {
            x = x.narrow(2, 0, 2 * h2);
        }
        if w % 2 == 1 {
            x = x.narrow(3, 0, 2 * w2);
        }
        x = x.pool2().mul_scalar(0.25);
        (h, w) = (h2, w2);
    }
    let fc_w = take();
    let fc_b = take().reshape(&[1, spec.num_classes]);
    let logits = x.reshape(&[n, c * h * w]).matmul(&fc_w.t()).add(&fc_b);
    check_finite(&logits, "fc")?;
    Ok(logits)
}

/// Inference over an image array in chunks, without recording a graph.
pub fn predict_logits(spec: &NetworkSpec, params: &ParameterVector, images: &Array4<f32>, chunk: usize) -> Result<Array2<f64>> {
    let n = images.dim().0;
    let mut out = Array2::<f64>::zeros((n, spec.num_classes));
    no_grad(|| -> Result<()> {
        let p = Var::constant(params.flat.clone().into_dyn());
        let mut start = 0;
        while start < n {
            let end = (start + chunk.max(1)).min(n);
            let rows: Vec<usize> = (start..end).collect();
            let logits = forward_logits(spec, &p, &Var::constant(rows_f64(images, &rows)))?;
            out.slice_mut(ndarray::s![start..end, ..])
                .assign(&logits.value().view().into_dimensionality::<Ix2>().unwrap());
            start = end;
        }
        Ok(())
    })?;
    Ok(out)
}

pub fn accuracy(logits: &Array2<f64>, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = logits
        .outer_iter()
        .zip(labels)
        .filter(|(row, &l)| {
            let best = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
            best.0 == l
        })
        .count();
    hits as f64 / labels.len() as f64
}

/// Evaluation-time training hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch: usize,
    pub lambda: f64,
    pub augment: AugmentPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.01,
            momentum: 0.9,
            epochs: 300,
            batch: 256,
            lambda: 0.5,
            augment: AugmentPolicy::identity(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ParameterVector,
    /// Loss of every SGD step, on the (augmented) minibatch.
    pub step_losses: Vec<f64>,
    /// Loss on the whole unaugmented distilled set before and after.
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Heavy-ball SGD on a flat vector.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Array1<f64>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, len: usize) -> Self {
        Sgd {
            lr,
            momentum,
            velocity: Array1::zeros(len),
        }
    }

    pub fn step(&mut self, params: &mut Array1<f64>, grad: &ArrayD<f64>) {
        let g = grad.view().into_shape_with_order(params.len()).unwrap();
        if self.momentum == 0.0 {
            params.scaled_add(-self.lr, &g);
            return;
        }
        self.velocity.zip_mut_with(&g, |v, &gi| *v = self.momentum * *v + gi);
        params.scaled_add(-self.lr, &self.velocity);
    }
}

fn f64_images(images: &Array4<f32>, rows: &[usize]) -> ArrayD<f64> {
    rows_f64(images, rows)
}

/// Loss of `params` on a labeled batch plus an optional outlier batch.
fn batch_loss(
    spec: &NetworkSpec,
    params: &Var,
    in_images: ArrayD<f64>,
    labels: &[usize],
    out_images: Option<ArrayD<f64>>,
    lambda: f64,
) -> Result<crate::loss::IntegratedLoss> {
    let in_logits = forward_logits(spec, params, &Var::constant(in_images))?;
    let out_logits = match out_images {
        Some(o) if lambda != 0.0 => Some(forward_logits(spec, params, &Var::constant(o))?),
        _ => None,
    };
    integrated_loss(&in_logits, labels, out_logits.as_ref(), lambda)
}

/// Full-set loss of `params` without augmentation.
pub fn distilled_loss(spec: &NetworkSpec, params: &ParameterVector, s: &DistilledSet, lambda: f64) -> Result<f64> {
    no_grad(|| {
        let all: Vec<usize> = (0..s.s_in_labels.len()).collect();
        let outs: Vec<usize> = (0..s.s_out_len()).collect();
        let out = (!outs.is_empty()).then(|| f64_images(&s.s_out_images, &outs));
        let p = Var::constant(params.flat.clone().into_dyn());
        Ok(batch_loss(spec, &p, f64_images(&s.s_in_images, &all), &s.s_in_labels, out, lambda)?
            .total
            .item())
    })
}

/// Trains a freshly initialized network on `s` with
/// `CE(s_in) + λ·H(U; s_out)`. Initialization, shuffling, augmentation and
/// outlier batches each use their own stream derived from `rng_seed`, so
/// the outlier machinery never perturbs the others.
pub fn train_on_distilled(s: &DistilledSet, spec: &NetworkSpec, cfg: &TrainConfig, rng_seed: u64) -> Result<TrainOutcome> {
    s.validate()?;
    if cfg.lambda < 0.0 || !cfg.lambda.is_finite() {
        return Err(Error::Config(format!("λ must be non-negative, got {}", cfg.lambda)));
    }
    if s.shape() != spec.input || s.num_classes != spec.num_classes {
        return Err(Error::Config(format!(
            "distilled set {} with {} classes does not fit {spec}",
            s.shape(),
            s.num_classes
        )));
    }
    let init = build_network(spec, rng_seed)?;
    let lambda = if s.s_out_len() == 0 { 0.0 } else { cfg.lambda };
    let initial_loss = distilled_loss(spec, &init, s, lambda)?;

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(rng_seed ^ 0x5348_5546);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(rng_seed ^ 0x4155_4721);
    let mut out_rng = ChaCha8Rng::seed_from_u64(rng_seed ^ 0x4f55_5453);
    let mut flat = init.flat.clone();
    let mut opt = Sgd::new(cfg.lr, cfg.momentum, flat.len());
    let n = s.s_in_labels.len();
    let batch = cfg.batch.max(1).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut step_losses = Vec::new();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(batch) {
            let labels: Vec<usize> = chunk.iter().map(|&i| s.s_in_labels[i]).collect();
            let x_in = augment_each(&f64_images(&s.s_in_images, chunk), &cfg.augment, &mut aug_rng)?;
            let x_out = if lambda != 0.0 {
                let k = chunk.len().min(s.s_out_len());
                let rows = rand::seq::index::sample(&mut out_rng, s.s_out_len(), k).into_vec();
                Some(augment_each(&f64_images(&s.s_out_images, &rows), &cfg.augment, &mut aug_rng)?)
            } else {
                None
            };
            let p = Var::leaf(flat.clone().into_dyn());
            let loss = batch_loss(spec, &p, x_in, &labels, x_out, lambda)?;
            let value = loss.total.item();
            if !value.is_finite() {
                return Err(Error::Training {
                    step: step_losses.len(),
                    loss: value,
                });
            }
            let g = grad(&loss.total, &[&p], false).remove(0);
            opt.step(&mut flat, g.value());
            step_losses.push(value);
        }
    }
    let params = ParameterVector::new(flat, init.layout.clone())?;
    let final_loss = distilled_loss(spec, &params, s, lambda)?;
    Ok(TrainOutcome {
        params,
        step_losses,
        initial_loss,
        final_loss,
    })
}

/// Expert training settings.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertConfig {
    pub epochs: usize,
    pub snapshot_interval: usize,
    pub lr: f64,
    pub batch: usize,
    pub lambda: f64,
    pub use_integrated_loss: bool,
    pub augment: AugmentPolicy,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        ExpertConfig {
            epochs: 2,
            snapshot_interval: 10,
            lr: 0.01,
            batch: 256,
            lambda: 0.5,
            use_integrated_loss: true,
            augment: AugmentPolicy::identity(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBuffer {
    pub spec: NetworkSpec,
    /// `(step, θ*_step)` with strictly increasing steps.
    pub snapshots: Vec<(usize, ParameterVector)>,
    pub lambda: f64,
    pub use_integrated_loss: bool,
    pub rng_seed: u64,
    pub losses: Vec<f64>,
}

impl TrajectoryBuffer {
    pub fn validate(&self) -> Result<()> {
        if self.snapshots.is_empty() {
            return Err(Error::Validation("trajectory buffer is empty".into()));
        }
        let layout = &self.snapshots[0].1.layout;
        for w in self.snapshots.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::Validation("snapshot steps must increase".into()));
            }
        }
        if self.snapshots.iter().any(|(_, p)| p.layout != *layout) {
            return Err(Error::Validation("snapshots disagree on layout".into()));
        }
        Ok(())
    }

    /// Snapshot index for an exact training step.
    pub fn index_of(&self, step: usize) -> Option<usize> {
        self.snapshots.iter().position(|(s, _)| *s == step)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        std::fs::create_dir_all(dir)?;
        let mut m = Manifest::new();
        m.set("format_version", FORMAT_VERSION);
        m.set("depth", self.spec.depth);
        m.set("width", self.spec.width);
        m.set("num_classes", self.spec.num_classes);
        m.set("shape", self.spec.input);
        m.set("affine", self.spec.affine);
        m.set("eps", self.spec.eps);
        m.set("lambda", self.lambda);
        m.set("use_integrated_loss", self.use_integrated_loss);
        m.set("rng_seed", self.rng_seed);
        m.set(
            "steps",
            self.snapshots
                .iter()
                .map(|(s, _)| s.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        m.write(&dir.join("manifest"))?;
        for (i, (_, p)) in self.snapshots.iter().enumerate() {
            let bytes: Vec<u8> = p.flat.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
            std::fs::write(dir.join(format!("snapshot_{i:05}.bin")), bytes)?;
        }
        Ok(())
    }

    /// Loads a buffer; snapshot values come back rounded to `f32`.
    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join("manifest");
        let m = Manifest::read(&mpath)?;
        let field = |k: &str| -> Result<&str> {
            m.get(k).ok_or_else(|| Error::Parse {
                path: mpath.clone(),
                reason: format!("missing key `{k}`"),
            })
        };
        let parse = |k: &str| -> Result<String> { field(k).map(str::to_string) };
        let bad = |k: &str| Error::Parse {
            path: mpath.clone(),
            reason: format!("bad value for `{k}`"),
        };
        let version: u32 = parse("format_version")?.parse().map_err(|_| bad("format_version"))?;
        if version != FORMAT_VERSION {
            return Err(Error::Incompatible {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let spec = NetworkSpec {
            depth: parse("depth")?.parse().map_err(|_| bad("depth"))?,
            width: parse("width")?.parse().map_err(|_| bad("width"))?,
            num_classes: parse("num_classes")?.parse().map_err(|_| bad("num_classes"))?,
            input: parse("shape")?.parse().map_err(|_| bad("shape"))?,
            affine: parse("affine")?.parse().map_err(|_| bad("affine"))?,
            eps: parse("eps")?.parse().map_err(|_| bad("eps"))?,
        };
        spec.validate()?;
        let layout = Arc::new(spec.layout());
        let count = spec.parameter_count();
        let steps: Vec<usize> = field("steps")?
            .split(',')
            .map(|s| s.parse().map_err(|_| bad("steps")))
            .collect::<Result<_>>()?;
        let mut snapshots = Vec::with_capacity(steps.len());
        for (i, step) in steps.into_iter().enumerate() {
            let p = dir.join(format!("snapshot_{i:05}.bin"));
            let bytes = std::fs::read(&p).map_err(|e| Error::Load {
                path: p.clone(),
                reason: e.to_string(),
            })?;
            if bytes.len() != 4 * count {
                return Err(Error::Parse {
                    path: p,
                    reason: format!("expected {count} f32 values, found {} bytes", bytes.len()),
                });
            }
            let flat: Array1<f64> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            snapshots.push((step, ParameterVector::new(flat, layout.clone())?));
        }
        let buf = TrajectoryBuffer {
            spec,
            snapshots,
            lambda: parse("lambda")?.parse().map_err(|_| bad("lambda"))?,
            use_integrated_loss: parse("use_integrated_loss")?.parse().map_err(|_| bad("use_integrated_loss"))?,
            rng_seed: parse("rng_seed")?.parse().map_err(|_| bad("rng_seed"))?,
            losses: Vec::new(),
        };
        buf.validate()?;
        Ok(buf)
    }
}

/// Trains one expert on the real data with plain SGD and records θ* every
/// `snapshot_interval` steps, starting with step 0 and always ending with
/// the final step.
pub fn expert_trajectories(
    t_in: &LabeledImageSet,
    t_out: &UnlabeledImageSet,
    spec: &NetworkSpec,
    cfg: &ExpertConfig,
    rng_seed: u64,
) -> Result<TrajectoryBuffer> {
    if cfg.snapshot_interval == 0 || cfg.epochs == 0 || cfg.batch == 0 {
        return Err(Error::Config("expert epochs, batch and snapshot interval must be positive".into()));
    }
    if t_in.is_empty() {
        return Err(Error::Config("expert training needs data".into()));
    }
    let lambda = if cfg.use_integrated_loss { cfg.lambda } else { 0.0 };
    if cfg.use_integrated_loss && lambda != 0.0 && t_out.is_empty() {
        return Err(Error::Config("integrated-loss experts need outliers".into()));
    }
    let init = build_network(spec, rng_seed)?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(rng_seed ^ 0x5348_5546);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(rng_seed ^ 0x4155_4721);
    let mut out_rng = ChaCha8Rng::seed_from_u64(rng_seed ^ 0x4f55_5453);
    let mut flat = init.flat.clone();
    let mut opt = Sgd::new(cfg.lr, 0.0, flat.len());
    let mut snapshots = vec![(0, init.clone())];
    let mut losses = Vec::new();
    let mut order: Vec<usize> = (0..t_in.len()).collect();
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(cfg.batch) {
            let labels: Vec<usize> = chunk.iter().map(|&i| t_in.labels()[i]).collect();
            let x_in = augment_each(&rows_f64(t_in.images(), chunk), &cfg.augment, &mut aug_rng)?;
            let x_out = if lambda != 0.0 {
                let k = chunk.len().min(t_out.len());
                let rows = rand::seq::index::sample(&mut out_rng, t_out.len(), k).into_vec();
                Some(augment_each(&rows_f64(t_out.images(), &rows), &cfg.augment, &mut aug_rng)?)
            } else {
                None
            };
            let p = Var::leaf(flat.clone().into_dyn());
            let loss = batch_loss(spec, &p, x_in, &labels, x_out, lambda)?;
            let value = loss.total.item();
            if !value.is_finite() {
                return Err(Error::Training { step, loss: value });
            }
            let g = grad(&loss.total, &[&p], false).remove(0);
            opt.step(&mut flat, g.value());
            losses.push(value);
            step += 1;
            if step % cfg.snapshot_interval == 0 {
                snapshots.push((step, ParameterVector::new(flat.clone(), init.layout.clone())?));
            }
        }
    }
    if snapshots.last().map(|s| s.0) != Some(step) {
        snapshots.push((step, ParameterVector::new(flat, init.layout.clone())?));
    }
    Ok(TrajectoryBuffer {
        spec: spec.clone(),
        snapshots,
        lambda,
        use_integrated_loss: cfg.use_integrated_loss,
        rng_seed,
        losses,
    })
}

impl FromStr for NetworkSpec {
    type Err = Error;

    /// Parses `depth=3,width=128,classes=10,shape=1x28x28[,affine=true][,eps=1e-5]`.
    fn from_str(s: &str) -> Result<Self> {
        let mut spec = NetworkSpec::new(3, 128, 10, ImageShape::new(1, 28, 28));
        for part in s.split(',').filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("network option `{part}` is not key=value")))?;
            let bad = || Error::Config(format!("bad value for network option `{k}`: `{v}`"));
            match k.trim() {
                "depth" => spec.depth = v.parse().map_err(|_| bad())?,
                "width" => spec.width = v.parse().map_err(|_| bad())?,
                "classes" => spec.num_classes = v.parse().map_err(|_| bad())?,
                "shape" => spec.input = v.parse()?,
                "affine" => spec.affine = v.parse().map_err(|_| bad())?,
                "eps" => spec.eps = v.parse().map_err(|_| bad())?,
                other => return Err(Error::Config(format!("unknown network option `{other}`"))),
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}
