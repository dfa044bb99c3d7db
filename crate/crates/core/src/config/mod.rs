//! Experiment configuration: flat `key = value` lines with dotted sections,
//! e.g. `distill.lambda = 0.5`. Unknown keys are errors.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::augment::AugmentPolicy;
use crate::data::{BlobConfig, DatasetSource, ImageShape, OutlierMode};
use crate::distill::DistillConfig;
use crate::error::{Error, Result};
use crate::forge::{parse_corruptions, CorruptionConfig, NoiseKind};
use crate::nn::{ExpertConfig, NetworkSpec, TrainConfig};
use crate::ood::{ProtocolConfig, Score};

/// Where the training outliers `T_out` come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OutlierSource {
    None,
    Poe,
    OeDirectory,
    OeGaussian,
    OeUniform,
}

impl OutlierSource {
    pub const ALL: [OutlierSource; 5] = [
        OutlierSource::None,
        OutlierSource::Poe,
        OutlierSource::OeDirectory,
        OutlierSource::OeGaussian,
        OutlierSource::OeUniform,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            OutlierSource::None => "none",
            OutlierSource::Poe => "poe",
            OutlierSource::OeDirectory => "oe-directory",
            OutlierSource::OeGaussian => "oe-gaussian",
            OutlierSource::OeUniform => "oe-uniform",
        }
    }

    pub fn mode(&self) -> OutlierMode {
        match self {
            OutlierSource::None => OutlierMode::None,
            OutlierSource::Poe => OutlierMode::Poe,
            _ => OutlierMode::Oe,
        }
    }
}

impl fmt::Display for OutlierSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OutlierSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OutlierSource::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown outlier mode `{s}`")))
    }
}

/// One real test OOD set.
#[derive(Debug, Clone, PartialEq)]
pub enum TestOod {
    /// Container, IDX file or image directory.
    Path(PathBuf),
    Noise(NoiseKind),
    /// Blob options applied on top of the training blob settings.
    Blobs(String),
}

impl TestOod {
    fn parse(s: &str, base: &Path) -> Result<Self> {
        if let Some(kind) = s.strip_prefix("noise:") {
            return Ok(TestOod::Noise(kind.parse()?));
        }
        if let Some(opts) = s.strip_prefix("blobs:") {
            BlobConfig::parse(opts)?;
            return Ok(TestOod::Blobs(opts.to_string()));
        }
        Ok(TestOod::Path(resolve(base, s)))
    }
}

/// Evaluation settings: test OOD sets, scores and the model protocol.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub test_oods: Vec<TestOod>,
    pub scores: Vec<Score>,
    pub models_per_run: usize,
    pub train: TrainConfig,
    /// Count noise test sets in the headline mean.
    pub include_noise: bool,
    pub chunk: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output: PathBuf,
    pub workers: Option<usize>,
    /// Independent distillation runs.
    pub runs: usize,
    pub dataset: DatasetSource,
    pub digits: bool,
    /// Keep only the first `n` training images of every class.
    pub train_per_class: Option<usize>,
    pub outlier: OutlierSource,
    pub outlier_path: Option<PathBuf>,
    /// Size of `T_out`; `None` matches the training set.
    pub outlier_count: Option<usize>,
    pub corruption: CorruptionConfig,
    pub distill: DistillConfig,
    pub depth: usize,
    pub width: usize,
    pub affine: bool,
    pub norm_eps: f64,
    pub expert: ExpertConfig,
    pub expert_runs: usize,
    pub eval: EvalConfig,
    entries: BTreeMap<String, String>,
    base_dir: PathBuf,
}

fn resolve(base: &Path, s: &str) -> PathBuf {
    let p = PathBuf::from(s);
    if p.is_absolute() {
        p
    } else {
        base.join(p)
    }
}

fn value<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("bad value for `{key}`: `{v}`")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::Config(format!("bad value for `{key}`: `{v}` is not a boolean"))),
    }
}

/// `auto`, `none` and the empty string stand for "unset".
fn optional<T: FromStr>(key: &str, v: &str) -> Result<Option<T>> {
    match v {
        "" | "auto" | "none" => Ok(None),
        _ => value(key, v).map(Some),
    }
}

fn list(v: &str) -> impl Iterator<Item = &str> {
    v.split(';').map(str::trim).filter(|s| !s.is_empty())
}

impl ExperimentConfig {
    /// Parses config text; relative paths resolve against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let k = k.trim().to_string();
            if entries.insert(k.clone(), v.trim().to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key `{k}`", n + 1)));
            }
        }
        Self::from_entries(entries, base_dir.to_path_buf())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    /// A copy with `key` set to `value`, re-validated, with a new checksum.
    pub fn with(&self, key: &str, value: &str) -> Result<Self> {
        let mut entries = self.entries.clone();
        entries.insert(key.to_string(), value.to_string());
        Self::from_entries(entries, self.base_dir.clone())
    }

    /// A copy without `key`, so it falls back to its default.
    pub fn without(&self, key: &str) -> Result<Self> {
        let mut entries = self.entries.clone();
        entries.remove(key);
        Self::from_entries(entries, self.base_dir.clone())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    fn from_entries(entries: BTreeMap<String, String>, base_dir: PathBuf) -> Result<Self> {
        let mut cfg = ExperimentConfig {
            seed: 0,
            output: base_dir.join("out"),
            workers: None,
            runs: 1,
            dataset: DatasetSource::Blobs(BlobConfig::default()),
            digits: false,
            train_per_class: None,
            outlier: OutlierSource::Poe,
            outlier_path: None,
            outlier_count: None,
            corruption: CorruptionConfig::default(),
            distill: DistillConfig::default(),
            depth: 3,
            width: 128,
            affine: false,
            norm_eps: 1e-5,
            expert: ExpertConfig::default(),
            expert_runs: 1,
            eval: EvalConfig {
                test_oods: Vec::new(),
                scores: Score::DEFAULTS.to_vec(),
                models_per_run: 5,
                train: TrainConfig::default(),
                include_noise: false,
                chunk: 512,
            },
            entries: BTreeMap::new(),
            base_dir: base_dir.clone(),
        };
        let mut augment_set = false;
        let mut corruptions = None;
        for (k, v) in &entries {
            let (k, v) = (k.as_str(), v.as_str());
            let d = &mut cfg.distill;
            match k {
                "seed" => cfg.seed = value(k, v)?,
                "output" => cfg.output = resolve(&base_dir, v),
                "workers" => cfg.workers = optional(k, v)?,
                "runs" => cfg.runs = value(k, v)?,
                "dataset.source" => {
                    cfg.dataset = match DatasetSource::parse(v)? {
                        DatasetSource::MnistDir(p) => DatasetSource::MnistDir(resolve(&base_dir, &p.to_string_lossy())),
                        blobs => blobs,
                    }
                }
                "dataset.digits" => cfg.digits = flag(k, v)?,
                "dataset.train_per_class" => cfg.train_per_class = optional(k, v)?,
                "outlier.mode" => cfg.outlier = v.parse()?,
                "outlier.path" => cfg.outlier_path = Some(resolve(&base_dir, v)),
                "outlier.count" => cfg.outlier_count = optional(k, v)?,
                "outlier.corruptions" => corruptions = Some(parse_corruptions(v)?),
                "distill.method" => d.method = v.parse()?,
                "distill.lambda" => d.lambda = value(k, v)?,
                "distill.lr_net" => d.lr_net = value(k, v)?,
                "distill.lr_img" => d.lr_img = value(k, v)?,
                "distill.net_momentum" => d.net_momentum = value(k, v)?,
                "distill.img_momentum" => d.img_momentum = value(k, v)?,
                "distill.inner_steps" => d.inner_steps = value(k, v)?,
                "distill.image_steps" => d.image_steps = value(k, v)?,
                "distill.iterations" => d.iterations = value(k, v)?,
                "distill.ipc" => d.ipc = value(k, v)?,
                "distill.outlier_count" => d.outlier_count = optional(k, v)?,
                "distill.batch_real" => d.batch_real = value(k, v)?,
                "distill.batch_real_out" => d.batch_real_out = optional(k, v)?,
                "distill.batch_syn" => d.batch_syn = optional(k, v)?,
                "distill.restart_every" => d.restart_every = optional(k, v)?,
                "distill.augment" => {
                    d.augment = AugmentPolicy::parse(v)?;
                    augment_set = true;
                }
                "mtt.buffer" => d.mtt.buffer_path = Some(resolve(&base_dir, v)),
                "mtt.expert_steps" => d.mtt.expert_steps = value(k, v)?,
                "mtt.max_start_step" => d.mtt.max_start_step = optional(k, v)?,
                "expert.epochs" => cfg.expert.epochs = value(k, v)?,
                "expert.snapshot_interval" => cfg.expert.snapshot_interval = value(k, v)?,
                "expert.lr" => cfg.expert.lr = value(k, v)?,
                "expert.batch" => cfg.expert.batch = value(k, v)?,
                "expert.integrated_loss" => cfg.expert.use_integrated_loss = flag(k, v)?,
                "expert.augment" => cfg.expert.augment = AugmentPolicy::parse(v)?,
                "expert.runs" => cfg.expert_runs = value(k, v)?,
                "network.depth" => cfg.depth = value(k, v)?,
                "network.width" => cfg.width = value(k, v)?,
                "network.affine" => cfg.affine = flag(k, v)?,
                "network.eps" => cfg.norm_eps = value(k, v)?,
                "eval.test_ood" => {
                    cfg.eval.test_oods = list(v).map(|s| TestOod::parse(s, &base_dir)).collect::<Result<_>>()?
                }
                "eval.scores" => {
                    cfg.eval.scores = v.split(',').map(|s| s.trim().parse()).collect::<Result<_>>()?
                }
                "eval.models_per_run" => cfg.eval.models_per_run = value(k, v)?,
                "eval.epochs" => cfg.eval.train.epochs = value(k, v)?,
                "eval.lr" => cfg.eval.train.lr = value(k, v)?,
                "eval.momentum" => cfg.eval.train.momentum = value(k, v)?,
                "eval.batch" => cfg.eval.train.batch = value(k, v)?,
                "eval.augment" => cfg.eval.train.augment = AugmentPolicy::parse(v)?,
                "eval.include_noise" => cfg.eval.include_noise = flag(k, v)?,
                "eval.chunk" => cfg.eval.chunk = value(k, v)?,
                _ => return Err(Error::Config(format!("unknown key `{k}`"))),
            }
        }
        if !augment_set {
            cfg.distill.augment = AugmentPolicy::standard(cfg.digits);
        }
        cfg.corruption = if cfg.digits { CorruptionConfig::digits() } else { CorruptionConfig::default() };
        if let Some(c) = corruptions {
            cfg.corruption.enabled = c;
        }
        cfg.corruption.rng_seed = cfg.seed;
        cfg.expert.lambda = cfg.distill.lambda;
        if cfg.outlier == OutlierSource::None {
            // No outliers: the objective reduces to plain distillation.
            cfg.distill.lambda = 0.0;
            cfg.distill.outlier_count = Some(0);
            cfg.expert.lambda = 0.0;
        }
        cfg.eval.train.lambda = cfg.distill.lambda;
        cfg.entries = entries;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        self.distill.validate()?;
        self.corruption.validate()?;
        if self.runs == 0 || self.expert_runs == 0 {
            return Err(Error::Config("runs and expert.runs must be at least 1".into()));
        }
        if self.outlier == OutlierSource::OeDirectory && self.outlier_path.is_none() {
            return Err(Error::Config("outlier.mode oe-directory needs outlier.path".into()));
        }
        if self.outlier_count == Some(0) && self.outlier != OutlierSource::None {
            return Err(Error::Config("outlier.count must be positive".into()));
        }
        if self.eval.models_per_run == 0 || self.eval.scores.is_empty() || self.eval.chunk == 0 {
            return Err(Error::Config("eval needs models, scores and a positive chunk".into()));
        }
        if self.workers == Some(0) {
            return Err(Error::Config("workers must be positive".into()));
        }
        Ok(())
    }

    /// Checks every referenced path before any compute starts.
    pub fn check_paths(&self) -> Result<()> {
        let missing = |p: &Path, what: &str| -> Result<()> {
            if p.exists() {
                Ok(())
            } else {
                Err(Error::Config(format!("{what} `{}` does not exist", p.display())))
            }
        };
        if let DatasetSource::MnistDir(dir) = &self.dataset {
            missing(dir, "dataset.source")?;
        }
        if self.outlier == OutlierSource::OeDirectory {
            if let Some(p) = &self.outlier_path {
                missing(p, "outlier.path")?;
            }
        }
        if let Some(p) = &self.distill.mtt.buffer_path {
            missing(p, "mtt.buffer")?;
        }
        for t in &self.eval.test_oods {
            if let TestOod::Path(p) = t {
                missing(p, "eval.test_ood")?;
            }
        }
        Ok(())
    }

    /// Normalized text: sorted `key=value` lines.
    pub fn canonical(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// SHA-256 of [`Self::canonical`], as hex.
    pub fn checksum(&self) -> String {
        Sha256::digest(self.canonical().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn network_spec(&self, num_classes: usize, input: ImageShape) -> NetworkSpec {
        let mut spec = NetworkSpec::new(self.depth, self.width, num_classes, input);
        spec.affine = self.affine;
        spec.eps = self.norm_eps;
        spec
    }

    /// Distillation seed of run `r`.
    pub fn run_seed(&self, r: usize) -> u64 {
        self.seed.wrapping_mul(1000).wrapping_add(r as u64)
    }

    pub fn protocol(&self) -> ProtocolConfig {
        ProtocolConfig {
            models_per_run: self.eval.models_per_run,
            train: self.eval.train.clone(),
            scores: self.eval.scores.clone(),
            rng_seed: self.seed,
            workers: self.effective_workers(),
            chunk: self.eval.chunk,
        }
    }

    /// `workers`, capped by `TRUSTDD_WORKERS` when that is set.
    pub fn effective_workers(&self) -> Option<usize> {
        let cap = std::env::var("TRUSTDD_WORKERS")
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok())
            .filter(|&n| n > 0);
        match (self.workers, cap) {
            (Some(w), Some(c)) => Some(w.min(c)),
            (w, c) => w.or(c),
        }
    }
}
