use std::f64::consts::PI;

use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{LabeledImageSet, Provenance, Split, UnlabeledImageSet};
use crate::error::{Error, Result};

/// Where the bumps of a blob set sit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlobLayout {
    /// One position per class on a ring around the image centre.
    Classes,
    /// Positions on the same ring, halfway between class positions.
    Between,
    /// Positions near the image corners; never used by any class.
    Corners,
    /// Every class position at once.
    Pairs,
}

/// Profile of one bump.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlobShape {
    Gaussian,
    /// Annulus of radius `1.5·sigma`.
    Ring,
    /// Flat square of half-width `1.5·sigma`.
    Square,
}

impl BlobShape {
    fn profile(self, dy: f64, dx: f64, sigma: f64) -> f64 {
        match self {
            BlobShape::Gaussian => (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp(),
            BlobShape::Ring => {
                let r = (dy * dy + dx * dx).sqrt() - 1.5 * sigma;
                (-(r * r) / (0.5 * sigma * sigma)).exp()
            }
            BlobShape::Square => {
                if dy.abs().max(dx.abs()) <= 1.5 * sigma {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Synthetic Gaussian-bump images: class `k` has its bump at a fixed
/// position on a ring, with jitter, random amplitude and additive noise.
#[derive(Debug, Clone, PartialEq)]
pub struct BlobConfig {
    pub classes: usize,
    pub count: usize,
    pub size: usize,
    pub channels: usize,
    pub sigma: f64,
    pub jitter: f64,
    pub noise: f64,
    pub seed: u64,
    pub layout: BlobLayout,
    pub shape: BlobShape,
}

impl Default for BlobConfig {
    fn default() -> Self {
        BlobConfig {
            classes: 2,
            count: 256,
            size: 8,
            channels: 1,
            sigma: 1.0,
            jitter: 0.5,
            noise: 0.05,
            seed: 0,
            layout: BlobLayout::Classes,
            shape: BlobShape::Gaussian,
        }
    }
}

impl BlobConfig {
    /// Parses `key=value` pairs separated by commas, e.g. `classes=2,count=64,size=8`.
    pub fn parse(s: &str) -> Result<Self> {
        BlobConfig::default().with_options(s)
    }

    /// Applies `key=value` options on top of `self`.
    pub fn with_options(&self, s: &str) -> Result<Self> {
        let mut cfg = self.clone();
        for part in s.split(',').filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("blob option `{part}` is not key=value")))?;
            let bad = || Error::Config(format!("bad value for blob option `{k}`: `{v}`"));
            match k.trim() {
                "classes" => cfg.classes = v.parse().map_err(|_| bad())?,
                "count" => cfg.count = v.parse().map_err(|_| bad())?,
                "size" => cfg.size = v.parse().map_err(|_| bad())?,
                "channels" => cfg.channels = v.parse().map_err(|_| bad())?,
                "sigma" => cfg.sigma = v.parse().map_err(|_| bad())?,
                "jitter" => cfg.jitter = v.parse().map_err(|_| bad())?,
                "noise" => cfg.noise = v.parse().map_err(|_| bad())?,
                "seed" => cfg.seed = v.parse().map_err(|_| bad())?,
                "layout" => {
                    cfg.layout = match v {
                        "classes" => BlobLayout::Classes,
                        "between" => BlobLayout::Between,
                        "corners" => BlobLayout::Corners,
                        "pairs" => BlobLayout::Pairs,
                        _ => return Err(bad()),
                    }
                }
                "shape" => {
                    cfg.shape = match v {
                        "gaussian" => BlobShape::Gaussian,
                        "ring" => BlobShape::Ring,
                        "square" => BlobShape::Square,
                        _ => return Err(bad()),
                    }
                }
                other => return Err(Error::Config(format!("unknown blob option `{other}`"))),
            }
        }
        if cfg.classes == 0 || cfg.size == 0 || cfg.channels == 0 {
            return Err(Error::Config("blob classes, size and channels must be positive".into()));
        }
        Ok(cfg)
    }

    fn centers(&self) -> Vec<(f64, f64)> {
        let mid = (self.size as f64 - 1.0) / 2.0;
        let radius = 0.3 * self.size as f64;
        let ring = |offset: f64| -> Vec<(f64, f64)> {
            (0..self.classes)
                .map(|k| {
                    let a = 2.0 * PI * (k as f64 + offset) / self.classes as f64;
                    (mid + radius * a.sin(), mid + radius * a.cos())
                })
                .collect()
        };
        match self.layout {
            BlobLayout::Classes | BlobLayout::Pairs => ring(0.0),
            BlobLayout::Between => ring(0.5),
            BlobLayout::Corners => {
                let lo = 0.15 * self.size as f64;
                let hi = self.size as f64 - 1.0 - lo;
                vec![(lo, lo), (lo, hi), (hi, lo), (hi, hi)]
            }
        }
    }

    fn split_seed(&self, split: Split) -> u64 {
        match split {
            Split::Train => self.seed,
            Split::Test => self.seed ^ 0x7e57_5eed_0000_0001,
        }
    }

    fn render(&self, split: Split) -> (Array4<f32>, Vec<usize>) {
        let centers = self.centers();
        let mut rng = ChaCha8Rng::seed_from_u64(self.split_seed(split));
        let n = self.size;
        let mut images = Array4::<f32>::zeros((self.count, self.channels, n, n));
        let mut slots = Vec::with_capacity(self.count);
        for i in 0..self.count {
            let slot = i % centers.len();
            slots.push(slot);
            let chosen: Vec<(f64, f64)> = if self.layout == BlobLayout::Pairs {
                centers.clone()
            } else {
                vec![centers[slot]]
            };
            let bumps: Vec<(f64, f64, f64)> = chosen
                .into_iter()
                .map(|(cy, cx)| {
                    let jy: f64 = StandardNormal.sample(&mut rng);
                    let jx: f64 = StandardNormal.sample(&mut rng);
                    let amp: f64 = rng.random_range(0.7..1.0);
                    (cy + self.jitter * jy, cx + self.jitter * jx, amp)
                })
                .collect();
            for c in 0..self.channels {
                for y in 0..n {
                    for x in 0..n {
                        let signal: f64 = bumps
                            .iter()
                            .map(|&(cy, cx, amp)| amp * self.shape.profile(y as f64 - cy, x as f64 - cx, self.sigma))
                            .fold(0.0, f64::max);
                        let e: f64 = StandardNormal.sample(&mut rng);
                        images[[i, c, y, x]] = (signal + self.noise * e).clamp(0.0, 1.0) as f32;
                    }
                }
            }
        }
        (images, slots)
    }
}

/// Builtin labeled blob dataset. Labels cycle `0, 1, …, classes-1`.
pub fn generate_blobs(cfg: &BlobConfig, split: Split) -> Result<LabeledImageSet> {
    if cfg.layout != BlobLayout::Classes || cfg.shape != BlobShape::Gaussian {
        return Err(Error::Config(
            "labeled blob sets use the class layout and Gaussian bumps; use generate_blob_outliers for others".into(),
        ));
    }
    let (images, labels) = cfg.render(split);
    LabeledImageSet::new(format!("blobs{}", cfg.classes), images, labels, cfg.classes)
}

/// Unlabeled blobs at positions no class uses.
pub fn generate_blob_outliers(cfg: &BlobConfig, split: Split) -> Result<UnlabeledImageSet> {
    let (images, _) = cfg.render(split);
    let layout = match cfg.layout {
        BlobLayout::Classes => "classes",
        BlobLayout::Between => "between",
        BlobLayout::Corners => "corners",
        BlobLayout::Pairs => "pairs",
    };
    let shape = match cfg.shape {
        BlobShape::Gaussian => "",
        BlobShape::Ring => "-ring",
        BlobShape::Square => "-square",
    };
    let name = format!("blobs-{layout}{shape}");
    UnlabeledImageSet::new(name, images, Provenance::ExternalDirectory)
}
