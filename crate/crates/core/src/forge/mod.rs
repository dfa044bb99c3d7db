//! Pseudo-outlier synthesis by semantic-shifting corruptions, plus noise
//! outlier sources.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array3, Array4, ArrayView3, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::data::{ImageShape, LabeledImageSet, Provenance, UnlabeledImageSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Corruption {
    Jigsaw,
    Invert,
    Mosaic,
    Speckle,
    Flip,
}

impl Corruption {
    /// Canonical order; also the row order of exported grids.
    pub const ALL: [Corruption; 5] = [
        Corruption::Jigsaw,
        Corruption::Invert,
        Corruption::Mosaic,
        Corruption::Speckle,
        Corruption::Flip,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Corruption::Jigsaw => "jigsaw",
            Corruption::Invert => "invert",
            Corruption::Mosaic => "mosaic",
            Corruption::Speckle => "speckle",
            Corruption::Flip => "flip",
        }
    }
}

impl fmt::Display for Corruption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Corruption {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "jigsaw" => Corruption::Jigsaw,
            "invert" => Corruption::Invert,
            "mosaic" => Corruption::Mosaic,
            "speckle" => Corruption::Speckle,
            "flip" => Corruption::Flip,
            other => return Err(Error::Config(format!("unknown corruption `{other}`"))),
        })
    }
}

/// Parses a comma-separated corruption list such as `jigsaw,invert`.
pub fn parse_corruptions(s: &str) -> Result<Vec<Corruption>> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(str::parse)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpeckleNoise {
    /// `U[0,1)` per pixel.
    Uniform01,
    /// Standard normal per pixel.
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlipOrientation {
    Horizontal,
    Vertical,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorruptionConfig {
    pub enabled: Vec<Corruption>,
    /// `(rows, cols)` grids; each must have 6 or 8 cells.
    pub jigsaw_grids: Vec<(usize, usize)>,
    /// Inclusive block-size range; `None` derives it from the image size.
    pub mosaic_block_range: Option<(usize, usize)>,
    pub speckle_noise: SpeckleNoise,
    pub flip_h_excluded_labels: BTreeSet<usize>,
    pub flip_v_excluded_labels: BTreeSet<usize>,
    /// Flip is only meaningful for digit datasets.
    pub digits: bool,
    pub rng_seed: u64,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        CorruptionConfig {
            enabled: vec![
                Corruption::Jigsaw,
                Corruption::Invert,
                Corruption::Mosaic,
                Corruption::Speckle,
            ],
            jigsaw_grids: vec![(2, 3), (3, 2), (2, 4), (4, 2)],
            mosaic_block_range: None,
            speckle_noise: SpeckleNoise::Uniform01,
            flip_h_excluded_labels: [0, 1, 8].into_iter().collect(),
            flip_v_excluded_labels: [0, 1, 3, 8].into_iter().collect(),
            digits: false,
            rng_seed: 0,
        }
    }
}

impl CorruptionConfig {
    /// Default set for digit datasets: the four image corruptions plus flip.
    pub fn digits() -> Self {
        let mut cfg = CorruptionConfig {
            digits: true,
            ..Default::default()
        };
        cfg.enabled.push(Corruption::Flip);
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.enabled.is_empty() {
            return Err(Error::Config("no corruption enabled".into()));
        }
        if let Some(&(r, c)) = self
            .jigsaw_grids
            .iter()
            .find(|(r, c)| !matches!(r * c, 6 | 8))
        {
            return Err(Error::Config(format!(
                "jigsaw grid {r}x{c} must have 6 or 8 patches"
            )));
        }
        if self.enabled.contains(&Corruption::Jigsaw) && self.jigsaw_grids.is_empty() {
            return Err(Error::Config("jigsaw enabled without grids".into()));
        }
        if let Some((lo, hi)) = self.mosaic_block_range {
            if lo == 0 || lo > hi {
                return Err(Error::Config(format!("bad mosaic block range ({lo}, {hi})")));
            }
        }
        Ok(())
    }

    fn mosaic_range(&self, shape: ImageShape) -> (usize, usize) {
        self.mosaic_block_range.unwrap_or_else(|| default_mosaic_range(shape))
    }
}

/// `(min_side / 8, min_side / 4)`, each at least 2.
pub fn default_mosaic_range(shape: ImageShape) -> (usize, usize) {
    let m = shape.height.min(shape.width);
    let lo = (m / 8).max(2);
    let hi = (m / 4).max(2).max(lo);
    (lo, hi)
}

/// Rearranges a `rows × cols` patch grid: output patch `d` (raster order)
/// is input patch `perm[d]`. Dimensions that do not divide evenly are
/// handled by shuffling the largest centred crop that does and leaving the
/// border untouched.
pub fn jigsaw_with(image: ArrayView3<'_, f32>, grid: (usize, usize), perm: &[usize]) -> Result<Array3<f32>> {
    let (_, h, w) = image.dim();
    let (rows, cols) = grid;
    if h < rows || w < cols {
        return Err(Error::Corruption(format!(
            "image {h}x{w} is smaller than jigsaw grid {rows}x{cols}"
        )));
    }
    if perm.len() != rows * cols {
        return Err(Error::Corruption("permutation length differs from patch count".into()));
    }
    let (ph, pw) = (h / rows, w / cols);
    let (oy, ox) = ((h - ph * rows) / 2, (w - pw * cols) / 2);
    let mut out = image.to_owned();
    for (dst, &src) in perm.iter().enumerate() {
        let (dr, dc) = (dst / cols, dst % cols);
        let (sr, sc) = (src / cols, src % cols);
        let patch = image.slice(s![
            ..,
            oy + sr * ph..oy + (sr + 1) * ph,
            ox + sc * pw..ox + (sc + 1) * pw
        ]);
        out.slice_mut(s![
            ..,
            oy + dr * ph..oy + (dr + 1) * ph,
            ox + dc * pw..ox + (dc + 1) * pw
        ])
        .assign(&patch);
    }
    Ok(out)
}

pub fn jigsaw(image: ArrayView3<'_, f32>, cfg: &CorruptionConfig, rng: &mut impl Rng) -> Result<Array3<f32>> {
    let (_, h, w) = image.dim();
    let fitting: Vec<(usize, usize)> = cfg
        .jigsaw_grids
        .iter()
        .copied()
        .filter(|&(r, c)| h >= r && w >= c)
        .collect();
    if fitting.is_empty() {
        return Err(Error::Corruption(format!(
            "image {h}x{w} is smaller than every jigsaw grid"
        )));
    }
    let grid = fitting[rng.random_range(0..fitting.len())];
    let n = grid.0 * grid.1;
    let identity: Vec<usize> = (0..n).collect();
    let mut perm = identity.clone();
    while perm == identity {
        perm.shuffle(rng);
    }
    jigsaw_with(image, grid, &perm)
}

/// `out[c] = 1 - in[c]` for every `c` in `channels`.
pub fn invert_with(image: ArrayView3<'_, f32>, channels: &[usize]) -> Array3<f32> {
    let mut out = image.to_owned();
    for &c in channels {
        out.index_axis_mut(Axis(0), c).mapv_inplace(|v| 1.0 - v);
    }
    out
}

/// Uniform over the non-empty channel subsets; returns the subset used.
pub fn invert(image: ArrayView3<'_, f32>, rng: &mut impl Rng) -> (Array3<f32>, Vec<usize>) {
    let c = image.dim().0;
    let mask: u32 = rng.random_range(1..(1u32 << c));
    let subset: Vec<usize> = (0..c).filter(|i| mask & (1 << i) != 0).collect();
    (invert_with(image, &subset), subset)
}

/// Replaces each `block × block` tile by its mean; edge tiles average over
/// their actual extent.
pub fn mosaic_with(image: ArrayView3<'_, f32>, block: usize) -> Result<Array3<f32>> {
    let (c, h, w) = image.dim();
    if block == 0 || (block > h && block > w) {
        return Err(Error::Corruption(format!(
            "mosaic block {block} does not fit image {h}x{w}"
        )));
    }
    let mut out = Array3::<f32>::zeros((c, h, w));
    for ch in 0..c {
        for y0 in (0..h).step_by(block) {
            for x0 in (0..w).step_by(block) {
                let (y1, x1) = ((y0 + block).min(h), (x0 + block).min(w));
                let tile = image.slice(s![ch, y0..y1, x0..x1]);
                let mean = tile.iter().map(|&v| v as f64).sum::<f64>() / tile.len() as f64;
                out.slice_mut(s![ch, y0..y1, x0..x1]).fill(mean as f32);
            }
        }
    }
    Ok(out)
}

pub fn mosaic(image: ArrayView3<'_, f32>, cfg: &CorruptionConfig, rng: &mut impl Rng) -> Result<Array3<f32>> {
    let (lo, hi) = cfg.mosaic_range(ImageShape::of_view(&image));
    let block = rng.random_range(lo..=hi);
    mosaic_with(image, block)
}

/// `clip(in + in ⊙ noise, 0, 1)`.
pub fn speckle_with(image: ArrayView3<'_, f32>, noise: ArrayView3<'_, f32>) -> Array3<f32> {
    let mut out = image.to_owned();
    out.zip_mut_with(&noise, |v, &n| *v = (*v + *v * n).clamp(0.0, 1.0));
    out
}

pub fn speckle(image: ArrayView3<'_, f32>, kind: SpeckleNoise, rng: &mut impl Rng) -> Array3<f32> {
    let noise = Array3::from_shape_simple_fn(image.raw_dim(), || match kind {
        SpeckleNoise::Uniform01 => rng.random::<f32>(),
        SpeckleNoise::Gaussian => StandardNormal.sample(rng),
    });
    speckle_with(image, noise.view())
}

pub fn flip(image: ArrayView3<'_, f32>, orientation: FlipOrientation) -> Array3<f32> {
    match orientation {
        FlipOrientation::Horizontal => image.slice(s![.., .., ..;-1]).to_owned(),
        FlipOrientation::Vertical => image.slice(s![.., ..;-1, ..]).to_owned(),
    }
}

/// Flips in a given orientation unless that flip leaves the digit's meaning
/// intact, in which case the result is `None`.
pub fn flip_digit_with(
    image: ArrayView3<'_, f32>,
    label: usize,
    orientation: FlipOrientation,
    cfg: &CorruptionConfig,
) -> Result<Option<Array3<f32>>> {
    if !cfg.digits {
        return Err(Error::Config("flip is only defined for digit datasets".into()));
    }
    let excluded = match orientation {
        FlipOrientation::Horizontal => &cfg.flip_h_excluded_labels,
        FlipOrientation::Vertical => &cfg.flip_v_excluded_labels,
    };
    if excluded.contains(&label) {
        return Ok(None);
    }
    Ok(Some(flip(image, orientation)))
}

pub fn flip_digit(
    image: ArrayView3<'_, f32>,
    label: usize,
    cfg: &CorruptionConfig,
    rng: &mut impl Rng,
) -> Result<Option<Array3<f32>>> {
    let orientation = if rng.random_bool(0.5) {
        FlipOrientation::Horizontal
    } else {
        FlipOrientation::Vertical
    };
    flip_digit_with(image, label, orientation, cfg)
}

/// Applies one corruption; `None` only for an excluded flip.
pub fn apply_corruption(
    kind: Corruption,
    image: ArrayView3<'_, f32>,
    label: usize,
    cfg: &CorruptionConfig,
    rng: &mut impl Rng,
) -> Result<Option<Array3<f32>>> {
    Ok(Some(match kind {
        Corruption::Jigsaw => jigsaw(image, cfg, rng)?,
        Corruption::Invert => invert(image, rng).0,
        Corruption::Mosaic => mosaic(image, cfg, rng)?,
        Corruption::Speckle => speckle(image, cfg.speckle_noise, rng),
        Corruption::Flip => return flip_digit(image, label, cfg, rng),
    }))
}

const MAX_RESAMPLES: usize = 1000;

/// Builds `count` pseudo-outliers. Each draws one enabled corruption and a
/// source image uniformly; an excluded flip redraws the source only, so tags
/// stay uniform. Item `i` uses its own stream seeded `rng_seed + i`.
pub fn synthesize_outliers(
    t_in: &LabeledImageSet,
    cfg: &CorruptionConfig,
    count: usize,
) -> Result<UnlabeledImageSet> {
    cfg.validate()?;
    if count == 0 {
        return Err(Error::Config("outlier count must be at least 1".into()));
    }
    if t_in.is_empty() {
        return Err(Error::Config("cannot corrupt an empty dataset".into()));
    }
    let applicable: Vec<Corruption> = cfg
        .enabled
        .iter()
        .copied()
        .filter(|&k| k != Corruption::Flip || cfg.digits)
        .collect();
    if applicable.is_empty() {
        return Err(Error::Config(
            "no enabled corruption applies to this dataset (flip needs digits)".into(),
        ));
    }

    let items: Vec<Result<(Array3<f32>, Corruption)>> = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed.wrapping_add(i as u64));
            let kind = applicable[rng.random_range(0..applicable.len())];
            for _ in 0..MAX_RESAMPLES {
                let src = rng.random_range(0..t_in.len());
                if let Some(img) =
                    apply_corruption(kind, t_in.image(src), t_in.labels()[src], cfg, &mut rng)?
                {
                    return Ok((img, kind));
                }
            }
            Err(Error::Config(
                "every drawn corruption was inapplicable; check flip exclusions".into(),
            ))
        })
        .collect();

    let shape = t_in.shape();
    let mut images = Array4::zeros((count, shape.channels, shape.height, shape.width));
    let mut tags = Vec::with_capacity(count);
    for (i, item) in items.into_iter().enumerate() {
        let (img, kind) = item?;
        images.index_axis_mut(Axis(0), i).assign(&img);
        tags.push(kind);
    }
    UnlabeledImageSet::new(format!("{}-poe", t_in.name()), images, Provenance::PseudoCorruption)?
        .with_tags(tags)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseKind {
    Gaussian,
    Uniform,
}

impl FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" | "gauss" => Ok(NoiseKind::Gaussian),
            "uniform" => Ok(NoiseKind::Uniform),
            _ => Err(Error::Config(format!("unknown noise kind `{s}`"))),
        }
    }
}

/// Gaussian: `clip(0.5 + 0.5·z, 0, 1)`; uniform: `U[0,1)`.
pub fn noise_outliers(kind: NoiseKind, shape: ImageShape, count: usize, rng_seed: u64) -> Result<UnlabeledImageSet> {
    if count == 0 {
        return Err(Error::Config("noise count must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let dims = (count, shape.channels, shape.height, shape.width);
    let (images, name, provenance) = match kind {
        NoiseKind::Gaussian => (
            Array4::from_shape_simple_fn(dims, || {
                let z: f32 = StandardNormal.sample(&mut rng);
                (0.5 + 0.5 * z).clamp(0.0, 1.0)
            }),
            "gaussian",
            Provenance::NoiseGaussian,
        ),
        NoiseKind::Uniform => (
            Array4::from_shape_simple_fn(dims, || rng.random::<f32>()),
            "uniform",
            Provenance::NoiseUniform,
        ),
    };
    UnlabeledImageSet::new(name, images, provenance)
}

impl ImageShape {
    pub fn of_view(image: &ArrayView3<'_, f32>) -> Self {
        let (c, h, w) = image.dim();
        ImageShape::new(c, h, w)
    }
}

#[cfg(test)]
mod tests;
