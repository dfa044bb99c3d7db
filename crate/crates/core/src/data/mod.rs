//! Image sets, dataset loaders and the distilled-set container.

mod blobs;
mod container;
mod external;
mod idx;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{s, Array4, ArrayView3, Axis};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::forge::Corruption;

pub use blobs::{generate_blob_outliers, generate_blobs, BlobConfig, BlobLayout, BlobShape};
pub use container::{
    load_distilled, load_unlabeled, save_distilled, save_unlabeled, read_f32_array, write_f32_array,
    Manifest, FORMAT_VERSION,
};
pub use external::{load_image_directory, resize_bilinear};
pub use idx::{load_idx_images, load_mnist_dir};

/// `(channels, height, width)` of every image in a set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        ImageShape {
            channels,
            height,
            width,
        }
    }

    pub fn of(images: &Array4<f32>) -> Self {
        let d = images.dim();
        ImageShape::new(d.1, d.2, d.3)
    }

    pub fn pixels(&self) -> usize {
        self.channels * self.height * self.width
    }
}

impl fmt::Display for ImageShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

impl FromStr for ImageShape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<usize> = s
            .split('x')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Validation(format!("bad shape `{s}`")))?;
        match parts.as_slice() {
            [c, h, w] => Ok(ImageShape::new(*c, *h, *w)),
            _ => Err(Error::Validation(format!("bad shape `{s}`"))),
        }
    }
}

fn check_unit_range(images: &Array4<f32>, what: &str) -> Result<()> {
    if let Some(v) = images.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Validation(format!(
            "{what}: pixel value {v} outside [0, 1]"
        )));
    }
    Ok(())
}

/// In-distribution images with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImageSet {
    name: String,
    images: Array4<f32>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabeledImageSet {
    pub fn new(
        name: impl Into<String>,
        images: Array4<f32>,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        let name = name.into();
        if num_classes == 0 {
            return Err(Error::Validation(format!("{name}: zero classes")));
        }
        if labels.len() != images.dim().0 {
            return Err(Error::Validation(format!(
                "{name}: {} labels for {} images",
                labels.len(),
                images.dim().0
            )));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Validation(format!(
                "{name}: label {l} outside [0, {num_classes})"
            )));
        }
        check_unit_range(&images, &name)?;
        Ok(LabeledImageSet {
            name,
            images,
            labels,
            num_classes,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn images(&self) -> &Array4<f32> {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn shape(&self) -> ImageShape {
        ImageShape::of(&self.images)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> ArrayView3<'_, f32> {
        self.images.index_axis(Axis(0), i)
    }

    /// Indices of class `c` in dataset order.
    pub fn class_indices(&self, c: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == c)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledImageSet {
        LabeledImageSet {
            name: self.name.clone(),
            images: self.images.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// First `n` samples of each class, in dataset order.
    pub fn take_per_class(&self, n: usize) -> LabeledImageSet {
        let mut idx: Vec<usize> = (0..self.num_classes)
            .flat_map(|c| self.class_indices(c).into_iter().take(n))
            .collect();
        idx.sort_unstable();
        self.subset(&idx)
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }
}

/// Where an unlabeled outlier set came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Provenance {
    PseudoCorruption,
    NoiseGaussian,
    NoiseUniform,
    ExternalDirectory,
}

impl Provenance {
    pub fn as_str(&self) -> &'static str {
        match self {
            Provenance::PseudoCorruption => "pseudo-corruption",
            Provenance::NoiseGaussian => "noise-gaussian",
            Provenance::NoiseUniform => "noise-uniform",
            Provenance::ExternalDirectory => "external-directory",
        }
    }

    pub fn is_noise(&self) -> bool {
        matches!(self, Provenance::NoiseGaussian | Provenance::NoiseUniform)
    }
}

impl FromStr for Provenance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "pseudo-corruption" => Provenance::PseudoCorruption,
            "noise-gaussian" => Provenance::NoiseGaussian,
            "noise-uniform" => Provenance::NoiseUniform,
            "external-directory" => Provenance::ExternalDirectory,
            _ => return Err(Error::Validation(format!("unknown provenance `{s}`"))),
        })
    }
}

/// Outlier images without labels; optionally tagged with the corruption
/// that produced each row.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledImageSet {
    name: String,
    images: Array4<f32>,
    provenance: Provenance,
    tags: Option<Vec<Corruption>>,
}

impl UnlabeledImageSet {
    pub fn new(name: impl Into<String>, images: Array4<f32>, provenance: Provenance) -> Result<Self> {
        let name = name.into();
        check_unit_range(&images, &name)?;
        Ok(UnlabeledImageSet {
            name,
            images,
            provenance,
            tags: None,
        })
    }

    pub fn with_tags(mut self, tags: Vec<Corruption>) -> Result<Self> {
        if tags.len() != self.len() {
            return Err(Error::Validation(format!(
                "{}: {} tags for {} images",
                self.name,
                tags.len(),
                self.len()
            )));
        }
        self.tags = Some(tags);
        Ok(self)
    }

    /// An empty set with the given image shape.
    pub fn empty(name: impl Into<String>, shape: ImageShape) -> Self {
        UnlabeledImageSet {
            name: name.into(),
            images: Array4::zeros((0, shape.channels, shape.height, shape.width)),
            provenance: Provenance::ExternalDirectory,
            tags: None,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn images(&self) -> &Array4<f32> {
        &self.images
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn tags(&self) -> Option<&[Corruption]> {
        self.tags.as_deref()
    }

    pub fn shape(&self) -> ImageShape {
        ImageShape::of(&self.images)
    }

    pub fn len(&self) -> usize {
        self.images.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn subset(&self, indices: &[usize]) -> UnlabeledImageSet {
        UnlabeledImageSet {
            name: self.name.clone(),
            images: self.images.select(Axis(0), indices),
            provenance: self.provenance,
            tags: self
                .tags
                .as_ref()
                .map(|t| indices.iter().map(|&i| t[i]).collect()),
        }
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    /// Requires every image to match `shape`.
    pub fn ensure_shape(&self, shape: ImageShape) -> Result<()> {
        if self.shape() != shape {
            return Err(Error::Validation(format!(
                "{}: image shape {} does not match {}",
                self.name,
                self.shape(),
                shape
            )));
        }
        Ok(())
    }
}

/// Which matching objective produced a distilled set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DistillMethod {
    Dsa,
    Mtt,
    SingleSetDsa,
}

impl DistillMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            DistillMethod::Dsa => "dsa",
            DistillMethod::Mtt => "mtt",
            DistillMethod::SingleSetDsa => "single-set-dsa",
        }
    }
}

impl FromStr for DistillMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "dsa" => DistillMethod::Dsa,
            "mtt" => DistillMethod::Mtt,
            "single-set" | "single-set-dsa" => DistillMethod::SingleSetDsa,
            _ => return Err(Error::Validation(format!("unknown method `{s}`"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OutlierMode {
    None,
    Oe,
    Poe,
}

impl OutlierMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            OutlierMode::None => "none",
            OutlierMode::Oe => "oe",
            OutlierMode::Poe => "poe",
        }
    }
}

impl FromStr for OutlierMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => OutlierMode::None,
            "oe" => OutlierMode::Oe,
            "poe" => OutlierMode::Poe,
            _ => return Err(Error::Validation(format!("unknown outlier mode `{s}`"))),
        })
    }
}

/// The learnable condensed dataset `S = S_in ∪ S_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct DistilledSet {
    pub s_in_images: Array4<f32>,
    pub s_in_labels: Vec<usize>,
    pub s_out_images: Array4<f32>,
    pub num_classes: usize,
    pub ipc: usize,
    pub method: DistillMethod,
    pub outlier_mode: OutlierMode,
    pub rng_seed: u64,
    pub lambda: f64,
    pub corruption_assignment: Option<Vec<Corruption>>,
    pub config_checksum: Option<String>,
}

impl DistilledSet {
    pub fn shape(&self) -> ImageShape {
        ImageShape::of(&self.s_in_images)
    }

    pub fn s_out_len(&self) -> usize {
        self.s_out_images.dim().0
    }

    /// Checks the structural invariants of the container.
    pub fn validate(&self) -> Result<()> {
        let n = self.s_in_images.dim().0;
        if n != self.num_classes * self.ipc || self.s_in_labels.len() != n {
            return Err(Error::Validation(format!(
                "distilled set holds {n} images / {} labels, expected {} x {}",
                self.s_in_labels.len(),
                self.num_classes,
                self.ipc
            )));
        }
        let mut hist = vec![0usize; self.num_classes];
        for &l in &self.s_in_labels {
            if l >= self.num_classes {
                return Err(Error::Validation(format!("label {l} out of range")));
            }
            hist[l] += 1;
        }
        if hist.iter().any(|&h| h != self.ipc) {
            return Err(Error::Validation(format!("unbalanced labels {hist:?}")));
        }
        if self.s_out_len() > 0 && ImageShape::of(&self.s_out_images) != self.shape() {
            return Err(Error::Validation("s_out shape differs from s_in".into()));
        }
        if self.outlier_mode == OutlierMode::None && self.s_out_len() > 0 {
            return Err(Error::Validation("outlier_mode none with non-empty s_out".into()));
        }
        if let Some(tags) = &self.corruption_assignment {
            if tags.len() != self.s_out_len() {
                return Err(Error::Validation("corruption assignment length mismatch".into()));
            }
        }
        Ok(())
    }

    /// S_in as a labeled set (for evaluation-time training and export).
    pub fn s_in_set(&self) -> Result<LabeledImageSet> {
        LabeledImageSet::new(
            "s_in",
            self.s_in_images.clone(),
            self.s_in_labels.clone(),
            self.num_classes,
        )
    }
}

/// Which half of a dataset to load.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::Validation(format!("unknown split `{s}`"))),
        }
    }
}

/// A dataset location: a builtin generator or an on-disk MNIST-format directory.
#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    Blobs(BlobConfig),
    MnistDir(PathBuf),
}

impl DatasetSource {
    /// Parses `blobs`, `blobs:classes=2,count=64,size=8`, or a directory path.
    pub fn parse(s: &str) -> Result<Self> {
        if s == "blobs" {
            return Ok(DatasetSource::Blobs(BlobConfig::default()));
        }
        if let Some(rest) = s.strip_prefix("blobs:") {
            return Ok(DatasetSource::Blobs(BlobConfig::parse(rest)?));
        }
        Ok(DatasetSource::MnistDir(PathBuf::from(s)))
    }
}

pub fn load_dataset(source: &DatasetSource, split: Split) -> Result<LabeledImageSet> {
    match source {
        DatasetSource::Blobs(cfg) => generate_blobs(cfg, split),
        DatasetSource::MnistDir(dir) => load_mnist_dir(dir, split),
    }
}

/// Loads an outlier set: a saved container, a bare IDX image file, or a
/// directory of ordinary image files (resized to `shape`).
pub fn load_outlier_source(path: &Path, shape: ImageShape) -> Result<UnlabeledImageSet> {
    let set = if path.is_dir() && path.join("images.bin").exists() {
        load_unlabeled(path)?
    } else if path.is_file() {
        load_idx_images(path, shape)?
    } else if path.is_dir() {
        load_image_directory(path, shape)?
    } else {
        return Err(Error::Load {
            path: path.to_path_buf(),
            reason: "no such file or directory".into(),
        });
    };
    set.ensure_shape(shape)?;
    Ok(set)
}

/// Draws the initial distilled set: `ipc` real images per class and
/// `outlier_count` outliers, all from one seeded stream.
pub fn init_distilled(
    t_in: &LabeledImageSet,
    t_out: &UnlabeledImageSet,
    ipc: usize,
    outlier_count: usize,
    rng_seed: u64,
) -> Result<DistilledSet> {
    if ipc == 0 {
        return Err(Error::Initialization("ipc must be at least 1".into()));
    }
    if outlier_count > t_out.len() {
        return Err(Error::Initialization(format!(
            "requested {outlier_count} outliers but only {} available",
            t_out.len()
        )));
    }
    if outlier_count > 0 && t_out.shape() != t_in.shape() {
        return Err(Error::Initialization(format!(
            "outlier shape {} differs from {}",
            t_out.shape(),
            t_in.shape()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut picks = Vec::with_capacity(ipc * t_in.num_classes());
    for c in 0..t_in.num_classes() {
        let members = t_in.class_indices(c);
        if members.len() < ipc {
            return Err(Error::Initialization(format!(
                "class {c} has {} samples, fewer than ipc = {ipc}",
                members.len()
            )));
        }
        picks.extend(
            index::sample(&mut rng, members.len(), ipc)
                .into_iter()
                .map(|i| members[i]),
        );
    }
    let s_in_images = t_in.images().select(Axis(0), &picks);
    let s_in_labels = picks.iter().map(|&i| t_in.labels()[i]).collect();

    let (out_idx, assignment) = match t_out.tags() {
        _ if outlier_count == 0 => (Vec::new(), None),
        Some(tags) if t_out.provenance() == Provenance::PseudoCorruption && outlier_count > 0 => {
            let (idx, assigned) = round_robin_by_tag(tags, outlier_count, &mut rng);
            (idx, Some(assigned))
        }
        _ => {
            let idx = index::sample(&mut rng, t_out.len(), outlier_count).into_vec();
            (idx, None)
        }
    };
    let shape = t_in.shape();
    let s_out_images = if out_idx.is_empty() {
        Array4::zeros((0, shape.channels, shape.height, shape.width))
    } else {
        t_out.images().select(Axis(0), &out_idx)
    };

    let outlier_mode = if outlier_count == 0 {
        OutlierMode::None
    } else if t_out.provenance() == Provenance::PseudoCorruption {
        OutlierMode::Poe
    } else {
        OutlierMode::Oe
    };
    let set = DistilledSet {
        s_in_images,
        s_in_labels,
        s_out_images,
        num_classes: t_in.num_classes(),
        ipc,
        method: DistillMethod::Dsa,
        outlier_mode,
        rng_seed,
        lambda: 0.0,
        corruption_assignment: assignment,
        config_checksum: None,
    };
    set.validate()?;
    Ok(set)
}

/// Row `i` comes from the pool of tag `kinds[i mod k]`; exhausted pools are
/// skipped.
fn round_robin_by_tag(
    tags: &[Corruption],
    count: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<usize>, Vec<Corruption>) {
    let mut kinds: Vec<Corruption> = Corruption::ALL
        .iter()
        .copied()
        .filter(|k| tags.contains(k))
        .collect();
    kinds.dedup();
    let mut pools: Vec<Vec<usize>> = kinds
        .iter()
        .map(|k| {
            let members: Vec<usize> = (0..tags.len()).filter(|&i| tags[i] == *k).collect();
            // Shuffled order via sampling without replacement.
            index::sample(rng, members.len(), members.len())
                .into_iter()
                .map(|j| members[j])
                .collect()
        })
        .collect();
    let mut idx = Vec::with_capacity(count);
    let mut assigned = Vec::with_capacity(count);
    let mut k = 0;
    while idx.len() < count {
        let slot = k % kinds.len();
        k += 1;
        if let Some(i) = pools[slot].pop() {
            idx.push(i);
            assigned.push(kinds[slot]);
        }
    }
    (idx, assigned)
}

/// `[0,1]` check over a whole 4-D array, for tests and validation.
pub fn pixel_range(images: &Array4<f32>) -> (f32, f32) {
    images
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
}

/// Converts a block of rows to `f64` for the autodiff engine.
pub fn rows_f64(images: &Array4<f32>, rows: &[usize]) -> ndarray::ArrayD<f64> {
    let d = images.dim();
    let mut out = ndarray::Array4::<f64>::zeros((rows.len(), d.1, d.2, d.3));
    for (o, &r) in rows.iter().enumerate() {
        out.slice_mut(s![o, .., .., ..])
            .assign(&images.slice(s![r, .., .., ..]).mapv(f64::from));
    }
    out.into_dyn()
}

pub fn all_f64(images: &Array4<f32>) -> ndarray::ArrayD<f64> {
    images.mapv(f64::from).into_dyn()
}

#[cfg(test)]
mod tests;
