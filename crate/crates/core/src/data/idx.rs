use std::fs::File;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use ndarray::Array4;

use super::{ImageShape, LabeledImageSet, Provenance, Split, UnlabeledImageSet};
use crate::error::{Error, Result};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn load_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Load {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let file = File::open(path).map_err(|e| load_err(path, e.to_string()))?;
    let mut buf = Vec::new();
    let gz = path.extension().is_some_and(|e| e == "gz");
    let res = if gz {
        GzDecoder::new(BufReader::new(file)).read_to_end(&mut buf)
    } else {
        BufReader::new(file).read_to_end(&mut buf)
    };
    res.map_err(|e| load_err(path, e.to_string()))?;
    Ok(buf)
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| load_err(path, "truncated IDX header"))
}

/// Decodes an IDX3 unsigned-byte image file into `[n, 1, rows, cols]` in `[0,1]`.
fn parse_images(bytes: &[u8], path: &Path) -> Result<Array4<f32>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IMAGES_MAGIC {
        return Err(load_err(path, format!("bad image magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    let body = &bytes[16..];
    if body.len() != n * rows * cols {
        return Err(load_err(
            path,
            format!("expected {} pixel bytes, found {}", n * rows * cols, body.len()),
        ));
    }
    let data = body.iter().map(|&b| b as f32 / 255.0).collect();
    Array4::from_shape_vec((n, 1, rows, cols), data).map_err(|e| load_err(path, e.to_string()))
}

fn parse_labels(bytes: &[u8], path: &Path) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != LABELS_MAGIC {
        return Err(load_err(path, format!("bad label magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(load_err(path, format!("expected {n} labels, found {}", body.len())));
    }
    Ok(body.iter().map(|&b| b as usize).collect())
}

fn find_file(dir: &Path, stems: &[&str]) -> Result<PathBuf> {
    for stem in stems {
        for suffix in ["", ".gz"] {
            let p = dir.join(format!("{stem}{suffix}"));
            if p.is_file() {
                return Ok(p);
            }
        }
    }
    Err(load_err(
        &dir.join(stems[0]),
        "file not found (also tried .gz and dotted variants)",
    ))
}

/// Reads the standard MNIST file quartet from `dir` (raw or gzipped).
pub fn load_mnist_dir(dir: &Path, split: Split) -> Result<LabeledImageSet> {
    let (img_stems, lbl_stems): (&[&str], &[&str]) = match split {
        Split::Train => (
            &["train-images-idx3-ubyte", "train-images.idx3-ubyte"],
            &["train-labels-idx1-ubyte", "train-labels.idx1-ubyte"],
        ),
        Split::Test => (
            &["t10k-images-idx3-ubyte", "t10k-images.idx3-ubyte"],
            &["t10k-labels-idx1-ubyte", "t10k-labels.idx1-ubyte"],
        ),
    };
    let img_path = find_file(dir, img_stems)?;
    let lbl_path = find_file(dir, lbl_stems)?;
    let images = parse_images(&read_all(&img_path)?, &img_path)?;
    let labels = parse_labels(&read_all(&lbl_path)?, &lbl_path)?;
    if labels.len() != images.dim().0 {
        return Err(Error::Validation(format!(
            "{}: {} images but {} labels",
            dir.display(),
            images.dim().0,
            labels.len()
        )));
    }
    let num_classes = labels.iter().copied().max().map_or(1, |m| m + 1).max(10);
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "mnist".into());
    LabeledImageSet::new(name, images, labels, num_classes)
}

/// Reads a bare IDX3 image file as an outlier set, resizing to `shape` if needed.
pub fn load_idx_images(path: &Path, shape: ImageShape) -> Result<UnlabeledImageSet> {
    let images = parse_images(&read_all(path)?, path)?;
    let images = super::external::conform(images, shape);
    let name = path
        .file_name()
        .map(|n| {
            let n = n.to_string_lossy();
            n.split('.').next().unwrap_or(&n).to_string()
        })
        .unwrap_or_default();
    UnlabeledImageSet::new(name, images, Provenance::ExternalDirectory)
}

#[cfg(test)]
pub(crate) fn encode_images(images: &Array4<f32>) -> Vec<u8> {
    let (n, _, h, w) = images.dim();
    let mut out = Vec::with_capacity(16 + n * h * w);
    out.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    for d in [n, h, w] {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend(images.iter().map(|&v| (v * 255.0).round() as u8));
    out
}

#[cfg(test)]
pub(crate) fn encode_labels(labels: &[usize]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend(labels.iter().map(|&l| l as u8));
    out
}
