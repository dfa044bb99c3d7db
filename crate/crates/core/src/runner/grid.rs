//! Tiled PPM export of a distilled set.

use std::fs;
use std::path::Path;

use ndarray::{Array3, ArrayView3};

use crate::data::{load_distilled, DistilledSet};
use crate::error::{Error, Result};
use crate::forge::Corruption;

/// `[0, 1] → [0, 255]`, rounding half to even.
pub fn to_byte(v: f32) -> u8 {
    (f64::from(v).clamp(0.0, 1.0) * 255.0).round_ties_even() as u8
}

/// Rows of tiles: one per class for `s_in`, then one per corruption tag in
/// jigsaw, invert, mosaic, speckle, flip order (or rows of `ipc` untagged
/// outliers). Returns an RGB array `(height, width, 3)`.
pub fn grid_pixels(s: &DistilledSet) -> Result<Array3<u8>> {
    let mut rows: Vec<Vec<usize>> = (0..s.num_classes)
        .map(|c| (0..s.s_in_labels.len()).filter(|&i| s.s_in_labels[i] == c).collect())
        .collect();
    let n_in = rows.len();
    let out_rows: Vec<Vec<usize>> = match &s.corruption_assignment {
        Some(tags) => Corruption::ALL
            .iter()
            .map(|k| (0..tags.len()).filter(|&i| tags[i] == *k).collect::<Vec<_>>())
            .filter(|r| !r.is_empty())
            .collect(),
        None => (0..s.s_out_len())
            .collect::<Vec<_>>()
            .chunks(s.ipc.max(1))
            .map(<[usize]>::to_vec)
            .collect(),
    };
    rows.extend(out_rows);
    let shape = s.shape();
    if shape.channels != 1 && shape.channels != 3 {
        return Err(Error::Config(format!("cannot render {} channels", shape.channels)));
    }
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0).max(1);
    let (h, w) = (shape.height, shape.width);
    let mut px = Array3::<u8>::zeros((rows.len() * h, cols * w, 3));
    for (r, row) in rows.iter().enumerate() {
        for (c, &i) in row.iter().enumerate() {
            let img: ArrayView3<'_, f32> = if r < n_in {
                s.s_in_images.slice(ndarray::s![i, .., .., ..])
            } else {
                s.s_out_images.slice(ndarray::s![i, .., .., ..])
            };
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..3 {
                        let src = if shape.channels == 1 { 0 } else { ch };
                        px[[r * h + y, c * w + x, ch]] = to_byte(img[[src, y, x]]);
                    }
                }
            }
        }
    }
    Ok(px)
}

/// Writes a binary PPM (P6) whose header carries the config checksum.
pub fn cmd_export_grid(dir: &Path, out: &Path) -> Result<()> {
    let s = load_distilled(dir)?;
    let px = grid_pixels(&s)?;
    let (h, w, _) = px.dim();
    let checksum = s.config_checksum.as_deref().unwrap_or("none");
    let mut bytes = format!("P6\n# config_checksum={checksum}\n{w} {h}\n255\n").into_bytes();
    bytes.extend(px.iter());
    fs::write(out, bytes).map_err(|e| Error::Write {
        path: out.to_path_buf(),
        reason: e.to_string(),
    })
}
