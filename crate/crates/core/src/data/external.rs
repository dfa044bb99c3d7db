use std::path::Path;

use ndarray::{s, Array3, Array4, ArrayView3};

use super::{ImageShape, Provenance, UnlabeledImageSet};
use crate::error::{Error, Result};

const EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "pgm", "ppm", "pnm"];

/// Bilinear resize with half-pixel centres; edges are clamped.
pub fn resize_bilinear(img: ArrayView3<'_, f32>, height: usize, width: usize) -> Array3<f32> {
    let (c, h, w) = img.dim();
    if h == height && w == width {
        return img.to_owned();
    }
    let mut out = Array3::<f32>::zeros((c, height, width));
    let sy = h as f64 / height as f64;
    let sx = w as f64 / width as f64;
    for oy in 0..height {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f64;
        for ox in 0..width {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f64;
            for ch in 0..c {
                let v = (1.0 - wy) * ((1.0 - wx) * img[[ch, y0, x0]] as f64 + wx * img[[ch, y0, x1]] as f64)
                    + wy * ((1.0 - wx) * img[[ch, y1, x0]] as f64 + wx * img[[ch, y1, x1]] as f64);
                out[[ch, oy, ox]] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    out
}

fn convert_channels(img: Array3<f32>, channels: usize) -> Array3<f32> {
    let (c, h, w) = img.dim();
    if c == channels {
        return img;
    }
    match (c, channels) {
        (1, n) => {
            let mut out = Array3::zeros((n, h, w));
            for ch in 0..n {
                out.slice_mut(s![ch, .., ..]).assign(&img.slice(s![0, .., ..]));
            }
            out
        }
        (3, 1) => {
            let mut out = Array3::zeros((1, h, w));
            for y in 0..h {
                for x in 0..w {
                    out[[0, y, x]] =
                        0.299 * img[[0, y, x]] + 0.587 * img[[1, y, x]] + 0.114 * img[[2, y, x]];
                }
            }
            out
        }
        _ => {
            let mean = img.mean_axis(ndarray::Axis(0)).unwrap();
            let mut out = Array3::zeros((channels, h, w));
            for ch in 0..channels {
                out.slice_mut(s![ch, .., ..]).assign(&mean);
            }
            out
        }
    }
}

/// Channel conversion plus bilinear resize of every image to `shape`.
pub(crate) fn conform(images: Array4<f32>, shape: ImageShape) -> Array4<f32> {
    if ImageShape::of(&images) == shape {
        return images;
    }
    let n = images.dim().0;
    let mut out = Array4::zeros((n, shape.channels, shape.height, shape.width));
    for i in 0..n {
        let img = convert_channels(images.slice(s![i, .., .., ..]).to_owned(), shape.channels);
        let r = resize_bilinear(img.view(), shape.height, shape.width);
        out.slice_mut(s![i, .., .., ..]).assign(&r);
    }
    out
}

/// Loads every image file in `dir` (sorted by name) as an outlier set.
pub fn load_image_directory(dir: &Path, shape: ImageShape) -> Result<UnlabeledImageSet> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::Load {
            path: dir.to_path_buf(),
            reason: e.to_string(),
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Load {
            path: dir.to_path_buf(),
            reason: "directory holds no readable images".into(),
        });
    }
    let mut images = Array4::zeros((paths.len(), shape.channels, shape.height, shape.width));
    for (i, p) in paths.iter().enumerate() {
        let decoded = image::open(p).map_err(|e| Error::Load {
            path: p.clone(),
            reason: e.to_string(),
        })?;
        let arr = if shape.channels == 1 {
            let g = decoded.to_luma8();
            let (w, h) = g.dimensions();
            Array3::from_shape_fn((1, h as usize, w as usize), |(_, y, x)| {
                g.get_pixel(x as u32, y as u32)[0] as f32 / 255.0
            })
        } else {
            let rgb = decoded.to_rgb8();
            let (w, h) = rgb.dimensions();
            let a = Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
                rgb.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
            });
            convert_channels(a, shape.channels)
        };
        let r = resize_bilinear(arr.view(), shape.height, shape.width);
        images.slice_mut(s![i, .., .., ..]).assign(&r);
    }
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "external".into());
    UnlabeledImageSet::new(name, images, Provenance::ExternalDirectory)
}
