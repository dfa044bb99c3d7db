//! Differentiable siamese augmentation.
//!
//! A policy is a list of stages; in single mode one stage is drawn per call,
//! otherwise every stage runs in order. All parameters of one call live in
//! an [`AugmentDraw`], so applying the same draw to a synthetic batch and a
//! real batch transforms both identically.

use std::f64::consts::PI;
use std::rc::Rc;

use ndarray::{ArrayD, Axis, IxDyn};
use rand::Rng;

use crate::autograd::{no_grad, ResampleMap, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transform {
    CropPad,
    Cutout,
    Scale,
    Rotate,
    Brightness,
    Saturation,
    Contrast,
    Flip,
}

/// Magnitudes for each transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    /// Maximum translation as a fraction of the side.
    pub crop_pad: f64,
    pub cutout_ratio: f64,
    /// Scale factors lie in `[1/scale_ratio, scale_ratio]`.
    pub scale_ratio: f64,
    pub rotate_degrees: f64,
    pub brightness: f64,
    pub saturation: f64,
    pub contrast: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams {
            crop_pad: 0.125,
            cutout_ratio: 0.5,
            scale_ratio: 1.2,
            rotate_degrees: 15.0,
            brightness: 1.0,
            saturation: 2.0,
            contrast: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentPolicy {
    pub stages: Vec<Vec<Transform>>,
    /// Draw one stage per call instead of chaining all of them.
    pub single: bool,
    pub params: AugmentParams,
}

impl AugmentPolicy {
    pub fn identity() -> Self {
        AugmentPolicy {
            stages: Vec::new(),
            single: true,
            params: AugmentParams::default(),
        }
    }

    /// Parses an underscore-separated stage list such as
    /// `color_crop_cutout_scale_rotate`; `color` expands to
    /// brightness, saturation and contrast.
    pub fn parse(s: &str) -> Result<Self> {
        let mut stages = Vec::new();
        for tok in s.split('_').filter(|t| !t.is_empty()) {
            stages.push(match tok {
                "none" | "identity" => continue,
                "color" => vec![Transform::Brightness, Transform::Saturation, Transform::Contrast],
                "brightness" => vec![Transform::Brightness],
                "saturation" => vec![Transform::Saturation],
                "contrast" => vec![Transform::Contrast],
                "crop" => vec![Transform::CropPad],
                "cutout" => vec![Transform::Cutout],
                "scale" => vec![Transform::Scale],
                "rotate" => vec![Transform::Rotate],
                "flip" => vec![Transform::Flip],
                other => {
                    return Err(Error::Config(format!(
                        "augmentation `{other}` is not an available differentiable transform"
                    )))
                }
            });
        }
        Ok(AugmentPolicy {
            stages,
            single: true,
            params: AugmentParams::default(),
        })
    }

    /// Default stage list; flip is left out for digits.
    pub fn standard(digits: bool) -> Self {
        let spec = if digits {
            "color_crop_cutout_scale_rotate"
        } else {
            "color_crop_cutout_flip_scale_rotate"
        };
        Self::parse(spec).expect("builtin policy parses")
    }

    pub fn is_identity(&self) -> bool {
        self.stages.iter().all(|s| s.is_empty())
    }

    pub fn name(&self) -> String {
        if self.is_identity() {
            return "none".into();
        }
        self.stages
            .iter()
            .map(|st| {
                if st.len() == 3 && st[0] == Transform::Brightness {
                    "color"
                } else {
                    match st[0] {
                        Transform::CropPad => "crop",
                        Transform::Cutout => "cutout",
                        Transform::Scale => "scale",
                        Transform::Rotate => "rotate",
                        Transform::Brightness => "brightness",
                        Transform::Saturation => "saturation",
                        Transform::Contrast => "contrast",
                        Transform::Flip => "flip",
                    }
                }
            })
            .collect::<Vec<_>>()
            .join("_")
    }

    /// Samples every parameter a call may need for images of `height × width`.
    pub fn sample(&self, height: usize, width: usize, rng: &mut impl Rng) -> AugmentDraw {
        if self.is_identity() {
            return AugmentDraw::identity();
        }
        let p = &self.params;
        let active: Vec<Transform> = if self.single {
            self.stages[rng.random_range(0..self.stages.len())].clone()
        } else {
            self.stages.iter().flatten().copied().collect()
        };
        let shift_h = (height as f64 * p.crop_pad + 0.5) as i64;
        let shift_w = (width as f64 * p.crop_pad + 0.5) as i64;
        let cut_h = (height as f64 * p.cutout_ratio + 0.5) as usize;
        let cut_w = (width as f64 * p.cutout_ratio + 0.5) as usize;
        let lo = 1.0 / p.scale_ratio;
        AugmentDraw {
            active,
            brightness: (rng.random::<f64>() - 0.5) * p.brightness,
            saturation: rng.random::<f64>() * p.saturation,
            contrast: rng.random::<f64>() + p.contrast,
            shift: (
                rng.random_range(-shift_h..=shift_h),
                rng.random_range(-shift_w..=shift_w),
            ),
            cutout_center: (
                rng.random_range(0..height + (1 - height % 2)),
                rng.random_range(0..width + (1 - width % 2)),
            ),
            cutout_size: (cut_h, cut_w),
            scale: (
                rng.random::<f64>() * (p.scale_ratio - lo) + lo,
                rng.random::<f64>() * (p.scale_ratio - lo) + lo,
            ),
            angle: (rng.random::<f64>() - 0.5) * 2.0 * p.rotate_degrees / 180.0 * PI,
            flip: rng.random::<f64>() < 0.5,
        }
    }
}

/// One sampled set of augmentation parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentDraw {
    pub active: Vec<Transform>,
    pub brightness: f64,
    pub saturation: f64,
    pub contrast: f64,
    /// Integer translation `(dy, dx)`.
    pub shift: (i64, i64),
    pub cutout_center: (usize, usize),
    pub cutout_size: (usize, usize),
    /// `(sx, sy)`.
    pub scale: (f64, f64),
    /// Radians.
    pub angle: f64,
    pub flip: bool,
}

impl AugmentDraw {
    pub fn identity() -> Self {
        AugmentDraw {
            active: Vec::new(),
            brightness: 0.0,
            saturation: 1.0,
            contrast: 1.0,
            shift: (0, 0),
            cutout_center: (0, 0),
            cutout_size: (0, 0),
            scale: (1.0, 1.0),
            angle: 0.0,
            flip: false,
        }
    }

    /// A draw that applies exactly `active` with the given fields.
    pub fn only(active: Vec<Transform>) -> Self {
        AugmentDraw {
            active,
            ..Self::identity()
        }
    }
}

fn shift_map(h: usize, w: usize, dy: i64, dx: i64) -> ResampleMap {
    let taps = (0..h * w)
        .map(|p| {
            let (y, x) = ((p / w) as i64 + dy, (p % w) as i64 + dx);
            if y >= 0 && y < h as i64 && x >= 0 && x < w as i64 {
                vec![(y as usize * w + x as usize, 1.0)]
            } else {
                vec![]
            }
        })
        .collect();
    ResampleMap::from_taps(h, w, taps)
}

fn flip_map(h: usize, w: usize) -> ResampleMap {
    let taps = (0..h * w)
        .map(|p| vec![((p / w) * w + (w - 1 - p % w), 1.0)])
        .collect();
    ResampleMap::from_taps(h, w, taps)
}

/// Bilinear sampling through the affine map `[[a, b], [c, d]]` in
/// normalised corner-aligned coordinates, zero outside the image.
fn affine_map(h: usize, w: usize, m: [[f64; 2]; 2]) -> ResampleMap {
    let norm = |i: usize, n: usize| if n > 1 { -1.0 + 2.0 * i as f64 / (n - 1) as f64 } else { 0.0 };
    let denorm = |u: f64, n: usize| if n > 1 { (u + 1.0) * (n - 1) as f64 / 2.0 } else { 0.0 };
    let taps = (0..h * w)
        .map(|p| {
            let (yn, xn) = (norm(p / w, h), norm(p % w, w));
            let sx = m[0][0] * xn + m[0][1] * yn;
            let sy = m[1][0] * xn + m[1][1] * yn;
            let (fx, fy) = (denorm(sx, w), denorm(sy, h));
            let (x0, y0) = (fx.floor(), fy.floor());
            let (wx, wy) = (fx - x0, fy - y0);
            let mut t = Vec::with_capacity(4);
            for (yy, wyy) in [(y0, 1.0 - wy), (y0 + 1.0, wy)] {
                for (xx, wxx) in [(x0, 1.0 - wx), (x0 + 1.0, wx)] {
                    let weight = wyy * wxx;
                    if weight != 0.0 && yy >= 0.0 && yy < h as f64 && xx >= 0.0 && xx < w as f64 {
                        t.push((yy as usize * w + xx as usize, weight));
                    }
                }
            }
            t
        })
        .collect();
    ResampleMap::from_taps(h, w, taps)
}

fn cutout_mask(shape: &[usize], center: (usize, usize), size: (usize, usize)) -> Var {
    let (h, w) = (shape[2], shape[3]);
    let mut m = ArrayD::<f64>::ones(IxDyn(&[1, 1, h, w]));
    let y0 = center.0 as i64 - (size.0 / 2) as i64;
    let x0 = center.1 as i64 - (size.1 / 2) as i64;
    for y in y0.max(0)..(y0 + size.0 as i64).min(h as i64) {
        for x in x0.max(0)..(x0 + size.1 as i64).min(w as i64) {
            m[[0, 0, y as usize, x as usize]] = 0.0;
        }
    }
    Var::constant(m)
}

/// Applies the transforms of `draw` to a `[N, C, H, W]` batch.
pub fn diff_augment(batch: &Var, draw: &AugmentDraw) -> Result<Var> {
    let shape = batch.shape().to_vec();
    if shape.len() != 4 {
        return Err(Error::Validation(format!("augmentation expects NCHW, got {shape:?}")));
    }
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let mut x = batch.clone();
    for t in &draw.active {
        x = match t {
            Transform::Brightness => x.add_scalar(draw.brightness).clamp(0.0, 1.0),
            Transform::Saturation => {
                let mean = x.sum_to(&[n, 1, h, w]).mul_scalar(1.0 / c as f64);
                x.sub(&mean).mul_scalar(draw.saturation).add(&mean)
            }
            Transform::Contrast => {
                let mean = x.sum_to(&[n, 1, 1, 1]).mul_scalar(1.0 / (c * h * w) as f64);
                x.sub(&mean).mul_scalar(draw.contrast).add(&mean)
            }
            Transform::CropPad => x.resample(&Rc::new(shift_map(h, w, draw.shift.0, draw.shift.1))),
            Transform::Cutout => x.mul(&cutout_mask(&shape, draw.cutout_center, draw.cutout_size)),
            Transform::Scale => {
                let (sx, sy) = draw.scale;
                x.resample(&Rc::new(affine_map(h, w, [[sx, 0.0], [0.0, sy]])))
            }
            Transform::Rotate => {
                let (s, co) = draw.angle.sin_cos();
                x.resample(&Rc::new(affine_map(h, w, [[co, s], [-s, co]])))
            }
            Transform::Flip => {
                if draw.flip {
                    x.resample(&Rc::new(flip_map(h, w)))
                } else {
                    x
                }
            }
        };
    }
    Ok(x)
}

/// Augments each image with its own draw, outside the autodiff graph.
pub fn augment_each(images: &ArrayD<f64>, policy: &AugmentPolicy, rng: &mut impl Rng) -> Result<ArrayD<f64>> {
    if policy.is_identity() {
        return Ok(images.clone());
    }
    let (h, w) = (images.shape()[2], images.shape()[3]);
    let mut out = images.clone();
    no_grad(|| -> Result<()> {
        for i in 0..images.shape()[0] {
            let draw = policy.sample(h, w, rng);
            let one = images.index_axis(Axis(0), i).insert_axis(Axis(0)).to_owned();
            let aug = diff_augment(&Var::constant(one), &draw)?;
            out.index_axis_mut(Axis(0), i)
                .assign(&aug.value().index_axis(Axis(0), 0));
        }
        Ok(())
    })?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::grad;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn batch(seed: u64, shape: &[usize]) -> ArrayD<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.random::<f64>())
    }

    #[test]
    fn identity_policy_is_bit_exact() {
        let x = batch(1, &[2, 3, 6, 6]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let draw = AugmentPolicy::identity().sample(6, 6, &mut rng);
        let y = diff_augment(&Var::constant(x.clone()), &draw).unwrap();
        assert_eq!(y.value(), &x);
    }

    #[test]
    fn brightness_on_constant_image_clips() {
        for (c, d) in [(0.3, 0.25), (0.9, 0.4), (0.1, -0.3)] {
            let x = ArrayD::from_elem(IxDyn(&[1, 1, 4, 4]), c);
            let mut draw = AugmentDraw::only(vec![Transform::Brightness]);
            draw.brightness = d;
            let y = diff_augment(&Var::constant(x), &draw).unwrap();
            let expected = f64::clamp(c + d, 0.0, 1.0);
            assert!(y.value().iter().all(|&v| (v - expected).abs() < 1e-15));
        }
    }

    #[test]
    fn siamese_draw_transforms_both_batches_alike() {
        let policy = AugmentPolicy::parse("crop_rotate").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let draw = policy.sample(8, 8, &mut rng);
        let x = batch(2, &[1, 1, 8, 8]);
        let both = ndarray::concatenate(Axis(0), &[x.view(), x.view()]).unwrap();
        let a = diff_augment(&Var::constant(x), &draw).unwrap();
        let b = diff_augment(&Var::constant(both), &draw).unwrap();
        for i in 0..2 {
            assert_eq!(b.value().index_axis(Axis(0), i), a.value().index_axis(Axis(0), 0));
        }
    }

    #[test]
    fn crop_shift_moves_pixels() {
        let x = batch(3, &[1, 1, 5, 5]);
        let mut draw = AugmentDraw::only(vec![Transform::CropPad]);
        draw.shift = (1, -2);
        let y = diff_augment(&Var::constant(x.clone()), &draw).unwrap();
        assert_eq!(y.value()[[0, 0, 1, 3]], x[[0, 0, 2, 1]]);
        assert_eq!(y.value()[[0, 0, 4, 0]], 0.0);
    }

    #[test]
    fn unit_scale_and_zero_rotation_are_identity() {
        let x = batch(4, &[1, 2, 6, 7]);
        let draw = AugmentDraw::only(vec![Transform::Scale, Transform::Rotate]);
        let y = diff_augment(&Var::constant(x.clone()), &draw).unwrap();
        for (a, b) in y.value().iter().zip(x.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn unknown_transform_is_config_error() {
        assert!(matches!(AugmentPolicy::parse("color_jigsaw"), Err(Error::Config(_))));
    }

    #[test]
    fn augmentation_is_differentiable_in_pixels() {
        let policy = AugmentPolicy::parse("color_crop_cutout_scale_rotate").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let draw = policy.sample(6, 6, &mut rng);
            let x0 = batch(5, &[1, 3, 6, 6]).mapv(|v| 0.2 + 0.6 * v);
            let f = |x: &Var| diff_augment(x, &draw).unwrap().square().sum();
            let x = Var::leaf(x0.clone());
            let g = grad(&f(&x), &[&x], false).remove(0);
            for i in [0usize, 17, 50, 107] {
                let mut xp = x0.clone();
                let mut xm = x0.clone();
                xp.as_slice_mut().unwrap()[i] += 1e-6;
                xm.as_slice_mut().unwrap()[i] -= 1e-6;
                let num = (f(&Var::constant(xp)).item() - f(&Var::constant(xm)).item()) / 2e-6;
                let an = g.value().as_slice().unwrap()[i];
                assert!((num - an).abs() < 1e-5 * (1.0 + an.abs()), "{num} vs {an}");
            }
        }
    }
}
