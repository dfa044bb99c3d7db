use ndarray::{Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::LabeledImageSet;

fn random_image(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Array3<f32> {
    Array3::from_shape_simple_fn((c, h, w), || rng.random::<f32>())
}

fn sorted_bits(a: &ndarray::ArrayView3<'_, f32>) -> Vec<u32> {
    let mut v: Vec<u32> = a.iter().map(|x| x.to_bits()).collect();
    v.sort_unstable();
    v
}

#[test]
fn jigsaw_reverse_permutation_on_index_grid() {
    let img = Array3::from_shape_fn((1, 6, 6), |(_, y, x)| (y * 6 + x) as f32);
    let perm: Vec<usize> = (0..6).rev().collect();
    let out = jigsaw_with(img.view(), (2, 3), &perm).unwrap();
    // Patches are 3x2; output patch d holds input patch 5 - d.
    for d in 0..6 {
        let (dr, dc) = (d / 3, d % 3);
        let src = 5 - d;
        let (sr, sc) = (src / 3, src % 3);
        for y in 0..3 {
            for x in 0..2 {
                let expected = ((sr * 3 + y) * 6 + sc * 2 + x) as f32;
                assert_eq!(out[[0, dr * 3 + y, dc * 2 + x]], expected);
            }
        }
    }
}

#[test]
fn jigsaw_preserves_multiset_and_constants() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cfg = CorruptionConfig::default();
    for _ in 0..100 {
        let img = random_image(&mut rng, 2, 8, 8);
        let out = jigsaw(img.view(), &cfg, &mut rng).unwrap();
        assert_eq!(sorted_bits(&out.view()), sorted_bits(&img.view()));
        assert!(out != img);
    }
    let c = Array3::from_elem((1, 7, 9), 0.4f32);
    assert_eq!(jigsaw(c.view(), &cfg, &mut rng).unwrap(), c);
}

#[test]
fn jigsaw_on_uneven_size_keeps_border() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let img = random_image(&mut rng, 1, 7, 7);
    let out = jigsaw_with(img.view(), (2, 3), &[5, 4, 3, 2, 1, 0]).unwrap();
    // Crop is 6x6 at offset (0, 0); row and column 6 are untouched.
    for i in 0..7 {
        assert_eq!(out[[0, 6, i]], img[[0, 6, i]]);
        assert_eq!(out[[0, i, 6]], img[[0, i, 6]]);
    }
    assert!(jigsaw_with(img.view(), (8, 1), &(0..8).collect::<Vec<_>>()).is_err());
}

#[test]
fn invert_rules() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let gray = random_image(&mut rng, 1, 5, 5);
    let (out, subset) = invert(gray.view(), &mut rng);
    assert_eq!(subset, vec![0]);
    assert!(out.iter().zip(gray.iter()).all(|(o, i)| *o == 1.0 - i));

    let rgb = random_image(&mut rng, 3, 4, 4);
    let out = invert_with(rgb.view(), &[0, 2]);
    assert_eq!(out.index_axis(Axis(0), 1), rgb.index_axis(Axis(0), 1));
    assert!(out.index_axis(Axis(0), 0) != rgb.index_axis(Axis(0), 0));

    for _ in 0..100 {
        let img = random_image(&mut rng, 3, 4, 4);
        let (once, subset) = invert(img.view(), &mut rng);
        assert!(!subset.is_empty());
        let twice = invert_with(once.view(), &subset);
        let diff = twice.iter().zip(img.iter()).fold(0f32, |m, (a, b)| m.max((a - b).abs()));
        // 1 - (1 - v) is exact for v in [0.5, 1] and within an ulp of 1 below.
        assert!(diff <= f32::EPSILON, "{diff}");
    }
}

#[test]
fn mosaic_hand_computed_blocks() {
    let img = Array3::from_shape_vec((1, 4, 4), (0..16).map(|v| v as f32 / 16.0).collect()).unwrap();
    let out = mosaic_with(img.view(), 2).unwrap();
    let means = [[2.5, 4.5], [10.5, 12.5]];
    for y in 0..4 {
        for x in 0..4 {
            assert_eq!(out[[0, y, x]], means[y / 2][x / 2] / 16.0);
        }
    }
    assert_eq!(mosaic_with(img.view(), 1).unwrap(), img);
    let c = Array3::from_elem((2, 6, 6), 0.3f32);
    assert_eq!(mosaic_with(c.view(), 4).unwrap(), c);
    assert!(mosaic_with(img.view(), 5).is_err());
}

#[test]
fn mosaic_blocks_are_constant() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = CorruptionConfig::default();
    for _ in 0..100 {
        let img = random_image(&mut rng, 1, 28, 28);
        let (lo, hi) = default_mosaic_range(ImageShape::new(1, 28, 28));
        let b = rng.random_range(lo..=hi);
        let out = mosaic_with(img.view(), b).unwrap();
        for y in 0..28 {
            for x in 0..28 {
                assert_eq!(out[[0, y, x]], out[[0, y / b * b, x / b * b]]);
            }
        }
        let out = mosaic(img.view(), &cfg, &mut rng).unwrap();
        assert!(out.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
    assert_eq!(default_mosaic_range(ImageShape::new(1, 28, 28)), (3, 7));
    assert_eq!(default_mosaic_range(ImageShape::new(1, 8, 8)), (2, 2));
}

#[test]
fn speckle_formula_and_domination() {
    let img = Array3::from_elem((1, 1, 1), 0.8f32);
    let noise = Array3::from_elem((1, 1, 1), 0.5f32);
    assert_eq!(speckle_with(img.view(), noise.view())[[0, 0, 0]], 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let zero = Array3::<f32>::zeros((3, 4, 4));
    assert_eq!(speckle(zero.view(), SpeckleNoise::Uniform01, &mut rng), zero);
    for _ in 0..100 {
        let img = random_image(&mut rng, 3, 6, 6);
        let out = speckle(img.view(), SpeckleNoise::Uniform01, &mut rng);
        assert!(out.iter().zip(img.iter()).all(|(o, i)| o >= i && *o <= 1.0));
        assert!(out != img);
    }
}

#[test]
fn flip_exclusions() {
    let cfg = CorruptionConfig::digits();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let img = random_image(&mut rng, 1, 6, 6);
    for o in [FlipOrientation::Horizontal, FlipOrientation::Vertical] {
        assert!(flip_digit_with(img.view(), 8, o, &cfg).unwrap().is_none());
        assert!(flip_digit_with(img.view(), 0, o, &cfg).unwrap().is_none());
        assert!(flip_digit_with(img.view(), 1, o, &cfg).unwrap().is_none());
        assert_eq!(flip(flip(img.view(), o).view(), o), img);
    }
    let h = flip_digit_with(img.view(), 3, FlipOrientation::Horizontal, &cfg).unwrap();
    assert_eq!(h.unwrap(), flip(img.view(), FlipOrientation::Horizontal));
    assert!(flip_digit_with(img.view(), 3, FlipOrientation::Vertical, &cfg).unwrap().is_none());
    let not_digits = CorruptionConfig::default();
    assert!(matches!(
        flip_digit_with(img.view(), 3, FlipOrientation::Vertical, &not_digits),
        Err(Error::Config(_))
    ));
    for _ in 0..100 {
        let label = rng.random_range(0..10);
        let out = flip_digit(img.view(), label, &cfg, &mut rng).unwrap();
        if [0, 1, 8].contains(&label) {
            assert!(out.is_none());
        }
        if [2, 4, 5, 6, 7, 9].contains(&label) {
            assert!(out.is_some());
        }
    }
}

fn digit_set(n: usize) -> LabeledImageSet {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let images = Array4::from_shape_simple_fn((n, 1, 8, 8), || rng.random::<f32>());
    let labels = (0..n).map(|i| i % 10).collect();
    LabeledImageSet::new("digits", images, labels, 10).unwrap()
}

#[test]
fn synthesized_tags_are_near_uniform() {
    let t_in = digit_set(50);
    let cfg = CorruptionConfig {
        rng_seed: 42,
        ..CorruptionConfig::digits()
    };
    let out = synthesize_outliers(&t_in, &cfg, 1000).unwrap();
    assert_eq!(out.len(), 1000);
    let k = cfg.enabled.len() as f64;
    let p = 1.0 / k;
    let sigma = (1000.0 * p * (1.0 - p)).sqrt();
    for kind in &cfg.enabled {
        let n = out.tags().unwrap().iter().filter(|t| *t == kind).count() as f64;
        assert!((n - 1000.0 * p).abs() < 5.0 * sigma, "{kind}: {n}");
    }
    let (lo, hi) = crate::data::pixel_range(out.images());
    assert!(lo >= 0.0 && hi <= 1.0);
    let again = synthesize_outliers(&t_in, &cfg, 1000).unwrap();
    assert_eq!(again, out);
}

#[test]
fn invert_only_ensemble() {
    let t_in = digit_set(10);
    let cfg = CorruptionConfig {
        enabled: vec![Corruption::Invert],
        ..Default::default()
    };
    let out = synthesize_outliers(&t_in, &cfg, 20).unwrap();
    for i in 0..20 {
        let inv = out.images().index_axis(Axis(0), i).mapv(|v| 1.0 - v);
        let hit = (0..t_in.len()).any(|j| {
            inv.iter()
                .zip(t_in.image(j).iter())
                .all(|(a, b)| (a - b).abs() <= f32::EPSILON)
        });
        assert!(hit);
    }
}

#[test]
fn flip_only_on_non_digits_is_config_error() {
    let t_in = digit_set(10);
    let cfg = CorruptionConfig {
        enabled: vec![Corruption::Flip],
        ..Default::default()
    };
    assert!(matches!(synthesize_outliers(&t_in, &cfg, 5), Err(Error::Config(_))));
}

#[test]
fn noise_sources() {
    let shape = ImageShape::new(1, 8, 8);
    let u = noise_outliers(NoiseKind::Uniform, shape, 10, 3).unwrap();
    let mean = u.images().iter().map(|&v| v as f64).sum::<f64>() / u.images().len() as f64;
    assert!((mean - 0.5).abs() < 0.05);
    let (lo, hi) = crate::data::pixel_range(u.images());
    assert!(lo >= 0.0 && hi <= 1.0);
    let g1 = noise_outliers(NoiseKind::Gaussian, shape, 1, 9).unwrap();
    let g2 = noise_outliers(NoiseKind::Gaussian, shape, 1, 9).unwrap();
    assert_eq!(g1, g2);
}
