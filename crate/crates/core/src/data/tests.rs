use std::collections::HashSet;

use ndarray::{Array4, Axis};
use sha2::{Digest, Sha256};

use super::container::{load_distilled, save_distilled, FORMAT_VERSION};
use super::idx::{encode_images, encode_labels};
use super::*;
use crate::forge::Corruption;

fn blobs(count: usize) -> LabeledImageSet {
    let cfg = BlobConfig::parse(&format!("classes=2,count={count},size=8")).unwrap();
    generate_blobs(&cfg, Split::Train).unwrap()
}

fn tagged_outliers(t_in: &LabeledImageSet, per_tag: usize, kinds: &[Corruption]) -> UnlabeledImageSet {
    let n = per_tag * kinds.len();
    let rows: Vec<usize> = (0..n).map(|i| i % t_in.len()).collect();
    let images = t_in.images().select(Axis(0), &rows);
    let tags = (0..n).map(|i| kinds[i % kinds.len()]).collect();
    UnlabeledImageSet::new("pseudo", images, Provenance::PseudoCorruption)
        .unwrap()
        .with_tags(tags)
        .unwrap()
}

fn array_digest(a: &Array4<f32>) -> Vec<u8> {
    let mut h = Sha256::new();
    for v in a.iter() {
        h.update(v.to_bits().to_le_bytes());
    }
    h.finalize().to_vec()
}

#[test]
fn blob_counts_and_balance() {
    let set = blobs(64);
    assert_eq!(set.len(), 64);
    assert_eq!(set.shape(), ImageShape::new(1, 8, 8));
    assert_eq!(set.class_histogram(), vec![32, 32]);
    let (lo, hi) = pixel_range(set.images());
    assert!(lo >= 0.0 && hi <= 1.0);
}

#[test]
fn empty_blob_set_keeps_shape() {
    let set = blobs(0);
    assert!(set.is_empty());
    assert_eq!(set.shape(), ImageShape::new(1, 8, 8));
    assert_eq!(set.num_classes(), 2);
}

#[test]
fn labeled_set_rejects_bad_inputs() {
    let images = Array4::<f32>::from_elem((2, 1, 2, 2), 0.5);
    assert!(LabeledImageSet::new("x", images.clone(), vec![0], 2).is_err());
    assert!(LabeledImageSet::new("x", images.clone(), vec![0, 2], 2).is_err());
    let mut bad = images;
    bad[[0, 0, 0, 0]] = 1.5;
    assert!(LabeledImageSet::new("x", bad, vec![0, 1], 2).is_err());
}

#[test]
fn init_sizes_and_balance() {
    let t_in = blobs(64);
    let t_out = tagged_outliers(&t_in, 30, &Corruption::ALL[..4]);
    let s = init_distilled(&t_in, &t_out, 10, 20, 3).unwrap();
    assert_eq!(s.s_in_images.dim().0, 20);
    assert_eq!(s.s_out_len(), 20);
    let mut hist = [0; 2];
    for &l in &s.s_in_labels {
        hist[l] += 1;
    }
    assert_eq!(hist, [10, 10]);
    assert_eq!(s.outlier_mode, OutlierMode::Poe);
}

#[test]
fn init_baseline_has_no_outliers() {
    let t_in = blobs(16);
    let empty = UnlabeledImageSet::empty("none", t_in.shape());
    let s = init_distilled(&t_in, &empty, 1, 0, 0).unwrap();
    assert_eq!(s.s_out_len(), 0);
    assert_eq!(s.outlier_mode, OutlierMode::None);
}

#[test]
fn init_samples_without_replacement_and_is_deterministic() {
    let t_in = blobs(40);
    let empty = UnlabeledImageSet::empty("none", t_in.shape());
    let a = init_distilled(&t_in, &empty, 20, 0, 11).unwrap();
    let b = init_distilled(&t_in, &empty, 20, 0, 11).unwrap();
    assert_eq!(a, b);
    // 20 of 20 members per class: every source image appears exactly once.
    let rows: HashSet<Vec<u32>> = a
        .s_in_images
        .outer_iter()
        .map(|r| r.iter().map(|v| v.to_bits()).collect())
        .collect();
    assert_eq!(rows.len(), 40);
}

#[test]
fn init_round_robin_assigns_one_row_per_tag() {
    let t_in = blobs(16);
    let kinds = &Corruption::ALL[..4];
    let t_out = tagged_outliers(&t_in, 2, kinds);
    let s = init_distilled(&t_in, &t_out, 2, 4, 5).unwrap();
    let tags = s.corruption_assignment.clone().unwrap();
    assert_eq!(tags, kinds.to_vec());
}

#[test]
fn init_errors() {
    let t_in = blobs(8);
    let t_out = tagged_outliers(&t_in, 1, &Corruption::ALL[..2]);
    assert!(matches!(init_distilled(&t_in, &t_out, 5, 0, 0), Err(Error::Initialization(_))));
    assert!(matches!(init_distilled(&t_in, &t_out, 1, 3, 0), Err(Error::Initialization(_))));
    assert!(matches!(init_distilled(&t_in, &t_out, 0, 0, 0), Err(Error::Initialization(_))));
}

fn sample_distilled() -> DistilledSet {
    let t_in = blobs(32);
    let t_out = tagged_outliers(&t_in, 3, &Corruption::ALL[..4]);
    let mut s = init_distilled(&t_in, &t_out, 3, 8, 21).unwrap();
    s.lambda = 0.5;
    s.config_checksum = Some("abc123".into());
    s
}

#[test]
fn container_round_trip_is_bit_exact() {
    let s = sample_distilled();
    let dir = tempfile::tempdir().unwrap();
    save_distilled(&s, dir.path()).unwrap();
    let back = load_distilled(dir.path()).unwrap();
    assert_eq!(back, s);
    assert_eq!(array_digest(&back.s_in_images), array_digest(&s.s_in_images));
    // Independent digest of the raw file body against the in-memory array.
    let raw = std::fs::read(dir.path().join("s_out.bin")).unwrap();
    let file_digest = Sha256::digest(&raw[16..]).to_vec();
    assert_eq!(file_digest, array_digest(&s.s_out_images));
}

#[test]
fn container_version_mismatch_is_incompatible() {
    let s = sample_distilled();
    let dir = tempfile::tempdir().unwrap();
    save_distilled(&s, dir.path()).unwrap();
    let mpath = dir.path().join("manifest");
    let text = std::fs::read_to_string(&mpath).unwrap();
    std::fs::write(&mpath, text.replace(&format!("format_version={FORMAT_VERSION}"), "format_version=99")).unwrap();
    match load_distilled(dir.path()) {
        Err(Error::Incompatible { found: 99, .. }) => {}
        other => panic!("expected incompatibility, got {other:?}"),
    }
}

#[test]
fn container_truncation_is_parse_error() {
    let s = sample_distilled();
    let dir = tempfile::tempdir().unwrap();
    save_distilled(&s, dir.path()).unwrap();
    let p = dir.path().join("s_in.bin");
    let bytes = std::fs::read(&p).unwrap();
    std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(load_distilled(dir.path()), Err(Error::Parse { .. })));
}

#[test]
fn mnist_idx_directory_loads() {
    let dir = tempfile::tempdir().unwrap();
    let images = Array4::from_shape_fn((6, 1, 28, 28), |(i, _, y, x)| ((i * 7 + y * 28 + x) % 256) as f32 / 255.0);
    let labels = vec![0, 1, 2, 3, 4, 9];
    std::fs::write(dir.path().join("train-images-idx3-ubyte"), encode_images(&images)).unwrap();
    std::fs::write(dir.path().join("train-labels-idx1-ubyte"), encode_labels(&labels)).unwrap();
    let set = load_dataset(&DatasetSource::MnistDir(dir.path().into()), Split::Train).unwrap();
    assert_eq!(set.len(), 6);
    assert_eq!(set.num_classes(), 10);
    assert_eq!(set.shape(), ImageShape::new(1, 28, 28));
    assert_eq!(set.labels(), &labels[..]);
    assert_eq!(set.images(), &images);
    assert!(matches!(
        load_dataset(&DatasetSource::MnistDir(dir.path().into()), Split::Test),
        Err(Error::Load { .. })
    ));
}

#[test]
fn bilinear_resize_of_constant_is_constant() {
    let img = ndarray::Array3::<f32>::from_elem((1, 5, 7), 0.25);
    let r = external::resize_bilinear(img.view(), 3, 4);
    assert!(r.iter().all(|&v| v == 0.25));
}

#[test]
fn shape_string_round_trip() {
    let s: ImageShape = "3x32x32".parse().unwrap();
    assert_eq!(s, ImageShape::new(3, 32, 32));
    assert_eq!(s.to_string(), "3x32x32");
}
