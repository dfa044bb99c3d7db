use ndarray::{array, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::{generate_blobs, init_distilled, BlobConfig, ImageShape, Split, UnlabeledImageSet};
use crate::error::Error;
use crate::forge::{noise_outliers, synthesize_outliers, CorruptionConfig, NoiseKind};
use crate::nn::{train_on_distilled, NetworkSpec, TrainConfig};

fn set(i: &[f64], o: &[f64]) -> ScoreSet {
    ScoreSet::new(i.to_vec(), o.to_vec(), Score::Msp, ("in".into(), "out".into())).unwrap()
}

fn brute_auroc(s: &ScoreSet) -> f64 {
    let mut acc = 0.0;
    for &a in &s.in_scores {
        for &b in &s.out_scores {
            acc += if a > b {
                1.0
            } else if a == b {
                0.5
            } else {
                0.0
            };
        }
    }
    acc / (s.in_scores.len() * s.out_scores.len()) as f64
}

fn frac_at_least(v: &[f64], t: f64) -> f64 {
    v.iter().filter(|&&x| x >= t).count() as f64 / v.len() as f64
}

fn brute_fpr(s: &ScoreSet, target: f64) -> f64 {
    let best = s
        .in_scores
        .iter()
        .chain(&s.out_scores)
        .copied()
        .filter(|&t| frac_at_least(&s.in_scores, t) >= target)
        .fold(f64::NEG_INFINITY, f64::max);
    frac_at_least(&s.out_scores, best)
}

fn brute_aupr(pos: &[f64], neg: &[f64]) -> f64 {
    let mut th: Vec<f64> = pos.iter().chain(neg).copied().collect();
    th.sort_by(|a, b| b.total_cmp(a));
    th.dedup();
    let mut area = 0.0;
    let mut prev = 0.0;
    for t in th {
        let tp = pos.iter().filter(|&&x| x >= t).count() as f64;
        let fp = neg.iter().filter(|&&x| x >= t).count() as f64;
        let recall = tp / pos.len() as f64;
        area += (recall - prev) * tp / (tp + fp);
        prev = recall;
    }
    area
}

fn random_set(rng: &mut ChaCha8Rng) -> ScoreSet {
    let n_in = rng.random_range(1..=250);
    let n_out = rng.random_range(1..=250);
    let coarse = rng.random_bool(0.5);
    let mut draw = |shift: f64| {
        let v: f64 = rng.random::<f64>() + shift;
        if coarse {
            (v * 10.0).round() / 10.0
        } else {
            v
        }
    };
    let i: Vec<f64> = (0..n_in).map(|_| draw(0.3)).collect();
    let o: Vec<f64> = (0..n_out).map(|_| draw(0.0)).collect();
    set(&i, &o)
}

#[test]
fn metrics_match_brute_force_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..200 {
        let s = random_set(&mut rng);
        assert!((auroc(&s) - brute_auroc(&s)).abs() < 1e-12);
        assert!((fpr_at_tpr(&s, 0.95) - brute_fpr(&s, 0.95)).abs() < 1e-12);
        assert!((aupr(&s, Positive::In) - brute_aupr(&s.in_scores, &s.out_scores)).abs() < 1e-9);
        let neg = |v: &[f64]| v.iter().map(|x| -x).collect::<Vec<_>>();
        assert!((aupr(&s, Positive::Out) - brute_aupr(&neg(&s.out_scores), &neg(&s.in_scores))).abs() < 1e-9);
    }
}

#[test]
fn metric_examples() {
    let sep = set(&[0.9, 0.8, 0.7], &[0.1, 0.2]);
    assert_eq!(fpr_at_tpr(&sep, 0.95), 0.0);
    assert_eq!(auroc(&sep), 1.0);
    assert_eq!(aupr(&sep, Positive::In), 1.0);
    assert_eq!(aupr(&sep, Positive::Out), 1.0);
    let flat = set(&[0.5; 4], &[0.5; 4]);
    assert_eq!(fpr_at_tpr(&flat, 0.95), 1.0);
    assert_eq!(auroc(&flat), 0.5);
    assert_eq!(aupr(&flat, Positive::In), 0.5);
    let same = set(&[0.1, 0.4, 0.4, 0.9], &[0.9, 0.4, 0.1, 0.4]);
    assert_eq!(auroc(&same), 0.5);
    let ins: Vec<f64> = (0..20).map(|k| 0.9 - 0.05 * k as f64).collect();
    let outs: Vec<f64> = ins.iter().map(|v| v - 0.025).collect();
    let s = set(&ins, &outs);
    assert_eq!(fpr_at_tpr(&s, 0.95), brute_fpr(&s, 0.95));
    // TPR >= 0.95 needs 19 of 20 InD scores: δ = ins[18], so outs[0..18] pass.
    assert_eq!(fpr_at_tpr(&s, 0.95), 18.0 / 20.0);
}

#[test]
fn score_examples() {
    let zeros = Array2::<f64>::zeros((1, 10));
    assert_eq!(msp_score(&zeros)[0], 0.1);
    assert_eq!(energy_score(&zeros, 1.0)[0], 10f64.ln());
    let l = array![[10.0, 0.0, 0.0]];
    let e10 = 10f64.exp();
    assert!((msp_score(&l)[0] - e10 / (e10 + 2.0)).abs() < 1e-15);
    assert_eq!(mls_score(&array![[3.0, -1.0, 0.0]])[0], 3.0);
    assert_eq!(energy_score(&array![[-2.5]], 1.0)[0], -2.5);
    let big = energy_score(&array![[1000.0, 1000.0]], 1.0)[0];
    assert!((big - (1000.0 + 2f64.ln())).abs() < 1e-12);
    // MLS and MSP disagree on the ranking of these two rows.
    let rows = array![[5.0, 5.0, -9.0], [4.0, -9.0, -9.0]];
    let (msp, mls) = (msp_score(&rows), mls_score(&rows));
    assert!(msp[0] < msp[1] && mls[0] > mls[1]);
    assert_eq!("energy:2".parse::<Score>().unwrap(), Score::Energy { temperature: 2.0 });
    assert!("odin".parse::<Score>().is_err());
    assert!("energy:0".parse::<Score>().is_err());
}

#[test]
fn score_set_validation() {
    assert!(ScoreSet::new(vec![], vec![1.0], Score::Mls, ("a".into(), "b".into())).is_err());
    assert!(ScoreSet::new(vec![f64::NAN], vec![1.0], Score::Mls, ("a".into(), "b".into())).is_err());
}

proptest! {
    #[test]
    fn auroc_complement_and_monotone_invariance(
        i in prop::collection::vec(-5i32..5, 1..40),
        o in prop::collection::vec(-5i32..5, 1..40),
    ) {
        let i: Vec<f64> = i.into_iter().map(f64::from).collect();
        let o: Vec<f64> = o.into_iter().map(f64::from).collect();
        let s = set(&i, &o);
        let swapped = set(&o, &i);
        prop_assert!((auroc(&s) + auroc(&swapped) - 1.0).abs() < 1e-12);
        let t = |v: &[f64]| v.iter().map(|x| (x / 3.0).exp()).collect::<Vec<_>>();
        prop_assert_eq!(auroc(&s), auroc(&set(&t(&i), &t(&o))));
        let mut last = f64::INFINITY;
        for k in 0..=20 {
            let f = fpr_at_tpr(&s, 1.0 - k as f64 / 20.0);
            prop_assert!(f <= last);
            last = f;
        }
        for v in [auroc(&s), aupr(&s, Positive::In), aupr(&s, Positive::Out), fpr_at_tpr(&s, 0.95)] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn score_identities(row in prop::collection::vec(-15.0f64..15.0, 2..12), c in -50.0f64..50.0) {
        let n = row.len();
        let l = Array2::from_shape_vec((1, n), row.clone()).unwrap();
        let shifted = l.mapv(|v| v + c);
        prop_assert!((msp_score(&l)[0] - msp_score(&shifted)[0]).abs() < 1e-12);
        prop_assert!(((mls_score(&shifted)[0] - mls_score(&l)[0]) - c).abs() < 1e-9);
        let gap = energy_score(&l, 1.0)[0] - mls_score(&l)[0];
        prop_assert!(gap > 0.0 && gap <= (n as f64).ln() + 1e-12);
        let p = msp_score(&l)[0];
        prop_assert!(p > 1.0 / n as f64 - 1e-15 && p <= 1.0);
    }
}

#[test]
fn balancing_is_exact_and_seeded() {
    let (a, b) = balanced_pair(100, 40, 7, 0);
    assert_eq!((a.len(), b.len()), (40, 40));
    assert_eq!(b, (0..40).collect::<Vec<_>>());
    assert_eq!(balanced_pair(100, 40, 7, 0), (a.clone(), b));
    assert_ne!(balanced_pair(100, 40, 7, 1).0, a);
    let (a, b) = balanced_pair(30, 90, 7, 2);
    assert_eq!((a.len(), b.len()), (30, 30));
    let mut u = b.clone();
    u.dedup();
    assert_eq!(u.len(), 30);
}

struct Fixture {
    spec: NetworkSpec,
    runs: Vec<crate::data::DistilledSet>,
    test_in: crate::data::LabeledImageSet,
    oods: Vec<UnlabeledImageSet>,
}

fn fixture(n_runs: usize) -> Fixture {
    let cfg = BlobConfig::parse("classes=2,count=60,size=8,seed=1").unwrap();
    let train = generate_blobs(&cfg, Split::Train).unwrap();
    let test_in = generate_blobs(&cfg, Split::Test).unwrap();
    let forge = CorruptionConfig { rng_seed: 2, ..CorruptionConfig::default() };
    let t_out = synthesize_outliers(&train, &forge, 40).unwrap();
    let runs = (0..n_runs).map(|r| init_distilled(&train, &t_out, 3, 6, r as u64).unwrap()).collect();
    let shape = ImageShape::new(1, 8, 8);
    let oods = vec![
        synthesize_outliers(&test_in, &CorruptionConfig { rng_seed: 3, ..Default::default() }, 50).unwrap(),
        noise_outliers(NoiseKind::Uniform, shape, 30, 4).unwrap(),
    ];
    Fixture {
        spec: NetworkSpec::new(1, 4, 2, shape),
        runs,
        test_in,
        oods,
    }
}

fn protocol(models: usize) -> ProtocolConfig {
    ProtocolConfig {
        models_per_run: models,
        train: TrainConfig { epochs: 15, batch: 8, ..Default::default() },
        rng_seed: 5,
        ..Default::default()
    }
}

#[test]
fn single_member_protocol_equals_direct_evaluation() {
    let f = fixture(1);
    let cfg = protocol(1);
    let report = evaluate_protocol(&f.runs, &f.spec, &f.test_in, &f.oods, &cfg).unwrap();
    let trained = train_on_distilled(&f.runs[0], &f.spec, &cfg.train, model_seed(5, 0)).unwrap();
    let (acc, cells) = evaluate_model(&f.spec, &trained.params, &f.test_in, &f.oods, &cfg.scores, 5, 64).unwrap();
    assert!((report.ind_accuracy - acc).abs() <= 1e-12);
    for c in &cells {
        let r = report.row(c.ood, c.score).unwrap();
        for (a, b) in r.values().iter().zip(c.metrics.values()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
}

#[test]
fn mean_rows_are_member_means() {
    let f = fixture(2);
    let report = evaluate_protocol(&f.runs, &f.spec, &f.test_in, &f.oods, &protocol(2)).unwrap();
    assert_eq!(report.members.len(), 4);
    let seeds: Vec<u64> = report.members.iter().map(|m| m.seed).collect();
    assert_eq!(seeds, vec![5100, 5101, 5102, 5103]);
    for r in &report.rows {
        let vals: Vec<f64> = report
            .members
            .iter()
            .map(|m| m.cells.iter().find(|c| c.ood == r.ood && c.score == r.score).unwrap().metrics.auroc)
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        assert!((r.metrics.auroc - mean).abs() < 1e-9);
    }
    let msp = Score::Msp;
    assert_eq!(report.mean_row(msp, false).unwrap(), report.row(0, msp).unwrap());
    let both = report.mean_row(msp, true).unwrap();
    let hand = (report.row(0, msp).unwrap().fpr95 + report.row(1, msp).unwrap().fpr95) / 2.0;
    assert!((both.fpr95 - hand).abs() < 1e-9);
}

#[test]
fn protocol_is_deterministic_across_worker_counts() {
    let f = fixture(1);
    let one = evaluate_protocol(&f.runs, &f.spec, &f.test_in, &f.oods, &ProtocolConfig { workers: Some(1), ..protocol(2) }).unwrap();
    let many = evaluate_protocol(&f.runs, &f.spec, &f.test_in, &f.oods, &ProtocolConfig { workers: Some(3), ..protocol(2) }).unwrap();
    assert_eq!(one, many);
}

#[test]
fn failed_members_give_partial_report_error() {
    let f = fixture(2);
    let mut cfg = protocol(1);
    cfg.train.lambda = -1.0;
    match evaluate_protocol(&f.runs, &f.spec, &f.test_in, &f.oods, &cfg) {
        Err(Error::PartialReport { failed }) => assert_eq!(failed, vec![(0, 0), (1, 0)]),
        other => panic!("expected a partial report, got {other:?}"),
    }
}

#[test]
fn report_key_values_round_trip_and_table() {
    let f = fixture(1);
    let mut report = evaluate_protocol(&f.runs, &f.spec, &f.test_in, &f.oods, &protocol(2)).unwrap();
    report.config_checksum = Some("cafe".into());
    let text = report.to_key_values("poe");
    let (arm, back) = OODReport::from_key_values(&text).unwrap();
    assert_eq!(arm, "poe");
    assert_eq!(back, report);
    let table = render_table(&[("baseline", &report), ("poe", &back)], Score::Msp, false).unwrap();
    assert!(table.contains("AUROC"));
    assert!(table.lines().any(|l| l.starts_with("mean ")));
    assert!(table.contains("poe=cafe"));
    assert!(render_table(&[], Score::Msp, false).is_err());
}
