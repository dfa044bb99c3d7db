use super::scores::ScoreSet;

/// Which side counts as positive for precision-recall.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Positive {
    In,
    Out,
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut v = v.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Fraction of OOD scores at or above the largest threshold that keeps at
/// least `tpr_target` of the InD scores.
pub fn fpr_at_tpr(s: &ScoreSet, tpr_target: f64) -> f64 {
    let n = s.in_scores.len();
    let target = tpr_target.clamp(0.0, 1.0);
    let Some(k) = (0..=n).find(|&k| k as f64 / n as f64 >= target) else {
        return 1.0;
    };
    if k == 0 {
        return 0.0;
    }
    let desc: Vec<f64> = sorted(&s.in_scores).into_iter().rev().collect();
    let delta = desc[k - 1];
    s.out_scores.iter().filter(|&&o| o >= delta).count() as f64 / s.out_scores.len() as f64
}

/// `P(in > out) + P(in = out)/2`.
pub fn auroc(s: &ScoreSet) -> f64 {
    let out = sorted(&s.out_scores);
    let mut twice = 0u64;
    for &v in &s.in_scores {
        let lt = out.partition_point(|&o| o < v);
        let le = out.partition_point(|&o| o <= v);
        twice += 2 * lt as u64 + (le - lt) as u64;
    }
    twice as f64 / 2.0 / (s.in_scores.len() as f64 * s.out_scores.len() as f64)
}

/// Step-wise area under the precision-recall curve from a descending sweep
/// over distinct thresholds.
pub fn aupr(s: &ScoreSet, positive: Positive) -> f64 {
    let mut items: Vec<(f64, bool)> = match positive {
        Positive::In => s
            .in_scores
            .iter()
            .map(|&v| (v, true))
            .chain(s.out_scores.iter().map(|&v| (v, false)))
            .collect(),
        Positive::Out => s
            .out_scores
            .iter()
            .map(|&v| (-v, true))
            .chain(s.in_scores.iter().map(|&v| (-v, false)))
            .collect(),
    };
    items.sort_by(|a, b| b.0.total_cmp(&a.0));
    let total_pos = items.iter().filter(|i| i.1).count() as f64;
    let (mut tp, mut fp) = (0usize, 0usize);
    let (mut area, mut prev_recall) = (0.0, 0.0);
    let mut i = 0;
    while i < items.len() {
        let t = items[i].0;
        while i < items.len() && items[i].0 == t {
            if items[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / total_pos;
        let precision = tp as f64 / (tp + fp) as f64;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    area
}

/// The four reported rates, each in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Metrics {
    pub fpr95: f64,
    pub auroc: f64,
    pub aupr_in: f64,
    pub aupr_out: f64,
}

impl Metrics {
    pub const NAMES: [&'static str; 4] = ["fpr95", "auroc", "aupr_in", "aupr_out"];

    pub fn of(s: &ScoreSet) -> Self {
        Metrics {
            fpr95: fpr_at_tpr(s, 0.95),
            auroc: auroc(s),
            aupr_in: aupr(s, Positive::In),
            aupr_out: aupr(s, Positive::Out),
        }
    }

    pub fn values(&self) -> [f64; 4] {
        [self.fpr95, self.auroc, self.aupr_in, self.aupr_out]
    }

    pub fn from_values(v: [f64; 4]) -> Self {
        Metrics {
            fpr95: v[0],
            auroc: v[1],
            aupr_in: v[2],
            aupr_out: v[3],
        }
    }

    /// Arithmetic mean; `None` for an empty slice.
    pub fn mean(items: &[Metrics]) -> Option<Metrics> {
        if items.is_empty() {
            return None;
        }
        let mut acc = [0.0; 4];
        for m in items {
            for (a, v) in acc.iter_mut().zip(m.values()) {
                *a += v;
            }
        }
        Some(Metrics::from_values(acc.map(|a| a / items.len() as f64)))
    }
}
