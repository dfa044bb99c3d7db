use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{Error, Result};

/// Detection score. Higher always means more in-distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Score {
    Msp,
    Mls,
    Energy { temperature: f64 },
}

impl Score {
    pub const DEFAULTS: [Score; 3] = [Score::Msp, Score::Mls, Score::Energy { temperature: 1.0 }];

    pub fn name(&self) -> &'static str {
        match self {
            Score::Msp => "msp",
            Score::Mls => "mls",
            Score::Energy { .. } => "energy",
        }
    }

    pub fn apply(&self, logits: &Array2<f64>) -> Array1<f64> {
        match *self {
            Score::Msp => msp_score(logits),
            Score::Mls => mls_score(logits),
            Score::Energy { temperature } => energy_score(logits, temperature),
        }
    }
}

impl fmt::Display for Score {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Score::Energy { temperature } if *temperature != 1.0 => write!(f, "energy:{temperature}"),
            s => f.write_str(s.name()),
        }
    }
}

/// `msp`, `mls`, `energy` or `energy:T`.
impl FromStr for Score {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "msp" => Ok(Score::Msp),
            "mls" => Ok(Score::Mls),
            "energy" => Ok(Score::Energy { temperature: 1.0 }),
            other => {
                let t = other
                    .strip_prefix("energy:")
                    .and_then(|t| t.parse::<f64>().ok())
                    .ok_or_else(|| Error::Config(format!("unknown score `{other}`")))?;
                if !(t > 0.0 && t.is_finite()) {
                    return Err(Error::Config(format!("energy temperature must be positive, got {t}")));
                }
                Ok(Score::Energy { temperature: t })
            }
        }
    }
}

fn row_max(row: ArrayView1<'_, f64>) -> f64 {
    row.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Maximum softmax probability per row.
pub fn msp_score(logits: &Array2<f64>) -> Array1<f64> {
    logits
        .outer_iter()
        .map(|row| {
            let m = row_max(row);
            1.0 / row.iter().map(|&v| (v - m).exp()).sum::<f64>()
        })
        .collect()
}

/// Maximum logit per row.
pub fn mls_score(logits: &Array2<f64>) -> Array1<f64> {
    logits.outer_iter().map(row_max).collect()
}

/// Negative free energy `T·logΣexp(l/T)` per row.
pub fn energy_score(logits: &Array2<f64>, temperature: f64) -> Array1<f64> {
    logits
        .outer_iter()
        .map(|row| {
            let m = row_max(row) / temperature;
            let s: f64 = row.iter().map(|&v| (v / temperature - m).exp()).sum();
            temperature * (m + s.ln())
        })
        .collect()
}

/// InD and OOD scores of one detector on one dataset pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    pub in_scores: Vec<f64>,
    pub out_scores: Vec<f64>,
    pub score: Score,
    pub dataset_pair: (String, String),
}

impl ScoreSet {
    pub fn new(in_scores: Vec<f64>, out_scores: Vec<f64>, score: Score, dataset_pair: (String, String)) -> Result<Self> {
        if in_scores.is_empty() || out_scores.is_empty() {
            return Err(Error::Validation("score sets need at least one InD and one OOD score".into()));
        }
        if !in_scores.iter().chain(&out_scores).all(|v| v.is_finite()) {
            return Err(Error::Validation(format!(
                "non-finite {score} score for {} vs {}",
                dataset_pair.0, dataset_pair.1
            )));
        }
        Ok(ScoreSet {
            in_scores,
            out_scores,
            score,
            dataset_pair,
        })
    }
}
