use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::metrics::Metrics;
use super::report::{OODReport, OodInfo};
use super::scores::{Score, ScoreSet};
use crate::data::{DistilledSet, LabeledImageSet, UnlabeledImageSet};
use crate::error::{Error, Result};
use crate::nn::{accuracy, predict_logits, train_on_distilled, NetworkSpec, ParameterVector, TrainConfig};

/// Seed of evaluation model `index` (counted across all runs).
pub fn model_seed(global: u64, index: usize) -> u64 {
    global.wrapping_mul(1000).wrapping_add(100 + index as u64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolConfig {
    pub models_per_run: usize,
    pub train: TrainConfig,
    pub scores: Vec<Score>,
    pub rng_seed: u64,
    /// Thread cap for model training; `None` uses the global pool.
    pub workers: Option<usize>,
    /// Rows per inference batch.
    pub chunk: usize,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            models_per_run: 5,
            train: TrainConfig::default(),
            scores: Score::DEFAULTS.to_vec(),
            rng_seed: 0,
            workers: None,
            chunk: 512,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellEval {
    pub ood: usize,
    pub score: Score,
    pub metrics: Metrics,
}

/// Everything measured on one trained model.
#[derive(Debug, Clone, PartialEq)]
pub struct MemberEval {
    pub run: usize,
    pub model: usize,
    pub seed: u64,
    pub accuracy: f64,
    pub cells: Vec<CellEval>,
}

/// Row indices `(in_rows, out_rows)` of equal length. The larger side is cut
/// down with a permutation seeded by `rng_seed` and the OOD set index.
pub fn balanced_pair(n_in: usize, n_out: usize, rng_seed: u64, ood_index: usize) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    rng.set_stream(1 + ood_index as u64);
    let n = n_in.min(n_out);
    let mut cut = |len: usize| {
        let mut idx: Vec<usize> = (0..len).collect();
        if len > n {
            idx.shuffle(&mut rng);
            idx.truncate(n);
            idx.sort_unstable();
        }
        idx
    };
    let in_rows = cut(n_in);
    let out_rows = cut(n_out);
    (in_rows, out_rows)
}

fn pick(scores: &Array1<f64>, rows: &[usize]) -> Vec<f64> {
    rows.iter().map(|&r| scores[r]).collect()
}

/// Accuracy on `test_in` and every (OOD set, score) cell for fixed weights.
pub fn evaluate_model(
    spec: &NetworkSpec,
    params: &ParameterVector,
    test_in: &LabeledImageSet,
    test_oods: &[UnlabeledImageSet],
    scores: &[Score],
    rng_seed: u64,
    chunk: usize,
) -> Result<(f64, Vec<CellEval>)> {
    let in_logits = predict_logits(spec, params, test_in.images(), chunk)?;
    let acc = accuracy(&in_logits, test_in.labels());
    let mut cells = Vec::new();
    for (j, ood) in test_oods.iter().enumerate() {
        let out_logits: Array2<f64> = predict_logits(spec, params, ood.images(), chunk)?;
        let (in_rows, out_rows) = balanced_pair(test_in.len(), ood.len(), rng_seed, j);
        for &score in scores {
            let set = ScoreSet::new(
                pick(&score.apply(&in_logits), &in_rows),
                pick(&score.apply(&out_logits), &out_rows),
                score,
                (test_in.name().to_string(), ood.name().to_string()),
            )?;
            cells.push(CellEval {
                ood: j,
                score,
                metrics: Metrics::of(&set),
            });
        }
    }
    Ok((acc, cells))
}

/// Trains `models_per_run` networks on every distilled set and averages all
/// of their evaluations.
pub fn evaluate_protocol(
    runs: &[DistilledSet],
    spec: &NetworkSpec,
    test_in: &LabeledImageSet,
    test_oods: &[UnlabeledImageSet],
    cfg: &ProtocolConfig,
) -> Result<OODReport> {
    if runs.is_empty() || cfg.models_per_run == 0 {
        return Err(Error::Config("evaluation needs at least one run and one model".into()));
    }
    if cfg.scores.is_empty() {
        return Err(Error::Config("evaluation needs at least one score".into()));
    }
    for (i, ood) in test_oods.iter().enumerate() {
        if ood.shape() != test_in.shape() || ood.is_empty() {
            return Err(Error::Validation(format!(
                "OOD set {i} ({}) is empty or has shape {} instead of {}",
                ood.name(),
                ood.shape(),
                test_in.shape()
            )));
        }
    }
    if test_in.is_empty() || test_in.shape() != spec.input {
        return Err(Error::Validation(format!("test set does not fit {spec}")));
    }
    let jobs: Vec<(usize, usize)> = (0..runs.len())
        .flat_map(|r| (0..cfg.models_per_run).map(move |m| (r, m)))
        .collect();
    let work = |&(r, m): &(usize, usize)| -> Result<MemberEval> {
        let seed = model_seed(cfg.rng_seed, r * cfg.models_per_run + m);
        let trained = train_on_distilled(&runs[r], spec, &cfg.train, seed)?;
        let (acc, cells) = evaluate_model(spec, &trained.params, test_in, test_oods, &cfg.scores, cfg.rng_seed, cfg.chunk)?;
        log::debug!("run {r} model {m}: accuracy {acc:.4}");
        Ok(MemberEval {
            run: r,
            model: m,
            seed,
            accuracy: acc,
            cells,
        })
    };
    let results: Vec<Result<MemberEval>> = match cfg.workers {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| Error::Internal(e.to_string()))?;
            pool.install(|| jobs.par_iter().map(work).collect())
        }
        None => jobs.par_iter().map(work).collect(),
    };
    let mut members = Vec::new();
    let mut failed = Vec::new();
    for (job, res) in jobs.iter().zip(results) {
        match res {
            Ok(m) => members.push(m),
            Err(e) => {
                log::error!("run {} model {} failed: {e}", job.0, job.1);
                failed.push(*job);
            }
        }
    }
    if !failed.is_empty() {
        return Err(Error::PartialReport { failed });
    }
    let oods = test_oods
        .iter()
        .map(|o| OodInfo {
            name: o.name().to_string(),
            noise: o.provenance().is_noise(),
        })
        .collect();
    OODReport::aggregate(test_in.name(), oods, cfg.scores.clone(), members)
}

