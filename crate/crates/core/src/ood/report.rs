use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::metrics::Metrics;
use super::protocol::{CellEval, MemberEval};
use super::scores::Score;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct OodInfo {
    pub name: String,
    /// Synthetic noise sets are left out of the mean unless asked for.
    pub noise: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub ood: usize,
    pub score: Score,
    pub metrics: Metrics,
}

/// Aggregated evaluation of one arm.
#[derive(Debug, Clone, PartialEq)]
pub struct OODReport {
    pub ind_name: String,
    pub ind_accuracy: f64,
    pub oods: Vec<OodInfo>,
    pub scores: Vec<Score>,
    /// Mean over members, one row per (OOD set, score).
    pub rows: Vec<ReportRow>,
    pub members: Vec<MemberEval>,
    pub config_checksum: Option<String>,
}

fn cell<'a>(cells: &'a [CellEval], ood: usize, score: Score) -> Option<&'a CellEval> {
    cells.iter().find(|c| c.ood == ood && c.score == score)
}

impl OODReport {
    pub fn aggregate(ind_name: &str, oods: Vec<OodInfo>, scores: Vec<Score>, members: Vec<MemberEval>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::Validation("a report needs at least one evaluation".into()));
        }
        let mut rows = Vec::new();
        for j in 0..oods.len() {
            for &score in &scores {
                let items: Vec<Metrics> = members
                    .iter()
                    .map(|m| {
                        cell(&m.cells, j, score).map(|c| c.metrics).ok_or_else(|| {
                            Error::Validation(format!("run {} model {} lacks {score} on set {j}", m.run, m.model))
                        })
                    })
                    .collect::<Result<_>>()?;
                rows.push(ReportRow {
                    ood: j,
                    score,
                    metrics: Metrics::mean(&items).unwrap(),
                });
            }
        }
        let ind_accuracy = members.iter().map(|m| m.accuracy).sum::<f64>() / members.len() as f64;
        Ok(OODReport {
            ind_name: ind_name.to_string(),
            ind_accuracy,
            oods,
            scores,
            rows,
            members,
            config_checksum: None,
        })
    }

    pub fn row(&self, ood: usize, score: Score) -> Option<Metrics> {
        self.rows.iter().find(|r| r.ood == ood && r.score == score).map(|r| r.metrics)
    }

    /// Mean over OOD sets of the per-set rows.
    pub fn mean_row(&self, score: Score, include_noise: bool) -> Option<Metrics> {
        let items: Vec<Metrics> = self
            .rows
            .iter()
            .filter(|r| r.score == score && (include_noise || !self.oods[r.ood].noise))
            .map(|r| r.metrics)
            .collect();
        Metrics::mean(&items)
    }

    /// One `key=value` line per cell; floats use the shortest round-trip form.
    pub fn to_key_values(&self, arm: &str) -> String {
        let mut s = String::new();
        let mut put = |k: String, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        put("arm".into(), arm.into());
        put("config_checksum".into(), self.config_checksum.clone().unwrap_or_else(|| "none".into()));
        put("ind".into(), self.ind_name.clone());
        put("ind_accuracy".into(), format!("{:?}", self.ind_accuracy));
        put("scores".into(), self.scores.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(","));
        put("oods".into(), self.oods.len().to_string());
        for (j, o) in self.oods.iter().enumerate() {
            put(format!("ood.{j}.name"), o.name.clone());
            put(format!("ood.{j}.noise"), o.noise.to_string());
        }
        for r in &self.rows {
            for (name, v) in Metrics::NAMES.iter().zip(r.metrics.values()) {
                put(format!("row.{}.{}.{name}", r.ood, r.score), format!("{v:?}"));
            }
        }
        for &score in &self.scores {
            for (tag, noise) in [("mean", false), ("mean_with_noise", true)] {
                if let Some(m) = self.mean_row(score, noise) {
                    for (name, v) in Metrics::NAMES.iter().zip(m.values()) {
                        put(format!("{tag}.{score}.{name}"), format!("{v:?}"));
                    }
                }
            }
        }
        put("members".into(), self.members.len().to_string());
        for (i, m) in self.members.iter().enumerate() {
            put(format!("member.{i}.run"), m.run.to_string());
            put(format!("member.{i}.model"), m.model.to_string());
            put(format!("member.{i}.seed"), m.seed.to_string());
            put(format!("member.{i}.accuracy"), format!("{:?}", m.accuracy));
            for c in &m.cells {
                for (name, v) in Metrics::NAMES.iter().zip(c.metrics.values()) {
                    put(format!("member.{i}.{}.{}.{name}", c.ood, c.score), format!("{v:?}"));
                }
            }
        }
        s
    }

    /// Inverse of [`OODReport::to_key_values`]; returns the arm label too.
    pub fn from_key_values(text: &str) -> Result<(String, OODReport)> {
        let mut kv = BTreeMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("report line `{line}` is not key=value")))?;
            kv.insert(k.to_string(), v.to_string());
        }
        let get = |k: &str| kv.get(k).cloned().ok_or_else(|| Error::Config(format!("report lacks `{k}`")));
        let num = |k: &str| -> Result<f64> {
            get(k)?.parse().map_err(|_| Error::Config(format!("report value `{k}` is not a number")))
        };
        let count = |k: &str| -> Result<usize> {
            get(k)?.parse().map_err(|_| Error::Config(format!("report value `{k}` is not a count")))
        };
        let metrics = |prefix: &str| -> Result<Metrics> {
            let mut v = [0.0; 4];
            for (slot, name) in v.iter_mut().zip(Metrics::NAMES) {
                *slot = num(&format!("{prefix}.{name}"))?;
            }
            Ok(Metrics::from_values(v))
        };
        let scores: Vec<Score> = get("scores")?.split(',').map(str::parse).collect::<Result<_>>()?;
        let oods: Vec<OodInfo> = (0..count("oods")?)
            .map(|j| {
                Ok(OodInfo {
                    name: get(&format!("ood.{j}.name"))?,
                    noise: get(&format!("ood.{j}.noise"))? == "true",
                })
            })
            .collect::<Result<_>>()?;
        let mut rows = Vec::new();
        for j in 0..oods.len() {
            for &score in &scores {
                rows.push(ReportRow {
                    ood: j,
                    score,
                    metrics: metrics(&format!("row.{j}.{score}"))?,
                });
            }
        }
        let mut members = Vec::new();
        for i in 0..count("members")? {
            let mut cells = Vec::new();
            for j in 0..oods.len() {
                for &score in &scores {
                    cells.push(CellEval {
                        ood: j,
                        score,
                        metrics: metrics(&format!("member.{i}.{j}.{score}"))?,
                    });
                }
            }
            members.push(MemberEval {
                run: count(&format!("member.{i}.run"))?,
                model: count(&format!("member.{i}.model"))?,
                seed: get(&format!("member.{i}.seed"))?
                    .parse()
                    .map_err(|_| Error::Config(format!("bad seed for member {i}")))?,
                accuracy: num(&format!("member.{i}.accuracy"))?,
                cells,
            });
        }
        let checksum = get("config_checksum")?;
        Ok((
            get("arm")?,
            OODReport {
                ind_name: get("ind")?,
                ind_accuracy: num("ind_accuracy")?,
                oods,
                scores,
                rows,
                members,
                config_checksum: (checksum != "none").then_some(checksum),
            },
        ))
    }
}

/// Text table with one row per OOD set plus the mean, and one column group
/// per metric holding every arm. Rates are printed in percent.
pub fn render_table(arms: &[(&str, &OODReport)], score: Score, include_noise: bool) -> Result<String> {
    let Some((_, first)) = arms.first() else {
        return Err(Error::Config("no reports to tabulate".into()));
    };
    for (name, r) in arms {
        if r.oods != first.oods {
            return Err(Error::Config(format!("arm `{name}` was evaluated on different OOD sets")));
        }
        if !r.scores.contains(&score) {
            return Err(Error::Config(format!("arm `{name}` has no {score} scores")));
        }
    }
    let heads = ["FPR95", "AUROC", "AUPR-IN", "AUPR-OUT"];
    let width = 9;
    let label_w = first.oods.iter().map(|o| o.name.len()).max().unwrap_or(0).max(18);
    let mut out = String::new();
    let checksums: Vec<String> = arms
        .iter()
        .map(|(a, r)| format!("{a}={}", r.config_checksum.as_deref().unwrap_or("none")))
        .collect();
    let _ = writeln!(out, "# config_checksum {}", checksums.join(" "));
    let _ = writeln!(out, "# score={score} ind={}", first.ind_name);
    let acc: Vec<String> = arms.iter().map(|(a, r)| format!("{a}={:.2}", 100.0 * r.ind_accuracy)).collect();
    let _ = writeln!(out, "# ind_accuracy {}", acc.join(" "));
    let group_w = arms.len() * (width + 1);
    let _ = write!(out, "{:label_w$} ", "");
    for h in heads {
        let _ = write!(out, "| {h:<group_w$}");
    }
    out.push('\n');
    let _ = write!(out, "{:label_w$} ", "dataset");
    for _ in heads {
        out.push_str("| ");
        for (a, _) in arms {
            let _ = write!(out, "{a:>width$} ");
        }
    }
    out.push('\n');
    let mut line = |label: &str, get: &dyn Fn(&OODReport) -> Option<Metrics>| -> Result<()> {
        let _ = write!(out, "{label:label_w$} ");
        for k in 0..4 {
            out.push_str("| ");
            for (a, r) in arms {
                let m = get(r).ok_or_else(|| Error::Config(format!("arm `{a}` lacks row {label}")))?;
                let _ = write!(out, "{:>width$.2} ", 100.0 * m.values()[k]);
            }
        }
        out.push('\n');
        Ok(())
    };
    for (j, o) in first.oods.iter().enumerate() {
        line(&o.name, &|r: &OODReport| r.row(j, score))?;
    }
    // With only noise sets and noise excluded there is nothing to average.
    if first.mean_row(score, include_noise).is_some() {
        let label = if include_noise { "mean (with noise)" } else { "mean" };
        line(label, &|r: &OODReport| r.mean_row(score, include_noise))?;
    }
    Ok(out)
}
