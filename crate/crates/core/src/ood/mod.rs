//! Detection scores, threshold and ranking metrics, and the multi-model
//! evaluation protocol.

mod metrics;
mod protocol;
mod report;
mod scores;

pub use metrics::{aupr, auroc, fpr_at_tpr, Metrics, Positive};
pub use protocol::{balanced_pair, evaluate_model, evaluate_protocol, model_seed, CellEval, MemberEval, ProtocolConfig};
pub use report::{render_table, OODReport, OodInfo, ReportRow};
pub use scores::{energy_score, mls_score, msp_score, Score, ScoreSet};

#[cfg(test)]
mod tests;
