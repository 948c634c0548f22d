//! Detection metrics, latency measurement, adversarial perturbation, and
//! local explanations.

mod attack;
mod lime;
mod metrics;
mod timing;

pub use attack::{
    accuracy_under_attack, attack, attack_records, default_homoglyphs, AttackKind, AttackReport, AttackSpec,
    CatBertScorer, TextScorer,
};
pub use lime::{explain_example, lime_explain, spearman, Attribution, LimeConfig};
pub use metrics::{
    aggregate, fpr_key, group_metrics, group_name, mean_std, metrics, roc_auc, roc_curve, threshold_at_fpr,
    tpr_at_fpr, Aggregate, MeanStd, Metrics, MetricsReport, RocCurve, RocPoint, ScoreSet, DEFAULT_FPRS,
};
pub use timing::{percentile, time_inference, TimingConfig, TimingEntry, TimingReport};
