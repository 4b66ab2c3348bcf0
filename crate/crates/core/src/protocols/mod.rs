//! Cross-validation fold plans and the accuracy / UF1 / UAR metrics.

mod folds;
mod metrics;

pub use folds::{
    cdmer_pair, plan_cdmer, plan_loso, Fold, FoldPlan, PlanKind, Protocol, CDMER_EXPERIMENTS, CDMER_FOLDS,
};
pub use metrics::{compute_metrics, ConfusionMatrix, MetricsReport};
