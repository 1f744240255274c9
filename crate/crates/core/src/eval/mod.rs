//! Classification metrics and device-level evaluation protocols.

pub mod metrics;
pub mod protocols;

pub use metrics::{confusion, majority_class, per_class, roc_auc_ovr, severity_report, weighted_f1, ClassMetrics};
pub use protocols::{
    device_ablation, leave_one_out, prepare_fold, progressive_deployment, run_fold, single_source, single_source_all,
    window_sweep, AblationReport, EvalReport, EvalSetup, FoldReport, Labeling, PreparedFold, ProgressiveReport, WindowSweepReport,
};
