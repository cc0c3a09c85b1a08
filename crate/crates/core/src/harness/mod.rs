//! Training, evaluation, parameter accounting, ablations and reporting.

mod ablation;
mod config;
mod eval;
mod gradsuite;
mod model;
mod optim;
mod params;
mod probe;
mod report;
mod train;

pub use ablation::{
    ablation_header, read_ablation_csv, run_ablation, standard_grid, summarize, write_ablation_csv,
    write_summary_csv, AblationRecord, AblationRow, AblationRun, AblationSummary, AXES,
};
pub use config::TrainConfig;
pub use eval::{evaluate, ConfusionMatrix, Evaluation, EVAL_BATCH};
pub use gradsuite::{gradient_suite, GradCheck, GRADCHECK_STEP, GRADCHECK_TOLERANCE};
pub use model::{stack_images, ForwardOutput, Model};
pub use optim::AdamW;
pub use params::{count_parameters, parameter_reduction, ParamCounts, ParamReduction};
pub use probe::LinearProbe;
pub use report::{report_caa_weights, CaaWeightTable};
pub use train::{build_report, fit, train, train_logged, RunReport, Splits, StepLog};
