//! Experiment orchestration: synthetic tasks, run matrices, size
//! accounting and metrics files.

pub mod experiment;
pub mod gradcheck;
pub mod metrics;
pub mod size;
pub mod task;

pub use experiment::{
    mean_std, run_experiment, summarize, CellSummary, ExperimentKind, ExperimentReport,
    ExperimentSpec, RunResult, RunSpec, SweepAxis, TeacherResult, TeacherSpec, SWEEP_BITS,
};
pub use gradcheck::{model_gradcheck, FamilyReport, ModelGradcheckOptions, ModelGradcheckReport};
pub use metrics::{read_jsonl, read_summary_csv, write_jsonl, write_summary_csv, SummaryRow};
pub use size::{quantized_model_size, SizeReport, MB};
pub use task::{label, SyntheticTask, TaskRule};
