//! Batch orchestration: configuration, the nine-step run and QC reporting.

pub mod config;
pub mod report;
pub mod run;

pub use config::{validate_config, AslKind, PipelineConfig, PvcMethod, StepFlags, SubjectRecord};
pub use report::emit_qc_report;
pub use run::{run_pipeline, RunReport, StepRecord, SubjectReport, SubjectStatus};
