//! Config-driven experiment runner and report writer.

pub mod config;
pub mod dataset;
pub mod experiment;
pub mod report;

pub use config::{DatasetConfig, ExperimentConfig, MetricsConfig, ModelConfig, Scenario};
pub use experiment::{summarize, EvaluationRecord, EvaluationReport, Experiment, Perturbation, ScenarioSummary};
pub use report::emit_reports;
