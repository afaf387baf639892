//! Output files of a run.
//!
//! `results.csv` and `latents_pca.csv` depend only on the config, so two
//! runs of the same config produce byte-identical files. Wall-clock times
//! go to `summary.json` only.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::MetricThresholds;

use super::config::{ExperimentConfig, SCHEMA_VERSION};
use super::experiment::{
    CalibrationEntry, EvaluationRecord, EvaluationReport, LatentProjection, RuntimeSummary, ScenarioSummary,
};

pub const RESULTS_FILE: &str = "results.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const LATENTS_FILE: &str = "latents_pca.csv";
pub const CONFIG_ECHO_FILE: &str = "config_echo.json";
pub const CALIBRATION_FILE: &str = "calibration.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentRow {
    pub objective: String,
    pub model: String,
    pub image: usize,
    pub group: String,
    pub pc1: f64,
    pub pc2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparationEntry {
    pub objective: String,
    pub model: String,
    pub separation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryFile {
    pub schema_version: u32,
    pub metadata: std::collections::BTreeMap<String, String>,
    pub thresholds: MetricThresholds,
    pub scenarios: Vec<ScenarioSummary>,
    pub runtime_seconds: Vec<RuntimeSummary>,
    pub latent_separation: Vec<SeparationEntry>,
}

fn create(path: &Path) -> Result<File> {
    File::create(path).map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Decode {
            path: path.to_path_buf(),
            message: format!("{other:?}"),
        },
    }
}

fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>, header: &[&str]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(create(path)?);
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n").map_err(|e| Error::io(path, e))
}

pub fn write_results_csv(path: &Path, records: &[EvaluationRecord]) -> Result<()> {
    write_csv(
        path,
        records,
        &["scenario", "objective", "model", "image", "l2_image", "id_loss", "perceptual", "success"],
    )
}

pub fn read_results_csv(path: &Path) -> Result<Vec<EvaluationRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| csv_error(path, e))
}

pub fn latent_rows(latents: &[LatentProjection]) -> Vec<LatentRow> {
    let mut rows = Vec::new();
    for p in latents {
        for (group, points) in [("clean", &p.clean), ("disrupted", &p.disrupted)] {
            rows.extend(points.iter().enumerate().map(|(image, pt)| LatentRow {
                objective: p.objective.to_string(),
                model: p.model.clone(),
                image,
                group: group.into(),
                pc1: pt[0],
                pc2: pt[1],
            }));
        }
    }
    rows
}

pub fn write_latents_csv(path: &Path, latents: &[LatentProjection]) -> Result<()> {
    write_csv(path, latent_rows(latents), &["objective", "model", "image", "group", "pc1", "pc2"])
}

pub fn separations(latents: &[LatentProjection]) -> Vec<SeparationEntry> {
    latents
        .iter()
        .map(|p| SeparationEntry {
            objective: p.objective.to_string(),
            model: p.model.clone(),
            separation: p.separation,
        })
        .collect()
}

pub fn summary_file(report: &EvaluationReport, config: &ExperimentConfig) -> SummaryFile {
    SummaryFile {
        schema_version: SCHEMA_VERSION,
        metadata: report.metadata.clone(),
        thresholds: config.thresholds,
        scenarios: report.summaries.clone(),
        runtime_seconds: report.runtime.clone(),
        latent_separation: separations(&report.latents),
    }
}

/// Writes every report file into `dir` (created if missing) and returns
/// their paths.
pub fn emit_reports(report: &EvaluationReport, config: &ExperimentConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let paths: Vec<PathBuf> = [RESULTS_FILE, SUMMARY_FILE, LATENTS_FILE, CONFIG_ECHO_FILE]
        .iter()
        .map(|f| dir.join(f))
        .collect();
    write_results_csv(&paths[0], &report.records)?;
    write_json(&paths[1], &summary_file(report, config))?;
    write_latents_csv(&paths[2], &report.latents)?;
    write_json(&paths[3], config)?;
    Ok(paths)
}

pub fn write_calibration(path: &Path, entries: &[CalibrationEntry]) -> Result<()> {
    write_json(path, &entries)
}

pub fn write_json_file<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_json(path, value)
}
