//! JSON experiment configuration (`schema_version` 1).
//!
//! Every field has a default; an empty object `{}` is a valid config that
//! reproduces the default experiment: four attacked models, one held-out
//! model, 500 synthetic sources, ε = 0.05, a = 0.01, T = 30 with random
//! start, normalized gradient ensemble, and all three scenarios.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attack::AttackConfig;
use crate::ensemble::EnsembleStrategy;
use crate::error::{Error, Result};
use crate::metrics::MetricThresholds;
use crate::objective::ObjectiveKind;
use crate::zoo::{Archetype, ModelDims};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    WhiteBox,
    GrayBox,
    BlackBox,
}

impl Scenario {
    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::WhiteBox => "white_box",
            Scenario::GrayBox => "gray_box",
            Scenario::BlackBox => "black_box",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "white_box" => Ok(Scenario::WhiteBox),
            "gray_box" => Ok(Scenario::GrayBox),
            "black_box" => Ok(Scenario::BlackBox),
            other => Err(Error::Config(format!("unknown scenario `{other}`"))),
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    pub archetype: Archetype,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub dims: ModelDims,
    /// Defaults per archetype when omitted (see [`default_attribute_counts`]).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub known_attributes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unknown_attributes: Option<usize>,
}

impl ModelConfig {
    pub fn new(name: &str, archetype: Archetype, seed: u64) -> Self {
        Self {
            name: name.to_string(),
            archetype,
            seed,
            dims: ModelDims::default(),
            known_attributes: None,
            unknown_attributes: None,
        }
    }

    pub fn attribute_counts(&self) -> (usize, usize) {
        let (k, u) = default_attribute_counts(self.archetype);
        (self.known_attributes.unwrap_or(k), self.unknown_attributes.unwrap_or(u))
    }
}

/// Known/unknown pool sizes: five text-like edits each for the
/// attribute-vector model, two for the refiner, one target face each for
/// the swapper, and a four-frame driving clip each for the reenactor.
pub fn default_attribute_counts(archetype: Archetype) -> (usize, usize) {
    match archetype {
        Archetype::VecConditional => (5, 5),
        Archetype::Refiner => (2, 2),
        Archetype::Swapper => (1, 1),
        Archetype::Reenactor => (4, 4),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub count: usize,
    pub seed: u64,
    /// `[height, width, channels]`.
    pub shape: [usize; 3],
    /// Directory of PGM/PPM sources used instead of synthetic images.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input_dir: Option<PathBuf>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            count: 500,
            seed: 0,
            shape: [8, 8, 1],
            input_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub embedder_seed: u64,
    /// Half-width of the uniform noise used by `calibrate`.
    pub calibration_noise: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            embedder_seed: 2024,
            calibration_noise: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub models: Vec<ModelConfig>,
    /// Name of a model in `models` that is never attacked and is evaluated
    /// only in the black-box scenario.
    pub holdout: Option<String>,
    pub attack: AttackConfig,
    pub objectives: Vec<ObjectiveKind>,
    pub ensemble: EnsembleStrategy,
    pub attribute_seed: u64,
    pub dataset: DatasetConfig,
    pub scenarios: Vec<Scenario>,
    pub thresholds: MetricThresholds,
    pub metrics: MetricsConfig,
    /// Parallel workers for per-image attacks; 0 uses all cores.
    pub workers: usize,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            models: vec![
                ModelConfig::new("vec_conditional", Archetype::VecConditional, 1),
                ModelConfig::new("refiner", Archetype::Refiner, 2),
                ModelConfig::new("swapper", Archetype::Swapper, 3),
                ModelConfig::new("reenactor", Archetype::Reenactor, 4),
                ModelConfig::new("holdout", Archetype::VecConditional, 5),
            ],
            holdout: Some("holdout".into()),
            attack: AttackConfig::default(),
            objectives: vec![ObjectiveKind::ImageAttack, ObjectiveKind::Leat],
            ensemble: EnsembleStrategy::default(),
            attribute_seed: 7,
            dataset: DatasetConfig::default(),
            scenarios: vec![Scenario::WhiteBox, Scenario::GrayBox, Scenario::BlackBox],
            thresholds: MetricThresholds::default(),
            metrics: MetricsConfig::default(),
            workers: 0,
            output_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config is always serializable")
    }

    /// Overrides the dataset and attack seeds.
    pub fn apply_seed_override(&mut self, seed: u64) {
        self.dataset.seed = seed;
        self.attack.seed = seed;
    }

    pub fn attack_models(&self) -> impl Iterator<Item = &ModelConfig> {
        self.models
            .iter()
            .filter(move |m| Some(&m.name) != self.holdout.as_ref())
    }

    pub fn holdout_model(&self) -> Option<&ModelConfig> {
        let name = self.holdout.as_ref()?;
        self.models.iter().find(|m| &m.name == name)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.schema_version != SCHEMA_VERSION {
            return fail(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        let mut names = BTreeSet::new();
        for m in &self.models {
            let valid = !m.name.is_empty()
                && m.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
            if !valid {
                return fail(format!("model name `{}` must be non-empty [A-Za-z0-9_-]", m.name));
            }
            if !names.insert(&m.name) {
                return fail(format!("duplicate model name `{}`", m.name));
            }
            if m.dims.image != self.dataset.shape {
                return fail(format!(
                    "model `{}` expects images {:?} but the dataset has {:?}",
                    m.name, m.dims.image, self.dataset.shape
                ));
            }
        }
        if let Some(h) = &self.holdout {
            if !names.contains(h) {
                return fail(format!("holdout `{h}` is not one of the configured models"));
            }
        }
        let attack_models: Vec<_> = self.attack_models().collect();
        if attack_models.is_empty() {
            return fail("at least one non-holdout model is required".into());
        }
        if self.objectives.is_empty() {
            return fail("objectives must not be empty".into());
        }
        if self.scenarios.is_empty() {
            return fail("scenarios must not be empty".into());
        }
        if self.dataset.count == 0 {
            return fail("dataset.count must be at least 1".into());
        }
        if self.objectives.contains(&ObjectiveKind::ImageAttack) {
            if let Some(m) = attack_models.iter().find(|m| m.attribute_counts().0 == 0) {
                return fail(format!("image_attack needs known attributes for `{}`", m.name));
            }
        }
        for scenario in &self.scenarios {
            match scenario {
                Scenario::WhiteBox => {
                    if let Some(m) = attack_models.iter().find(|m| m.attribute_counts().0 == 0) {
                        return fail(format!("white_box needs known attributes for `{}`", m.name));
                    }
                }
                Scenario::GrayBox => {
                    if let Some(m) = attack_models.iter().find(|m| m.attribute_counts().1 == 0) {
                        return fail(format!("gray_box needs unknown attributes for `{}`", m.name));
                    }
                }
                Scenario::BlackBox => {
                    let Some(h) = self.holdout_model() else {
                        return fail("black_box needs a holdout model".into());
                    };
                    if h.attribute_counts().1 == 0 {
                        return fail(format!("black_box needs unknown attributes for holdout `{}`", h.name));
                    }
                }
            }
        }
        self.attack.validate()?;
        self.thresholds.validate()?;
        self.ensemble.validate(attack_models.len())?;
        if self.metrics.calibration_noise.is_nan() || self.metrics.calibration_noise <= 0.0 {
            return fail("metrics.calibration_noise must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_default() {
        let cfg = ExperimentConfig::from_json("{}").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.attack.epsilon, 0.05);
        assert_eq!(cfg.attack.step, 0.01);
        assert_eq!(cfg.attack.iterations, 30);
        assert_eq!(cfg.dataset.count, 500);
        assert_eq!(cfg.attack_models().count(), 4);
    }

    #[test]
    fn round_trips_through_json() {
        let cfg = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn rejects_invalid_configs() {
        let bad = [
            r#"{"schema_version": 2}"#,
            r#"{"holdout": "nope"}"#,
            r#"{"holdout": null}"#,
            r#"{"objectives": []}"#,
            r#"{"attack": {"epsilon": 0}}"#,
            r#"{"unknown_field": 1}"#,
            r#"{"models": [{"name": "a", "archetype": "stargan"}]}"#,
            r#"{"models": [{"name": "a", "archetype": "refiner"}, {"name": "a", "archetype": "refiner"}], "holdout": null, "scenarios": ["white_box"]}"#,
            r#"{"dataset": {"count": 0}}"#,
            r#"{"dataset": {"shape": [4, 4, 1]}}"#,
            r#"{"models": [{"name": "a", "archetype": "refiner", "unknown_attributes": 0}], "holdout": null, "scenarios": ["gray_box"]}"#,
            r#"{"ensemble": {"kind": "loss_ensemble", "weights": [1.0]}}"#,
        ];
        for text in bad {
            assert!(
                matches!(ExperimentConfig::from_json(text), Err(Error::Config(_))),
                "accepted {text}"
            );
        }
    }

    #[test]
    fn seed_override_touches_dataset_and_attack() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_seed_override(99);
        assert_eq!((cfg.dataset.seed, cfg.attack.seed), (99, 99));
    }
}
