//! Builds the models, attribute pools and dataset from a config, computes
//! one perturbation per (objective, image), and evaluates it under each
//! scenario.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{run_attack, AttackConfig};
use crate::ensemble::EnsembleGradient;
use crate::error::{Error, Result};
use crate::metrics::{
    aggregate_dsr, classify_success, id_distance, l2_image, pca_project_latents, perceptual_distance,
    separation_statistic, DsrSummary, SurrogateEmbedder,
};
use crate::objective::{ObjectiveKind, ObjectiveSpec};
use crate::tensor::Tensor;
use crate::zoo::{AttributeSet, ModelRef, TwoStageModel};

use super::config::{ExperimentConfig, Scenario};
use super::dataset::load_dataset;

/// Per-image attack seed: a SplitMix64 step over `base ^ index`.
pub fn derive_seed(base: u64, index: usize) -> u64 {
    let mut z = base ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct Perturbation {
    pub eta: Tensor,
    /// Objective construction plus the attack loop.
    pub elapsed: Duration,
}

/// Metrics of one (scenario, objective, model, image), averaged over the
/// scenario's attributes before thresholding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRecord {
    pub scenario: Scenario,
    pub objective: ObjectiveKind,
    pub model: String,
    pub image: usize,
    pub l2_image: f64,
    pub id_loss: f64,
    pub perceptual: f64,
    pub success: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSummary {
    pub scenario: Scenario,
    pub objective: ObjectiveKind,
    pub models: Vec<String>,
    pub images: usize,
    #[serde(flatten)]
    pub dsr: DsrSummary,
    pub mean_l2_image: f64,
    pub mean_id_loss: f64,
    pub mean_perceptual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuntimeSummary {
    pub objective: ObjectiveKind,
    pub wall_seconds: f64,
    /// Sum of per-image attack times (exceeds wall time when parallel).
    pub attack_seconds: f64,
    pub images: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentProjection {
    pub objective: ObjectiveKind,
    pub model: String,
    pub clean: Vec<[f64; 2]>,
    pub disrupted: Vec<[f64; 2]>,
    pub separation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub records: Vec<EvaluationRecord>,
    pub summaries: Vec<ScenarioSummary>,
    pub runtime: Vec<RuntimeSummary>,
    pub latents: Vec<LatentProjection>,
    pub metadata: BTreeMap<String, String>,
}

pub struct Experiment {
    config: ExperimentConfig,
    models: Vec<ModelRef>,
    attributes: Vec<AttributeSet>,
    attack_ids: Vec<usize>,
    holdout: Option<usize>,
    images: Vec<Tensor>,
    embedder: SurrogateEmbedder,
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let mut models = Vec::with_capacity(config.models.len());
        let mut attributes = Vec::with_capacity(config.models.len());
        for (i, m) in config.models.iter().enumerate() {
            let model = TwoStageModel::build(&m.name, m.archetype, m.seed, &m.dims)?;
            let mut rng = ChaCha8Rng::seed_from_u64(config.attribute_seed);
            rng.set_stream(i as u64);
            let (known, unknown) = m.attribute_counts();
            attributes.push(AttributeSet::sample(&model, &mut rng, known, unknown)?);
            models.push(Arc::new(model));
        }
        let holdout = config
            .holdout
            .as_ref()
            .and_then(|h| config.models.iter().position(|m| &m.name == h));
        let attack_ids = (0..models.len()).filter(|&i| Some(i) != holdout).collect();
        let images = load_dataset(&config.dataset)?;
        let embedder = SurrogateEmbedder::new(config.metrics.embedder_seed, config.dataset.shape);
        Ok(Self {
            config,
            models,
            attributes,
            attack_ids,
            holdout,
            images,
            embedder,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn images(&self) -> &[Tensor] {
        &self.images
    }

    pub fn models(&self) -> &[ModelRef] {
        &self.models
    }

    pub fn attack_models(&self) -> Vec<ModelRef> {
        self.attack_ids.iter().map(|&i| self.models[i].clone()).collect()
    }

    pub fn holdout_model(&self) -> Option<&ModelRef> {
        self.holdout.map(|i| &self.models[i])
    }

    pub fn attributes(&self, model: usize) -> &AttributeSet {
        &self.attributes[model]
    }

    pub fn embedder(&self) -> &SurrogateEmbedder {
        &self.embedder
    }

    /// The objective as the attacker sees it: Image Attack gets only the
    /// known attributes of the attacked models.
    pub fn objective_spec(&self, kind: ObjectiveKind) -> ObjectiveSpec {
        match kind {
            ObjectiveKind::Leat => ObjectiveSpec::Leat,
            ObjectiveKind::ImageAttack => ObjectiveSpec::ImageAttack {
                attributes: self
                    .attack_ids
                    .iter()
                    .map(|&i| self.attributes[i].known().to_vec())
                    .collect(),
            },
        }
    }

    pub fn attack_config(&self, image: usize) -> AttackConfig {
        AttackConfig {
            seed: derive_seed(self.config.attack.seed, image),
            ..self.config.attack.clone()
        }
    }

    /// Computes the protective perturbation for `x` (which need not be part
    /// of the dataset); `image` selects the random-start seed.
    pub fn perturb_image(&self, kind: ObjectiveKind, x: &Tensor, image: usize) -> Result<Perturbation> {
        let start = Instant::now();
        let objectives = self.objective_spec(kind).build(&self.attack_models(), x)?;
        let mut provider = EnsembleGradient::new(objectives, self.config.ensemble.clone())?;
        let eta = run_attack(&mut provider, x, &self.attack_config(image))?;
        Ok(Perturbation {
            eta,
            elapsed: start.elapsed(),
        })
    }

    pub fn perturb(&self, kind: ObjectiveKind, image: usize) -> Result<Perturbation> {
        let x = self
            .images
            .get(image)
            .ok_or_else(|| Error::Config(format!("image index {image} out of range ({})", self.images.len())))?;
        self.perturb_image(kind, x, image)
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.config.workers)
            .build()
            .map_err(|e| Error::Contract(format!("cannot start worker pool: {e}")))
    }

    /// Perturbations for every dataset image, in image order, plus the wall
    /// time of the whole batch.
    pub fn perturb_all(&self, kind: ObjectiveKind) -> Result<(Vec<Perturbation>, Duration)> {
        let pool = self.pool()?;
        let start = Instant::now();
        let out = pool.install(|| {
            (0..self.images.len())
                .into_par_iter()
                .map(|i| self.perturb(kind, i))
                .collect::<Result<Vec<_>>>()
        })?;
        Ok((out, start.elapsed()))
    }

    /// Models evaluated in a scenario, each paired with its attribute pool.
    pub fn scenario_targets(&self, scenario: Scenario) -> Vec<(ModelRef, &[Tensor])> {
        match scenario {
            Scenario::WhiteBox => self
                .attack_ids
                .iter()
                .map(|&i| (self.models[i].clone(), self.attributes[i].known()))
                .collect(),
            Scenario::GrayBox => self
                .attack_ids
                .iter()
                .map(|&i| (self.models[i].clone(), self.attributes[i].unknown()))
                .collect(),
            Scenario::BlackBox => self
                .holdout
                .map(|i| (self.models[i].clone(), self.attributes[i].unknown()))
                .into_iter()
                .collect(),
        }
    }

    /// Attribute-averaged `(l2, id, perceptual)` of a perturbed image on one
    /// model.
    pub fn image_metrics(&self, model: &TwoStageModel, attrs: &[Tensor], x: &Tensor, eta: &Tensor) -> Result<[f64; 3]> {
        if attrs.is_empty() {
            return Err(Error::Config(format!("no evaluation attributes for `{}`", model.name())));
        }
        let z_clean = model.encode(x)?;
        let z_pert = model.encode(&x.add(eta)?)?;
        let mut sums = [0.0; 3];
        for c in attrs {
            let y_clean = model.generate(&z_clean, c)?;
            let y_pert = model.generate(&z_pert, c)?;
            sums[0] += l2_image(&y_clean, &y_pert)?;
            sums[1] += id_distance(&y_clean, &y_pert, &self.embedder)?;
            sums[2] += perceptual_distance(&y_clean, &y_pert, &self.embedder)?;
        }
        Ok(sums.map(|s| s / attrs.len() as f64))
    }

    pub fn evaluate(
        &self,
        scenario: Scenario,
        objective: ObjectiveKind,
        perturbations: &[Perturbation],
    ) -> Result<Vec<EvaluationRecord>> {
        if perturbations.len() != self.images.len() {
            return Err(Error::InconsistentImages(format!(
                "{} perturbations for {} images",
                perturbations.len(),
                self.images.len()
            )));
        }
        let th = &self.config.thresholds;
        let mut records = Vec::new();
        for (model, attrs) in self.scenario_targets(scenario) {
            let per_image = self.pool()?.install(|| {
                self.images
                    .par_iter()
                    .zip(perturbations)
                    .map(|(x, p)| self.image_metrics(&model, attrs, x, &p.eta))
                    .collect::<Result<Vec<_>>>()
            })?;
            records.extend(per_image.into_iter().enumerate().map(|(image, [l2, id, lp])| {
                EvaluationRecord {
                    scenario,
                    objective,
                    model: model.name().to_string(),
                    image,
                    l2_image: l2,
                    id_loss: id,
                    perceptual: lp,
                    success: classify_success(l2, id, lp, th),
                }
            }));
        }
        Ok(records)
    }

    /// 2-D PCA of clean and disrupted latents for each attacked model.
    pub fn project_latents(&self, objective: ObjectiveKind, perturbations: &[Perturbation]) -> Result<Vec<LatentProjection>> {
        let n = self.images.len();
        self.attack_models()
            .iter()
            .map(|model| {
                let mut latents = Vec::with_capacity(2 * n);
                for x in &self.images {
                    latents.push(flatten(model.encode(x)?)?);
                }
                for (x, p) in self.images.iter().zip(perturbations) {
                    latents.push(flatten(model.encode(&x.add(&p.eta)?)?)?);
                }
                let proj = pca_project_latents(&latents)?;
                let (clean, disrupted) = proj.points.split_at(n);
                Ok(LatentProjection {
                    objective,
                    model: model.name().to_string(),
                    clean: clean.to_vec(),
                    disrupted: disrupted.to_vec(),
                    separation: separation_statistic(clean, disrupted),
                })
            })
            .collect()
    }

    /// The full pipeline: perturb once per objective, evaluate the same
    /// perturbations under every scenario, and project latents.
    pub fn run(&self) -> Result<EvaluationReport> {
        let mut records = Vec::new();
        let mut runtime = Vec::new();
        let mut latents = Vec::new();
        for &objective in &self.config.objectives {
            let (perturbations, wall) = self.perturb_all(objective)?;
            runtime.push(RuntimeSummary {
                objective,
                wall_seconds: wall.as_secs_f64(),
                attack_seconds: perturbations.iter().map(|p| p.elapsed.as_secs_f64()).sum(),
                images: perturbations.len(),
            });
            for &scenario in &self.config.scenarios {
                records.extend(self.evaluate(scenario, objective, &perturbations)?);
            }
            if self.images.len() >= 2 {
                latents.extend(self.project_latents(objective, &perturbations)?);
            }
        }
        let summaries = summarize(&records)?;
        Ok(EvaluationReport {
            records,
            summaries,
            runtime,
            latents,
            metadata: self.metadata(),
        })
    }

    fn metadata(&self) -> BTreeMap<String, String> {
        let mut meta = BTreeMap::new();
        meta.insert("crate_version".into(), env!("CARGO_PKG_VERSION").into());
        meta.insert("ensemble".into(), self.config.ensemble.kind.to_string());
        meta.insert(
            "metric_aggregation".into(),
            "per-image metrics are averaged over the scenario's attributes, then thresholded".into(),
        );
        meta.insert(
            "surrogate_metrics".into(),
            format!(
                "identity and perceptual distances use frozen random networks (seed {})",
                self.embedder.seed()
            ),
        );
        meta.insert(
            "gray_box_attributes".into(),
            "evaluation uses each attacked model's unknown pool".into(),
        );
        meta
    }

    /// Metric distributions under tiny random noise, used to sanity-check
    /// thresholds: success rates here should be near zero.
    pub fn calibrate(&self) -> Result<Vec<CalibrationEntry>> {
        let noise = self.config.metrics.calibration_noise;
        let etas: Vec<Tensor> = self
            .images
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.attack.seed, i));
                x.map(|_| rng.random_range(-noise..=noise))
            })
            .collect();
        let th = &self.config.thresholds;
        self.models
            .iter()
            .zip(&self.attributes)
            .map(|(model, set)| {
                let attrs: Vec<Tensor> = set.known().iter().chain(set.unknown()).cloned().collect();
                let metrics = self
                    .images
                    .iter()
                    .zip(&etas)
                    .map(|(x, eta)| {
                        let clipped = x.add(eta)?.map(|v| v.clamp(0.0, 1.0)).sub(x)?;
                        self.image_metrics(model, &attrs, x, &clipped)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let column = |k: usize| metrics.iter().map(|m| m[k]).collect::<Vec<_>>();
                let success = metrics
                    .iter()
                    .filter(|m| classify_success(m[0], m[1], m[2], th))
                    .count();
                Ok(CalibrationEntry {
                    model: model.name().to_string(),
                    noise,
                    l2_image: Distribution::of(column(0)),
                    id_loss: Distribution::of(column(1)),
                    perceptual: Distribution::of(column(2)),
                    null_success_rate: success as f64 / metrics.len() as f64,
                })
            })
            .collect()
    }
}

fn flatten(t: Tensor) -> Result<Tensor> {
    let n = t.len();
    t.reshape(&[n])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub min: f64,
    pub mean: f64,
    pub p50: f64,
    pub p95: f64,
    pub p99: f64,
    pub max: f64,
}

impl Distribution {
    /// Nearest-rank quantiles; `values` must be non-empty.
    pub fn of(mut values: Vec<f64>) -> Self {
        values.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let rank = ((p * values.len() as f64).ceil() as usize).clamp(1, values.len());
            values[rank - 1]
        };
        Self {
            min: values[0],
            mean: values.iter().sum::<f64>() / values.len() as f64,
            p50: q(0.5),
            p95: q(0.95),
            p99: q(0.99),
            max: values[values.len() - 1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationEntry {
    pub model: String,
    pub noise: f64,
    pub l2_image: Distribution,
    pub id_loss: Distribution,
    pub perceptual: Distribution,
    pub null_success_rate: f64,
}

/// Aggregates records into one summary per (scenario, objective), in order
/// of first appearance. Models keep their first-appearance order too.
pub fn summarize(records: &[EvaluationRecord]) -> Result<Vec<ScenarioSummary>> {
    let mut groups: Vec<((Scenario, ObjectiveKind), Vec<&EvaluationRecord>)> = Vec::new();
    for r in records {
        let key = (r.scenario, r.objective);
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, g)) => g.push(r),
            None => groups.push((key, vec![r])),
        }
    }
    groups
        .into_iter()
        .map(|((scenario, objective), group)| {
            let mut models: Vec<String> = Vec::new();
            for r in &group {
                if !models.contains(&r.model) {
                    models.push(r.model.clone());
                }
            }
            let flags: Vec<Vec<bool>> = models
                .iter()
                .map(|m| {
                    let mut rows: Vec<_> = group.iter().filter(|r| &r.model == m).collect();
                    rows.sort_by_key(|r| r.image);
                    rows.iter().map(|r| r.success).collect()
                })
                .collect();
            let dsr = aggregate_dsr(&flags)?;
            let mean = |f: fn(&EvaluationRecord) -> f64| group.iter().map(|r| f(r)).sum::<f64>() / group.len() as f64;
            Ok(ScenarioSummary {
                scenario,
                objective,
                images: flags[0].len(),
                models,
                dsr,
                mean_l2_image: mean(|r| r.l2_image),
                mean_id_loss: mean(|r| r.id_loss),
                mean_perceptual: mean(|r| r.perceptual),
            })
        })
        .collect()
}
