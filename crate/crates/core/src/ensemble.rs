//! Cross-model gradient aggregation.
//!
//! Every strategy reduces a list of per-model gradients (all shaped like the
//! source image) to the single direction consumed by the sign-step loop.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::attack::GradientProvider;
use crate::error::{Error, Result};
use crate::objective::ModelObjective;
use crate::tensor::{l2_norm, Tensor};

/// Gradients with a smaller L2 norm contribute nothing to the normalized sum.
pub const ZERO_GRADIENT_THRESHOLD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    LossEnsemble,
    Hmm,
    GradientEnsemble,
    NormalizedGradientEnsemble,
}

impl StrategyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::LossEnsemble => "loss_ensemble",
            StrategyKind::Hmm => "hmm",
            StrategyKind::GradientEnsemble => "gradient_ensemble",
            StrategyKind::NormalizedGradientEnsemble => "normalized_gradient_ensemble",
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleStrategy {
    pub kind: StrategyKind,
    /// Per-model weights for `loss_ensemble`; `None` means all ones.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
}

impl Default for EnsembleStrategy {
    fn default() -> Self {
        Self::new(StrategyKind::NormalizedGradientEnsemble)
    }
}

impl EnsembleStrategy {
    pub fn new(kind: StrategyKind) -> Self {
        Self { kind, weights: None }
    }

    pub fn weighted(weights: Vec<f64>) -> Self {
        Self {
            kind: StrategyKind::LossEnsemble,
            weights: Some(weights),
        }
    }

    pub fn validate(&self, models: usize) -> Result<()> {
        if let Some(w) = &self.weights {
            if self.kind != StrategyKind::LossEnsemble {
                return Err(Error::Config(format!("weights are only meaningful for loss_ensemble, not {}", self.kind)));
            }
            if w.len() != models {
                return Err(Error::Config(format!("{} ensemble weights for {models} models", w.len())));
            }
            if w.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
                return Err(Error::Config("ensemble weights must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn aggregate(&self, per_model: &[PerModelGradient]) -> Result<Tensor> {
        match self.kind {
            StrategyKind::LossEnsemble => {
                let ones;
                let w = match &self.weights {
                    Some(w) => w.as_slice(),
                    None => {
                        ones = vec![1.0; per_model.len()];
                        &ones
                    }
                };
                aggregate_loss_ensemble(per_model, w)
            }
            StrategyKind::Hmm => aggregate_hmm(per_model),
            StrategyKind::GradientEnsemble => aggregate_gradient_ensemble(per_model),
            StrategyKind::NormalizedGradientEnsemble => aggregate_normalized(per_model),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerModelGradient {
    pub model_id: usize,
    pub loss: f64,
    pub gradient: Tensor,
}

fn check_inputs(per_model: &[PerModelGradient]) -> Result<&[usize]> {
    let first = per_model
        .first()
        .ok_or_else(|| Error::Contract("aggregation over zero models".into()))?;
    let shape = first.gradient.shape();
    if let Some(bad) = per_model.iter().find(|g| g.gradient.shape() != shape) {
        return Err(Error::shape("aggregate", bad.gradient.shape(), shape));
    }
    Ok(shape)
}

fn weighted_sum<'a>(shape: &[usize], terms: impl Iterator<Item = (f64, &'a Tensor)>) -> Tensor {
    let n: usize = shape.iter().product();
    let mut acc = vec![0.0; n];
    for (w, g) in terms {
        for (a, v) in acc.iter_mut().zip(g.data()) {
            *a += w * v;
        }
    }
    Tensor::from_parts(shape.to_vec(), acc)
}

/// `Σ_k ω_k g_k`.
pub fn aggregate_loss_ensemble(per_model: &[PerModelGradient], weights: &[f64]) -> Result<Tensor> {
    let shape = check_inputs(per_model)?;
    if weights.len() != per_model.len() {
        return Err(Error::Contract(format!(
            "{} weights for {} gradients",
            weights.len(),
            per_model.len()
        )));
    }
    Ok(weighted_sum(shape, weights.iter().copied().zip(per_model.iter().map(|g| &g.gradient))))
}

/// Gradient of the model with the smallest current loss; ties go to the
/// lowest `model_id`.
pub fn aggregate_hmm(per_model: &[PerModelGradient]) -> Result<Tensor> {
    check_inputs(per_model)?;
    let hardest = per_model
        .iter()
        .min_by(|a, b| a.loss.total_cmp(&b.loss).then(a.model_id.cmp(&b.model_id)))
        .expect("non-empty");
    Ok(hardest.gradient.clone())
}

/// `(1/K) Σ_k g_k`.
pub fn aggregate_gradient_ensemble(per_model: &[PerModelGradient]) -> Result<Tensor> {
    let shape = check_inputs(per_model)?;
    let w = 1.0 / per_model.len() as f64;
    Ok(weighted_sum(shape, per_model.iter().map(|g| (w, &g.gradient))))
}

/// `Σ_k g_k / ‖g_k‖₂`, skipping gradients below [`ZERO_GRADIENT_THRESHOLD`].
pub fn aggregate_normalized(per_model: &[PerModelGradient]) -> Result<Tensor> {
    let shape = check_inputs(per_model)?;
    Ok(weighted_sum(
        shape,
        per_model.iter().filter_map(|g| {
            let norm = l2_norm(&g.gradient);
            (norm >= ZERO_GRADIENT_THRESHOLD).then(|| (1.0 / norm, &g.gradient))
        }),
    ))
}

/// Evaluates every model objective at the iterate and aggregates.
pub fn per_model_gradients(
    objectives: &[Box<dyn ModelObjective>],
    x: &Tensor,
) -> Result<Vec<PerModelGradient>> {
    objectives
        .iter()
        .enumerate()
        .map(|(model_id, obj)| {
            let (loss, gradient) = obj.loss_and_gradient(x)?;
            Ok(PerModelGradient {
                model_id,
                loss,
                gradient,
            })
        })
        .collect()
}

/// [`GradientProvider`] combining per-model objectives with a strategy.
pub struct EnsembleGradient {
    objectives: Vec<Box<dyn ModelObjective>>,
    strategy: EnsembleStrategy,
}

impl EnsembleGradient {
    pub fn new(objectives: Vec<Box<dyn ModelObjective>>, strategy: EnsembleStrategy) -> Result<Self> {
        if objectives.is_empty() {
            return Err(Error::Config("ensemble needs at least one model".into()));
        }
        strategy.validate(objectives.len())?;
        Ok(Self { objectives, strategy })
    }

    pub fn objectives(&self) -> &[Box<dyn ModelObjective>] {
        &self.objectives
    }

    /// Sum of per-model losses at `x` (each with its own scale).
    pub fn total_loss(&self, x: &Tensor) -> Result<f64> {
        self.objectives.iter().map(|o| o.loss(x)).sum()
    }
}

impl GradientProvider for EnsembleGradient {
    fn gradient(&mut self, x: &Tensor) -> Result<Tensor> {
        let per_model = per_model_gradients(&self.objectives, x)?;
        self.strategy.aggregate(&per_model)
    }
}

/// Cosine similarity of two equally shaped tensors (0 if either vanishes).
pub fn cosine(a: &Tensor, b: &Tensor) -> Result<f64> {
    let denom = l2_norm(a) * l2_norm(b);
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok(a.dot(b)? / denom)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pm(id: usize, loss: f64, g: &[f64]) -> PerModelGradient {
        PerModelGradient {
            model_id: id,
            loss,
            gradient: Tensor::vector(g.to_vec()).unwrap(),
        }
    }

    #[test]
    fn loss_ensemble_examples() {
        let single = [pm(0, 1.0, &[1.5, -2.0])];
        assert_eq!(aggregate_loss_ensemble(&single, &[1.0]).unwrap().data(), &[1.5, -2.0]);
        let two = [pm(0, 1.0, &[2.0, 0.0]), pm(1, 1.0, &[0.0, 4.0])];
        assert_eq!(aggregate_loss_ensemble(&two, &[1.0, 1.0]).unwrap().data(), &[2.0, 4.0]);
        assert!(aggregate_loss_ensemble(&two, &[1.0]).is_err());
    }

    #[test]
    fn hmm_examples() {
        let two = [pm(0, 0.5, &[1.0, 1.0]), pm(1, 0.2, &[-3.0, 2.0])];
        assert_eq!(aggregate_hmm(&two).unwrap().data(), &[-3.0, 2.0]);
        let tie = [pm(1, 0.2, &[9.0, 9.0]), pm(0, 0.2, &[7.0, 7.0])];
        assert_eq!(aggregate_hmm(&tie).unwrap().data(), &[7.0, 7.0]);
        assert_eq!(aggregate_hmm(&two[..1]).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn gradient_ensemble_examples() {
        let two = [pm(0, 1.0, &[2.0, 0.0]), pm(1, 1.0, &[0.0, 4.0])];
        assert_eq!(aggregate_gradient_ensemble(&two).unwrap().data(), &[1.0, 2.0]);
        assert_eq!(aggregate_gradient_ensemble(&two[..1]).unwrap().data(), &[2.0, 0.0]);
    }

    #[test]
    fn normalized_examples() {
        let two = [pm(0, 1.0, &[3.0, 4.0]), pm(1, 1.0, &[0.0, 2.0])];
        let out = aggregate_normalized(&two).unwrap();
        assert!((out.data()[0] - 0.6).abs() < 1e-15 && (out.data()[1] - 1.8).abs() < 1e-15);
        let one = aggregate_normalized(&two[..1]).unwrap();
        assert!((l2_norm(&one) - 1.0).abs() < 1e-15);
        let with_zero = [pm(0, 1.0, &[3.0, 4.0]), pm(1, 0.0, &[0.0, 1e-13])];
        assert_eq!(aggregate_normalized(&with_zero).unwrap(), one);
    }

    #[test]
    fn empty_and_mismatched_inputs() {
        assert!(aggregate_normalized(&[]).is_err());
        let bad = [pm(0, 1.0, &[1.0]), pm(1, 1.0, &[1.0, 2.0])];
        assert!(aggregate_gradient_ensemble(&bad).is_err());
    }

    #[test]
    fn strategy_validation() {
        assert!(EnsembleStrategy::weighted(vec![1.0, 2.0]).validate(2).is_ok());
        assert!(EnsembleStrategy::weighted(vec![1.0]).validate(2).is_err());
        assert!(EnsembleStrategy::weighted(vec![1.0, 0.0]).validate(2).is_err());
        let mut s = EnsembleStrategy::new(StrategyKind::Hmm);
        s.weights = Some(vec![1.0]);
        assert!(s.validate(1).is_err());
    }

    fn instances() -> impl Strategy<Value = Vec<(f64, Vec<f64>)>> {
        (2usize..=4, 1usize..=6).prop_flat_map(|(k, n)| {
            prop::collection::vec((0.0f64..1.0, prop::collection::vec(-10.0f64..10.0, n)), k)
        })
    }

    proptest! {
        #[test]
        fn normalized_norm_bounded_by_k(inst in instances()) {
            let gs: Vec<_> = inst.iter().enumerate().map(|(i, (l, g))| pm(i, *l, g)).collect();
            let out = aggregate_normalized(&gs).unwrap();
            prop_assert!(l2_norm(&out) <= gs.len() as f64 + 1e-12);
        }

        #[test]
        fn hmm_returns_an_input(inst in instances()) {
            let gs: Vec<_> = inst.iter().enumerate().map(|(i, (l, g))| pm(i, *l, g)).collect();
            let out = aggregate_hmm(&gs).unwrap();
            prop_assert!(gs.iter().any(|g| g.gradient == out));
        }

        #[test]
        fn normalized_is_scale_invariant(inst in instances(), s in 1e-3f64..1e3) {
            let gs: Vec<_> = inst.iter().enumerate().map(|(i, (l, g))| pm(i, *l, g)).collect();
            let mut scaled = gs.clone();
            scaled[0].gradient = scaled[0].gradient.scale(s);
            let a = aggregate_normalized(&gs).unwrap();
            let b = aggregate_normalized(&scaled).unwrap();
            prop_assert!(a.sub(&b).unwrap().max_abs() < 1e-9);
        }
    }

    #[test]
    fn normalized_norm_equals_k_when_parallel() {
        let gs = [pm(0, 0.0, &[1.0, 2.0]), pm(1, 0.0, &[3.0, 6.0]), pm(2, 0.0, &[0.5, 1.0])];
        let out = aggregate_normalized(&gs).unwrap();
        assert!((l2_norm(&out) - 3.0).abs() < 1e-12);
    }
}
