//! Per-model disruption objectives.
//!
//! * Image Attack: mean over known attributes of `mse(G(X, c), G(X', c))`.
//! * LEAT: `mse(E(X), E(X'))`, which never touches the generator and has no
//!   way to receive attributes.
//!
//! Clean references (`G(X, c)` or `E(X)`) are computed once, eagerly, when
//! the objective is built and stay fixed for the whole attack.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::backend::{Backend, Eager};
use crate::error::{Error, Result};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::zoo::ModelRef;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    ImageAttack,
    Leat,
}

impl ObjectiveKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ObjectiveKind::ImageAttack => "image_attack",
            ObjectiveKind::Leat => "leat",
        }
    }
}

impl fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which objective to build, with exactly the inputs it may see.
#[derive(Debug, Clone)]
pub enum ObjectiveSpec {
    /// One attribute list per model, in model order.
    ImageAttack { attributes: Vec<Vec<Tensor>> },
    Leat,
}

impl ObjectiveSpec {
    pub fn kind(&self) -> ObjectiveKind {
        match self {
            ObjectiveSpec::ImageAttack { .. } => ObjectiveKind::ImageAttack,
            ObjectiveSpec::Leat => ObjectiveKind::Leat,
        }
    }

    /// Builds one objective per model, referenced to the clean image `x`.
    pub fn build(&self, models: &[ModelRef], x: &Tensor) -> Result<Vec<Box<dyn ModelObjective>>> {
        match self {
            ObjectiveSpec::Leat => models
                .iter()
                .map(|m| Ok(Box::new(LatentObjective::new(m.clone(), x)?) as Box<dyn ModelObjective>))
                .collect(),
            ObjectiveSpec::ImageAttack { attributes } => {
                if attributes.len() != models.len() {
                    return Err(Error::Config(format!(
                        "{} attribute lists for {} models",
                        attributes.len(),
                        models.len()
                    )));
                }
                models
                    .iter()
                    .zip(attributes)
                    .map(|(m, attrs)| {
                        Ok(Box::new(ImageObjective::new(m.clone(), x, attrs.clone())?)
                            as Box<dyn ModelObjective>)
                    })
                    .collect()
            }
        }
    }
}

/// A scalar disruption loss of the perturbed image for one model.
pub trait ModelObjective: Send + Sync {
    fn model(&self) -> &ModelRef;

    fn loss(&self, x_pert: &Tensor) -> Result<f64>;

    /// Loss value and its gradient with respect to `x_pert`.
    fn loss_and_gradient(&self, x_pert: &Tensor) -> Result<(f64, Tensor)>;
}

/// Image Attack loss for one model.
#[derive(Debug, Clone)]
pub struct ImageObjective {
    model: ModelRef,
    attributes: Vec<Tensor>,
    references: Vec<Tensor>,
    loss_scale: f64,
}

impl ImageObjective {
    pub fn new(model: ModelRef, x: &Tensor, attributes: Vec<Tensor>) -> Result<Self> {
        if attributes.is_empty() {
            return Err(Error::Config(format!(
                "image attack on `{}` needs at least one attribute",
                model.name()
            )));
        }
        let z = model.encode(x)?;
        let references = attributes
            .iter()
            .map(|c| model.generate(&z, c))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            model,
            attributes,
            references,
            loss_scale: 1.0,
        })
    }

    /// Multiplies the loss (and therefore its gradient) by `scale`.
    pub fn with_loss_scale(mut self, scale: f64) -> Self {
        self.loss_scale = scale;
        self
    }

    fn loss_with<B: Backend>(&self, b: &mut B, x_pert: &B::Value) -> Result<B::Value> {
        // The latent is shared across attributes; G(E(X'), c) per c.
        let z = self.model.encode_with(b, x_pert)?;
        let mut total: Option<B::Value> = None;
        for (c, reference) in self.attributes.iter().zip(&self.references) {
            let c = b.constant(c);
            let y = self.model.generate_with(b, &z, &c)?;
            let r = b.constant(reference);
            let l = b.mse(&r, &y)?;
            total = Some(match total {
                None => l,
                Some(acc) => b.add(&acc, &l)?,
            });
        }
        let mean = b.scale(&total.expect("non-empty"), 1.0 / self.attributes.len() as f64)?;
        if self.loss_scale == 1.0 {
            Ok(mean)
        } else {
            b.scale(&mean, self.loss_scale)
        }
    }
}

impl ModelObjective for ImageObjective {
    fn model(&self) -> &ModelRef {
        &self.model
    }

    fn loss(&self, x_pert: &Tensor) -> Result<f64> {
        Ok(self.loss_with(&mut Eager, x_pert)?.item())
    }

    fn loss_and_gradient(&self, x_pert: &Tensor) -> Result<(f64, Tensor)> {
        differentiate(x_pert, |tape, x| self.loss_with(tape, &x))
    }
}

/// LEAT loss for one model. Holds no attribute state at all.
#[derive(Debug, Clone)]
pub struct LatentObjective {
    model: ModelRef,
    reference: Tensor,
    loss_scale: f64,
}

impl LatentObjective {
    pub fn new(model: ModelRef, x: &Tensor) -> Result<Self> {
        let reference = model.encode(x)?;
        Ok(Self {
            model,
            reference,
            loss_scale: 1.0,
        })
    }

    pub fn with_loss_scale(mut self, scale: f64) -> Self {
        self.loss_scale = scale;
        self
    }

    fn loss_with<B: Backend>(&self, b: &mut B, x_pert: &B::Value) -> Result<B::Value> {
        let z = self.model.encode_with(b, x_pert)?;
        let r = b.constant(&self.reference);
        let l = b.mse(&r, &z)?;
        if self.loss_scale == 1.0 {
            Ok(l)
        } else {
            b.scale(&l, self.loss_scale)
        }
    }
}

impl ModelObjective for LatentObjective {
    fn model(&self) -> &ModelRef {
        &self.model
    }

    fn loss(&self, x_pert: &Tensor) -> Result<f64> {
        Ok(self.loss_with(&mut Eager, x_pert)?.item())
    }

    fn loss_and_gradient(&self, x_pert: &Tensor) -> Result<(f64, Tensor)> {
        differentiate(x_pert, |tape, x| self.loss_with(tape, &x))
    }
}

fn differentiate(
    x: &Tensor,
    f: impl FnOnce(&mut Tape, crate::tape::Var) -> Result<crate::tape::Var>,
) -> Result<(f64, Tensor)> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let loss = f(&mut tape, xv)?;
    let value = tape.value(loss)?.item();
    Ok((value, tape.backward(loss, xv)?))
}

/// Image Attack loss of `x_pert` against clean `x` for one model.
pub fn per_model_image_loss(model: &ModelRef, x: &Tensor, x_pert: &Tensor, attrs: &[Tensor]) -> Result<f64> {
    ImageObjective::new(model.clone(), x, attrs.to_vec())?.loss(x_pert)
}

/// LEAT loss of `x_pert` against clean `x` for one model.
pub fn per_model_latent_loss(model: &ModelRef, x: &Tensor, x_pert: &Tensor) -> Result<f64> {
    LatentObjective::new(model.clone(), x)?.loss(x_pert)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_difference_gradient, relative_error};
    use crate::synth::blob_image;
    use crate::zoo::{build_model, Archetype, ModelDims};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn setup(arch: Archetype, seed: u64) -> (ModelRef, Tensor, Tensor, Vec<Tensor>) {
        let model = Arc::new(build_model(arch, seed, &ModelDims::default()).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let x = blob_image(&mut rng, [8, 8, 1]);
        let x_pert = x.map(|v| (v + rng.random_range(-0.05..0.05)).clamp(0.0, 1.0));
        let attrs = (0..3).map(|_| model.sample_attribute(&mut rng)).collect();
        (model, x, x_pert, attrs)
    }

    #[test]
    fn zero_at_clean_image() {
        let (m, x, _, attrs) = setup(Archetype::VecConditional, 1);
        assert_eq!(per_model_image_loss(&m, &x, &x, &attrs).unwrap(), 0.0);
        assert_eq!(per_model_latent_loss(&m, &x, &x).unwrap(), 0.0);
    }

    #[test]
    fn empty_attributes_is_config_error() {
        let (m, x, xp, _) = setup(Archetype::Refiner, 1);
        assert!(matches!(per_model_image_loss(&m, &x, &xp, &[]), Err(Error::Config(_))));
    }

    #[test]
    fn single_attribute_is_plain_output_mse() {
        let (m, x, xp, attrs) = setup(Archetype::Swapper, 2);
        let c = &attrs[0];
        let expected = crate::tensor::mse_loss(&m.forward(&x, c).unwrap(), &m.forward(&xp, c).unwrap())
            .unwrap()
            .item();
        let got = per_model_image_loss(&m, &x, &xp, std::slice::from_ref(c)).unwrap();
        assert!((got - expected).abs() < 1e-15);
    }

    #[test]
    fn two_attributes_average() {
        let (m, x, xp, attrs) = setup(Archetype::Reenactor, 3);
        let a = per_model_image_loss(&m, &x, &xp, &attrs[..1]).unwrap();
        let b = per_model_image_loss(&m, &x, &xp, &attrs[1..2]).unwrap();
        let both = per_model_image_loss(&m, &x, &xp, &attrs[..2]).unwrap();
        assert!((both - (a + b) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn leat_never_calls_generator() {
        let (m, x, xp, _) = setup(Archetype::Refiner, 4);
        m.reset_counters();
        let obj = LatentObjective::new(m.clone(), &x).unwrap();
        obj.loss_and_gradient(&xp).unwrap();
        obj.loss(&xp).unwrap();
        assert_eq!(m.generator_calls(), 0);
        assert!(m.encoder_calls() > 0);
    }

    #[test]
    fn gradients_match_finite_differences() {
        for arch in Archetype::ALL {
            let (m, x, xp, attrs) = setup(arch, 5);
            let objectives: Vec<Box<dyn ModelObjective>> = vec![
                Box::new(ImageObjective::new(m.clone(), &x, attrs).unwrap()),
                Box::new(LatentObjective::new(m.clone(), &x).unwrap()),
            ];
            for obj in &objectives {
                let (value, g) = obj.loss_and_gradient(&xp).unwrap();
                assert_eq!(value, obj.loss(&xp).unwrap());
                let fd = finite_difference_gradient(|t| obj.loss(t), &xp, 1e-5).unwrap();
                let err = relative_error(&g, &fd);
                assert!(err < 1e-5, "{arch}: relative error {err}");
            }
        }
    }

    #[test]
    fn loss_scale_scales_gradient() {
        let (m, x, xp, _) = setup(Archetype::Swapper, 6);
        let base = LatentObjective::new(m.clone(), &x).unwrap();
        let scaled = base.clone().with_loss_scale(1000.0);
        let (l1, g1) = base.loss_and_gradient(&xp).unwrap();
        let (l2, g2) = scaled.loss_and_gradient(&xp).unwrap();
        assert!((l2 - 1000.0 * l1).abs() <= 1e-9 * l2.abs());
        assert!(relative_error(&g1.scale(1000.0), &g2) < 1e-12);
    }

    #[test]
    fn spec_builds_per_model() {
        let (m, x, _, attrs) = setup(Archetype::VecConditional, 7);
        let models = vec![m.clone(), m.clone()];
        let leat = ObjectiveSpec::Leat.build(&models, &x).unwrap();
        assert_eq!(leat.len(), 2);
        let bad = ObjectiveSpec::ImageAttack { attributes: vec![attrs.clone()] };
        assert!(bad.build(&models, &x).is_err());
        let ok = ObjectiveSpec::ImageAttack { attributes: vec![attrs.clone(), attrs] };
        assert_eq!(ok.build(&models, &x).unwrap().len(), 2);
    }
}
