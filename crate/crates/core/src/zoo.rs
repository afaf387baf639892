//! Toy two-stage generative models `y = G(E(X), c)`.
//!
//! Four archetypes cover the latent-shape heterogeneity of real deepfake
//! pipelines:
//!
//! | archetype         | latent                         | conditioning `c`          |
//! |-------------------|--------------------------------|---------------------------|
//! | `vec_conditional` | vector (or feature map)        | dense attribute vector    |
//! | `refiner`         | vector                         | attribute vector, applied in unrolled residual steps |
//! | `swapper`         | vector (identity code)         | target-face image         |
//! | `reenactor`       | image-shaped "neutral image"   | action-unit vector        |
//!
//! The encoder never reads `c`. All parameters are frozen random draws from
//! the model seed; nothing is trained.
//!
//! The reenactor's neutral-image latent has no low-dimensional semantic
//! structure; latent losses on it are plain MSE over all of its pixels, the
//! same as for vector latents.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::backend::{Backend, Eager};
use crate::error::{Error, Result};
use crate::params::{Dense, ParameterBuilder, ParameterSet};
use crate::synth::blob_image;
use crate::tape::{Tape, Var};
use crate::tensor::{Activation, Tensor};

const ENCODER_STREAM: u64 = 0;
const GENERATOR_STREAM: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Archetype {
    VecConditional,
    Refiner,
    Swapper,
    Reenactor,
}

impl Archetype {
    pub const ALL: [Archetype; 4] = [
        Archetype::VecConditional,
        Archetype::Refiner,
        Archetype::Swapper,
        Archetype::Reenactor,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Archetype::VecConditional => "vec_conditional",
            Archetype::Refiner => "refiner",
            Archetype::Swapper => "swapper",
            Archetype::Reenactor => "reenactor",
        }
    }
}

impl fmt::Display for Archetype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Archetype {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Archetype::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown archetype `{s}`")))
    }
}

/// Size table for building a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelDims {
    /// `[height, width, channels]`.
    pub image: [usize; 3],
    pub latent: usize,
    pub attribute: usize,
    pub generator_hidden: usize,
    /// Unrolled residual steps of the refiner's generator.
    pub refine_steps: usize,
    /// When set, the `vec_conditional` latent is laid out as a
    /// `[channels, height, width]` feature map instead of a vector.
    pub latent_map: Option<[usize; 3]>,
    /// Multiplier on the uniform init bound of every layer.
    pub weight_gain: f64,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            image: [8, 8, 1],
            latent: 12,
            attribute: 4,
            generator_hidden: 128,
            refine_steps: 4,
            latent_map: None,
            weight_gain: 1.0,
        }
    }
}

impl ModelDims {
    pub fn pixels(&self) -> usize {
        self.image.iter().product()
    }

    fn validate(&self) -> Result<()> {
        let positive = self.image.iter().all(|&d| d > 0)
            && self.latent > 0
            && self.attribute > 0
            && self.generator_hidden > 0
            && self.weight_gain > 0.0;
        if !positive {
            return Err(Error::Config(format!("model dims must be positive: {self:?}")));
        }
        if let Some(map) = self.latent_map {
            if map.contains(&0) {
                return Err(Error::Config(format!("latent_map {map:?} has a zero dimension")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentKind {
    Vector,
    FeatureMap,
    ImageShaped,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentSpec {
    pub kind: LatentKind,
    pub shape: Vec<usize>,
    /// Whether the latent lives in a low-dimensional semantic space.
    pub semantic: bool,
}

impl LatentSpec {
    pub fn new(kind: LatentKind, shape: Vec<usize>, image_shape: &[usize]) -> Result<Self> {
        let ok = match kind {
            LatentKind::Vector => shape.len() == 1,
            LatentKind::FeatureMap => shape.len() == 3,
            LatentKind::ImageShaped => shape == image_shape,
        };
        if !ok {
            return Err(Error::Config(format!(
                "latent shape {shape:?} is not valid for {kind:?} (image {image_shape:?})"
            )));
        }
        Ok(Self {
            semantic: kind != LatentKind::ImageShaped,
            kind,
            shape,
        })
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Known and unknown conditioning pools for one model. The two pools are
/// disjoint and every entry has the model's attribute shape.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeSet {
    known: Vec<Tensor>,
    unknown: Vec<Tensor>,
}

impl AttributeSet {
    pub fn new(known: Vec<Tensor>, unknown: Vec<Tensor>, shape: &[usize]) -> Result<Self> {
        if let Some(bad) = known.iter().chain(&unknown).find(|t| t.shape() != shape) {
            return Err(Error::shape("attribute_set", bad.shape(), shape));
        }
        if known.iter().any(|k| unknown.contains(k)) {
            return Err(Error::Config("known and unknown attributes overlap".into()));
        }
        Ok(Self { known, unknown })
    }

    /// Draws `n_known + n_unknown` attributes for `model` from a continuous
    /// distribution, so the pools are disjoint with probability one.
    pub fn sample<R: Rng + ?Sized>(
        model: &TwoStageModel,
        rng: &mut R,
        n_known: usize,
        n_unknown: usize,
    ) -> Result<Self> {
        let known = (0..n_known).map(|_| model.sample_attribute(rng)).collect();
        let unknown = (0..n_unknown).map(|_| model.sample_attribute(rng)).collect();
        Self::new(known, unknown, &model.attribute_shape())
    }

    pub fn known(&self) -> &[Tensor] {
        &self.known
    }

    pub fn unknown(&self) -> &[Tensor] {
        &self.unknown
    }
}

#[derive(Debug)]
pub struct TwoStageModel {
    name: String,
    archetype: Archetype,
    seed: u64,
    dims: ModelDims,
    latent_spec: LatentSpec,
    encoder_params: ParameterSet,
    generator_params: ParameterSet,
    encoder: Vec<Dense>,
    generator: Vec<Dense>,
    encoder_calls: AtomicU64,
    generator_calls: AtomicU64,
}

/// Builds a model named after its archetype.
pub fn build_model(archetype: Archetype, seed: u64, dims: &ModelDims) -> Result<TwoStageModel> {
    TwoStageModel::build(archetype.as_str(), archetype, seed, dims)
}

impl TwoStageModel {
    pub fn build(name: &str, archetype: Archetype, seed: u64, dims: &ModelDims) -> Result<Self> {
        dims.validate()?;
        let p = dims.pixels();
        let (l, a, h, g) = (dims.latent, dims.attribute, dims.generator_hidden, dims.weight_gain);
        let mut enc = ParameterBuilder::new(seed, ENCODER_STREAM);
        let mut gen = ParameterBuilder::new(seed, GENERATOR_STREAM);

        let (latent_spec, encoder, generator) = match archetype {
            Archetype::VecConditional => {
                let spec = match dims.latent_map {
                    Some(map) => LatentSpec::new(LatentKind::FeatureMap, map.to_vec(), &dims.image)?,
                    None => LatentSpec::new(LatentKind::Vector, vec![l], &dims.image)?,
                };
                let n = spec.numel();
                let encoder = vec![enc.dense("enc", p, n, g)];
                let generator = vec![gen.dense("gen.hidden", n + a, h, g), gen.dense("gen.out", h, p, g)];
                (spec, encoder, generator)
            }
            Archetype::Refiner => {
                let spec = LatentSpec::new(LatentKind::Vector, vec![l], &dims.image)?;
                let encoder = vec![enc.dense("enc", p, l, g)];
                let generator = vec![gen.dense("gen.base", l, p, g), gen.dense("gen.step", p + a, p, g)];
                (spec, encoder, generator)
            }
            Archetype::Swapper => {
                let spec = LatentSpec::new(LatentKind::Vector, vec![l], &dims.image)?;
                let encoder = vec![enc.dense("enc", p, l, g)];
                let generator = vec![gen.dense("gen.hidden", p + l, h, g), gen.dense("gen.out", h, p, g)];
                (spec, encoder, generator)
            }
            Archetype::Reenactor => {
                let spec = LatentSpec::new(LatentKind::ImageShaped, dims.image.to_vec(), &dims.image)?;
                let encoder = vec![enc.dense("enc", p, p, g)];
                let generator = vec![gen.dense("gen.hidden", p + a, h, g), gen.dense("gen.out", h, p, g)];
                (spec, encoder, generator)
            }
        };

        Ok(Self {
            name: name.to_string(),
            archetype,
            seed,
            dims: dims.clone(),
            latent_spec,
            encoder_params: enc.finish(),
            generator_params: gen.finish(),
            encoder,
            generator,
            encoder_calls: AtomicU64::new(0),
            generator_calls: AtomicU64::new(0),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn archetype(&self) -> Archetype {
        self.archetype
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    pub fn latent_spec(&self) -> &LatentSpec {
        &self.latent_spec
    }

    pub fn encoder_params(&self) -> &ParameterSet {
        &self.encoder_params
    }

    pub fn generator_params(&self) -> &ParameterSet {
        &self.generator_params
    }

    pub fn input_shape(&self) -> Vec<usize> {
        self.dims.image.to_vec()
    }

    /// Size of the conditioning input. For the swapper this is the
    /// target-face image shape.
    pub fn attribute_shape(&self) -> Vec<usize> {
        match self.archetype {
            Archetype::Swapper => self.input_shape(),
            _ => vec![self.dims.attribute],
        }
    }

    pub fn attribute_arity(&self) -> usize {
        self.attribute_shape().iter().product()
    }

    pub fn encoder_calls(&self) -> u64 {
        self.encoder_calls.load(Ordering::Relaxed)
    }

    pub fn generator_calls(&self) -> u64 {
        self.generator_calls.load(Ordering::Relaxed)
    }

    pub fn reset_counters(&self) {
        self.encoder_calls.store(0, Ordering::Relaxed);
        self.generator_calls.store(0, Ordering::Relaxed);
    }

    /// Draws one conditioning input: standard-normal attribute vectors for
    /// the attribute editors, a synthetic face for the swapper, and
    /// action-unit intensities in `[0, 1]` for the reenactor.
    pub fn sample_attribute<R: Rng + ?Sized>(&self, rng: &mut R) -> Tensor {
        match self.archetype {
            Archetype::VecConditional | Archetype::Refiner => {
                let data = (0..self.dims.attribute).map(|_| rng.sample(StandardNormal)).collect();
                Tensor::from_parts(vec![self.dims.attribute], data)
            }
            Archetype::Swapper => blob_image(rng, self.dims.image),
            Archetype::Reenactor => {
                let data = (0..self.dims.attribute).map(|_| rng.random_range(0.0..1.0)).collect();
                Tensor::from_parts(vec![self.dims.attribute], data)
            }
        }
    }

    fn check_shape(&self, op: &'static str, got: &[usize], want: &[usize]) -> Result<()> {
        if got != want {
            return Err(Error::shape(op, got, want));
        }
        Ok(())
    }

    /// `E(X)` on any backend.
    pub fn encode_with<B: Backend>(&self, b: &mut B, x: &B::Value) -> Result<B::Value> {
        self.check_shape("encode", &b.shape_of(x)?, &self.input_shape())?;
        self.encoder_calls.fetch_add(1, Ordering::Relaxed);
        let enc = &self.encoder[0];
        let flat = b.reshape(x, &[self.dims.pixels()])?;
        let pre = b.affine(&flat, &enc.weight, &enc.bias)?;
        let z = b.activation(&pre, Activation::Tanh)?;
        b.reshape(&z, &self.latent_spec.shape)
    }

    /// `G(z, c)` on any backend. Output has the input image shape and lies
    /// in `[0, 1]`.
    pub fn generate_with<B: Backend>(&self, b: &mut B, z: &B::Value, c: &B::Value) -> Result<B::Value> {
        self.check_shape("generate(latent)", &b.shape_of(z)?, &self.latent_spec.shape)?;
        self.check_shape("generate(attribute)", &b.shape_of(c)?, &self.attribute_shape())?;
        self.generator_calls.fetch_add(1, Ordering::Relaxed);
        let z = b.reshape(z, &[self.latent_spec.numel()])?;
        let c = b.reshape(c, &[self.attribute_arity()])?;
        let logits = match self.archetype {
            Archetype::VecConditional => {
                let joined = b.concat(&[z, c])?;
                self.mlp(b, &joined)?
            }
            Archetype::Swapper => {
                let joined = b.concat(&[c, z])?;
                self.mlp(b, &joined)?
            }
            Archetype::Refiner => {
                let (base, step) = (&self.generator[0], &self.generator[1]);
                let mut s = b.affine(&z, &base.weight, &base.bias)?;
                for _ in 0..self.dims.refine_steps {
                    let joined = b.concat(&[s.clone(), c.clone()])?;
                    let pre = b.affine(&joined, &step.weight, &step.bias)?;
                    let delta = b.activation(&pre, Activation::Tanh)?;
                    s = b.add(&s, &delta)?;
                }
                s
            }
            Archetype::Reenactor => {
                let joined = b.concat(&[z.clone(), c])?;
                let warp = self.mlp(b, &joined)?;
                b.add(&warp, &z)?
            }
        };
        let y = b.activation(&logits, Activation::Sigmoid)?;
        b.reshape(&y, &self.input_shape())
    }

    fn mlp<B: Backend>(&self, b: &mut B, input: &B::Value) -> Result<B::Value> {
        let (hidden, out) = (&self.generator[0], &self.generator[1]);
        let pre = b.affine(input, &hidden.weight, &hidden.bias)?;
        let act = b.activation(&pre, Activation::Tanh)?;
        b.affine(&act, &out.weight, &out.bias)
    }

    pub fn forward_with<B: Backend>(&self, b: &mut B, x: &B::Value, c: &B::Value) -> Result<B::Value> {
        let z = self.encode_with(b, x)?;
        self.generate_with(b, &z, c)
    }

    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        self.encode_with(&mut Eager, x)
    }

    pub fn generate(&self, z: &Tensor, c: &Tensor) -> Result<Tensor> {
        self.generate_with(&mut Eager, z, c)
    }

    pub fn forward(&self, x: &Tensor, c: &Tensor) -> Result<Tensor> {
        self.forward_with(&mut Eager, x, c)
    }

    pub fn encode_on(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        self.encode_with(tape, &x)
    }

    pub fn generate_on(&self, tape: &mut Tape, z: Var, c: Var) -> Result<Var> {
        self.generate_with(tape, &z, &c)
    }

    pub fn encoder_parameter_count(&self) -> usize {
        self.encoder_params.parameter_count()
    }

    pub fn generator_parameter_count(&self) -> usize {
        self.generator_params.parameter_count()
    }

    /// Dense layers of the generator, in forward order.
    pub fn generator_layers(&self) -> &[Dense] {
        &self.generator
    }
}

/// Shared handle used by objectives and the harness.
pub type ModelRef = Arc<TwoStageModel>;
