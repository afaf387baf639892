//! Adversarial disruption of two-stage generative models.
//!
//! The crate attacks models of the form `y = G(E(X), c)` with L∞-bounded
//! sign-gradient perturbations. Two objectives are provided: Image Attack,
//! which pushes generated outputs apart for a set of known conditioning
//! attributes, and LEAT, which pushes the attribute-independent latent
//! `E(X)` apart and never runs the generator. Per-model gradients are
//! combined by one of four ensemble rules, including the normalized
//! gradient ensemble that divides each model's gradient by its L2 norm.
//!
//! Module map:
//!
//! * [`tensor`], [`tape`], [`backend`], [`gradcheck`]: dense tensors,
//!   reverse-mode AD, and a finite-difference oracle.
//! * [`zoo`]: seeded toy two-stage models with heterogeneous latents.
//! * [`objective`], [`ensemble`], [`attack`]: the disruption search.
//! * [`metrics`]: the evaluation protocol (L2 image, surrogate ID and
//!   perceptual distances, DSR / Avg-DSR / E-DSR, latent PCA).
//! * [`harness`]: config-driven experiments and report files.

pub mod attack;
pub mod backend;
pub mod ensemble;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod metrics;
pub mod objective;
pub mod params;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod zoo;

pub use attack::{run_attack, AttackConfig, GradientProvider};
pub use ensemble::{EnsembleGradient, EnsembleStrategy, PerModelGradient, StrategyKind};
pub use error::{Error, Result};
pub use objective::{ModelObjective, ObjectiveKind, ObjectiveSpec};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
pub use zoo::{build_model, Archetype, AttributeSet, ModelDims, TwoStageModel};
