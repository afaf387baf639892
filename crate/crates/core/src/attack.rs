//! Sign-gradient perturbation search: FGSM, I-FGSM and PGD under an L∞
//! budget.
//!
//! The loop only sees a [`GradientProvider`], so any objective and any
//! ensemble strategy plug in unchanged. Each iteration:
//!
//! ```text
//! g      = provider.gradient(X_t)
//! X'     = X_t + a·sign(g)
//! X_proj = clamp(clamp(X', X−ε, X+ε), 0, 1)
//! η      = X_proj − X
//! X_t+1  = X + η
//! ```
//!
//! The ε-ball clamp is applied before the pixel clamp; the two do not
//! commute at the image border.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{sign, Tensor};

/// Slack allowed on `‖η‖∞ ≤ ε` for floating-point rounding of `X ± ε`.
pub const BUDGET_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub step: f64,
    pub iterations: usize,
    /// Uniform `[-ε, ε]` start (PGD) instead of the clean image (I-FGSM).
    pub random_init: bool,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.05,
            step: 0.01,
            iterations: 30,
            random_init: true,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::Config(format!("step must be positive, got {}", self.step)));
        }
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        Ok(())
    }
}

/// Snapshot handed to observers after every iteration.
#[derive(Debug, Clone)]
pub struct AttackState<'a> {
    pub x: &'a Tensor,
    pub x_t: &'a Tensor,
    pub eta: &'a Tensor,
    /// Number of completed iterations.
    pub t: usize,
}

/// Source of the ascent direction at the current iterate.
pub trait GradientProvider {
    fn gradient(&mut self, x: &Tensor) -> Result<Tensor>;
}

impl<F> GradientProvider for F
where
    F: FnMut(&Tensor) -> Result<Tensor>,
{
    fn gradient(&mut self, x: &Tensor) -> Result<Tensor> {
        self(x)
    }
}

/// Clamps `candidate` into `[X−ε, X+ε]`, then into `[0, 1]`.
pub fn project_budget(x: &Tensor, candidate: &Tensor, epsilon: f64) -> Result<Tensor> {
    candidate.zip_map(x, "project_budget", |c, x0| {
        c.max(x0 - epsilon).min(x0 + epsilon).clamp(0.0, 1.0)
    })
}

fn projected_eta(x: &Tensor, candidate: &Tensor, epsilon: f64) -> Result<Tensor> {
    project_budget(x, candidate, epsilon)?.sub(x)
}

/// Single-step FGSM: `η = ε·sign(∇)`, projected onto the budget and the
/// pixel range.
pub fn fgsm<P: GradientProvider + ?Sized>(provider: &mut P, x: &Tensor, epsilon: f64) -> Result<Tensor> {
    let g = provider.gradient(x)?;
    check_gradient(&g, x)?;
    let candidate = x.add(&sign(&g).scale(epsilon))?;
    projected_eta(x, &candidate, epsilon)
}

fn check_gradient(g: &Tensor, x: &Tensor) -> Result<()> {
    if g.shape() != x.shape() {
        return Err(Error::Contract(format!(
            "gradient shape {:?} does not match image shape {:?}",
            g.shape(),
            x.shape()
        )));
    }
    Ok(())
}

/// Runs the iterative attack from scratch and returns the final `η`.
pub fn run_attack<P: GradientProvider + ?Sized>(
    provider: &mut P,
    x: &Tensor,
    config: &AttackConfig,
) -> Result<Tensor> {
    run_attack_observed(provider, x, config, None, |_| {})
}

/// Continues an attack from `eta` (random init is not applied).
pub fn resume_attack<P: GradientProvider + ?Sized>(
    provider: &mut P,
    x: &Tensor,
    eta: &Tensor,
    config: &AttackConfig,
) -> Result<Tensor> {
    run_attack_observed(provider, x, config, Some(eta), |_| {})
}

/// Full loop with an optional starting perturbation and a per-iteration
/// observer.
pub fn run_attack_observed<P, O>(
    provider: &mut P,
    x: &Tensor,
    config: &AttackConfig,
    start: Option<&Tensor>,
    mut observer: O,
) -> Result<Tensor>
where
    P: GradientProvider + ?Sized,
    O: FnMut(&AttackState<'_>),
{
    config.validate()?;
    let eps = config.epsilon;
    let mut eta = match start {
        Some(eta) => {
            eta.expect_same_shape(x, "resume_attack")?;
            eta.clone()
        }
        None if config.random_init => {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            let noise = x.map(|_| rng.random_range(-eps..=eps));
            projected_eta(x, &x.add(&noise)?, eps)?
        }
        None => Tensor::zeros(x.shape()),
    };

    for t in 0..config.iterations {
        let x_t = x.add(&eta)?;
        let g = provider.gradient(&x_t)?;
        check_gradient(&g, x)?;
        let candidate = x_t.add(&sign(&g).scale(config.step))?;
        eta = projected_eta(x, &candidate, eps)?;
        let x_next = x.add(&eta)?;
        debug_assert!(eta.max_abs() <= eps + BUDGET_TOLERANCE);
        debug_assert!(x_next.data().iter().all(|v| (0.0..=1.0).contains(v)));
        observer(&AttackState {
            x,
            x_t: &x_next,
            eta: &eta,
            t: t + 1,
        });
    }
    Ok(eta)
}
