//! Independent oracles for PCA, ensemble linearity and gradient determinism.

use std::sync::Arc;

use leat::ensemble::{aggregate_loss_ensemble, per_model_gradients};
use leat::gradcheck::relative_error;
use leat::harness::dataset::synthetic_images;
use leat::metrics::pca_project_latents;
use leat::objective::{ImageObjective, LatentObjective};
use leat::{build_model, Archetype, ModelDims, ModelObjective, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn projected_variance(points: &[Vec<f64>], dir: &[f64]) -> f64 {
    let n = points.len() as f64;
    let proj: Vec<f64> = points.iter().map(|p| p.iter().zip(dir).map(|(a, b)| a * b).sum()).collect();
    let mean = proj.iter().sum::<f64>() / n;
    proj.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
}

#[test]
fn pca_beats_every_direction_on_a_grid() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let points: Vec<Vec<f64>> = (0..40)
        .map(|_| {
            let a: f64 = rng.random_range(-1.0..1.0);
            let b: f64 = rng.random_range(-1.0..1.0);
            vec![3.0 * a + 0.2 * b, a - b, 0.3 * rng.random_range(-1.0..1.0)]
        })
        .collect();
    let latents: Vec<Tensor> = points.iter().map(|p| Tensor::vector(p.clone()).unwrap()).collect();
    let proj = pca_project_latents(&latents).unwrap();

    let pc1 = projected_variance(&points, &proj.components[0]);
    let pc2 = projected_variance(&points, &proj.components[1]);
    assert!(pc1 >= pc2);
    assert!((pc1 - proj.variances[0]).abs() < 1e-9);

    // Brute-force search over unit directions on a spherical grid.
    let steps = 90;
    let mut best: f64 = 0.0;
    for i in 0..=steps {
        let theta = std::f64::consts::PI * i as f64 / steps as f64;
        for j in 0..2 * steps {
            let phi = std::f64::consts::PI * j as f64 / steps as f64;
            let dir = [theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos()];
            best = best.max(projected_variance(&points, &dir));
        }
    }
    assert!(pc1 >= best - 1e-12, "pc1 {pc1} below grid best {best}");
    assert!(best >= pc1 * (1.0 - 1e-3), "grid too coarse");

    // Components are orthonormal and sign-normalized.
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    assert!((dot(&proj.components[0], &proj.components[0]) - 1.0).abs() < 1e-12);
    assert!(dot(&proj.components[0], &proj.components[1]).abs() < 1e-12);
    for c in &proj.components {
        let pivot = c.iter().cloned().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        assert!(pivot > 0.0);
    }
}

#[test]
fn pca_is_deterministic_and_shape_checked() {
    let latents: Vec<Tensor> = synthetic_images(1, 10, [4, 4, 1])
        .into_iter()
        .map(|t| t.reshape(&[16]).unwrap())
        .collect();
    assert_eq!(pca_project_latents(&latents).unwrap(), pca_project_latents(&latents).unwrap());
    let mut bad = latents.clone();
    bad.push(Tensor::vector(vec![0.0; 3]).unwrap());
    assert!(pca_project_latents(&bad).is_err());
    assert!(pca_project_latents(&latents[..1]).is_err());
}

fn objectives(seed: u64, x: &Tensor) -> Vec<Box<dyn ModelObjective>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Archetype::ALL
        .iter()
        .map(|&a| {
            let m = Arc::new(build_model(a, seed, &ModelDims::default()).unwrap());
            let attrs = vec![m.sample_attribute(&mut rng)];
            Box::new(ImageObjective::new(m, x, attrs).unwrap()) as Box<dyn ModelObjective>
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn loss_ensemble_gradient_is_linear_in_weights(seed in 0u64..1000, w in prop::collection::vec(0.1f64..5.0, 4)) {
        let x = synthetic_images(seed, 1, [8, 8, 1]).remove(0);
        let at = x.map(|v| (v + 0.03).min(1.0));
        let objs = objectives(seed, &x);
        let per_model = per_model_gradients(&objs, &at).unwrap();
        let combined = aggregate_loss_ensemble(&per_model, &w).unwrap();
        let mut manual = Tensor::zeros(&[8, 8, 1]);
        for (g, wk) in per_model.iter().zip(&w) {
            manual = manual.add(&g.gradient.scale(*wk)).unwrap();
        }
        prop_assert!(relative_error(&combined, &manual) < 1e-12);
    }

    #[test]
    fn gradients_are_bitwise_repeatable(seed in 0u64..1000) {
        let x = synthetic_images(seed, 1, [8, 8, 1]).remove(0);
        let at = x.map(|v| (v - 0.02).max(0.0));
        for arch in Archetype::ALL {
            let m = Arc::new(build_model(arch, seed, &ModelDims::default()).unwrap());
            let obj = LatentObjective::new(m, &x).unwrap();
            let (l1, g1) = obj.loss_and_gradient(&at).unwrap();
            let (l2, g2) = obj.loss_and_gradient(&at).unwrap();
            prop_assert_eq!(l1.to_bits(), l2.to_bits());
            prop_assert_eq!(g1, g2);
            prop_assert_eq!(obj.loss(&at).unwrap().to_bits(), l1.to_bits());
        }
    }
}
