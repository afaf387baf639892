//! Procedural "face-like" images: sums of seeded Gaussian bumps.

use rand::Rng;

use crate::tensor::Tensor;

/// One smooth random image with values normalized into `[0, 1]`.
///
/// `shape` is `[height, width, channels]`. Each channel is a sum of 3–6
/// isotropic Gaussian bumps with random centre, width and signed amplitude,
/// min-max normalized per image.
pub fn blob_image<R: Rng + ?Sized>(rng: &mut R, shape: [usize; 3]) -> Tensor {
    let [h, w, c] = shape;
    let mut data = vec![0.0; h * w * c];
    for ch in 0..c {
        let bumps = rng.random_range(3..=6);
        for _ in 0..bumps {
            let cy = rng.random_range(0.0..h as f64);
            let cx = rng.random_range(0.0..w as f64);
            let sigma = rng.random_range(0.15..0.45) * h.max(w) as f64;
            let amp = rng.random_range(-1.0..1.0);
            for y in 0..h {
                for x in 0..w {
                    let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    data[(y * w + x) * c + ch] += amp * (-d2 / (2.0 * sigma * sigma)).exp();
                }
            }
        }
    }
    let lo = data.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    for v in &mut data {
        *v = if span > 0.0 { (*v - lo) / span } else { 0.5 };
    }
    Tensor::from_parts(vec![h, w, c], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn values_in_unit_range_and_reproducible() {
        let a = blob_image(&mut ChaCha8Rng::seed_from_u64(9), [8, 8, 1]);
        let b = blob_image(&mut ChaCha8Rng::seed_from_u64(9), [8, 8, 1]);
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(a.max_abs() > 0.0);
    }
}
