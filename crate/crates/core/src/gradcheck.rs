//! Central finite differences, used as an independent gradient oracle.

use crate::error::Result;
use crate::tensor::Tensor;

/// Estimates `∂f/∂x_i ≈ (f(x + h·e_i) − f(x − h·e_i)) / 2h` for every
/// coordinate of `x`.
pub fn finite_difference_gradient<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut probe = x.data().to_vec();
    let mut grad = Vec::with_capacity(probe.len());
    for i in 0..probe.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = f(&Tensor::from_parts(x.shape().to_vec(), probe.clone()))?;
        probe[i] = orig - h;
        let down = f(&Tensor::from_parts(x.shape().to_vec(), probe.clone()))?;
        probe[i] = orig;
        grad.push((up - down) / (2.0 * h));
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), grad))
}

/// Norm-wise relative error `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂)`; 0 when both vanish.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = crate::tensor::l2_norm(a).max(crate::tensor::l2_norm(b));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::vector(vec![1.0, 2.0]).unwrap();
        let g = finite_difference_gradient(|t| Ok(t.data().iter().map(|v| v * v).sum()), &x, 1e-5)
            .unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-6);
        assert!((g.data()[1] - 4.0).abs() < 1e-6);
    }

    #[test]
    fn constant_function() {
        let x = Tensor::vector(vec![0.3, -0.1, 5.0]).unwrap();
        let g = finite_difference_gradient(|_| Ok(7.25), &x, 1e-5).unwrap();
        assert!(g.max_abs() < 1e-9);
    }

    #[test]
    fn mse_cross_check_with_backward() {
        use crate::tape::Tape;
        let x = Tensor::vector(vec![0.2, -0.4, 0.9]).unwrap();
        let target = Tensor::vector(vec![0.5, 0.5, -0.5]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let tv = tape.leaf(target.clone());
        let loss = tape.mse_loss(xv, tv).unwrap();
        let g = tape.backward(loss, xv).unwrap();
        let fd = finite_difference_gradient(
            |t| Ok(crate::tensor::mse_loss(t, &target)?.item()),
            &x,
            1e-5,
        )
        .unwrap();
        assert!(relative_error(&g, &fd) < 1e-5);
    }
}
