//! Dense row-major `f64` tensors and the eager (non-recording) primitives.
//!
//! Every primitive here has a recording twin on [`crate::tape::Tape`]; the
//! tape calls into these functions for its forward values so the two paths
//! can never drift apart.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Element-wise nonlinearities supported by the model zoo.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        }
    }

    /// Derivative expressed through the input `x` and the output `y`.
    /// The relu subgradient at 0 is 0.
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

impl Tensor {
    /// Builds a tensor, checking that the shape is positive, matches the
    /// data length, and that every value is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::InvalidTensor(format!(
                "shape {shape:?} has a zero dimension"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidTensor(format!(
                "shape {shape:?} holds {numel} values but {} were given",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidTensor(format!(
                "non-finite value {} at flat index {i}",
                data[i]
            )));
        }
        Ok(Self { shape, data })
    }

    /// Rank-1 tensor.
    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    /// Rank-0 tensor holding one value.
    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    /// Internal constructor for results of primitives on valid inputs.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.expect_same_shape(other, op)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor::from_parts(self.shape.clone(), data))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.len() || shape.contains(&0) {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        Ok(Tensor::from_parts(shape.to_vec(), self.data.clone()))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        self.map(|v| v * factor)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.len() as f64
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.expect_same_shape(other, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub(crate) fn expect_same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(op, &self.shape, &other.shape));
        }
        Ok(())
    }
}

/// `weights · input + bias` applied along the last axis of `input`.
///
/// `weights` is `[out, in]`, `bias` is `[out]`; any leading axes of
/// `input` are treated as independent rows.
pub fn forward_affine(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (out_dim, in_dim) = match weights.shape() {
        [o, i] => (*o, *i),
        other => return Err(Error::shape("affine(weights)", other, &[0, 0])),
    };
    if bias.shape() != [out_dim] {
        return Err(Error::shape("affine(bias)", bias.shape(), &[out_dim]));
    }
    if input.shape().last() != Some(&in_dim) {
        return Err(Error::shape("affine(input)", input.shape(), weights.shape()));
    }
    let rows = input.len() / in_dim;
    let w = weights.data();
    let mut out = Vec::with_capacity(rows * out_dim);
    for row in input.data().chunks_exact(in_dim) {
        for (o, b) in bias.data().iter().enumerate() {
            let w_row = &w[o * in_dim..(o + 1) * in_dim];
            let acc: f64 = w_row.iter().zip(row).map(|(a, x)| a * x).sum();
            out.push(acc + b);
        }
    }
    let mut shape = input.shape().to_vec();
    *shape.last_mut().unwrap() = out_dim;
    Ok(Tensor::from_parts(shape, out))
}

pub fn activation(input: &Tensor, kind: Activation) -> Tensor {
    input.map(|v| kind.apply(v))
}

/// Mean of squared element-wise differences, as a rank-0 tensor.
pub fn mse_loss(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let sq = a.zip_map(b, "mse_loss", |x, y| (x - y) * (x - y))?;
    Ok(Tensor::scalar(sq.mean()))
}

/// Element-wise sign with `sign(0) = 0`.
pub fn sign(input: &Tensor) -> Tensor {
    input.map(|v| {
        if v > 0.0 {
            1.0
        } else if v < 0.0 {
            -1.0
        } else {
            0.0
        }
    })
}

/// Euclidean norm over all elements.
pub fn l2_norm(input: &Tensor) -> f64 {
    input.data().iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn clip_range(input: &Tensor, lo: &Tensor, hi: &Tensor) -> Result<Tensor> {
    input.expect_same_shape(lo, "clip_range(lo)")?;
    input.expect_same_shape(hi, "clip_range(hi)")?;
    let data = input
        .data()
        .iter()
        .zip(lo.data().iter().zip(hi.data()))
        .map(|(&v, (&l, &h))| {
            debug_assert!(l <= h);
            v.max(l).min(h)
        })
        .collect();
    Ok(Tensor::from_parts(input.shape().to_vec(), data))
}

/// Concatenates the flattened parts into one rank-1 tensor.
pub fn concat(parts: &[&Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::InvalidTensor("concat of zero tensors".into()));
    }
    let data: Vec<f64> = parts.iter().flat_map(|t| t.data().iter().copied()).collect();
    let n = data.len();
    Ok(Tensor::from_parts(vec![n], data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn rejects_bad_construction() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
        assert!(Tensor::vector(vec![1.0, f64::NAN]).is_err());
    }

    #[test]
    fn affine_identity_like() {
        let y = forward_affine(
            &t(&[2], &[1.0, 0.0]),
            &t(&[2, 2], &[2.0, 0.0, 0.0, 3.0]),
            &t(&[2], &[0.0, 0.0]),
        )
        .unwrap();
        assert_eq!(y.data(), &[2.0, 0.0]);
    }

    #[test]
    fn affine_zero_input_returns_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = forward_affine(
            &Tensor::zeros(&[4]),
            &t(&[3, 4], &w),
            &t(&[3], &[0.5, -1.0, 2.0]),
        )
        .unwrap();
        assert_eq!(y.data(), &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn affine_matches_matmul_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let b: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut expected = [0.0; 3];
        for o in 0..3 {
            expected[o] = b[o];
            for i in 0..4 {
                expected[o] += w[o][i] * x[i];
            }
        }
        let flat: Vec<f64> = w.concat();
        let y = forward_affine(&t(&[4], &x), &t(&[3, 4], &flat), &t(&[3], &b)).unwrap();
        for (a, e) in y.data().iter().zip(expected) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn affine_applies_per_row() {
        let x = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let y = forward_affine(&x, &t(&[1, 2], &[1.0, 1.0]), &t(&[1], &[0.0])).unwrap();
        assert_eq!(y.shape(), &[2, 1]);
        assert_eq!(y.data(), &[3.0, 7.0]);
    }

    #[test]
    fn affine_shape_error_names_both_shapes() {
        let err = forward_affine(&Tensor::zeros(&[3]), &Tensor::zeros(&[2, 2]), &Tensor::zeros(&[2]))
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn activations_at_known_points() {
        assert_eq!(Activation::Tanh.apply(0.0), 0.0);
        assert_eq!(Activation::Relu.apply(-1.5), 0.0);
        assert_eq!(Activation::Sigmoid.apply(0.0), 0.5);
        assert_eq!(Activation::Relu.derivative(0.0, 0.0), 0.0);
    }

    #[test]
    fn mse_cases() {
        let a = t(&[2], &[0.3, -0.7]);
        assert_eq!(mse_loss(&a, &a).unwrap().item(), 0.0);
        assert_eq!(
            mse_loss(&t(&[2], &[0.0, 0.0]), &t(&[2], &[1.0, 1.0])).unwrap().item(),
            1.0
        );
        assert!(mse_loss(&a, &Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn mse_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a: Vec<f64> = (0..17).map(|_| rng.random_range(-2.0..2.0)).collect();
        let b: Vec<f64> = (0..17).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut acc = 0.0;
        for i in 0..17 {
            acc += (a[i] - b[i]) * (a[i] - b[i]);
        }
        let expected = acc / 17.0;
        let got = mse_loss(&t(&[17], &a), &t(&[17], &b)).unwrap().item();
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn sign_norm_clip() {
        assert_eq!(sign(&t(&[3], &[-2.0, 0.0, 3.0])).data(), &[-1.0, 0.0, 1.0]);
        assert_eq!(l2_norm(&t(&[2], &[3.0, 4.0])), 5.0);
        let c = clip_range(&t(&[1], &[0.58]), &t(&[1], &[0.45]), &t(&[1], &[0.55])).unwrap();
        assert_eq!(c.data(), &[0.55]);
        assert!(clip_range(&t(&[1], &[0.0]), &t(&[2], &[0.0, 0.0]), &t(&[1], &[1.0])).is_err());
    }
}
