//! One forward definition, two execution modes.
//!
//! Models are written once against [`Backend`]; [`Eager`] evaluates plain
//! tensors, while [`Tape`] records the same computation for differentiation.

use std::sync::Arc;

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::{self, Activation, Tensor};

pub trait Backend {
    type Value: Clone;

    /// Introduces a fixed tensor (a reference output, an attribute).
    fn constant(&mut self, value: &Tensor) -> Self::Value;

    fn affine(&mut self, input: &Self::Value, weight: &Arc<Tensor>, bias: &Arc<Tensor>) -> Result<Self::Value>;
    fn activation(&mut self, input: &Self::Value, kind: Activation) -> Result<Self::Value>;
    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn concat(&mut self, parts: &[Self::Value]) -> Result<Self::Value>;
    fn reshape(&mut self, input: &Self::Value, shape: &[usize]) -> Result<Self::Value>;
    fn scale(&mut self, input: &Self::Value, factor: f64) -> Result<Self::Value>;
    /// Scalar `mean((a - b)^2)`.
    fn mse(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn shape_of(&self, value: &Self::Value) -> Result<Vec<usize>>;
}

/// Immediate evaluation with no recording.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eager;

impl Backend for Eager {
    type Value = Tensor;

    fn constant(&mut self, value: &Tensor) -> Tensor {
        value.clone()
    }

    fn affine(&mut self, input: &Tensor, weight: &Arc<Tensor>, bias: &Arc<Tensor>) -> Result<Tensor> {
        tensor::forward_affine(input, weight, bias)
    }

    fn activation(&mut self, input: &Tensor, kind: Activation) -> Result<Tensor> {
        Ok(tensor::activation(input, kind))
    }

    fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        a.add(b)
    }

    fn concat(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        let refs: Vec<&Tensor> = parts.iter().collect();
        tensor::concat(&refs)
    }

    fn reshape(&mut self, input: &Tensor, shape: &[usize]) -> Result<Tensor> {
        input.reshape(shape)
    }

    fn scale(&mut self, input: &Tensor, factor: f64) -> Result<Tensor> {
        Ok(input.scale(factor))
    }

    fn mse(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        tensor::mse_loss(a, b)
    }

    fn shape_of(&self, value: &Tensor) -> Result<Vec<usize>> {
        Ok(value.shape().to_vec())
    }
}

impl Backend for Tape {
    type Value = Var;

    fn constant(&mut self, value: &Tensor) -> Var {
        self.leaf(value.clone())
    }

    fn affine(&mut self, input: &Var, weight: &Arc<Tensor>, bias: &Arc<Tensor>) -> Result<Var> {
        Tape::affine(self, *input, weight, bias)
    }

    fn activation(&mut self, input: &Var, kind: Activation) -> Result<Var> {
        Tape::activation(self, *input, kind)
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        Tape::add(self, *a, *b)
    }

    fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        Tape::concat(self, parts)
    }

    fn reshape(&mut self, input: &Var, shape: &[usize]) -> Result<Var> {
        Tape::reshape(self, *input, shape)
    }

    fn scale(&mut self, input: &Var, factor: f64) -> Result<Var> {
        Tape::scale(self, *input, factor)
    }

    fn mse(&mut self, a: &Var, b: &Var) -> Result<Var> {
        Tape::mse_loss(self, *a, *b)
    }

    fn shape_of(&self, value: &Var) -> Result<Vec<usize>> {
        Ok(self.value(*value)?.shape().to_vec())
    }
}
