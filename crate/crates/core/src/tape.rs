//! Tensor-level reverse-mode automatic differentiation.
//!
//! A [`Tape`] is an append-only list of nodes. Each node stores the
//! primitive that produced it, the indices of its inputs, and its forward
//! value. Nodes are only ever appended, so node order is a valid
//! topological order and the backward sweep is a single reverse scan.
//!
//! Model parameters enter the tape as shared constants (`Arc<Tensor>`) and
//! are not differentiated; gradients are taken with respect to any node,
//! typically a leaf.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{self, Activation, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Affine {
        input: usize,
        weight: Arc<Tensor>,
        bias: Arc<Tensor>,
    },
    Activation {
        input: usize,
        kind: Activation,
    },
    Add(usize, usize),
    Mul(usize, usize),
    Scale {
        input: usize,
        factor: f64,
    },
    Reshape {
        input: usize,
        shape: Vec<usize>,
    },
    Concat(Vec<usize>),
    Mean(usize),
    SquaredDiff(usize, usize),
    L2Norm(usize),
}

trait Values {
    fn at(&self, i: usize) -> &Tensor;
}

impl Values for [Node] {
    fn at(&self, i: usize) -> &Tensor {
        &self[i].value
    }
}

impl Values for [Tensor] {
    fn at(&self, i: usize) -> &Tensor {
        &self[i]
    }
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Affine { input, .. }
            | Op::Activation { input, .. }
            | Op::Scale { input, .. }
            | Op::Reshape { input, .. }
            | Op::Mean(input)
            | Op::L2Norm(input) => vec![*input],
            Op::Add(a, b) | Op::Mul(a, b) | Op::SquaredDiff(a, b) => vec![*a, *b],
            Op::Concat(parts) => parts.clone(),
        }
    }

    /// Forward rule, shared by recording and replay.
    fn eval<V: Values + ?Sized>(&self, values: &V) -> Result<Tensor> {
        Ok(match self {
            Op::Leaf => unreachable!("leaves carry their own value"),
            Op::Affine {
                input,
                weight,
                bias,
            } => tensor::forward_affine(values.at(*input), weight, bias)?,
            Op::Activation { input, kind } => tensor::activation(values.at(*input), *kind),
            Op::Add(a, b) => values.at(*a).add(values.at(*b))?,
            Op::Mul(a, b) => values.at(*a).mul(values.at(*b))?,
            Op::Scale { input, factor } => values.at(*input).scale(*factor),
            Op::Reshape { input, shape } => values.at(*input).reshape(shape)?,
            Op::Concat(parts) => {
                let refs: Vec<&Tensor> = parts.iter().map(|&p| values.at(p)).collect();
                tensor::concat(&refs)?
            }
            Op::Mean(input) => Tensor::scalar(values.at(*input).mean()),
            Op::SquaredDiff(a, b) => {
                values
                    .at(*a)
                    .zip_map(values.at(*b), "squared_diff", |x, y| (x - y) * (x - y))?
            }
            Op::L2Norm(input) => Tensor::scalar(tensor::l2_norm(values.at(*input))),
        })
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Single-owner recording of one forward computation.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
        });
        self.var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        Ok(&self.nodes[self.index(v)?].value)
    }

    fn var(&self, index: usize) -> Var {
        Var {
            tape: self.id,
            index,
        }
    }

    fn index(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::Lineage);
        }
        Ok(v.index)
    }

    fn push(&mut self, op: Op) -> Result<Var> {
        let value = op.eval(self.nodes.as_slice())?;
        self.nodes.push(Node { op, value });
        Ok(self.var(self.nodes.len() - 1))
    }

    pub fn affine(&mut self, input: Var, weight: &Arc<Tensor>, bias: &Arc<Tensor>) -> Result<Var> {
        let input = self.index(input)?;
        self.push(Op::Affine {
            input,
            weight: Arc::clone(weight),
            bias: Arc::clone(bias),
        })
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Result<Var> {
        let input = self.index(input)?;
        self.push(Op::Activation { input, kind })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.index(a)?, self.index(b)?);
        self.push(Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.index(a)?, self.index(b)?);
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Result<Var> {
        let input = self.index(input)?;
        self.push(Op::Scale { input, factor })
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let input = self.index(input)?;
        self.push(Op::Reshape {
            input,
            shape: shape.to_vec(),
        })
    }

    /// Flattened concatenation into a rank-1 value.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let parts = parts
            .iter()
            .map(|&p| self.index(p))
            .collect::<Result<Vec<_>>>()?;
        self.push(Op::Concat(parts))
    }

    pub fn mean(&mut self, input: Var) -> Result<Var> {
        let input = self.index(input)?;
        self.push(Op::Mean(input))
    }

    pub fn squared_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.index(a)?, self.index(b)?);
        self.push(Op::SquaredDiff(a, b))
    }

    pub fn l2_norm(&mut self, input: Var) -> Result<Var> {
        let input = self.index(input)?;
        self.push(Op::L2Norm(input))
    }

    /// `mean((a - b)^2)` as a scalar node.
    pub fn mse_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        let sq = self.squared_diff(a, b)?;
        self.mean(sq)
    }

    /// Gradient of the scalar `loss` with respect to `wrt`.
    ///
    /// The tape is not modified, so it can be swept any number of times.
    /// If `loss` does not depend on `wrt` the result is all zeros.
    pub fn backward(&self, loss: Var, wrt: Var) -> Result<Tensor> {
        let mut grads = self.backward_many(loss, &[wrt])?;
        Ok(grads.pop().unwrap())
    }

    pub fn backward_many(&self, loss: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        let loss = self.index(loss)?;
        let wrt = wrt
            .iter()
            .map(|&w| self.index(w))
            .collect::<Result<Vec<_>>>()?;
        let loss_value = &self.nodes[loss].value;
        if !loss_value.is_scalar() {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }

        let lowest = wrt.iter().copied().min().unwrap_or(loss).min(loss);
        let mut adjoint: Vec<Option<Vec<f64>>> = vec![None; loss + 1];
        adjoint[loss] = Some(vec![1.0]);

        for i in (lowest..=loss).rev() {
            let Some(upstream) = adjoint[i].take() else {
                continue;
            };
            self.propagate(&self.nodes[i], &upstream, &mut adjoint);
            adjoint[i] = Some(upstream);
        }

        Ok(wrt
            .iter()
            .map(|&w| {
                let shape = self.nodes[w].value.shape().to_vec();
                match adjoint.get(w) {
                    Some(Some(g)) => Tensor::from_parts(shape, g.clone()),
                    _ => Tensor::zeros(&shape),
                }
            })
            .collect())
    }

    fn propagate(&self, node: &Node, up: &[f64], adjoint: &mut [Option<Vec<f64>>]) {
        let value_of = |i: usize| &self.nodes[i].value;
        let mut accumulate = |target: usize, contribution: &mut dyn Iterator<Item = (usize, f64)>| {
            let len = self.nodes[target].value.len();
            let slot = adjoint[target].get_or_insert_with(|| vec![0.0; len]);
            for (k, g) in contribution {
                slot[k] += g;
            }
        };

        match &node.op {
            Op::Leaf => {}
            Op::Affine { input, weight, .. } => {
                let (out_dim, in_dim) = (weight.shape()[0], weight.shape()[1]);
                let w = weight.data();
                let rows = up.len() / out_dim;
                let mut d_input = vec![0.0; rows * in_dim];
                for r in 0..rows {
                    let up_row = &up[r * out_dim..(r + 1) * out_dim];
                    let d_row = &mut d_input[r * in_dim..(r + 1) * in_dim];
                    for (o, &u) in up_row.iter().enumerate() {
                        if u == 0.0 {
                            continue;
                        }
                        let w_row = &w[o * in_dim..(o + 1) * in_dim];
                        for (d, &wv) in d_row.iter_mut().zip(w_row) {
                            *d += u * wv;
                        }
                    }
                }
                accumulate(*input, &mut d_input.into_iter().enumerate());
            }
            Op::Activation { input, kind } => {
                let x = value_of(*input).data();
                let y = node.value.data();
                accumulate(
                    *input,
                    &mut (0..up.len()).map(|k| (k, up[k] * kind.derivative(x[k], y[k]))),
                );
            }
            Op::Add(a, b) => {
                accumulate(*a, &mut up.iter().copied().enumerate());
                accumulate(*b, &mut up.iter().copied().enumerate());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (value_of(*a).data(), value_of(*b).data());
                accumulate(*a, &mut (0..up.len()).map(|k| (k, up[k] * bv[k])));
                accumulate(*b, &mut (0..up.len()).map(|k| (k, up[k] * av[k])));
            }
            Op::Scale { input, factor } => {
                accumulate(*input, &mut up.iter().map(|u| u * factor).enumerate());
            }
            Op::Reshape { input, .. } => {
                accumulate(*input, &mut up.iter().copied().enumerate());
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = value_of(p).len();
                    accumulate(p, &mut up[offset..offset + n].iter().copied().enumerate());
                    offset += n;
                }
            }
            Op::Mean(input) => {
                let n = value_of(*input).len();
                let g = up[0] / n as f64;
                accumulate(*input, &mut (0..n).map(|k| (k, g)));
            }
            Op::SquaredDiff(a, b) => {
                let (av, bv) = (value_of(*a).data(), value_of(*b).data());
                let d: Vec<f64> = (0..up.len()).map(|k| 2.0 * up[k] * (av[k] - bv[k])).collect();
                accumulate(*a, &mut d.iter().copied().enumerate());
                accumulate(*b, &mut d.iter().map(|v| -v).enumerate());
            }
            Op::L2Norm(input) => {
                let norm = node.value.item();
                let x = value_of(*input).data();
                // Subgradient 0 at the origin.
                if norm > 0.0 {
                    accumulate(*input, &mut x.iter().map(|v| up[0] * v / norm).enumerate());
                }
            }
        }
    }

    /// Recomputes every non-leaf node from the recorded leaves.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match node.op {
                Op::Leaf => node.value.clone(),
                ref op => op.eval(values.as_slice())?,
            };
            values.push(v);
        }
        Ok(values)
    }

    /// Recorded forward values in node order.
    pub fn recorded_values(&self) -> impl Iterator<Item = &Tensor> {
        self.nodes.iter().map(|n| &n.value)
    }

    /// Checks that every node only reads nodes recorded before it.
    pub fn is_topologically_ordered(&self) -> bool {
        self.nodes
            .iter()
            .enumerate()
            .all(|(i, n)| n.op.inputs().iter().all(|&j| j < i))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_difference_gradient;

    fn vec_t(data: &[f64]) -> Tensor {
        Tensor::vector(data.to_vec()).unwrap()
    }

    #[test]
    fn mse_against_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec_t(&[2.0]));
        let zero = tape.leaf(vec_t(&[0.0]));
        let loss = tape.mse_loss(x, zero).unwrap();
        let g = tape.backward(loss, x).unwrap();
        assert_eq!(g.data(), &[4.0]);
        let fd = finite_difference_gradient(|t| Ok(t.data()[0] * t.data()[0]), &vec_t(&[2.0]), 1e-5)
            .unwrap();
        assert!((fd.data()[0] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn constant_loss_gives_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec_t(&[1.0, 2.0]));
        let c = tape.leaf(vec_t(&[3.0, 4.0]));
        let loss = tape.l2_norm(c).unwrap();
        let g = tape.backward(loss, x).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0]);
    }

    #[test]
    fn foreign_var_is_a_lineage_error() {
        let mut a = Tape::new();
        let mut b = Tape::new();
        let x = a.leaf(vec_t(&[1.0]));
        let y = b.leaf(vec_t(&[1.0]));
        let loss = b.mean(y).unwrap();
        assert!(matches!(b.backward(loss, x), Err(Error::Lineage)));
        assert!(matches!(a.mean(y), Err(Error::Lineage)));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec_t(&[1.0, 2.0]));
        let y = tape.activation(x, Activation::Tanh).unwrap();
        assert!(matches!(tape.backward(y, x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn backward_is_repeatable() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec_t(&[0.3, -0.2, 0.9]));
        let w = Arc::new(Tensor::new(vec![2, 3], vec![0.5, -1.0, 0.2, 0.1, 0.7, -0.4]).unwrap());
        let b = Arc::new(vec_t(&[0.1, -0.1]));
        let h = tape.affine(x, &w, &b).unwrap();
        let h = tape.activation(h, Activation::Sigmoid).unwrap();
        let loss = tape.l2_norm(h).unwrap();
        let g1 = tape.backward(loss, x).unwrap();
        let g2 = tape.backward(loss, x).unwrap();
        assert_eq!(g1, g2);
        let replayed = tape.replay().unwrap();
        assert!(replayed.iter().zip(tape.recorded_values()).all(|(a, b)| a == b));
        assert!(tape.is_topologically_ordered());
    }

    #[test]
    fn concat_reshape_mul_gradients_match_fd() {
        let x0 = vec_t(&[0.4, -0.3, 0.8, 0.1]);
        let f = |x: &Tensor| -> Result<(Tape, Var, Var)> {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let c = tape.leaf(vec_t(&[0.5, -1.5]));
            let cat = tape.concat(&[xv, c])?;
            let m = tape.reshape(cat, &[3, 2])?;
            let w = Arc::new(Tensor::new(vec![2, 2], vec![1.0, -0.5, 0.3, 0.8])?);
            let b = Arc::new(vec_t(&[0.0, 0.2]));
            let h = tape.affine(m, &w, &b)?;
            let r = tape.activation(h, Activation::Tanh)?;
            let p = tape.mul(r, r)?;
            let s = tape.scale(p, 3.0)?;
            let q = tape.add(s, h)?;
            let loss = tape.mean(q)?;
            Ok((tape, xv, loss))
        };
        let (tape, xv, loss) = f(&x0).unwrap();
        let g = tape.backward(loss, xv).unwrap();
        let fd = finite_difference_gradient(
            |x| {
                let (t, _, l) = f(x)?;
                Ok(t.value(l)?.item())
            },
            &x0,
            1e-5,
        )
        .unwrap();
        for (a, b) in g.data().iter().zip(fd.data()) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec_t(&[0.0, 1.0, -1.0]));
        let r = tape.activation(x, Activation::Relu).unwrap();
        let loss = tape.mean(r).unwrap();
        let g = tape.backward(loss, x).unwrap();
        assert_eq!(g.data(), &[0.0, 1.0 / 3.0, 0.0]);
    }
}
