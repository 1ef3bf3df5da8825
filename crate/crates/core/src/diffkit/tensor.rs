use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use crate::error::{Error, Result};

/// Dense row-major array of `f64` with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    #[serde(skip)]
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            values: vec![0.0; n],
            grad: None,
        }
    }

    pub fn from_vec(shape: &[usize], values: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::Shape(format!(
                "tensor of shape {shape:?} needs {n} values, got {}",
                values.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            values,
            grad: None,
        })
    }

    /// Glorot-uniform initialised `[rows, cols]` matrix.
    pub fn glorot<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let values = (0..rows * cols).map(|_| rng.random_range(-limit..limit)).collect();
        Tensor {
            shape: vec![rows, cols],
            values,
            grad: None,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn zero_grad(&mut self) {
        match &mut self.grad {
            Some(g) => g.iter_mut().for_each(|x| *x = 0.0),
            None => self.grad = Some(vec![0.0; self.values.len()]),
        }
    }

    pub fn accumulate_grad(&mut self, g: &[f64]) {
        let n = self.values.len();
        let grad = self.grad.get_or_insert_with(|| vec![0.0; n]);
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
}

/// Anything that owns named trainable tensors in a fixed order.
pub trait Parameterized {
    fn named_tensors(&self) -> Vec<(String, &Tensor)>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;

    /// Copy every tensor onto the tape, in [`named_tensors`](Self::named_tensors) order.
    fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.named_tensors()
            .into_iter()
            .map(|(_, t)| g.leaf(&t.values))
            .collect()
    }

    /// Add the tape's gradients for `vars` (from [`bind`](Self::bind)) into each tensor's `grad`.
    fn pull_grads(&mut self, g: &Graph, vars: &[Var]) {
        for (t, &v) in self.tensors_mut().into_iter().zip(vars) {
            t.accumulate_grad(g.grad(v));
        }
    }

    fn zero_grad(&mut self) {
        for t in self.tensors_mut() {
            t.zero_grad();
        }
    }

    fn num_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }
}
