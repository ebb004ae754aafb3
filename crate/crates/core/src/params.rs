//! Named parameter storage shared by the reasoner and the feedforward baseline.

use rand::Rng;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> usize {
        self.names.push(name.into());
        self.tensors.push(tensor.trainable());
        self.tensors.len() - 1
    }

    /// Gaussian weight with variance `1 / fan_in`.
    pub fn linear<R: Rng + ?Sized>(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> usize {
        let std = 1.0 / (fan_in as f64).sqrt();
        self.push(name, Tensor::randn(&[fan_in, fan_out], std, rng))
    }

    pub fn bias(&mut self, name: &str, n: usize) -> usize {
        self.push(name, Tensor::zeros(&[n]))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, i: usize) -> &Tensor<T> {
        &self.tensors[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.tensors[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Registers every parameter as a leaf of `tape`.
    pub fn bind(&self, tape: &Tape<T>) -> Vec<Var<T>> {
        self.tensors.iter().map(|t| tape.leaf(t)).collect()
    }

    /// Adds the tape's leaf gradients into each parameter's `grad`.
    pub fn accumulate(&mut self, vars: &[Var<T>], grads: &Gradients<T>) -> Result<()> {
        for (t, v) in self.tensors.iter_mut().zip(vars) {
            if let Some(g) = grads.get(v) {
                t.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Flattened copy of all gradients; missing gradients read as zero.
    pub fn flat_grads(&self) -> Vec<T> {
        self.tensors
            .iter()
            .flat_map(|t| match &t.grad {
                Some(g) => g.clone(),
                None => vec![T::zero(); t.len()],
            })
            .collect()
    }

    pub fn flat_values(&self) -> Vec<T> {
        self.tensors.iter().flat_map(|t| t.data().to_vec()).collect()
    }

    /// Replaces all values, keeping shapes.
    pub fn load_values(&mut self, values: &[Vec<T>]) -> Result<()> {
        if values.len() != self.tensors.len() {
            return Err(Error::shape("load_values", format!("{} vs {}", values.len(), self.tensors.len())));
        }
        for (t, v) in self.tensors.iter_mut().zip(values) {
            if t.len() != v.len() {
                return Err(Error::shape("load_values", format!("{} vs {}", t.len(), v.len())));
            }
            t.data_mut().copy_from_slice(v);
        }
        Ok(())
    }
}
