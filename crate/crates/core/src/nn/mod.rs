//! Minimal dense/convolutional network with explicit backpropagation.
//!
//! Everything runs in `f64`, one sample at a time. Parameters live in a
//! [`ParamSet`] shared by the networks that reference them by index, so an
//! encoder and decoder can sit in one checkpoint.

mod gemm;
mod layers;
mod network;

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

pub use network::{Network, NetworkBuilder, Op, Shape};

use crate::{Error, Result};

/// A named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { name: name.into(), shape, data: vec![0.0; n] }
    }
}

/// Ordered collection of named tensors. Order is insertion order and is
/// part of the checkpoint format.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_tensors(tensors: Vec<Tensor>) -> Result<Self> {
        for (i, t) in tensors.iter().enumerate() {
            if t.data.len() != t.shape.iter().product::<usize>() {
                return Err(Error::shape(t.shape.iter().product::<usize>(), t.data.len()));
            }
            if tensors[..i].iter().any(|o| o.name == t.name) {
                return Err(Error::InvalidConfig(alloc::format!("duplicate tensor {}", t.name)));
            }
        }
        Ok(Self { tensors })
    }

    pub fn push(&mut self, tensor: Tensor) -> usize {
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.iter_mut().find(|t| t.name == name)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub(crate) fn data(&self, index: usize) -> &[f64] {
        &self.tensors[index].data
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.name.clone(), t.shape.clone()))
                .collect(),
        }
    }

    pub fn fill(&mut self, value: f64) {
        for t in &mut self.tensors {
            t.data.fill(value);
        }
    }

    /// Checks that `other` has the same names and shapes in the same order.
    pub fn check_layout(&self, other: &ParamSet) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            return Err(Error::shape(self.tensors.len(), other.tensors.len()));
        }
        for (a, b) in self.tensors.iter().zip(&other.tensors) {
            if a.name != b.name {
                return Err(Error::UnknownTensor(b.name.clone()));
            }
            if a.shape != b.shape {
                return Err(Error::shape(
                    alloc::format!("{} {:?}", a.name, a.shape),
                    alloc::format!("{:?}", b.shape),
                ));
            }
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &ParamSet) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += y;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Rounds every value to the nearest `f32`, the precision checkpoints
    /// are stored at.
    pub fn snap_f32(&mut self) {
        for t in &mut self.tensors {
            for v in &mut t.data {
                *v = *v as f32 as f64;
            }
        }
    }
}
