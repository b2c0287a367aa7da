//! Dense layers, the GIN encoder and an Adam optimizer, with hand-written
//! reverse-mode gradients.

mod gin;
mod matrix;
mod mlp;
mod optim;

pub use gin::{Encoder, EncoderConfig, EncoderOutput, EncoderTape, GinLayer, GraphBatch, GraphInput};
pub use matrix::Matrix;
pub use mlp::{BatchNorm, Linear, Mlp, MlpTape, BN_EPS};
pub use optim::{Adam, AdamState};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Layer behaviour for batch-norm and dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Batch statistics and active dropout.
    Train,
    /// Running statistics, dropout off.
    Eval,
    /// Batch-norm and dropout bypassed.
    Partial,
}

/// A model whose trainable tensors can be enumerated in a fixed order.
pub trait Parameterized {
    fn tensors(&self) -> Vec<&[f64]>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

/// Gradients aligned with [`Parameterized::tensors`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Vec<f64>>);

impl Gradients {
    pub fn zeros_like<P: Parameterized + ?Sized>(params: &P) -> Self {
        Gradients(params.tensors().iter().map(|t| vec![0.0; t.len()]).collect())
    }

    pub fn add_assign(&mut self, other: &Gradients) -> Result<()> {
        if self.0.len() != other.0.len() {
            return Err(Error::Dimension("gradient tensor counts differ".into()));
        }
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            if a.len() != b.len() {
                return Err(Error::Dimension("gradient tensor sizes differ".into()));
            }
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(())
    }

    pub fn concat(mut self, mut other: Gradients) -> Gradients {
        self.0.append(&mut other.0);
        self
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|g| g.is_finite())
    }

    pub fn flat(&self) -> Vec<f64> {
        self.0.concat()
    }
}
