//! Training objectives with hand-derived gradients.
//!
//! Every gradient is taken with respect to the unit-norm embeddings fed into
//! the loss; back-propagation through normalization belongs to the encoder
//! maps in [`crate::trainer`].

mod cmlm;
mod combined;
mod contrastive;
pub mod gradcheck;
mod mitm;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::DenseMatrix;

pub use cmlm::{cmlm_loss, mask_tokens, CmlmHead, CmlmReport, DEFAULT_MASK_RATE};
pub use combined::{combined_loss, combined_loss_batch, CombinedConfig, CombinedReport, Heads};
pub use contrastive::{
    cl_1to1, cl_1to1_batch, kcl_i2t, kcl_i2t_batch, kcl_t2i, kcl_t2i_batch, OneToOneReport,
};
pub use mitm::{mitm_loss, MitmHead, MitmReport};

/// Default softmax temperature.
pub const DEFAULT_TAU: f64 = 0.07;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastiveMode {
    /// Every image is aligned with all K texts at once, each positive
    /// carrying label 1/K.
    OneToK,
    /// Each image is aligned with one text in a randomly drawn language.
    OneToOne,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub tau: f64,
    pub mode: ContrastiveMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            mode: ContrastiveMode::OneToK,
        }
    }
}

impl LossConfig {
    pub fn one_to_one(tau: f64) -> Self {
        Self {
            tau,
            mode: ContrastiveMode::OneToOne,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "temperature must be finite and positive, got {}",
                self.tau
            )));
        }
        Ok(())
    }

    fn require_mode(&self, mode: ContrastiveMode) -> Result<()> {
        self.validate()?;
        if self.mode != mode {
            return Err(Error::InvalidConfig(format!(
                "loss expects mode {mode:?}, config has {:?}",
                self.mode
            )));
        }
        Ok(())
    }
}

/// Loss value with gradients for image rows, text rows and any parametric head.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub value: f64,
    pub grad_images: DenseMatrix,
    pub grad_texts: DenseMatrix,
    pub grad_params: Vec<f64>,
}

impl LossReport {
    pub fn zeros(n_images: usize, n_texts: usize, dim: usize) -> Self {
        Self {
            value: 0.0,
            grad_images: DenseMatrix::zeros(n_images, dim),
            grad_texts: DenseMatrix::zeros(n_texts, dim),
            grad_params: Vec::new(),
        }
    }

    /// Add `other`'s value and embedding gradients into `self`.
    pub(crate) fn accumulate(&mut self, other: &LossReport) {
        self.value += other.value;
        add_assign(self.grad_images.as_mut_slice(), other.grad_images.as_slice());
        add_assign(self.grad_texts.as_mut_slice(), other.grad_texts.as_slice());
    }

    pub fn is_finite(&self) -> bool {
        self.value.is_finite()
            && self.grad_params.iter().all(|g| g.is_finite())
            && self.grad_images.as_slice().iter().all(|g| g.is_finite())
            && self.grad_texts.as_slice().iter().all(|g| g.is_finite())
    }
}

pub(crate) fn add_assign(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn axpy(dst: &mut [f64], alpha: f64, src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}
