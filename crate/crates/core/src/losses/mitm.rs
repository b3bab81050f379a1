//! Image-text matching with a small fusion scorer.
//!
//! The fusion stand-in is `u = tanh(W·[t; i] + b)` and the match logit is
//! `s(u) = w·u + c`. Without the tanh the logit splits into a text term plus
//! an image term.
//!
//! Image-to-text compares the positive pair against the same image with a
//! negative text; text-to-image compares it against the positive text with a
//! negative image. Each term is `softplus(s_neg − s_pos)`.

use super::axpy;
use crate::error::{Error, Result};
use crate::numerics::{dot, sigmoid, softplus, DenseMatrix, SeededRng};

/// Standard deviation of the Gaussian initialization.
pub const INIT_SCALE: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct MitmHead {
    dim: usize,
    /// `d_f × 2d`
    fuse_weight: DenseMatrix,
    fuse_bias: Vec<f64>,
    score_weight: Vec<f64>,
    score_bias: f64,
}

struct Forward {
    input: Vec<f64>,
    hidden: Vec<f64>,
    score: f64,
}

impl MitmHead {
    pub fn new(dim: usize, fused_dim: usize, rng: &mut SeededRng) -> Self {
        Self::with_scale(dim, fused_dim, INIT_SCALE, rng)
    }

    pub fn with_scale(dim: usize, fused_dim: usize, scale: f64, rng: &mut SeededRng) -> Self {
        let fuse_weight = DenseMatrix::gaussian(fused_dim, 2 * dim, scale, rng);
        let fuse_bias = (0..fused_dim).map(|_| scale * rng.normal()).collect();
        let score_weight = (0..fused_dim).map(|_| scale * rng.normal()).collect();
        let score_bias = scale * rng.normal();
        Self {
            dim,
            fuse_weight,
            fuse_bias,
            score_weight,
            score_bias,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn fused_dim(&self) -> usize {
        self.fuse_bias.len()
    }

    pub fn n_params(&self) -> usize {
        let f = self.fused_dim();
        f * 2 * self.dim + 2 * f + 1
    }

    /// Flat parameters: fusion weight (row-major), fusion bias, score weight, score bias.
    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.n_params());
        p.extend_from_slice(self.fuse_weight.as_slice());
        p.extend_from_slice(&self.fuse_bias);
        p.extend_from_slice(&self.score_weight);
        p.push(self.score_bias);
        p
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.n_params() {
            return Err(Error::ShapeMismatch(format!(
                "{} parameters for a head with {}",
                p.len(),
                self.n_params()
            )));
        }
        let w = self.fuse_weight.as_slice().len();
        let f = self.fused_dim();
        self.fuse_weight.as_mut_slice().copy_from_slice(&p[..w]);
        self.fuse_bias.copy_from_slice(&p[w..w + f]);
        self.score_weight.copy_from_slice(&p[w + f..w + 2 * f]);
        self.score_bias = p[w + 2 * f];
        Ok(())
    }

    fn check(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::ShapeMismatch(format!(
                "{}-dim input for a {}-dim matching head",
                v.len(),
                self.dim
            )));
        }
        Ok(())
    }

    fn forward(&self, text: &[f64], image: &[f64]) -> Forward {
        let mut input = Vec::with_capacity(2 * self.dim);
        input.extend_from_slice(text);
        input.extend_from_slice(image);
        let hidden: Vec<f64> = self
            .fuse_weight
            .row_iter()
            .zip(&self.fuse_bias)
            .map(|(w, b)| (dot(w, &input) + b).tanh())
            .collect();
        let score = dot(&self.score_weight, &hidden) + self.score_bias;
        Forward {
            input,
            hidden,
            score,
        }
    }

    /// Match logit `s(fuse(text, image))`.
    pub fn score(&self, text: &[f64], image: &[f64]) -> f64 {
        self.forward(text, image).score
    }

    /// Probability that the pair matches, `σ(s)`.
    pub fn match_probability(&self, text: &[f64], image: &[f64]) -> f64 {
        sigmoid(self.score(text, image))
    }

    /// Accumulate `upstream · ∂s/∂·` into the parameter gradient and return
    /// the gradient for the concatenated `[text; image]` input.
    fn backward(&self, fwd: &Forward, upstream: f64, grad_params: &mut [f64]) -> Vec<f64> {
        let d2 = 2 * self.dim;
        let f = self.fused_dim();
        let w_len = f * d2;
        let mut grad_input = vec![0.0; d2];
        for o in 0..f {
            let h = fwd.hidden[o];
            let dpre = upstream * self.score_weight[o] * (1.0 - h * h);
            axpy(&mut grad_params[o * d2..(o + 1) * d2], dpre, &fwd.input);
            grad_params[w_len + o] += dpre;
            grad_params[w_len + f + o] += upstream * h;
            axpy(&mut grad_input, dpre, self.fuse_weight.row(o));
        }
        grad_params[w_len + 2 * f] += upstream;
        grad_input
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MitmReport {
    /// `i2t + t2i`
    pub value: f64,
    pub i2t: f64,
    pub t2i: f64,
    pub grad_params: Vec<f64>,
    pub grad_positive_text: Vec<f64>,
    pub grad_image: Vec<f64>,
    pub grad_negative_text: Vec<f64>,
    pub grad_negative_image: Vec<f64>,
}

pub fn mitm_loss(
    head: &MitmHead,
    positive_text: &[f64],
    image: &[f64],
    negative_text: &[f64],
    negative_image: &[f64],
) -> Result<MitmReport> {
    for v in [positive_text, image, negative_text, negative_image] {
        head.check(v)?;
    }
    let pos = head.forward(positive_text, image);
    let neg_text = head.forward(negative_text, image);
    let neg_image = head.forward(positive_text, negative_image);

    let i2t = softplus(neg_text.score - pos.score);
    let t2i = softplus(neg_image.score - pos.score);
    let a = sigmoid(neg_text.score - pos.score);
    let b = sigmoid(neg_image.score - pos.score);

    let d = head.dim;
    let mut grad_params = vec![0.0; head.n_params()];
    let g_pos = head.backward(&pos, -(a + b), &mut grad_params);
    let g_nt = head.backward(&neg_text, a, &mut grad_params);
    let g_ni = head.backward(&neg_image, b, &mut grad_params);

    let mut grad_positive_text = g_pos[..d].to_vec();
    let mut grad_image = g_pos[d..].to_vec();
    for i in 0..d {
        grad_positive_text[i] += g_ni[i];
        grad_image[i] += g_nt[d + i];
    }
    Ok(MitmReport {
        value: i2t + t2i,
        i2t,
        t2i,
        grad_params,
        grad_positive_text,
        grad_image,
        grad_negative_text: g_nt[..d].to_vec(),
        grad_negative_image: g_ni[d..].to_vec(),
    })
}
