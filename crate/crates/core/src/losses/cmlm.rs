//! Masked-token reconstruction conditioned on the image.
//!
//! The context vector is the mean embedding of the unmasked tokens plus a
//! linear projection of the image. Each masked position is scored against the
//! whole vocabulary with `ρ(u, w) = u · out[w]`.

use rand::seq::index;

use super::axpy;
use crate::corpus::MASK_TOKEN;
use crate::error::{Error, Result};
use crate::numerics::{dot, mat_vec, softmax_into, DenseMatrix, SeededRng};

/// Fraction of tokens replaced by `[MASK]`.
pub const DEFAULT_MASK_RATE: f64 = 0.15;

#[derive(Debug, Clone, PartialEq)]
pub struct CmlmHead {
    /// `|W| × d_t`
    token_embeddings: DenseMatrix,
    /// `d_t × d`
    image_projection: DenseMatrix,
    /// `|W| × d_t`
    output_embeddings: DenseMatrix,
}

impl CmlmHead {
    pub fn new(vocab_size: usize, token_dim: usize, image_dim: usize, rng: &mut SeededRng) -> Self {
        Self::with_scale(vocab_size, token_dim, image_dim, super::mitm::INIT_SCALE, rng)
    }

    pub fn with_scale(
        vocab_size: usize,
        token_dim: usize,
        image_dim: usize,
        scale: f64,
        rng: &mut SeededRng,
    ) -> Self {
        Self {
            token_embeddings: DenseMatrix::gaussian(vocab_size, token_dim, scale, rng),
            image_projection: DenseMatrix::gaussian(token_dim, image_dim, scale, rng),
            output_embeddings: DenseMatrix::gaussian(vocab_size, token_dim, scale, rng),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.token_embeddings.rows()
    }

    pub fn token_dim(&self) -> usize {
        self.token_embeddings.cols()
    }

    pub fn image_dim(&self) -> usize {
        self.image_projection.cols()
    }

    pub fn n_params(&self) -> usize {
        self.token_embeddings.as_slice().len()
            + self.image_projection.as_slice().len()
            + self.output_embeddings.as_slice().len()
    }

    /// Flat parameters: token table, image projection, output table.
    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.n_params());
        p.extend_from_slice(self.token_embeddings.as_slice());
        p.extend_from_slice(self.image_projection.as_slice());
        p.extend_from_slice(self.output_embeddings.as_slice());
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
        let a = self.token_embeddings.as_slice().len();
        let b = a + self.image_projection.as_slice().len();
        self.token_embeddings.as_mut_slice().copy_from_slice(&p[..a]);
        self.image_projection.as_mut_slice().copy_from_slice(&p[a..b]);
        self.output_embeddings.as_mut_slice().copy_from_slice(&p[b..]);
        Ok(())
    }

    /// Context vector from the unmasked tokens and the image.
    fn context(&self, tokens: &[u32], masked: &[bool], image: &[f64]) -> Vec<f64> {
        let mut u = mat_vec(&self.image_projection, image);
        let kept = masked.iter().filter(|m| !**m).count() as f64;
        let mut pooled = vec![0.0; self.token_dim()];
        for (t, _) in tokens.iter().zip(masked).filter(|(_, m)| !**m) {
            axpy(&mut pooled, 1.0, self.token_embeddings.row(*t as usize));
        }
        for (u, p) in u.iter_mut().zip(&pooled) {
            *u += p / kept;
        }
        u
    }

    /// Vocabulary logits `ρ(u, w)` for the context of `tokens` with `mask` hidden.
    pub fn logits(&self, tokens: &[u32], image: &[f64], mask: &[usize]) -> Result<Vec<f64>> {
        let masked = self.validate(tokens, image, mask)?;
        let u = self.context(tokens, &masked, image);
        Ok(self.output_embeddings.row_iter().map(|o| dot(o, &u)).collect())
    }

    fn validate(&self, tokens: &[u32], image: &[f64], mask: &[usize]) -> Result<Vec<bool>> {
        if tokens.is_empty() {
            return Err(Error::EmptySequence);
        }
        if mask.is_empty() {
            return Err(Error::InvalidConfig("mask is empty".into()));
        }
        if image.len() != self.image_dim() {
            return Err(Error::ShapeMismatch(format!(
                "{}-dim image for a {}-dim projection",
                image.len(),
                self.image_dim()
            )));
        }
        if let Some(t) = tokens.iter().find(|&&t| t as usize >= self.vocab_size()) {
            return Err(Error::InvalidConfig(format!(
                "token {t} outside vocabulary of {}",
                self.vocab_size()
            )));
        }
        let mut masked = vec![false; tokens.len()];
        for &p in mask {
            if p >= tokens.len() {
                return Err(Error::InvalidConfig(format!(
                    "mask position {p} beyond sequence length {}",
                    tokens.len()
                )));
            }
            masked[p] = true;
        }
        if masked.iter().all(|m| *m) {
            return Err(Error::AllMasked);
        }
        Ok(masked)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CmlmReport {
    /// Mean over masked positions.
    pub value: f64,
    pub grad_params: Vec<f64>,
    pub grad_image: Vec<f64>,
}

/// Reconstruction loss for the original `tokens` at the `mask` positions.
pub fn cmlm_loss(
    head: &CmlmHead,
    tokens: &[u32],
    image: &[f64],
    mask: &[usize],
) -> Result<CmlmReport> {
    let masked = head.validate(tokens, image, mask)?;
    let u = head.context(tokens, &masked, image);
    let logits: Vec<f64> = head
        .output_embeddings
        .row_iter()
        .map(|o| dot(o, &u))
        .collect();
    let mut g = vec![0.0; logits.len()];
    let lse = softmax_into(&logits, &mut g);

    // Distinct masked positions; duplicates in `mask` count once.
    let positions: Vec<usize> = (0..tokens.len()).filter(|&p| masked[p]).collect();
    let m = positions.len() as f64;
    let mut value = 0.0;
    for &p in &positions {
        let w = tokens[p] as usize;
        value += lse - logits[w];
        g[w] -= 1.0 / m;
    }
    value /= m;

    let (vocab, dt) = (head.vocab_size(), head.token_dim());
    let emb_len = vocab * dt;
    let proj_len = dt * head.image_dim();
    let mut grad_params = vec![0.0; head.n_params()];
    let mut grad_u = vec![0.0; dt];
    {
        let grad_out = &mut grad_params[emb_len + proj_len..];
        for (w, &gw) in g.iter().enumerate() {
            if gw != 0.0 {
                axpy(&mut grad_out[w * dt..(w + 1) * dt], gw, &u);
                axpy(&mut grad_u, gw, head.output_embeddings.row(w));
            }
        }
    }
    let kept = masked.iter().filter(|m| !**m).count() as f64;
    for (t, _) in tokens.iter().zip(&masked).filter(|(_, m)| !**m) {
        let t = *t as usize;
        axpy(&mut grad_params[t * dt..(t + 1) * dt], 1.0 / kept, &grad_u);
    }
    let d = head.image_dim();
    for (r, gu) in grad_u.iter().enumerate() {
        axpy(
            &mut grad_params[emb_len + r * d..emb_len + (r + 1) * d],
            *gu,
            image,
        );
    }
    let grad_image = head
        .image_projection
        .transpose()
        .row_iter()
        .map(|col| dot(col, &grad_u))
        .collect();
    Ok(CmlmReport {
        value,
        grad_params,
        grad_image,
    })
}

/// Replace `round(rate·len)` positions (at least one) with `[MASK]`, chosen
/// uniformly without replacement. Returns the masked copy and the sorted
/// positions.
pub fn mask_tokens(tokens: &[u32], rate: f64, rng: &mut SeededRng) -> Result<(Vec<u32>, Vec<usize>)> {
    if tokens.is_empty() {
        return Err(Error::EmptySequence);
    }
    if !(rate > 0.0 && rate < 1.0) {
        return Err(Error::InvalidConfig(format!("mask rate must lie in (0, 1), got {rate}")));
    }
    let count = ((rate * tokens.len() as f64).round() as usize).clamp(1, tokens.len());
    let mut positions = index::sample(rng, tokens.len(), count).into_vec();
    positions.sort_unstable();
    let mut masked = tokens.to_vec();
    for &p in &positions {
        masked[p] = MASK_TOKEN;
    }
    Ok((masked, positions))
}
