//! Unit-weight sum of the contrastive, matching and masked-token objectives.

use serde::{Deserialize, Serialize};

use super::cmlm::{cmlm_loss, mask_tokens, CmlmHead, DEFAULT_MASK_RATE};
use super::contrastive::{kcl_i2t_batch, kcl_t2i_batch};
use super::mitm::{mitm_loss, MitmHead};
use super::{axpy, LossReport, DEFAULT_TAU};
use crate::corpus::{MultilingualCorpus, TokenCorpus};
use crate::error::{Error, Result};
use crate::mining::{mine_batch, MinedSamples, MiningWeighting};
use crate::numerics::{DenseMatrix, SeededRng};

/// Optional parametric heads; a missing head drops its term.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Heads {
    pub mitm: Option<MitmHead>,
    pub cmlm: Option<CmlmHead>,
}

impl Heads {
    pub fn n_params(&self) -> usize {
        self.mitm.as_ref().map_or(0, MitmHead::n_params)
            + self.cmlm.as_ref().map_or(0, CmlmHead::n_params)
    }

    /// Matching head parameters followed by masked-token head parameters.
    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.n_params());
        if let Some(h) = &self.mitm {
            p.extend(h.params());
        }
        if let Some(h) = &self.cmlm {
            p.extend(h.params());
        }
        p
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.n_params() {
            return Err(Error::ShapeMismatch(format!(
                "{} parameters for heads with {}",
                p.len(),
                self.n_params()
            )));
        }
        let split = self.mitm.as_ref().map_or(0, MitmHead::n_params);
        if let Some(h) = &mut self.mitm {
            h.set_params(&p[..split])?;
        }
        if let Some(h) = &mut self.cmlm {
            h.set_params(&p[split..])?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CombinedConfig {
    pub tau: f64,
    pub mining_weighting: MiningWeighting,
    pub mask_rate: f64,
}

impl Default for CombinedConfig {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            mining_weighting: MiningWeighting::LinearShift,
            mask_rate: DEFAULT_MASK_RATE,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CombinedReport {
    /// Total value, embedding gradients and head gradients (see [`Heads::params`]).
    pub report: LossReport,
    pub kcl_i2t: f64,
    pub kcl_t2i: f64,
    pub mitm_i2t: f64,
    pub mitm_t2i: f64,
    pub cmlm: f64,
    /// Present whenever a head is enabled.
    pub mined: Option<MinedSamples>,
}

/// Combined objective on a batch of `N` images and `N·K` texts.
///
/// `sequences` holds the `N·K` token sequences aligned with `texts` and is
/// required only when the masked-token head is enabled. The matching and
/// masked-token terms are averaged over the `N` anchors. Randomness is drawn
/// from `rng` in a fixed order: mining for every anchor, then masks.
pub fn combined_loss_batch(
    images: &DenseMatrix,
    texts: &DenseMatrix,
    k: usize,
    sequences: Option<&[&[u32]]>,
    heads: &Heads,
    cfg: &CombinedConfig,
    rng: &mut SeededRng,
) -> Result<CombinedReport> {
    let i2t = kcl_i2t_batch(images, texts, k, cfg.tau)?;
    let t2i = kcl_t2i_batch(images, texts, k, cfg.tau)?;
    let n = images.rows();
    let mut total = LossReport::zeros(n, texts.rows(), images.cols());
    total.accumulate(&i2t);
    total.accumulate(&t2i);
    total.grad_params = vec![0.0; heads.n_params()];
    let mut out = CombinedReport {
        report: total,
        kcl_i2t: i2t.value,
        kcl_t2i: t2i.value,
        mitm_i2t: 0.0,
        mitm_t2i: 0.0,
        cmlm: 0.0,
        mined: None,
    };
    if heads.mitm.is_none() && heads.cmlm.is_none() {
        return Ok(out);
    }
    if heads.cmlm.is_some() {
        match sequences {
            Some(s) if s.len() == texts.rows() => {}
            Some(s) => {
                return Err(Error::ShapeMismatch(format!(
                    "{} token sequences for {} texts",
                    s.len(),
                    texts.rows()
                )))
            }
            None => {
                return Err(Error::InvalidConfig(
                    "masked-token head enabled without token sequences".into(),
                ))
            }
        }
    }
    let mined = mine_batch(images, texts, k, cfg.mining_weighting, rng)?;
    let inv_n = 1.0 / n as f64;
    let split = heads.mitm.as_ref().map_or(0, MitmHead::n_params);

    if let Some(head) = &heads.mitm {
        let (mut a, mut b) = (Vec::with_capacity(n), Vec::with_capacity(n));
        for j in 0..n {
            let pos = j * k + mined.positive_language[j];
            let (nt_j, nt_k) = mined.negative_text[j];
            let neg_t = nt_j * k + nt_k;
            let neg_i = mined.negative_image[j];
            let r = mitm_loss(head, texts.row(pos), images.row(j), texts.row(neg_t), images.row(neg_i))?;
            a.push(r.i2t);
            b.push(r.t2i);
            let g = &mut out.report;
            axpy(&mut g.grad_params[..split], inv_n, &r.grad_params);
            axpy(g.grad_texts.row_mut(pos), inv_n, &r.grad_positive_text);
            axpy(g.grad_images.row_mut(j), inv_n, &r.grad_image);
            axpy(g.grad_texts.row_mut(neg_t), inv_n, &r.grad_negative_text);
            axpy(g.grad_images.row_mut(neg_i), inv_n, &r.grad_negative_image);
        }
        out.mitm_i2t = a.iter().sum::<f64>() * inv_n;
        out.mitm_t2i = b.iter().sum::<f64>() * inv_n;
    }

    if let (Some(head), Some(seqs)) = (&heads.cmlm, sequences) {
        let mut values = Vec::with_capacity(n);
        for j in 0..n {
            let tokens = seqs[j * k + mined.positive_language[j]];
            if tokens.len() < 2 {
                // No context survives masking a single token.
                continue;
            }
            let (_, mask) = mask_tokens(tokens, cfg.mask_rate, rng)?;
            let r = cmlm_loss(head, tokens, images.row(j), &mask)?;
            values.push(r.value);
            let g = &mut out.report;
            axpy(&mut g.grad_params[split..], inv_n, &r.grad_params);
            axpy(g.grad_images.row_mut(j), inv_n, &r.grad_image);
        }
        out.cmlm = values.iter().sum::<f64>() * inv_n;
    }
    out.report.value = out.kcl_i2t + out.kcl_t2i + out.mitm_i2t + out.mitm_t2i + out.cmlm;
    out.mined = Some(mined);
    Ok(out)
}

/// Combined objective over a whole normalized corpus and its tokens.
pub fn combined_loss(
    corpus: &MultilingualCorpus,
    tokens: Option<&TokenCorpus>,
    heads: &Heads,
    cfg: &CombinedConfig,
    rng: &mut SeededRng,
) -> Result<CombinedReport> {
    corpus.require_normalized()?;
    let seqs: Option<Vec<&[u32]>> = tokens
        .map(|t| {
            t.check_matches(corpus)?;
            Ok::<_, Error>(t.sequences.iter().map(Vec::as_slice).collect())
        })
        .transpose()?;
    combined_loss_batch(
        corpus.images(),
        corpus.texts(),
        corpus.n_languages(),
        seqs.as_deref(),
        heads,
        cfg,
        rng,
    )
}
