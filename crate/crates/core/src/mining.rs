//! Hard positive and hard negative sampling.
//!
//! Linear-shift weighting first moves similarities onto the non-negative axis
//! with `s ← s − min(0, min s) + ε`, then normalizes. The hard positive
//! distribution uses `1 − s_k/Σs` so the worst-aligned text is the most likely
//! draw; negatives are proportional to the shifted similarity so the most
//! confusable wrong candidate is the most likely draw.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::corpus::MultilingualCorpus;
use crate::error::{Error, Result};
use crate::numerics::{dot, softmax_into, DenseMatrix, SeededRng};

/// Offset keeping shifted similarities strictly positive.
pub const SHIFT_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MiningWeighting {
    #[default]
    LinearShift,
    Softmax,
}

impl std::str::FromStr for MiningWeighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear_shift" => Ok(Self::LinearShift),
            "softmax" => Ok(Self::Softmax),
            other => Err(Error::InvalidConfig(format!(
                "unknown mining weighting {other:?} (expected linear_shift or softmax)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MiningKind {
    /// Over the K languages of the anchor instance.
    HardPositiveText,
    /// Over the other instances' images.
    HardNegativeImage,
    /// Over the other instances' texts, `(n, k)` flattened as `n·K + k`.
    HardNegativeText,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiningDistribution {
    pub weights: Vec<f64>,
    pub support: Vec<usize>,
    pub kind: MiningKind,
}

impl MiningDistribution {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Probability assigned to support element `idx`, zero if absent.
    pub fn probability_of(&self, idx: usize) -> f64 {
        self.support
            .iter()
            .position(|&s| s == idx)
            .map_or(0.0, |p| self.weights[p])
    }
}

fn shifted(sims: &[f64]) -> Vec<f64> {
    let lo = sims.iter().copied().fold(f64::INFINITY, f64::min).min(0.0);
    sims.iter().map(|s| s - lo + SHIFT_EPS).collect()
}

fn normalize(raw: Vec<f64>) -> Vec<f64> {
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|r| r / total).collect()
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    softmax_into(v, &mut out);
    out
}

fn check_finite(sims: &[f64]) -> Result<()> {
    match sims.iter().position(|s| !s.is_finite()) {
        Some(index) => Err(Error::NonFinite { index }),
        None => Ok(()),
    }
}

fn proportional(sims: &[f64], weighting: MiningWeighting) -> Vec<f64> {
    match weighting {
        MiningWeighting::LinearShift => normalize(shifted(sims)),
        MiningWeighting::Softmax => softmax(sims),
    }
}

/// Distribution over the K languages favouring the worst-aligned text.
///
/// `sims[k] = t̂_jk · î_j`. With linear shift the raw weights `1 − s_k/Σs` sum
/// to `K − 1` and are rescaled to sum to one.
pub fn hard_positive_dist(sims: &[f64], weighting: MiningWeighting) -> Result<MiningDistribution> {
    if sims.is_empty() {
        return Err(Error::EmptyInput);
    }
    check_finite(sims)?;
    let k = sims.len();
    let weights = if k == 1 {
        vec![1.0]
    } else {
        match weighting {
            MiningWeighting::LinearShift => {
                let s = shifted(sims);
                let total: f64 = s.iter().sum();
                normalize(s.iter().map(|v| 1.0 - v / total).collect())
            }
            MiningWeighting::Softmax => {
                let neg: Vec<f64> = sims.iter().map(|s| -s).collect();
                softmax(&neg)
            }
        }
    };
    Ok(MiningDistribution {
        weights,
        support: (0..k).collect(),
        kind: MiningKind::HardPositiveText,
    })
}

fn check_anchor(images: &DenseMatrix, texts: &DenseMatrix, k: usize, j: usize) -> Result<usize> {
    let n = images.rows();
    if k == 0 || texts.rows() != n * k || texts.cols() != images.cols() {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} texts for {n} images and K={k}",
            texts.rows(),
            texts.cols()
        )));
    }
    if n < 2 {
        return Err(Error::DegenerateBatch(format!(
            "negative mining needs at least 2 instances, got {n}"
        )));
    }
    if j >= n {
        return Err(Error::ShapeMismatch(format!("anchor {j} out of range for N={n}")));
    }
    Ok(n)
}

/// Hard positive distribution for instance `j` of a batch.
pub fn hard_positive_dist_batch(
    images: &DenseMatrix,
    texts: &DenseMatrix,
    k: usize,
    j: usize,
    weighting: MiningWeighting,
) -> Result<MiningDistribution> {
    let image = images.row(j);
    let sims: Vec<f64> = (0..k).map(|l| dot(texts.row(j * k + l), image)).collect();
    hard_positive_dist(&sims, weighting)
}

/// Distribution over images `j' ≠ j` proportional to `Σ_k t̂_jk · î_j'`.
pub fn hard_negative_image_dist_batch(
    images: &DenseMatrix,
    texts: &DenseMatrix,
    k: usize,
    j: usize,
    weighting: MiningWeighting,
) -> Result<MiningDistribution> {
    let n = check_anchor(images, texts, k, j)?;
    let support: Vec<usize> = (0..n).filter(|&c| c != j).collect();
    let sims: Vec<f64> = support
        .iter()
        .map(|&c| (0..k).map(|l| dot(texts.row(j * k + l), images.row(c))).sum())
        .collect();
    check_finite(&sims)?;
    Ok(MiningDistribution {
        weights: proportional(&sims, weighting),
        support,
        kind: MiningKind::HardNegativeImage,
    })
}

/// Distribution over texts `(n, k)` with `n ≠ j`, proportional to `î_j · t̂_nk`.
pub fn hard_negative_text_dist_batch(
    images: &DenseMatrix,
    texts: &DenseMatrix,
    k: usize,
    j: usize,
    weighting: MiningWeighting,
) -> Result<MiningDistribution> {
    let n = check_anchor(images, texts, k, j)?;
    let image = images.row(j);
    let support: Vec<usize> = (0..n * k).filter(|&t| t / k != j).collect();
    let sims: Vec<f64> = support.iter().map(|&t| dot(image, texts.row(t))).collect();
    check_finite(&sims)?;
    Ok(MiningDistribution {
        weights: proportional(&sims, weighting),
        support,
        kind: MiningKind::HardNegativeText,
    })
}

pub fn hard_negative_image_dist(
    corpus: &MultilingualCorpus,
    j: usize,
    weighting: MiningWeighting,
) -> Result<MiningDistribution> {
    hard_negative_image_dist_batch(corpus.images(), corpus.texts(), corpus.n_languages(), j, weighting)
}

pub fn hard_negative_text_dist(
    corpus: &MultilingualCorpus,
    j: usize,
    weighting: MiningWeighting,
) -> Result<MiningDistribution> {
    hard_negative_text_dist_batch(corpus.images(), corpus.texts(), corpus.n_languages(), j, weighting)
}

/// Draw one support element.
pub fn sample(dist: &MiningDistribution, rng: &mut SeededRng) -> Result<usize> {
    let index = WeightedIndex::new(&dist.weights)
        .map_err(|e| Error::InvalidConfig(format!("invalid mining distribution: {e}")))?;
    Ok(dist.support[index.sample(rng)])
}

/// One mined triple per anchor instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MinedSamples {
    /// Language of the hard positive text `t_j^pos`.
    pub positive_language: Vec<usize>,
    /// `(instance, language)` of the hard negative text `t_j^neg`.
    pub negative_text: Vec<(usize, usize)>,
    /// Instance of the hard negative image `i_j^neg`.
    pub negative_image: Vec<usize>,
}

/// Mine every instance of a batch: for each `j` draw the positive, then the
/// negative text, then the negative image.
pub fn mine_batch(
    images: &DenseMatrix,
    texts: &DenseMatrix,
    k: usize,
    weighting: MiningWeighting,
    rng: &mut SeededRng,
) -> Result<MinedSamples> {
    let n = images.rows();
    let mut mined = MinedSamples {
        positive_language: Vec::with_capacity(n),
        negative_text: Vec::with_capacity(n),
        negative_image: Vec::with_capacity(n),
    };
    for j in 0..n {
        let pos = hard_positive_dist_batch(images, texts, k, j, weighting)?;
        let neg_t = hard_negative_text_dist_batch(images, texts, k, j, weighting)?;
        let neg_i = hard_negative_image_dist_batch(images, texts, k, j, weighting)?;
        mined.positive_language.push(sample(&pos, rng)?);
        let t = sample(&neg_t, rng)?;
        mined.negative_text.push((t / k, t % k));
        mined.negative_image.push(sample(&neg_i, rng)?);
    }
    Ok(mined)
}

pub fn mine(
    corpus: &MultilingualCorpus,
    weighting: MiningWeighting,
    rng: &mut SeededRng,
) -> Result<MinedSamples> {
    mine_batch(corpus.images(), corpus.texts(), corpus.n_languages(), weighting, rng)
}
