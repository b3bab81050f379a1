//! 1-to-K and 1-to-1 contrastive losses.
//!
//! Image-to-text: each image scores all `N·K` texts of the batch. Its `K`
//! texts are positives with soft label `1/K`, so the per-image loss is
//! `lse(logits) − (1/K)·Σ_k logit(j, k)`.
//!
//! Text-to-image: each text scores the `N` images, with its own image the
//! single positive.
//!
//! Both report the batch mean. Per-query terms are summed after sorting, so
//! the value does not depend on instance order.

use rayon::prelude::*;

use super::{ContrastiveMode, LossConfig, LossReport};
use crate::corpus::MultilingualCorpus;
use crate::error::{Error, Result};
use crate::numerics::{softmax_into, sorted_sum, DenseMatrix, SeededRng};

fn check_batch(images: &DenseMatrix, texts: &DenseMatrix, k: usize) -> Result<usize> {
    let n = images.rows();
    if k == 0 || texts.rows() != n * k || texts.cols() != images.cols() {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} texts for {n} images of dim {} and K={k}",
            texts.rows(),
            texts.cols(),
            images.cols()
        )));
    }
    Ok(n)
}

/// Replace each row of `logits` by `softmax − target` and return the per-row
/// cross-entropy. `positives(row)` lists the columns whose target is `label`;
/// all other targets are zero.
fn softmax_cross_entropy<P>(logits: &mut DenseMatrix, positives: P, label: f64) -> Vec<f64>
where
    P: Fn(usize) -> std::ops::Range<usize> + Sync,
{
    let cols = logits.cols();
    logits
        .as_mut_slice()
        .par_chunks_mut(cols)
        .enumerate()
        .map(|(row, l)| {
            let pos = positives(row);
            let mut positive_sum = 0.0;
            for c in pos.clone() {
                positive_sum += l[c];
            }
            let snapshot = l.to_vec();
            let lse = softmax_into(&snapshot, l);
            for c in pos {
                l[c] -= label;
            }
            // −Σ_c y_c (l_c − lse) with Σ_c y_c = 1.
            lse - label * positive_sum
        })
        .collect()
}

/// 1-to-K image-to-text loss on raw embedding matrices (no norm check).
pub fn kcl_i2t_batch(
    images: &DenseMatrix,
    texts: &DenseMatrix,
    k: usize,
    tau: f64,
) -> Result<LossReport> {
    let n = check_batch(images, texts, k)?;
    if n * k < 2 {
        return Err(Error::DegenerateBatch(format!(
            "image-to-text loss needs at least 2 texts, got {}",
            n * k
        )));
    }
    let mut logits = images.par_similarity(texts)?;
    logits.as_mut_slice().iter_mut().for_each(|x| *x /= tau);
    let losses = softmax_cross_entropy(&mut logits, |j| j * k..(j + 1) * k, 1.0 / k as f64);
    let value = sorted_sum(&losses) / n as f64;

    // logits now holds dL/dlogits per row (before the 1/(τN) scale).
    let scale = 1.0 / (tau * n as f64);
    let g = logits;
    let mut grad_images = g.matmul(texts)?;
    grad_images.as_mut_slice().iter_mut().for_each(|x| *x *= scale);
    let mut grad_texts = g.transpose().matmul(images)?;
    grad_texts.as_mut_slice().iter_mut().for_each(|x| *x *= scale);
    Ok(LossReport {
        value,
        grad_images,
        grad_texts,
        grad_params: Vec::new(),
    })
}

/// 1-to-K text-to-image loss on raw embedding matrices (no norm check).
pub fn kcl_t2i_batch(
    images: &DenseMatrix,
    texts: &DenseMatrix,
    k: usize,
    tau: f64,
) -> Result<LossReport> {
    let n = check_batch(images, texts, k)?;
    if n < 2 {
        return Err(Error::DegenerateBatch(format!(
            "text-to-image loss needs at least 2 images, got {n}"
        )));
    }
    let mut logits = texts.par_similarity(images)?;
    logits.as_mut_slice().iter_mut().for_each(|x| *x /= tau);
    let losses = softmax_cross_entropy(&mut logits, |r| r / k..r / k + 1, 1.0);
    let n_texts = n * k;
    let value = sorted_sum(&losses) / n_texts as f64;

    let scale = 1.0 / (tau * n_texts as f64);
    let g = logits;
    let mut grad_texts = g.matmul(images)?;
    grad_texts.as_mut_slice().iter_mut().for_each(|x| *x *= scale);
    let mut grad_images = g.transpose().matmul(texts)?;
    grad_images.as_mut_slice().iter_mut().for_each(|x| *x *= scale);
    Ok(LossReport {
        value,
        grad_images,
        grad_texts,
        grad_params: Vec::new(),
    })
}

/// 1-to-K image-to-text loss over a normalized corpus.
pub fn kcl_i2t(corpus: &MultilingualCorpus, cfg: &LossConfig) -> Result<LossReport> {
    cfg.require_mode(ContrastiveMode::OneToK)?;
    corpus.require_normalized()?;
    kcl_i2t_batch(corpus.images(), corpus.texts(), corpus.n_languages(), cfg.tau)
}

/// 1-to-K text-to-image loss over a normalized corpus.
pub fn kcl_t2i(corpus: &MultilingualCorpus, cfg: &LossConfig) -> Result<LossReport> {
    cfg.require_mode(ContrastiveMode::OneToK)?;
    corpus.require_normalized()?;
    kcl_t2i_batch(corpus.images(), corpus.texts(), corpus.n_languages(), cfg.tau)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OneToOneReport {
    /// Mean of the two directions; text gradients touch only selected rows.
    pub report: LossReport,
    pub i2t: f64,
    pub t2i: f64,
    /// Language drawn for each instance.
    pub selected: Vec<usize>,
}

/// Symmetric InfoNCE over one pre-selected text per image.
pub fn cl_1to1_batch(
    images: &DenseMatrix,
    texts: &DenseMatrix,
    k: usize,
    selected: &[usize],
    tau: f64,
) -> Result<OneToOneReport> {
    let n = check_batch(images, texts, k)?;
    if selected.len() != n || selected.iter().any(|&s| s >= k) {
        return Err(Error::ShapeMismatch(format!(
            "language selection {selected:?} invalid for N={n}, K={k}"
        )));
    }
    let mut pairs = DenseMatrix::zeros(n, images.cols());
    for (j, &lang) in selected.iter().enumerate() {
        pairs.row_mut(j).copy_from_slice(texts.row(j * k + lang));
    }
    let i2t = kcl_i2t_batch(images, &pairs, 1, tau)?;
    let t2i = kcl_t2i_batch(images, &pairs, 1, tau)?;

    let mut grad_images = DenseMatrix::zeros(n, images.cols());
    for ((g, a), b) in grad_images
        .as_mut_slice()
        .iter_mut()
        .zip(i2t.grad_images.as_slice())
        .zip(t2i.grad_images.as_slice())
    {
        *g = 0.5 * (a + b);
    }
    let mut grad_texts = DenseMatrix::zeros(texts.rows(), texts.cols());
    for (j, &lang) in selected.iter().enumerate() {
        let dst = grad_texts.row_mut(j * k + lang);
        for ((g, a), b) in dst
            .iter_mut()
            .zip(i2t.grad_texts.row(j))
            .zip(t2i.grad_texts.row(j))
        {
            *g = 0.5 * (a + b);
        }
    }
    Ok(OneToOneReport {
        report: LossReport {
            value: 0.5 * (i2t.value + t2i.value),
            grad_images,
            grad_texts,
            grad_params: Vec::new(),
        },
        i2t: i2t.value,
        t2i: t2i.value,
        selected: selected.to_vec(),
    })
}

/// 1-to-1 baseline: draw one language per instance, then symmetric InfoNCE.
pub fn cl_1to1(
    corpus: &MultilingualCorpus,
    cfg: &LossConfig,
    rng: &mut SeededRng,
) -> Result<OneToOneReport> {
    cfg.require_mode(ContrastiveMode::OneToOne)?;
    corpus.require_normalized()?;
    let k = corpus.n_languages();
    let selected: Vec<usize> = (0..corpus.n_instances()).map(|_| rng.below(k)).collect();
    cl_1to1_batch(corpus.images(), corpus.texts(), k, &selected, cfg.tau)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(images: &[Vec<f64>], texts: &[Vec<f64>], k: usize) -> MultilingualCorpus {
        let langs = (0..k).map(|i| format!("l{i}")).collect();
        let ids = (0..images.len()).map(|i| format!("{i}")).collect();
        MultilingualCorpus::new(
            DenseMatrix::from_rows(images).unwrap(),
            DenseMatrix::from_rows(texts).unwrap(),
            langs,
            ids,
        )
        .unwrap()
    }

    fn identical(n: usize, k: usize) -> MultilingualCorpus {
        let v = vec![0.6, 0.8];
        corpus(&vec![v.clone(); n], &vec![v; n * k], k)
    }

    #[test]
    fn uniform_logits() {
        let c = identical(2, 3);
        let cfg = LossConfig::default();
        assert!((kcl_i2t(&c, &cfg).unwrap().value - 6f64.ln()).abs() < 1e-12);
        let c = identical(4, 2);
        assert!((kcl_t2i(&c, &cfg).unwrap().value - 4f64.ln()).abs() < 1e-12);
        let c = identical(8, 3);
        let mut rng = SeededRng::new(1);
        let r = cl_1to1(&c, &LossConfig::one_to_one(0.07), &mut rng).unwrap();
        assert!((r.i2t - 8f64.ln()).abs() < 1e-12);
        assert!((r.t2i - 8f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn two_instance_identity_similarities() {
        let e1 = vec![1.0, 0.0];
        let e2 = vec![0.0, 1.0];
        let c = corpus(&[e1.clone(), e2.clone()], &[e1, e2], 1);
        let cfg = LossConfig { tau: 1.0, ..Default::default() };
        let v = kcl_i2t(&c, &cfg).unwrap().value;
        assert!((v - (1.0 + (-1f64).exp()).ln()).abs() < 1e-15);
        assert!((v - 0.313262).abs() < 1e-6);
    }

    #[test]
    fn t2i_matching_point_nine() {
        let z = (1.0f64 - 0.82).sqrt();
        let t1 = vec![0.9, 0.1, z];
        let t2 = vec![0.1, 0.9, z];
        let c = corpus(
            &[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]],
            &[t1.clone(), t1, t2.clone(), t2],
            2,
        );
        let v = kcl_t2i(&c, &LossConfig::default()).unwrap().value;
        let expect = (-(0.8f64 / 0.07)).exp().ln_1p();
        assert!((v - expect).abs() < 1e-15);
        assert!((v - 1.09e-5).abs() < 1e-7);
    }

    #[test]
    fn errors() {
        let c = identical(1, 1);
        let cfg = LossConfig::default();
        assert!(matches!(kcl_i2t(&c, &cfg), Err(Error::DegenerateBatch(_))));
        assert!(matches!(kcl_t2i(&identical(1, 3), &cfg), Err(Error::DegenerateBatch(_))));
        let raw = corpus(&[vec![2.0, 0.0], vec![0.0, 1.0]], &[vec![1.0, 0.0], vec![0.0, 1.0]], 1);
        assert!(matches!(kcl_i2t(&raw, &cfg), Err(Error::NotNormalized)));
        let wrong_mode = LossConfig::one_to_one(0.07);
        assert!(matches!(kcl_i2t(&identical(2, 2), &wrong_mode), Err(Error::InvalidConfig(_))));
        let bad_tau = LossConfig { tau: 0.0, ..Default::default() };
        assert!(kcl_t2i(&identical(2, 2), &bad_tau).is_err());
    }

    #[test]
    fn one_to_one_touches_only_selected_texts() {
        let mut rng = SeededRng::new(5);
        let images = DenseMatrix::gaussian(4, 3, 1.0, &mut rng).normalize_rows().unwrap();
        let texts = DenseMatrix::gaussian(12, 3, 1.0, &mut rng).normalize_rows().unwrap();
        let r = cl_1to1_batch(&images, &texts, 3, &[0, 2, 1, 2], 0.5).unwrap();
        for j in 0..4 {
            for k in 0..3 {
                let touched = r.report.grad_texts.row(j * 3 + k).iter().any(|g| *g != 0.0);
                assert_eq!(touched, k == r.selected[j]);
            }
        }
        assert!(cl_1to1_batch(&images, &texts, 3, &[0, 3, 1, 2], 0.5).is_err());
    }

    #[test]
    fn one_to_one_is_seed_deterministic() {
        let mut rng = SeededRng::new(9);
        let images = DenseMatrix::gaussian(6, 4, 1.0, &mut rng).normalize_rows().unwrap();
        let texts = DenseMatrix::gaussian(18, 4, 1.0, &mut rng).normalize_rows().unwrap();
        let c = MultilingualCorpus::new(
            images,
            texts,
            vec!["a".into(), "b".into(), "c".into()],
            (0..6).map(|i| i.to_string()).collect(),
        )
        .unwrap();
        let cfg = LossConfig::one_to_one(0.07);
        let a = cl_1to1(&c, &cfg, &mut SeededRng::new(3)).unwrap();
        let b = cl_1to1(&c, &cfg, &mut SeededRng::new(3)).unwrap();
        assert_eq!(a, b);
    }
}
