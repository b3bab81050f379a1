//! Finite-difference verification of the analytic gradients.

use serde::Serialize;

use super::cmlm::{cmlm_loss, CmlmHead};
use super::contrastive::{cl_1to1_batch, kcl_i2t_batch, kcl_t2i_batch};
use super::mitm::{mitm_loss, MitmHead};
use super::LossReport;
use crate::error::{Error, Result};
use crate::numerics::{finite_diff_grad, max_relative_error, DenseMatrix, SeededRng, DEFAULT_FD_STEP};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckedLoss {
    KclI2t,
    KclT2i,
    Cl1to1,
    Mitm,
    Cmlm,
}

impl CheckedLoss {
    pub const ALL: [CheckedLoss; 5] = [
        CheckedLoss::KclI2t,
        CheckedLoss::KclT2i,
        CheckedLoss::Cl1to1,
        CheckedLoss::Mitm,
        CheckedLoss::Cmlm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CheckedLoss::KclI2t => "kcl_i2t",
            CheckedLoss::KclT2i => "kcl_t2i",
            CheckedLoss::Cl1to1 => "cl_1to1",
            CheckedLoss::Mitm => "mitm",
            CheckedLoss::Cmlm => "cmlm",
        }
    }

    /// Losses selected by a CLI family name: `kcl`, `mitm`, `cmlm` or `all`.
    pub fn family(name: &str) -> Result<Vec<CheckedLoss>> {
        use CheckedLoss::*;
        match name {
            "kcl" => Ok(vec![KclI2t, KclT2i, Cl1to1]),
            "mitm" => Ok(vec![Mitm]),
            "cmlm" => Ok(vec![Cmlm]),
            "all" => Ok(Self::ALL.to_vec()),
            other => Err(Error::InvalidConfig(format!(
                "unknown loss family {other:?} (expected kcl, mitm, cmlm or all)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckResult {
    pub loss: CheckedLoss,
    pub trial: usize,
    /// Short description of the sampled shape.
    pub shape: String,
    pub n_coordinates: usize,
    pub max_relative_error: f64,
}

fn unit_rows(rows: usize, dim: usize, rng: &mut SeededRng) -> DenseMatrix {
    let v: Vec<f64> = (0..rows).flat_map(|_| rng.unit_vector(dim)).collect();
    DenseMatrix::new(rows, dim, v).expect("shape is consistent")
}

fn between(rng: &mut SeededRng, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

fn concat(report: &LossReport) -> Vec<f64> {
    let mut g = report.grad_images.as_slice().to_vec();
    g.extend_from_slice(report.grad_texts.as_slice());
    g
}

fn check_embeddings<F>(n: usize, k: usize, d: usize, rng: &mut SeededRng, eval: F) -> Result<(usize, f64)>
where
    F: Fn(&DenseMatrix, &DenseMatrix) -> Result<LossReport>,
{
    let images = unit_rows(n, d, rng);
    let texts = unit_rows(n * k, d, rng);
    let analytic = concat(&eval(&images, &texts)?);
    let mut x = images.as_slice().to_vec();
    x.extend_from_slice(texts.as_slice());
    let split = n * d;
    let f = |x: &[f64]| {
        let im = DenseMatrix::new(n, d, x[..split].to_vec()).expect("shape");
        let tx = DenseMatrix::new(n * k, d, x[split..].to_vec()).expect("shape");
        eval(&im, &tx).map_or(f64::NAN, |r| r.value)
    };
    let numeric = finite_diff_grad(f, &x, DEFAULT_FD_STEP)?;
    Ok((x.len(), max_relative_error(&analytic, &numeric)))
}

/// One randomized trial for `loss`, with shapes drawn from `rng`
/// (`N ≤ 6`, `K ≤ 4`, `d ≤ 8`).
pub fn check_once(loss: CheckedLoss, trial: usize, tau: f64, rng: &mut SeededRng) -> Result<GradcheckResult> {
    let n = between(rng, 2, 6);
    let k = between(rng, 1, 4);
    let d = between(rng, 2, 8);
    let (shape, (coords, err)) = match loss {
        CheckedLoss::KclI2t => (
            format!("N={n} K={k} d={d}"),
            check_embeddings(n, k, d, rng, |i, t| kcl_i2t_batch(i, t, k, tau))?,
        ),
        CheckedLoss::KclT2i => (
            format!("N={n} K={k} d={d}"),
            check_embeddings(n, k, d, rng, |i, t| kcl_t2i_batch(i, t, k, tau))?,
        ),
        CheckedLoss::Cl1to1 => {
            let selected: Vec<usize> = (0..n).map(|_| rng.below(k)).collect();
            (
                format!("N={n} K={k} d={d}"),
                check_embeddings(n, k, d, rng, |i, t| {
                    cl_1to1_batch(i, t, k, &selected, tau).map(|r| r.report)
                })?,
            )
        }
        CheckedLoss::Mitm => {
            let df = between(rng, 1, 8);
            let head = MitmHead::with_scale(d, df, 0.5, rng);
            let inputs: Vec<Vec<f64>> = (0..4).map(|_| rng.unit_vector(d)).collect();
            let r = mitm_loss(&head, &inputs[0], &inputs[1], &inputs[2], &inputs[3])?;
            let mut analytic = r.grad_params.clone();
            for g in [
                &r.grad_positive_text,
                &r.grad_image,
                &r.grad_negative_text,
                &r.grad_negative_image,
            ] {
                analytic.extend_from_slice(g);
            }
            let mut x = head.params();
            let np = x.len();
            for v in &inputs {
                x.extend_from_slice(v);
            }
            let f = |x: &[f64]| {
                let mut h = head.clone();
                h.set_params(&x[..np]).expect("length");
                let v = |i: usize| &x[np + i * d..np + (i + 1) * d];
                mitm_loss(&h, v(0), v(1), v(2), v(3)).map_or(f64::NAN, |r| r.value)
            };
            let numeric = finite_diff_grad(f, &x, DEFAULT_FD_STEP)?;
            (
                format!("d={d} d_f={df}"),
                (x.len(), max_relative_error(&analytic, &numeric)),
            )
        }
        CheckedLoss::Cmlm => {
            let vocab = between(rng, 5, 12);
            let dt = between(rng, 1, 4);
            let len = between(rng, 2, 8);
            let head = CmlmHead::with_scale(vocab, dt, d, 0.5, rng);
            let tokens: Vec<u32> = (0..len).map(|_| rng.below(vocab) as u32).collect();
            let n_mask = between(rng, 1, len - 1);
            let mut mask: Vec<usize> = rand::seq::index::sample(rng, len, n_mask).into_vec();
            mask.sort_unstable();
            let image = rng.unit_vector(d);
            let r = cmlm_loss(&head, &tokens, &image, &mask)?;
            let mut analytic = r.grad_params.clone();
            analytic.extend_from_slice(&r.grad_image);
            let mut x = head.params();
            let np = x.len();
            x.extend_from_slice(&image);
            let f = |x: &[f64]| {
                let mut h = head.clone();
                h.set_params(&x[..np]).expect("length");
                cmlm_loss(&h, &tokens, &x[np..], &mask).map_or(f64::NAN, |r| r.value)
            };
            let numeric = finite_diff_grad(f, &x, DEFAULT_FD_STEP)?;
            (
                format!("|W|={vocab} d_t={dt} d={d} len={len} masked={n_mask}"),
                (x.len(), max_relative_error(&analytic, &numeric)),
            )
        }
    };
    Ok(GradcheckResult {
        loss,
        trial,
        shape,
        n_coordinates: coords,
        max_relative_error: err,
    })
}

/// `trials` randomized checks for each loss in `losses`; trial `t` of a
/// given loss uses sub-stream `t` of `seed` so results do not depend on
/// which other losses are checked.
pub fn run_gradcheck(
    losses: &[CheckedLoss],
    trials: usize,
    tau: f64,
    seed: u64,
) -> Result<Vec<GradcheckResult>> {
    let mut out = Vec::with_capacity(losses.len() * trials);
    for &loss in losses {
        for t in 0..trials {
            let stream = (loss as u64) << 32 | t as u64;
            let mut rng = SeededRng::with_stream(seed, stream);
            out.push(check_once(loss, t, tau, &mut rng)?);
        }
    }
    Ok(out)
}
