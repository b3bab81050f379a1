//! Alignment-direction angles for an image and two of its texts.
//!
//! `θ` is the angle between the direction actually followed when a text
//! `t_n` is pulled toward another text `t_m` and the direction toward the
//! image. `ω` is the angle between pulling the image toward a single text and
//! pulling it toward the normalized midpoint of both texts.

use std::f64::consts::PI;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{angle_between, dot, norm, random_orthonormal, SeededRng};

/// Differences shorter than this have no direction.
pub const DIRECTION_TOL: f64 = 1e-12;

fn diff(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

fn direction_angle(a: &[f64], b: &[f64]) -> Result<f64> {
    if norm(a) < DIRECTION_TOL || norm(b) < DIRECTION_TOL {
        return Err(Error::DegenerateDirection);
    }
    angle_between(a, b).ok_or(Error::DegenerateDirection)
}

fn check_dims(vs: &[&[f64]]) -> Result<()> {
    let d = vs[0].len();
    if d == 0 || vs.iter().any(|v| v.len() != d) {
        return Err(Error::ShapeMismatch("vectors must share a non-zero dimension".into()));
    }
    Ok(())
}

/// Angle between `t_m − t_n` and `i − t_n`.
pub fn theta_angle(i: &[f64], t_m: &[f64], t_n: &[f64]) -> Result<f64> {
    check_dims(&[i, t_m, t_n])?;
    direction_angle(&diff(t_m, t_n), &diff(i, t_n))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OmegaTarget {
    M,
    N,
}

/// Angle between `t_target − i` and `(t_m + t_n)/‖t_m + t_n‖ − i`.
pub fn omega_angle(i: &[f64], t_m: &[f64], t_n: &[f64], target: OmegaTarget) -> Result<f64> {
    check_dims(&[i, t_m, t_n])?;
    let sum: Vec<f64> = t_m.iter().zip(t_n).map(|(a, b)| a + b).collect();
    let len = norm(&sum);
    if len < DIRECTION_TOL {
        return Err(Error::AntipodalTexts);
    }
    // Identical texts are their own midpoint; skip the rounding of sum/‖sum‖.
    let midpoint: Vec<f64> = if t_m == t_n {
        t_m.to_vec()
    } else {
        sum.iter().map(|s| s / len).collect()
    };
    let t = match target {
        OmegaTarget::M => t_m,
        OmegaTarget::N => t_n,
    };
    direction_angle(&diff(t, i), &diff(&midpoint, i))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    FixedAngles,
    RandomSphere,
}

/// `alpha = ∠(i, t_m)`, `beta = ∠(i, t_n)`, `gamma = ∠(t_m, t_n)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TripleConfig {
    pub dim: usize,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub mode: SamplingMode,
}

impl TripleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::InvalidConfig(format!("dim must be at least 2, got {}", self.dim)));
        }
        if self.mode == SamplingMode::RandomSphere {
            return Ok(());
        }
        let (a, b, g) = (self.alpha, self.beta, self.gamma);
        if [a, b, g].iter().any(|x| !(*x > 0.0 && *x < PI)) {
            return Err(Error::InvalidConfig(format!(
                "angles must lie in (0, π), got ({a}, {b}, {g})"
            )));
        }
        if g < (a - b).abs() || g > a + b || a + b + g > 2.0 * PI {
            return Err(Error::InvalidConfig(format!(
                "angles ({a}, {b}, {g}) do not form a spherical triangle"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AngleSample {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Absent when a direction is degenerate for this configuration.
    pub theta: Option<f64>,
    pub omega: Option<f64>,
}

impl AngleSample {
    pub fn measure(i: &[f64], t_m: &[f64], t_n: &[f64]) -> Self {
        let ang = |a: &[f64], b: &[f64]| angle_between(a, b).unwrap_or(0.0);
        Self {
            alpha: ang(i, t_m),
            beta: ang(i, t_n),
            gamma: ang(t_m, t_n),
            theta: theta_angle(i, t_m, t_n).ok(),
            omega: omega_angle(i, t_m, t_n, OmegaTarget::M).ok(),
        }
    }
}

/// Unit vector at exactly `angle` from unit `base`, in a uniformly random
/// 2-plane containing it.
fn at_angle(base: &[f64], angle: f64, rng: &mut SeededRng) -> Vec<f64> {
    let u = loop {
        let mut v = rng.unit_vector(base.len());
        let c = dot(&v, base);
        v.iter_mut().zip(base).for_each(|(x, b)| *x -= c * b);
        let n = norm(&v);
        if n > 1e-6 {
            break v.into_iter().map(|x| x / n).collect::<Vec<f64>>();
        }
    };
    let (s, c) = angle.sin_cos();
    base.iter().zip(&u).map(|(b, u)| c * b + s * u).collect()
}

/// One `(i, t_m, t_n)` triple.
pub fn sample_triple(cfg: &TripleConfig, rng: &mut SeededRng) -> Result<[Vec<f64>; 3]> {
    cfg.validate()?;
    let d = cfg.dim;
    match cfg.mode {
        SamplingMode::RandomSphere => Ok([rng.unit_vector(d), rng.unit_vector(d), rng.unit_vector(d)]),
        SamplingMode::FixedAngles => {
            let (a, b, g) = (cfg.alpha, cfg.beta, cfg.gamma);
            // t_n = e1, t_m in span(e1, e2), i completes the triangle.
            let x = (a.cos() - b.cos() * g.cos()) / g.sin();
            let y2 = b.sin().powi(2) - x * x;
            let y = y2.max(0.0).sqrt();
            let rank = if y > 1e-12 { 3 } else { 2 };
            if rank > d {
                return Err(Error::InvalidConfig(format!(
                    "angles ({a}, {b}, {g}) need at least 3 dimensions"
                )));
            }
            let frame = random_orthonormal(d, rank, rng)?;
            let col = |c: usize| -> Vec<f64> { (0..d).map(|r| frame.get(r, c)).collect() };
            let (e1, e2) = (col(0), col(1));
            let e3 = if rank == 3 { col(2) } else { vec![0.0; d] };
            let t_n = e1.clone();
            let t_m: Vec<f64> = (0..d).map(|r| g.cos() * e1[r] + g.sin() * e2[r]).collect();
            let i: Vec<f64> = (0..d)
                .map(|r| b.cos() * e1[r] + x * e2[r] + y * e3[r])
                .collect();
            Ok([i, t_m, t_n])
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lemma {
    /// Controls `alpha`, records `theta`.
    Theta,
    /// Controls `gamma`, records `omega`.
    Omega,
}

impl std::str::FromStr for Lemma {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1" | "theta" => Ok(Lemma::Theta),
            "2" | "omega" => Ok(Lemma::Omega),
            other => Err(Error::InvalidConfig(format!("unknown lemma {other:?} (expected 1 or 2)"))),
        }
    }
}

/// Controlled angles `10^0, 10^-0.5, …, 10^-4`, then `0`.
pub fn sweep_grid() -> Vec<f64> {
    let mut g: Vec<f64> = (0..=8).map(|e| 10f64.powf(-0.5 * e as f64)).collect();
    g.push(0.0);
    g
}

/// Triples with the controlled angle fixed and everything else uniform.
///
/// `Theta`: `t_m` uniform, `i` at exactly `angle` from `t_m`, `t_n` uniform.
/// `Omega`: `t_n` uniform, `t_m` at exactly `angle` from `t_n`, `i` uniform.
/// Draws whose recorded angle is degenerate are redrawn.
pub fn sample_at(lemma: Lemma, angle: f64, dim: usize, n_samples: usize, rng: &mut SeededRng) -> Result<Vec<AngleSample>> {
    if dim < 2 {
        return Err(Error::InvalidConfig(format!("dim must be at least 2, got {dim}")));
    }
    if !(0.0..=PI).contains(&angle) {
        return Err(Error::InvalidConfig(format!("angle {angle} outside [0, π]")));
    }
    let mut out = Vec::with_capacity(n_samples);
    while out.len() < n_samples {
        let (i, t_m, t_n) = match lemma {
            Lemma::Theta => {
                let t_m = rng.unit_vector(dim);
                let i = at_angle(&t_m, angle, rng);
                (i, t_m, rng.unit_vector(dim))
            }
            Lemma::Omega => {
                let t_n = rng.unit_vector(dim);
                let t_m = at_angle(&t_n, angle, rng);
                (rng.unit_vector(dim), t_m, t_n)
            }
        };
        let s = AngleSample::measure(&i, &t_m, &t_n);
        let recorded = match lemma {
            Lemma::Theta => s.theta,
            Lemma::Omega => s.omega,
        };
        if recorded.is_some() {
            out.push(s);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub controlled_angle_rad: f64,
    pub mean_rad: f64,
    pub p5_rad: f64,
    pub p95_rad: f64,
    pub n_samples: usize,
    pub seed: u64,
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Monte-Carlo summary at every grid point. Grid point `g` draws from
/// sub-stream `g` of `seed`, so rows do not depend on scheduling.
pub fn lemma_sweep(lemma: Lemma, dim: usize, n_samples: usize, seed: u64) -> Result<Vec<SweepRow>> {
    if n_samples == 0 {
        return Err(Error::InvalidConfig("n_samples must be positive".into()));
    }
    sweep_grid()
        .into_par_iter()
        .enumerate()
        .map(|(g, angle)| {
            let mut rng = SeededRng::with_stream(seed, g as u64);
            let samples = sample_at(lemma, angle, dim, n_samples, &mut rng)?;
            let mut v: Vec<f64> = samples
                .iter()
                .map(|s| match lemma {
                    Lemma::Theta => s.theta,
                    Lemma::Omega => s.omega,
                })
                .map(|x| x.expect("sampler keeps defined angles"))
                .collect();
            v.sort_by(f64::total_cmp);
            Ok(SweepRow {
                controlled_angle_rad: angle,
                mean_rad: v.iter().sum::<f64>() / v.len() as f64,
                p5_rad: quantile(&v, 0.05),
                p95_rad: quantile(&v, 0.95),
                n_samples,
                seed,
            })
        })
        .collect()
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    w.flush()?;
    Ok(())
}
