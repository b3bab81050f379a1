//! Seeded synthetic corpus generator.
//!
//! Each instance draws a latent point on the unit sphere. The image embedding
//! is an orthonormal lift of that point into the embedding space plus
//! Gaussian noise; each language has its own lift, blended away from the
//! image lift by `language_drift`. Token sequences draw most tokens from a
//! concept-specific block of the language's vocabulary, where the concept is
//! the nearest of `n_concepts` fixed latent directions.

use serde::{Deserialize, Serialize};

use super::{MultilingualCorpus, TokenCorpus, MASK_TOKEN};
use crate::error::{Error, Result};
use crate::numerics::{
    dot, mat_vec, normalized, orthonormalize_columns, random_orthonormal, DenseMatrix, SeededRng,
};

const DEFAULT_LANGUAGES: [&str; 10] = ["en", "de", "fr", "cs", "ja", "zh", "es", "id", "ru", "tr"];

/// Fraction of tokens drawn from the instance's concept block.
const CONCEPT_TOKEN_SHARE: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_instances: usize,
    pub n_languages: usize,
    pub dim: usize,
    pub latent_dim: usize,
    pub noise_sigma: f64,
    pub n_concepts: usize,
    pub tokens_per_text: usize,
    pub vocab_per_language: usize,
    /// 0 shares the image lift with every language; 1 gives each language an
    /// independent random lift.
    pub language_drift: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_instances: 256,
            n_languages: 4,
            dim: 32,
            latent_dim: 8,
            noise_sigma: 0.1,
            n_concepts: 8,
            tokens_per_text: 12,
            vocab_per_language: 64,
            language_drift: 0.5,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidConfig(m));
        if self.n_instances == 0 || self.n_languages == 0 || self.dim == 0 || self.latent_dim == 0
        {
            return fail("n_instances, n_languages, dim and latent_dim must be positive".into());
        }
        if self.latent_dim > self.dim {
            return fail(format!(
                "latent_dim {} exceeds dim {}",
                self.latent_dim, self.dim
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return fail(format!("noise_sigma must be finite and >= 0, got {}", self.noise_sigma));
        }
        if !(0.0..=1.0).contains(&self.language_drift) {
            return fail(format!("language_drift must lie in [0, 1], got {}", self.language_drift));
        }
        if self.tokens_per_text == 0 {
            return fail("tokens_per_text must be positive".into());
        }
        if self.n_concepts == 0 || self.n_concepts > self.vocab_per_language {
            return fail(format!(
                "n_concepts {} must lie in 1..={} (vocab_per_language)",
                self.n_concepts, self.vocab_per_language
            ));
        }
        let vocab = (self.n_languages as u64) * (self.vocab_per_language as u64) + 1;
        if vocab > u32::MAX as u64 {
            return fail(format!("vocabulary of {vocab} tokens does not fit u32 ids"));
        }
        Ok(())
    }

    pub fn language_codes(&self) -> Vec<String> {
        (0..self.n_languages)
            .map(|k| match DEFAULT_LANGUAGES.get(k) {
                Some(code) => (*code).to_string(),
                None => format!("l{k}"),
            })
            .collect()
    }
}

// Independent sub-streams so that changing, say, token settings leaves the
// embeddings untouched.
const STREAM_LIFTS: u64 = 0;
const STREAM_EMBEDDINGS: u64 = 1;
const STREAM_TOKENS: u64 = 2;

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<(MultilingualCorpus, TokenCorpus)> {
    cfg.validate()?;
    let (n, k, d, l) = (cfg.n_instances, cfg.n_languages, cfg.dim, cfg.latent_dim);

    let mut lift_rng = SeededRng::with_stream(cfg.seed, STREAM_LIFTS);
    let image_lift = random_orthonormal(d, l, &mut lift_rng)?;
    let mut text_lifts = Vec::with_capacity(k);
    let phi = cfg.language_drift * std::f64::consts::FRAC_PI_2;
    for _ in 0..k {
        let other = random_orthonormal(d, l, &mut lift_rng)?;
        if cfg.language_drift == 0.0 {
            text_lifts.push(image_lift.clone());
            continue;
        }
        text_lifts.push(blend_lifts(&image_lift, other, phi)?);
    }
    let concept_dirs: Vec<Vec<f64>> = (0..cfg.n_concepts)
        .map(|_| lift_rng.unit_vector(l))
        .collect();

    let mut rng = SeededRng::with_stream(cfg.seed, STREAM_EMBEDDINGS);
    let mut images = DenseMatrix::zeros(n, d);
    let mut texts = DenseMatrix::zeros(n * k, d);
    let mut concept_of_instance = Vec::with_capacity(n);
    for j in 0..n {
        let z = rng.unit_vector(l);
        concept_of_instance.push(nearest_concept(&z, &concept_dirs));
        images
            .row_mut(j)
            .copy_from_slice(&lift_and_perturb(&image_lift, &z, cfg.noise_sigma, &mut rng)?);
        for (lang, lift) in text_lifts.iter().enumerate() {
            let t = lift_and_perturb(lift, &z, cfg.noise_sigma, &mut rng)?;
            texts.row_mut(j * k + lang).copy_from_slice(&t);
        }
    }
    let ids = (0..n).map(|j| format!("i{j:05}")).collect();
    let corpus = MultilingualCorpus::new(images, texts, cfg.language_codes(), ids)?;

    let tokens = generate_tokens(cfg, concept_of_instance)?;
    Ok((corpus, tokens))
}

/// Orthonormal basis of `cos φ · a + sin φ · b`.
///
/// With square lifts the sum at `φ = π/4` is singular whenever `aᵀb` has
/// eigenvalue −1, which every `b` of the opposite orientation has. Such a
/// `b` gets one column flipped first.
fn blend_lifts(a: &DenseMatrix, mut b: DenseMatrix, phi: f64) -> Result<DenseMatrix> {
    if a.rows() == a.cols() {
        let am = nalgebra::DMatrix::from_row_slice(a.rows(), a.cols(), a.as_slice());
        let bm = nalgebra::DMatrix::from_row_slice(b.rows(), b.cols(), b.as_slice());
        if (am.transpose() * bm).determinant() < 0.0 {
            let last = b.cols() - 1;
            for r in 0..b.rows() {
                b.set(r, last, -b.get(r, last));
            }
        }
    }
    let (c, s) = (phi.cos(), phi.sin());
    let v: Vec<f64> = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| c * x + s * y)
        .collect();
    orthonormalize_columns(&DenseMatrix::new(a.rows(), a.cols(), v)?)
}

fn nearest_concept(z: &[f64], dirs: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_sim = f64::NEG_INFINITY;
    for (c, dir) in dirs.iter().enumerate() {
        let s = dot(z, dir);
        if s > best_sim {
            best_sim = s;
            best = c;
        }
    }
    best
}

fn lift_and_perturb(
    lift: &DenseMatrix,
    z: &[f64],
    sigma: f64,
    rng: &mut SeededRng,
) -> Result<Vec<f64>> {
    let mut v = mat_vec(lift, z);
    if sigma > 0.0 {
        v.iter_mut().for_each(|x| *x += sigma * rng.normal());
    }
    normalized(&v)
}

fn generate_tokens(cfg: &SyntheticConfig, concept_of_instance: Vec<usize>) -> Result<TokenCorpus> {
    let (n, k) = (cfg.n_instances, cfg.n_languages);
    let per_lang = cfg.vocab_per_language as u32;
    let block = per_lang / cfg.n_concepts as u32;
    let ranges: Vec<_> = (0..k as u32)
        .map(|lang| {
            let start = MASK_TOKEN + 1 + lang * per_lang;
            start..start + per_lang
        })
        .collect();

    let mut rng = SeededRng::with_stream(cfg.seed, STREAM_TOKENS);
    let mut sequences = Vec::with_capacity(n * k);
    for &concept in &concept_of_instance {
        for range in &ranges {
            let block_start = range.start + concept as u32 * block;
            let rest = per_lang - block;
            let seq = (0..cfg.tokens_per_text)
                .map(|_| {
                    if rest == 0 || rng.uniform() < CONCEPT_TOKEN_SHARE {
                        block_start + rng.below(block as usize) as u32
                    } else {
                        // Uniform over the range with the concept block cut out.
                        let r = rng.below(rest as usize) as u32;
                        let offset = if r < concept as u32 * block { r } else { r + block };
                        range.start + offset
                    }
                })
                .collect();
            sequences.push(seq);
        }
    }
    let tokens = TokenCorpus {
        vocab_size: 1 + k as u32 * per_lang,
        n_languages: k,
        sequences,
        language_vocab_ranges: ranges,
        concept_of_instance,
    };
    tokens.validate()?;
    Ok(tokens)
}
