//! Desk-scale training of affine encoders under the contrastive objectives.
//!
//! The model maps each raw image and each language's raw text through its own
//! affine map, normalizes the result and feeds it to the selected loss.
//! Gradients flow back through the normalization with
//! `∂L/∂x = (g − y (y·g)) / ‖x‖` for `y = x/‖x‖`.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{save_corpus, CorpusFormat, MultilingualCorpus, TokenCorpus};
use crate::error::{Error, Result};
use crate::losses::{
    cl_1to1_batch, combined_loss_batch, kcl_i2t_batch, kcl_t2i_batch, CmlmHead, CombinedConfig,
    Heads, LossReport, MitmHead, DEFAULT_MASK_RATE, DEFAULT_TAU,
};
use crate::metrics::{compute_ranks_batch, Direction, MetricsReport};
use crate::mining::MiningWeighting;
use crate::numerics::{dot, DenseMatrix, SeededRng, ZERO_NORM};

const STREAM_INIT: u64 = 0;
const STREAM_ORDER: u64 = 1;
const STREAM_LANGUAGE: u64 = 2;
const STREAM_MINING: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    OneToOne,
    OneToK,
    /// 1-to-K contrastive plus matching and masked-token terms.
    Full,
}

impl LossMode {
    pub fn name(self) -> &'static str {
        match self {
            LossMode::OneToOne => "one_to_one",
            LossMode::OneToK => "one_to_k",
            LossMode::Full => "full",
        }
    }
}

impl FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1to1" | "one_to_one" => Ok(LossMode::OneToOne),
            "1tok" | "one_to_k" => Ok(LossMode::OneToK),
            "full" => Ok(LossMode::Full),
            other => Err(Error::InvalidConfig(format!(
                "unknown loss mode {other:?} (expected 1to1, 1tok or full)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Adamw,
}

impl FromStr for Optimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Optimizer::Sgd),
            "adamw" | "adam" => Ok(Optimizer::Adamw),
            other => Err(Error::InvalidConfig(format!(
                "unknown optimizer {other:?} (expected sgd or adamw)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub tau: f64,
    pub loss_mode: LossMode,
    pub seed: u64,
    /// Checkpoint every this many epochs; epoch 0 and the last epoch are always included.
    pub eval_every: usize,
    pub mining_weighting: MiningWeighting,
    pub mask_rate: f64,
    /// Output dimension of every encoder map; 0 keeps the corpus dimension.
    pub embed_dim: usize,
    pub fused_dim: usize,
    pub token_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 64,
            learning_rate: 1e-3,
            optimizer: Optimizer::Adamw,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            tau: DEFAULT_TAU,
            loss_mode: LossMode::OneToK,
            seed: 0,
            eval_every: 5,
            mining_weighting: MiningWeighting::LinearShift,
            mask_rate: DEFAULT_MASK_RATE,
            embed_dim: 0,
            fused_dim: 16,
            token_dim: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.epochs == 0 || self.batch_size < 2 || self.eval_every == 0 {
            return bad("epochs and eval_every must be positive and batch_size at least 2".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be finite and non-negative, got {}", self.learning_rate));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("temperature must be finite and positive, got {}", self.tau));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("adam_eps must be positive and weight_decay non-negative".into());
        }
        if !(self.mask_rate > 0.0 && self.mask_rate < 1.0) {
            return bad(format!("mask rate must lie in (0, 1), got {}", self.mask_rate));
        }
        if self.fused_dim == 0 || self.token_dim == 0 {
            return bad("head dimensions must be positive".into());
        }
        Ok(())
    }
}

/// `y = W x + b` with `W` of shape `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineMap {
    pub weight: DenseMatrix,
    pub bias: Vec<f64>,
}

impl AffineMap {
    /// Gaussian weights with standard deviation `1/√in`, zero bias.
    pub fn init(input: usize, output: usize, rng: &mut SeededRng) -> Self {
        Self {
            weight: DenseMatrix::gaussian(output, input, 1.0 / (input as f64).sqrt(), rng),
            bias: vec![0.0; output],
        }
    }

    fn n_params(&self) -> usize {
        self.weight.as_slice().len() + self.bias.len()
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.weight
            .row_iter()
            .zip(&self.bias)
            .map(|(w, b)| dot(w, x) + b)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub image_map: AffineMap,
    pub text_maps: Vec<AffineMap>,
    pub heads: Heads,
}

impl ToyModel {
    pub fn init(
        input_dim: usize,
        embed_dim: usize,
        n_languages: usize,
        heads: HeadSpec,
        rng: &mut SeededRng,
    ) -> Self {
        let image_map = AffineMap::init(input_dim, embed_dim, rng);
        let text_maps = (0..n_languages)
            .map(|_| AffineMap::init(input_dim, embed_dim, rng))
            .collect();
        let mitm = heads
            .fused_dim
            .map(|f| MitmHead::new(embed_dim, f, rng));
        let cmlm = heads
            .vocab_and_token_dim
            .map(|(v, t)| CmlmHead::new(v, t, embed_dim, rng));
        Self {
            image_map,
            text_maps,
            heads: Heads { mitm, cmlm },
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.image_map.bias.len()
    }

    pub fn n_params(&self) -> usize {
        self.image_map.n_params()
            + self.text_maps.iter().map(AffineMap::n_params).sum::<usize>()
            + self.heads.n_params()
    }

    /// Image map, then each text map (weight then bias), then heads.
    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.n_params());
        for m in std::iter::once(&self.image_map).chain(&self.text_maps) {
            p.extend_from_slice(m.weight.as_slice());
            p.extend_from_slice(&m.bias);
        }
        p.extend(self.heads.params());
        p
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.n_params() {
            return Err(Error::ShapeMismatch(format!(
                "{} parameters for a model with {}",
                p.len(),
                self.n_params()
            )));
        }
        let mut at = 0;
        for m in std::iter::once(&mut self.image_map).chain(&mut self.text_maps) {
            let w = m.weight.as_slice().len();
            m.weight.as_mut_slice().copy_from_slice(&p[at..at + w]);
            at += w;
            let b = m.bias.len();
            m.bias.copy_from_slice(&p[at..at + b]);
            at += b;
        }
        self.heads.set_params(&p[at..])
    }

    fn check_input(&self, corpus: &MultilingualCorpus) -> Result<()> {
        if corpus.dim() != self.image_map.weight.cols() || corpus.n_languages() != self.text_maps.len() {
            return Err(Error::DimensionMismatch(format!(
                "model expects dim {} and {} languages, corpus has {} and {}",
                self.image_map.weight.cols(),
                self.text_maps.len(),
                corpus.dim(),
                corpus.n_languages()
            )));
        }
        Ok(())
    }

    /// Normalized embeddings of every instance and text.
    pub fn encode(&self, corpus: &MultilingualCorpus) -> Result<MultilingualCorpus> {
        self.check_input(corpus)?;
        let all: Vec<usize> = (0..corpus.n_instances()).collect();
        let enc = self.encode_batch(corpus, &all)?;
        MultilingualCorpus::new(
            enc.images,
            enc.texts,
            corpus.language_codes().to_vec(),
            corpus.instance_ids().to_vec(),
        )
    }

    fn encode_batch(&self, corpus: &MultilingualCorpus, batch: &[usize]) -> Result<Encoded> {
        let k = corpus.n_languages();
        let d = self.embed_dim();
        let mut images = DenseMatrix::zeros(batch.len(), d);
        let mut texts = DenseMatrix::zeros(batch.len() * k, d);
        let mut image_norms = Vec::with_capacity(batch.len());
        let mut text_norms = Vec::with_capacity(batch.len() * k);
        for (b, &j) in batch.iter().enumerate() {
            image_norms.push(normalize_into(
                self.image_map.apply(corpus.image(j)),
                images.row_mut(b),
                b,
            )?);
            for (lang, map) in self.text_maps.iter().enumerate() {
                let row = b * k + lang;
                text_norms.push(normalize_into(map.apply(corpus.text(j, lang)), texts.row_mut(row), row)?);
            }
        }
        Ok(Encoded {
            images,
            texts,
            image_norms,
            text_norms,
        })
    }

    /// Gradient of the map parameters from gradients at the normalized outputs.
    fn backward(
        &self,
        corpus: &MultilingualCorpus,
        batch: &[usize],
        enc: &Encoded,
        loss: &LossReport,
    ) -> Vec<f64> {
        let k = corpus.n_languages();
        let mut grad = vec![0.0; self.n_params()];
        let map_len = self.image_map.n_params();
        let mut acc = |offset: usize, map: &AffineMap, x: &[f64], y: &[f64], g: &[f64], len: f64| {
            let proj = dot(y, g);
            let cols = map.weight.cols();
            let w_len = map.weight.as_slice().len();
            for (r, (yr, gr)) in y.iter().zip(g).enumerate() {
                let gp = (gr - yr * proj) / len;
                if gp != 0.0 {
                    for (dst, xi) in grad[offset + r * cols..offset + (r + 1) * cols].iter_mut().zip(x) {
                        *dst += gp * xi;
                    }
                    grad[offset + w_len + r] += gp;
                }
            }
        };
        for (b, &j) in batch.iter().enumerate() {
            acc(
                0,
                &self.image_map,
                corpus.image(j),
                enc.images.row(b),
                loss.grad_images.row(b),
                enc.image_norms[b],
            );
            for (lang, map) in self.text_maps.iter().enumerate() {
                let row = b * k + lang;
                acc(
                    map_len * (1 + lang),
                    map,
                    corpus.text(j, lang),
                    enc.texts.row(row),
                    loss.grad_texts.row(row),
                    enc.text_norms[row],
                );
            }
        }
        let heads_at = grad.len() - self.heads.n_params();
        for (g, h) in grad[heads_at..].iter_mut().zip(&loss.grad_params) {
            *g += h;
        }
        grad
    }
}

/// Which optional heads [`ToyModel::init`] creates.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct HeadSpec {
    pub fused_dim: Option<usize>,
    pub vocab_and_token_dim: Option<(usize, usize)>,
}

struct Encoded {
    images: DenseMatrix,
    texts: DenseMatrix,
    image_norms: Vec<f64>,
    text_norms: Vec<f64>,
}

fn normalize_into(v: Vec<f64>, out: &mut [f64], row: usize) -> Result<f64> {
    let n = dot(&v, &v).sqrt();
    if !(n > ZERO_NORM) || !n.is_finite() {
        return Err(Error::ZeroRow { row });
    }
    for (o, x) in out.iter_mut().zip(&v) {
        *o = x / n;
    }
    Ok(n)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: usize,
    pub epoch: usize,
    pub total_loss: f64,
    pub kcl_i2t: f64,
    pub kcl_t2i: f64,
    pub mitm: f64,
    pub cmlm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub epoch: usize,
    /// Mean step loss over the epoch that just ended; absent at epoch 0.
    pub train_loss: Option<f64>,
    /// Text retrieval, then image retrieval.
    pub reports: Vec<MetricsReport>,
}

impl Checkpoint {
    /// Mean Recall@1, averaged over both directions.
    pub fn mean_r1(&self) -> f64 {
        self.reports.iter().map(|r| r.mean_recall.r1).sum::<f64>() / self.reports.len() as f64
    }

    pub fn mrv(&self) -> f64 {
        self.reports.iter().map(|r| r.mrv).sum::<f64>() / self.reports.len() as f64
    }

    pub fn recall_gap(&self) -> f64 {
        self.reports.iter().map(|r| r.recall_gap).sum::<f64>() / self.reports.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub steps: Vec<TraceStep>,
    pub checkpoints: Vec<Checkpoint>,
    /// Wall-clock seconds per epoch; not reproducible.
    pub epoch_seconds: Vec<f64>,
}

impl TrainTrace {
    pub fn final_checkpoint(&self) -> &Checkpoint {
        self.checkpoints.last().expect("training records at least two checkpoints")
    }

    /// Equal steps and checkpoints, ignoring timings.
    pub fn same_numbers(&self, other: &TrainTrace) -> bool {
        self.steps == other.steps && self.checkpoints == other.checkpoints
    }
}

struct OptimizerState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl OptimizerState {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn update(&mut self, cfg: &TrainConfig, params: &mut [f64], grad: &[f64]) {
        let lr = cfg.learning_rate;
        match cfg.optimizer {
            Optimizer::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            Optimizer::Adamw => {
                self.t += 1;
                let c1 = 1.0 - cfg.beta1.powi(self.t);
                let c2 = 1.0 - cfg.beta2.powi(self.t);
                for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
                    *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                    *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                    let update = (*m / c1) / ((*v / c2).sqrt() + cfg.adam_eps) + cfg.weight_decay * *p;
                    *p -= lr * update;
                }
            }
        }
    }
}

/// Split a permutation into batches of `size`; a trailing batch smaller than 2
/// joins the one before it.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < 2) {
        let tail = out.pop().expect("checked non-empty").len();
        let last = out.pop().expect("checked length");
        let start = order.len() - last.len() - tail;
        out.push(&order[start..]);
    }
    out
}

fn checkpoint(
    model: &ToyModel,
    corpus: &MultilingualCorpus,
    epoch: usize,
    train_loss: Option<f64>,
) -> Result<Checkpoint> {
    let enc = model.encode(corpus)?;
    let reports = Direction::BOTH
        .iter()
        .map(|&dir| {
            let table = compute_ranks_batch(enc.images(), enc.texts(), enc.n_languages(), dir)?;
            MetricsReport::from_table(&table, enc.language_codes())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Checkpoint {
        epoch,
        train_loss,
        reports,
    })
}

/// Build the model [`train`] would start from.
pub fn initial_model(
    corpus: &MultilingualCorpus,
    tokens: Option<&TokenCorpus>,
    cfg: &TrainConfig,
) -> Result<ToyModel> {
    let embed_dim = if cfg.embed_dim == 0 { corpus.dim() } else { cfg.embed_dim };
    let heads = if cfg.loss_mode == LossMode::Full {
        let tokens = tokens.ok_or_else(|| {
            Error::InvalidConfig("full loss mode needs a token corpus".into())
        })?;
        HeadSpec {
            fused_dim: Some(cfg.fused_dim),
            vocab_and_token_dim: Some((tokens.vocab_size as usize, cfg.token_dim)),
        }
    } else {
        HeadSpec::default()
    };
    let mut rng = SeededRng::with_stream(cfg.seed, STREAM_INIT);
    Ok(ToyModel::init(corpus.dim(), embed_dim, corpus.n_languages(), heads, &mut rng))
}

/// Mini-batch training with a batch order, language draws and mining draws
/// that are all fixed by `cfg.seed`.
pub fn train(
    corpus: &MultilingualCorpus,
    tokens: Option<&TokenCorpus>,
    cfg: &TrainConfig,
) -> Result<(ToyModel, TrainTrace)> {
    cfg.validate()?;
    if corpus.n_instances() < 2 {
        return Err(Error::DegenerateBatch("training needs at least 2 instances".into()));
    }
    if let Some(t) = tokens {
        t.check_matches(corpus)?;
    }
    let mut model = initial_model(corpus, tokens, cfg)?;
    let k = corpus.n_languages();
    let mut order_rng = SeededRng::with_stream(cfg.seed, STREAM_ORDER);
    let mut lang_rng = SeededRng::with_stream(cfg.seed, STREAM_LANGUAGE);
    let mut mining_rng = SeededRng::with_stream(cfg.seed, STREAM_MINING);
    let combined_cfg = CombinedConfig {
        tau: cfg.tau,
        mining_weighting: cfg.mining_weighting,
        mask_rate: cfg.mask_rate,
    };
    let mut opt = OptimizerState::new(model.n_params());
    let mut params = model.params();
    let mut trace = TrainTrace {
        steps: Vec::new(),
        checkpoints: vec![checkpoint(&model, corpus, 0, None)?],
        epoch_seconds: Vec::with_capacity(cfg.epochs),
    };
    let batch_size = cfg.batch_size.min(corpus.n_instances());
    let mut order: Vec<usize> = (0..corpus.n_instances()).collect();

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut order_rng);
        let mut epoch_losses = Vec::new();
        for batch in batches(&order, batch_size) {
            let step = trace.steps.len();
            let enc = model.encode_batch(corpus, batch)?;
            let (entry, loss) = match cfg.loss_mode {
                LossMode::OneToK => {
                    let i2t = kcl_i2t_batch(&enc.images, &enc.texts, k, cfg.tau)?;
                    let t2i = kcl_t2i_batch(&enc.images, &enc.texts, k, cfg.tau)?;
                    let mut total = LossReport::zeros(batch.len(), batch.len() * k, enc.images.cols());
                    total.accumulate(&i2t);
                    total.accumulate(&t2i);
                    (step_entry(step, epoch, i2t.value, t2i.value, 0.0, 0.0), total)
                }
                LossMode::OneToOne => {
                    let selected: Vec<usize> = batch.iter().map(|_| lang_rng.below(k)).collect();
                    let r = cl_1to1_batch(&enc.images, &enc.texts, k, &selected, cfg.tau)?;
                    // Sum of both directions, the same scale as the 1-to-K objective.
                    let mut total = r.report;
                    for g in total
                        .grad_images
                        .as_mut_slice()
                        .iter_mut()
                        .chain(total.grad_texts.as_mut_slice())
                    {
                        *g *= 2.0;
                    }
                    (step_entry(step, epoch, r.i2t, r.t2i, 0.0, 0.0), total)
                }
                LossMode::Full => {
                    let seqs: Option<Vec<&[u32]>> = tokens.map(|t| {
                        batch
                            .iter()
                            .flat_map(|&j| (0..k).map(move |l| t.sequence(j, l)))
                            .collect()
                    });
                    let r = combined_loss_batch(
                        &enc.images,
                        &enc.texts,
                        k,
                        seqs.as_deref(),
                        &model.heads,
                        &combined_cfg,
                        &mut mining_rng,
                    )?;
                    (
                        step_entry(step, epoch, r.kcl_i2t, r.kcl_t2i, r.mitm_i2t + r.mitm_t2i, r.cmlm),
                        r.report,
                    )
                }
            };
            if !entry.total_loss.is_finite() || !loss.is_finite() {
                return Err(Error::Divergence { step });
            }
            let grad = model.backward(corpus, batch, &enc, &loss);
            opt.update(cfg, &mut params, &grad);
            model.set_params(&params)?;
            epoch_losses.push(entry.total_loss);
            trace.steps.push(entry);
        }
        trace.epoch_seconds.push(started.elapsed().as_secs_f64());
        if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
            let mean = epoch_losses.iter().sum::<f64>() / epoch_losses.len() as f64;
            trace.checkpoints.push(checkpoint(&model, corpus, epoch, Some(mean))?);
        }
    }
    Ok((model, trace))
}

fn step_entry(step: usize, epoch: usize, i2t: f64, t2i: f64, mitm: f64, cmlm: f64) -> TraceStep {
    TraceStep {
        step,
        epoch,
        total_loss: i2t + t2i + mitm + cmlm,
        kcl_i2t: i2t,
        kcl_t2i: t2i,
        mitm,
        cmlm,
    }
}

/// Write normalized post-training embeddings in the binary corpus format.
pub fn export_embeddings(model: &ToyModel, corpus: &MultilingualCorpus, path: &Path) -> Result<()> {
    save_corpus(&model.encode(corpus)?, path, CorpusFormat::Binary)
}

/// Final metrics of one run, averaged over both retrieval directions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: LossMode,
    pub seed: u64,
    pub final_mrv: f64,
    pub final_mean_r1: f64,
    pub final_recall_gap: f64,
    pub checkpoints: Vec<Checkpoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeMeans {
    pub mode: LossMode,
    pub mean_mrv: f64,
    pub mean_r1: f64,
    pub mean_recall_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub runs: Vec<RunSummary>,
    pub means: Vec<ModeMeans>,
}

impl ComparisonReport {
    pub fn runs_for(&self, mode: LossMode) -> impl Iterator<Item = &RunSummary> {
        self.runs.iter().filter(move |r| r.mode == mode)
    }

    pub fn means_for(&self, mode: LossMode) -> Option<&ModeMeans> {
        self.means.iter().find(|m| m.mode == mode)
    }
}

/// Train every mode in `modes` on seeds `base.seed .. base.seed + n_seeds`,
/// all on the same corpus. Runs share no state and execute in parallel.
pub fn compare_modes(
    corpus: &MultilingualCorpus,
    tokens: Option<&TokenCorpus>,
    base: &TrainConfig,
    modes: &[LossMode],
    n_seeds: usize,
) -> Result<ComparisonReport> {
    if n_seeds == 0 || modes.is_empty() {
        return Err(Error::InvalidConfig("need at least one seed and one mode".into()));
    }
    let jobs: Vec<(LossMode, u64)> = modes
        .iter()
        .flat_map(|&m| (0..n_seeds as u64).map(move |s| (m, base.seed + s)))
        .collect();
    let runs = jobs
        .par_iter()
        .map(|&(mode, seed)| {
            let cfg = TrainConfig {
                loss_mode: mode,
                seed,
                ..base.clone()
            };
            let (_, trace) = train(corpus, tokens, &cfg)?;
            let last = trace.final_checkpoint();
            Ok(RunSummary {
                mode,
                seed,
                final_mrv: last.mrv(),
                final_mean_r1: last.mean_r1(),
                final_recall_gap: last.recall_gap(),
                checkpoints: trace.checkpoints,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let means = modes
        .iter()
        .map(|&mode| {
            let rs: Vec<&RunSummary> = runs.iter().filter(|r| r.mode == mode).collect();
            let n = rs.len() as f64;
            ModeMeans {
                mode,
                mean_mrv: rs.iter().map(|r| r.final_mrv).sum::<f64>() / n,
                mean_r1: rs.iter().map(|r| r.final_mean_r1).sum::<f64>() / n,
                mean_recall_gap: rs.iter().map(|r| r.final_recall_gap).sum::<f64>() / n,
            }
        })
        .collect();
    Ok(ComparisonReport { runs, means })
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// `step,total_loss,kcl_i2t,kcl_t2i,mitm,cmlm`
pub fn write_trace_csv<W: Write>(trace: &TrainTrace, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["step", "total_loss", "kcl_i2t", "kcl_t2i", "mitm", "cmlm"])
        .map_err(csv_err)?;
    for s in &trace.steps {
        w.write_record([
            s.step.to_string(),
            s.total_loss.to_string(),
            s.kcl_i2t.to_string(),
            s.kcl_t2i.to_string(),
            s.mitm.to_string(),
            s.cmlm.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// `epoch,direction,mean_r1,mrv,recall_gap`
pub fn write_checkpoints_csv<W: Write>(checkpoints: &[Checkpoint], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "direction", "mean_r1", "mrv", "recall_gap"])
        .map_err(csv_err)?;
    for c in checkpoints {
        for r in &c.reports {
            w.write_record([
                c.epoch.to_string(),
                r.direction.label().to_string(),
                r.mean_recall.r1.to_string(),
                r.mrv.to_string(),
                r.recall_gap.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `mode,seed,epoch,train_loss,mean_r1,mrv,recall_gap`, one row per checkpoint
/// of every run, metrics averaged over both directions.
pub fn write_comparison_csv<W: Write>(report: &ComparisonReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["mode", "seed", "epoch", "train_loss", "mean_r1", "mrv", "recall_gap"])
        .map_err(csv_err)?;
    for r in &report.runs {
        for c in &r.checkpoints {
            w.write_record([
                r.mode.name().to_string(),
                r.seed.to_string(),
                c.epoch.to_string(),
                c.train_loss.map_or(String::new(), |l| l.to_string()),
                c.mean_r1().to_string(),
                c.mrv().to_string(),
                c.recall_gap().to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Write `trace.csv`, `checkpoints.csv` and `metrics.json` (final reports,
/// both directions) into `dir`.
pub fn write_outputs(trace: &TrainTrace, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_trace_csv(trace, fs::File::create(dir.join("trace.csv"))?)?;
    write_checkpoints_csv(&trace.checkpoints, fs::File::create(dir.join("checkpoints.csv"))?)?;
    let json = serde_json::to_string_pretty(&trace.final_checkpoint().reports)
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    fs::write(dir.join("metrics.json"), json + "\n")?;
    Ok(())
}
