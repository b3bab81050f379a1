use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use ccrk::corpus::{
    generate_synthetic, load_corpus, load_tokens, save_corpus, save_tokens, CorpusFormat,
    MultilingualCorpus, SyntheticConfig, TokenCorpus,
};
use ccrk::geometry::{lemma_sweep, write_sweep_csv, Lemma};
use ccrk::losses::gradcheck::{run_gradcheck, CheckedLoss};
use ccrk::losses::DEFAULT_TAU;
use ccrk::metrics::{
    evaluate, ranked_list, ConstantScorer, Direction, MatchScorer, OracleScorer, RerankConfig,
};
use ccrk::mining::MiningWeighting;
use ccrk::trainer::{
    compare_modes, export_embeddings, train, write_comparison_csv, write_outputs, LossMode,
    Optimizer, TrainConfig,
};
use ccrk::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

const EXIT_USAGE: u8 = 1;

#[derive(Parser)]
#[command(name = "ccrk", version, about = "Multilingual image-text alignment toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus and its token sequences.
    Gen(GenArgs),
    /// Retrieval metrics of a normalized corpus.
    Eval(EvalArgs),
    /// Train affine encoders on a corpus.
    Train(TrainArgs),
    /// Train one_to_k and one_to_one side by side over several seeds.
    Compare(CompareArgs),
    /// Monte-Carlo sweep of the alignment-direction angles.
    Geometry(GeometryArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Ranked candidates for one query, optionally re-ranked.
    Rank(RankArgs),
}

#[derive(Args, Clone)]
struct CorpusArgs {
    /// Corpus file (.ccrk, .csv or .jsonl).
    #[arg(long)]
    corpus: PathBuf,
    /// Override the format inferred from the extension.
    #[arg(long, value_parser = parse_format)]
    format: Option<CorpusFormat>,
}

impl CorpusArgs {
    fn load(&self) -> ccrk::Result<MultilingualCorpus> {
        let format = self.format.unwrap_or_else(|| CorpusFormat::from_path(&self.corpus));
        load_corpus(&self.corpus, format)
    }
}

#[derive(Args)]
struct GenArgs {
    /// JSON generator config; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Token corpus path; defaults to `<out>.tokens.json`.
    #[arg(long)]
    tokens_out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_format)]
    format: Option<CorpusFormat>,
}

#[derive(Clone, Copy, ValueEnum)]
enum DirectionArg {
    Tr,
    Ir,
    Both,
}

impl DirectionArg {
    fn directions(self) -> Vec<Direction> {
        match self {
            DirectionArg::Tr => vec![Direction::TextRetrieval],
            DirectionArg::Ir => vec![Direction::ImageRetrieval],
            DirectionArg::Both => Direction::BOTH.to_vec(),
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long, value_enum, default_value = "both")]
    direction: DirectionArg,
    /// Scale embeddings to unit norm before evaluating.
    #[arg(long)]
    normalize: bool,
    /// Output path; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct TrainFlags {
    #[command(flatten)]
    corpus: CorpusArgs,
    /// Token corpus, required for `--mode full`; defaults to `<corpus>.tokens.json` if present.
    #[arg(long)]
    tokens: Option<PathBuf>,
    /// JSON training config; flags given explicitly override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<LossMode>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, value_parser = parse_optimizer)]
    optimizer: Option<Optimizer>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long, value_parser = parse_weighting)]
    mining_weighting: Option<MiningWeighting>,
    #[arg(long)]
    seed: Option<u64>,
}

impl TrainFlags {
    fn resolve(&self) -> ccrk::Result<TrainConfig> {
        let mut cfg: TrainConfig = match &self.config {
            Some(p) => read_json(p)?,
            None => TrainConfig::default(),
        };
        macro_rules! set {
            ($($flag:ident => $field:ident),*) => {$(
                if let Some(v) = self.$flag.clone() { cfg.$field = v; }
            )*};
        }
        set!(mode => loss_mode, tau => tau, epochs => epochs, batch_size => batch_size,
             lr => learning_rate, optimizer => optimizer, eval_every => eval_every,
             mining_weighting => mining_weighting, seed => seed);
        cfg.validate()?;
        Ok(cfg)
    }

    fn load(&self, mode: LossMode) -> ccrk::Result<(MultilingualCorpus, Option<TokenCorpus>)> {
        let corpus = self.corpus.load()?;
        let default_tokens = tokens_path(&self.corpus.corpus);
        let path = match &self.tokens {
            Some(p) => Some(p.clone()),
            None if mode == LossMode::Full && default_tokens.exists() => Some(default_tokens),
            None => None,
        };
        let tokens = path.map(|p| load_tokens(&p)).transpose()?;
        Ok((corpus, tokens))
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    flags: TrainFlags,
    #[arg(long)]
    out_dir: PathBuf,
    /// Also write the trained embeddings in the binary corpus format.
    #[arg(long)]
    export: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    flags: TrainFlags,
    #[arg(long, default_value_t = 5)]
    seeds: usize,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct GeometryArgs {
    #[arg(long, value_parser = parse_lemma)]
    lemma: Lemma,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 2000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value = "all")]
    loss: String,
    #[arg(long, default_value_t = 20)]
    trials: usize,
    #[arg(long, default_value_t = DEFAULT_TAU)]
    tau: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Largest acceptable relative error.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScorerArg {
    Oracle,
    Constant,
}

#[derive(Args)]
struct RankArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long)]
    query_id: String,
    #[arg(long, default_value = "tr", value_parser = parse_direction)]
    direction: Direction,
    /// Language code; every language when omitted.
    #[arg(long)]
    language: Option<String>,
    #[arg(long, default_value_t = 10)]
    top: usize,
    /// Re-rank this many cosine candidates with the scorer.
    #[arg(long)]
    rerank_top_n: Option<usize>,
    #[arg(long, value_enum, default_value = "oracle")]
    scorer: ScorerArg,
    #[arg(long)]
    normalize: bool,
}

fn parse_format(s: &str) -> Result<CorpusFormat, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_mode(s: &str) -> Result<LossMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_optimizer(s: &str) -> Result<Optimizer, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_weighting(s: &str) -> Result<MiningWeighting, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_lemma(s: &str) -> Result<Lemma, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_direction(s: &str) -> Result<Direction, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn tokens_path(corpus: &Path) -> PathBuf {
    let mut s = corpus.as_os_str().to_owned();
    s.push(".tokens.json");
    PathBuf::from(s)
}

fn json_error(e: serde_json::Error) -> Error {
    Error::Format {
        offset: 0,
        message: e.to_string(),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> ccrk::Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
}

fn to_json<T: Serialize + ?Sized>(value: &T) -> ccrk::Result<String> {
    serde_json::to_string_pretty(value).map(|s| s + "\n").map_err(json_error)
}

fn write_or_print(out: Option<&Path>, text: &str) -> ccrk::Result<()> {
    match out {
        Some(p) => Ok(fs::write(p, text)?),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// Resolved configuration and seed, always on standard error.
fn announce<T: Serialize>(command: &str, config: &T, seed: u64) {
    let cfg = serde_json::to_string(config).unwrap_or_else(|_| "{}".into());
    eprintln!("ccrk {command}: seed={seed} config={cfg}");
}

fn run_gen(a: &GenArgs) -> ccrk::Result<()> {
    let mut cfg: SyntheticConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => SyntheticConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    announce("gen", &cfg, cfg.seed);
    let (corpus, tokens) = generate_synthetic(&cfg)?;
    let format = a.format.unwrap_or_else(|| CorpusFormat::from_path(&a.out));
    save_corpus(&corpus, &a.out, format)?;
    let tokens_out = a.tokens_out.clone().unwrap_or_else(|| tokens_path(&a.out));
    save_tokens(&tokens, &tokens_out)?;
    eprintln!(
        "wrote {} ({} instances, {} languages, dim {}) and {}",
        a.out.display(),
        corpus.n_instances(),
        corpus.n_languages(),
        corpus.dim(),
        tokens_out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalConfig<'a> {
    corpus: &'a Path,
    directions: Vec<Direction>,
    normalize: bool,
}

fn run_eval(a: &EvalArgs) -> ccrk::Result<()> {
    let directions = a.direction.directions();
    announce(
        "eval",
        &EvalConfig {
            corpus: &a.corpus.corpus,
            directions: directions.clone(),
            normalize: a.normalize,
        },
        0,
    );
    let mut corpus = a.corpus.load()?;
    if a.normalize {
        corpus = corpus.normalized()?;
    }
    let reports = directions
        .iter()
        .map(|&d| evaluate(&corpus, d))
        .collect::<ccrk::Result<Vec<_>>>()?;
    write_or_print(a.out.as_deref(), &to_json(&reports)?)
}

fn run_train(a: &TrainArgs) -> ccrk::Result<()> {
    let cfg = a.flags.resolve()?;
    announce("train", &cfg, cfg.seed);
    let (corpus, tokens) = a.flags.load(cfg.loss_mode)?;
    let (model, trace) = train(&corpus, tokens.as_ref(), &cfg)?;
    write_outputs(&trace, &a.out_dir)?;
    fs::write(a.out_dir.join("config.json"), to_json(&cfg)?)?;
    if let Some(p) = &a.export {
        export_embeddings(&model, &corpus, p)?;
    }
    let last = trace.final_checkpoint();
    eprintln!(
        "epoch {}: mean R@1 {:.4}, MRV {:.4}, recall gap {:.4}",
        last.epoch,
        last.mean_r1(),
        last.mrv(),
        last.recall_gap()
    );
    Ok(())
}

fn run_compare(a: &CompareArgs) -> ccrk::Result<()> {
    let cfg = a.flags.resolve()?;
    announce("compare", &cfg, cfg.seed);
    let (corpus, tokens) = a.flags.load(cfg.loss_mode)?;
    let modes = [LossMode::OneToK, LossMode::OneToOne];
    let report = compare_modes(&corpus, tokens.as_ref(), &cfg, &modes, a.seeds)?;
    fs::create_dir_all(&a.out_dir)?;
    fs::write(a.out_dir.join("comparison.json"), to_json(&report)?)?;
    write_comparison_csv(&report, fs::File::create(a.out_dir.join("comparison.csv"))?)?;
    for m in &report.means {
        eprintln!(
            "{}: mean MRV {:.4}, mean R@1 {:.4}, recall gap {:.4}",
            m.mode.name(),
            m.mean_mrv,
            m.mean_r1,
            m.mean_recall_gap
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct GeometryConfig {
    lemma: Lemma,
    dim: usize,
    samples: usize,
}

fn run_geometry(a: &GeometryArgs) -> ccrk::Result<()> {
    announce(
        "geometry",
        &GeometryConfig {
            lemma: a.lemma,
            dim: a.dim,
            samples: a.samples,
        },
        a.seed,
    );
    let rows = lemma_sweep(a.lemma, a.dim, a.samples, a.seed)?;
    let mut buf = Vec::new();
    write_sweep_csv(&rows, &mut buf)?;
    write_or_print(a.out.as_deref(), &String::from_utf8_lossy(&buf))
}

#[derive(Serialize)]
struct GradcheckConfig<'a> {
    loss: &'a str,
    trials: usize,
    tau: f64,
    tolerance: f64,
}

fn run_gradcheck_cmd(a: &GradcheckArgs) -> ccrk::Result<()> {
    announce(
        "gradcheck",
        &GradcheckConfig {
            loss: &a.loss,
            trials: a.trials,
            tau: a.tau,
            tolerance: a.tolerance,
        },
        a.seed,
    );
    let losses = CheckedLoss::family(&a.loss)?;
    let results = run_gradcheck(&losses, a.trials, a.tau, a.seed)?;
    let mut worst_overall: f64 = 0.0;
    for loss in &losses {
        let worst = results
            .iter()
            .filter(|r| r.loss == *loss)
            .map(|r| r.max_relative_error)
            .fold(0.0, f64::max);
        worst_overall = worst_overall.max(worst);
        println!("{:<8} trials={} max_relative_error={worst:.3e}", loss.name(), a.trials);
    }
    println!("overall max_relative_error={worst_overall:.3e} tolerance={:.1e}", a.tolerance);
    if !(worst_overall < a.tolerance) {
        return Err(Error::GradientMismatch {
            max_relative_error: worst_overall,
            tolerance: a.tolerance,
        });
    }
    Ok(())
}

#[derive(Serialize)]
struct RankConfig<'a> {
    corpus: &'a Path,
    query_id: &'a str,
    direction: Direction,
    top: usize,
    rerank_top_n: Option<usize>,
}

#[derive(Serialize)]
struct RankOutput {
    query_id: String,
    language: String,
    direction: Direction,
    results: Vec<RankedEntry>,
}

#[derive(Serialize)]
struct RankedEntry {
    rank: usize,
    instance_id: String,
    similarity: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    match_probability: Option<f64>,
}

fn run_rank(a: &RankArgs) -> ccrk::Result<()> {
    announce(
        "rank",
        &RankConfig {
            corpus: &a.corpus.corpus,
            query_id: &a.query_id,
            direction: a.direction,
            top: a.top,
            rerank_top_n: a.rerank_top_n,
        },
        0,
    );
    let mut corpus = a.corpus.load()?;
    if a.normalize {
        corpus = corpus.normalized()?;
    }
    let j = corpus
        .instance_index(&a.query_id)
        .ok_or_else(|| Error::DimensionMismatch(format!("no instance with id {:?}", a.query_id)))?;
    let languages: Vec<usize> = match &a.language {
        Some(code) => vec![corpus
            .language_index(code)
            .ok_or_else(|| Error::DimensionMismatch(format!("no language {code:?}")))?],
        None => (0..corpus.n_languages()).collect(),
    };
    let oracle = OracleScorer;
    let constant = ConstantScorer(0.5);
    let scorer: &dyn MatchScorer = match a.scorer {
        ScorerArg::Oracle => &oracle,
        ScorerArg::Constant => &constant,
    };
    let rerank = a.rerank_top_n.map(|top_n| RerankConfig { top_n, scorer });
    let mut out = Vec::new();
    for k in languages {
        let list = ranked_list(&corpus, a.direction, (j, k), rerank.as_ref())?;
        out.push(RankOutput {
            query_id: a.query_id.clone(),
            language: corpus.language_codes()[k].clone(),
            direction: a.direction,
            results: list
                .into_iter()
                .take(a.top)
                .map(|c| RankedEntry {
                    rank: c.rank,
                    instance_id: corpus.instance_ids()[c.instance].clone(),
                    similarity: c.similarity,
                    match_probability: c.match_probability,
                })
                .collect(),
        });
    }
    write_or_print(None, &to_json(&out)?)
}

fn configure_threads() -> Result<(), String> {
    let Ok(value) = std::env::var("CCRK_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| format!("CCRK_THREADS must be a positive integer, got {value:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(EXIT_USAGE);
    }
    let result = match &cli.command {
        Command::Gen(a) => run_gen(a),
        Command::Eval(a) => run_eval(a),
        Command::Train(a) => run_train(a),
        Command::Compare(a) => run_compare(a),
        Command::Geometry(a) => run_geometry(a),
        Command::Gradcheck(a) => run_gradcheck_cmd(a),
        Command::Rank(a) => run_rank(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
