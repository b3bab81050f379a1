//! Retrieval ranks, Recall@K, mean rank variance and top-N re-ranking.
//!
//! Rank 1 is the most similar candidate. Equal similarities are ordered by
//! candidate index, lower first.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::MultilingualCorpus;
use crate::error::{Error, Result};
use crate::losses::MitmHead;
use crate::numerics::DenseMatrix;

/// Cut-offs reported in [`MetricsReport`].
pub const RECALL_CUTOFFS: [usize; 3] = [1, 5, 10];

/// Shortlist size used by [`RerankConfig::for_pool`] for ordinary pools.
pub const DEFAULT_TOP_N: usize = 128;
/// Shortlist size for pools larger than [`LARGE_POOL`].
pub const LARGE_POOL_TOP_N: usize = 256;
pub const LARGE_POOL: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    /// Image query, text candidates of one language.
    #[serde(rename = "TR")]
    TextRetrieval,
    /// Text query, image candidates.
    #[serde(rename = "IR")]
    ImageRetrieval,
}

impl Direction {
    pub const BOTH: [Direction; 2] = [Direction::TextRetrieval, Direction::ImageRetrieval];

    pub fn label(self) -> &'static str {
        match self {
            Direction::TextRetrieval => "TR",
            Direction::ImageRetrieval => "IR",
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tr" => Ok(Direction::TextRetrieval),
            "ir" => Ok(Direction::ImageRetrieval),
            other => Err(Error::InvalidConfig(format!(
                "unknown direction {other:?} (expected tr or ir)"
            ))),
        }
    }
}

/// `Rank_jk` for every instance `j` and language `k`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankTable {
    pub direction: Direction,
    n_instances: usize,
    n_languages: usize,
    /// Row-major `N × K`.
    ranks: Vec<usize>,
    /// Candidate pool size per language.
    pub pool_sizes: Vec<usize>,
}

impl RankTable {
    pub fn new(
        direction: Direction,
        n_instances: usize,
        n_languages: usize,
        ranks: Vec<usize>,
        pool_sizes: Vec<usize>,
    ) -> Result<Self> {
        if n_instances == 0 || n_languages == 0 {
            return Err(Error::EmptyInput);
        }
        if ranks.len() != n_instances * n_languages || pool_sizes.len() != n_languages {
            return Err(Error::ShapeMismatch(format!(
                "{} ranks and {} pools for a {n_instances}x{n_languages} table",
                ranks.len(),
                pool_sizes.len()
            )));
        }
        for (i, &r) in ranks.iter().enumerate() {
            let pool = pool_sizes[i % n_languages];
            if r == 0 || r > pool {
                return Err(Error::InvalidConfig(format!(
                    "rank {r} at ({}, {}) outside 1..={pool}",
                    i / n_languages,
                    i % n_languages
                )));
            }
        }
        Ok(Self {
            direction,
            n_instances,
            n_languages,
            ranks,
            pool_sizes,
        })
    }

    /// Table with every pool equal to `N`, from per-instance rows.
    pub fn from_rows(direction: Direction, rows: &[Vec<usize>]) -> Result<Self> {
        let n = rows.len();
        let k = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::ShapeMismatch("ragged rank rows".into()));
        }
        Self::new(direction, n, k, rows.concat(), vec![n; k])
    }

    pub fn n_instances(&self) -> usize {
        self.n_instances
    }

    pub fn n_languages(&self) -> usize {
        self.n_languages
    }

    pub fn rank(&self, j: usize, k: usize) -> usize {
        self.ranks[j * self.n_languages + k]
    }

    pub fn ranks(&self) -> &[usize] {
        &self.ranks
    }

    /// `Rank_j` averaged over languages.
    pub fn mean_ranks(&self) -> Vec<f64> {
        self.ranks
            .chunks(self.n_languages)
            .map(|row| row.iter().sum::<usize>() as f64 / self.n_languages as f64)
            .collect()
    }
}

/// Candidates sorted best first: similarity descending, index ascending.
fn order(a: (usize, f64), b: (usize, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// 1-based position of `target` among `sims` under the rank convention.
fn rank_of(sims: impl Iterator<Item = f64>, target: usize, target_sim: f64) -> usize {
    1 + sims
        .enumerate()
        .filter(|&(n, s)| order((n, s), (target, target_sim)) == Ordering::Less)
        .count()
}

/// Ranks on raw embedding matrices (`N` images, `N·K` texts).
pub fn compute_ranks_batch(
    images: &DenseMatrix,
    texts: &DenseMatrix,
    k: usize,
    direction: Direction,
) -> Result<RankTable> {
    let n = images.rows();
    if k == 0 || texts.rows() != n * k {
        return Err(Error::ShapeMismatch(format!(
            "{} texts for {n} images and K={k}",
            texts.rows()
        )));
    }
    // sims[j][n·K + k] = î_j · t̂_nk
    let sims = images.par_similarity(texts)?;
    let ranks: Vec<usize> = (0..n * k)
        .into_par_iter()
        .map(|q| {
            let (j, lang) = (q / k, q % k);
            let target = sims.get(j, q);
            match direction {
                Direction::TextRetrieval => {
                    rank_of((0..n).map(|c| sims.get(j, c * k + lang)), j, target)
                }
                Direction::ImageRetrieval => rank_of((0..n).map(|c| sims.get(c, q)), j, target),
            }
        })
        .collect();
    RankTable::new(direction, n, k, ranks, vec![n; k])
}

pub fn compute_ranks(corpus: &MultilingualCorpus, direction: Direction) -> Result<RankTable> {
    corpus.require_normalized()?;
    compute_ranks_batch(corpus.images(), corpus.texts(), corpus.n_languages(), direction)
}

/// Fraction of instances with `Rank_jk ≤ cutoff`, per language.
pub fn recall_at_k(table: &RankTable, cutoff: usize) -> Vec<f64> {
    let n = table.n_instances as f64;
    (0..table.n_languages)
        .map(|k| {
            let hits = (0..table.n_instances)
                .filter(|&j| table.rank(j, k) <= cutoff)
                .count();
            hits as f64 / n
        })
        .collect()
}

/// Mean over instances and languages of `(Rank_jk − mean_k Rank_jk)²`.
pub fn mrv(table: &RankTable) -> Result<f64> {
    let k = table.n_languages;
    if k < 2 {
        return Err(Error::SingleLanguage);
    }
    let total: f64 = table
        .ranks
        .chunks(k)
        .map(|row| {
            let mean = row.iter().sum::<usize>() as f64 / k as f64;
            row.iter().map(|&r| (r as f64 - mean).powi(2)).sum::<f64>()
        })
        .sum();
    Ok(total / (table.n_instances * k) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecallTriple {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
}

impl RecallTriple {
    fn mean(values: &[RecallTriple]) -> RecallTriple {
        let n = values.len() as f64;
        RecallTriple {
            r1: values.iter().map(|v| v.r1).sum::<f64>() / n,
            r5: values.iter().map(|v| v.r5).sum::<f64>() / n,
            r10: values.iter().map(|v| v.r10).sum::<f64>() / n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub direction: Direction,
    pub per_language: IndexMap<String, RecallTriple>,
    pub mean_recall: RecallTriple,
    /// Zero for a single language, where rank variance is undefined.
    pub mrv: f64,
    /// Largest minus smallest per-language Recall@1.
    pub recall_gap: f64,
    #[serde(skip)]
    pub mean_rank: Vec<f64>,
}

impl MetricsReport {
    pub fn from_table(table: &RankTable, language_codes: &[String]) -> Result<Self> {
        if language_codes.len() != table.n_languages {
            return Err(Error::ShapeMismatch(format!(
                "{} language codes for {} languages",
                language_codes.len(),
                table.n_languages
            )));
        }
        let [r1, r5, r10] = RECALL_CUTOFFS.map(|c| recall_at_k(table, c));
        let triples: Vec<RecallTriple> = (0..table.n_languages)
            .map(|k| RecallTriple {
                r1: r1[k],
                r5: r5[k],
                r10: r10[k],
            })
            .collect();
        let per_language = language_codes.iter().cloned().zip(triples.iter().copied()).collect();
        let hi = r1.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = r1.iter().copied().fold(f64::INFINITY, f64::min);
        let mrv = match mrv(table) {
            Ok(v) => v,
            Err(Error::SingleLanguage) => 0.0,
            Err(e) => return Err(e),
        };
        Ok(Self {
            direction: table.direction,
            per_language,
            mean_recall: RecallTriple::mean(&triples),
            mrv,
            recall_gap: hi - lo,
            mean_rank: table.mean_ranks(),
        })
    }
}

/// Metrics for one direction of a normalized corpus.
pub fn evaluate(corpus: &MultilingualCorpus, direction: Direction) -> Result<MetricsReport> {
    let table = compute_ranks(corpus, direction)?;
    MetricsReport::from_table(&table, corpus.language_codes())
}

/// Scores a candidate pair for re-ranking; higher means a more likely match.
pub trait MatchScorer: Sync {
    fn match_probability(&self, corpus: &MultilingualCorpus, image: usize, text: (usize, usize)) -> f64;
}

impl MatchScorer for MitmHead {
    fn match_probability(&self, corpus: &MultilingualCorpus, image: usize, text: (usize, usize)) -> f64 {
        MitmHead::match_probability(self, corpus.text(text.0, text.1), corpus.image(image))
    }
}

/// Knows the ground truth: 1 for the true pair, 0 otherwise.
#[derive(Debug, Clone, Copy, Default)]
pub struct OracleScorer;

impl MatchScorer for OracleScorer {
    fn match_probability(&self, _: &MultilingualCorpus, image: usize, text: (usize, usize)) -> f64 {
        if image == text.0 {
            1.0
        } else {
            0.0
        }
    }
}

/// Same score for every pair.
#[derive(Debug, Clone, Copy)]
pub struct ConstantScorer(pub f64);

impl MatchScorer for ConstantScorer {
    fn match_probability(&self, _: &MultilingualCorpus, _: usize, _: (usize, usize)) -> f64 {
        self.0
    }
}

#[derive(Clone, Copy)]
pub struct RerankConfig<'a> {
    pub top_n: usize,
    pub scorer: &'a dyn MatchScorer,
}

impl<'a> RerankConfig<'a> {
    /// Default shortlist size for a candidate pool of `pool` items.
    pub fn default_top_n(pool: usize) -> usize {
        if pool > LARGE_POOL {
            LARGE_POOL_TOP_N
        } else {
            DEFAULT_TOP_N
        }
    }

    pub fn for_pool(pool: usize, scorer: &'a dyn MatchScorer) -> Self {
        Self {
            top_n: Self::default_top_n(pool),
            scorer,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RankedCandidate {
    pub rank: usize,
    /// Candidate instance index.
    pub instance: usize,
    pub similarity: f64,
    /// Scorer output, present for re-ranked candidates.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub match_probability: Option<f64>,
}

/// Full candidate list for the query `(j, k)`: image `j` against texts of
/// language `k` (TR) or text `(j, k)` against all images (IR).
pub fn ranked_list(
    corpus: &MultilingualCorpus,
    direction: Direction,
    query: (usize, usize),
    rerank: Option<&RerankConfig<'_>>,
) -> Result<Vec<RankedCandidate>> {
    corpus.require_normalized()?;
    let (j, k) = query;
    if j >= corpus.n_instances() || k >= corpus.n_languages() {
        return Err(Error::ShapeMismatch(format!("query {query:?} out of range")));
    }
    if let Some(cfg) = rerank {
        if cfg.top_n == 0 {
            return Err(Error::InvalidConfig("top_n must be at least 1".into()));
        }
    }
    let n = corpus.n_instances();
    let mut cands: Vec<(usize, f64)> = (0..n)
        .map(|c| {
            let s = match direction {
                Direction::TextRetrieval => crate::numerics::dot(corpus.image(j), corpus.text(c, k)),
                Direction::ImageRetrieval => crate::numerics::dot(corpus.image(c), corpus.text(j, k)),
            };
            (c, s)
        })
        .collect();
    cands.sort_by(|a, b| order(*a, *b));
    let mut out: Vec<RankedCandidate> = cands
        .iter()
        .map(|&(instance, similarity)| RankedCandidate {
            rank: 0,
            instance,
            similarity,
            match_probability: None,
        })
        .collect();
    if let Some(cfg) = rerank {
        let top = cfg.top_n.min(n);
        for c in &mut out[..top] {
            let (image, text) = match direction {
                Direction::TextRetrieval => (j, (c.instance, k)),
                Direction::ImageRetrieval => (c.instance, (j, k)),
            };
            c.match_probability = Some(cfg.scorer.match_probability(corpus, image, text));
        }
        // Stable: equal scores keep their cosine order.
        out[..top].sort_by(|a, b| {
            b.match_probability
                .unwrap_or(0.0)
                .total_cmp(&a.match_probability.unwrap_or(0.0))
        });
    }
    for (i, c) in out.iter_mut().enumerate() {
        c.rank = i + 1;
    }
    Ok(out)
}

/// Cosine ranking with the top `cfg.top_n` candidates of each query re-ordered
/// by the scorer; candidates beyond the shortlist keep their positions.
pub fn rerank_top_n(
    corpus: &MultilingualCorpus,
    direction: Direction,
    cfg: &RerankConfig<'_>,
) -> Result<RankTable> {
    corpus.require_normalized()?;
    let (n, k) = (corpus.n_instances(), corpus.n_languages());
    let ranks = (0..n * k)
        .into_par_iter()
        .map(|q| {
            let (j, lang) = (q / k, q % k);
            let list = ranked_list(corpus, direction, (j, lang), Some(cfg))?;
            Ok(list
                .iter()
                .find(|c| c.instance == j)
                .map(|c| c.rank)
                .expect("truth is always a candidate"))
        })
        .collect::<Result<Vec<usize>>>()?;
    RankTable::new(direction, n, k, ranks, vec![n; k])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mrv_examples() {
        let t = RankTable::new(Direction::TextRetrieval, 1, 2, vec![1, 3], vec![3, 3]).unwrap();
        assert!((mrv(&t).unwrap() - 1.0).abs() < 1e-15);
        let t = RankTable::new(Direction::TextRetrieval, 2, 3, vec![1, 2, 3, 4, 4, 4], vec![4; 3])
            .unwrap();
        assert!((mrv(&t).unwrap() - 2.0 / 6.0).abs() < 1e-15);
        let single = RankTable::from_rows(Direction::TextRetrieval, &[vec![1], vec![2]]).unwrap();
        assert!(matches!(mrv(&single), Err(Error::SingleLanguage)));
    }

    #[test]
    fn recall_counts() {
        let t = RankTable::new(Direction::ImageRetrieval, 4, 1, vec![1, 2, 3, 4], vec![4]).unwrap();
        assert_eq!(recall_at_k(&t, 2), vec![0.5]);
        assert_eq!(recall_at_k(&t, 1), vec![0.25]);
    }

    #[test]
    fn invalid_tables_rejected() {
        assert!(RankTable::new(Direction::TextRetrieval, 1, 1, vec![0], vec![1]).is_err());
        assert!(RankTable::new(Direction::TextRetrieval, 1, 1, vec![2], vec![1]).is_err());
        assert!(RankTable::new(Direction::TextRetrieval, 2, 1, vec![1], vec![2]).is_err());
    }

    #[test]
    fn direction_parsing() {
        assert_eq!("TR".parse::<Direction>().unwrap(), Direction::TextRetrieval);
        assert_eq!("ir".parse::<Direction>().unwrap(), Direction::ImageRetrieval);
        assert!("both".parse::<Direction>().is_err());
    }

    #[test]
    fn default_shortlists() {
        assert_eq!(RerankConfig::default_top_n(1000), 128);
        assert_eq!(RerankConfig::default_top_n(10_001), 256);
    }
}
