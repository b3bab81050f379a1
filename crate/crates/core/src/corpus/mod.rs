//! Multilingual image-text corpora.
//!
//! An instance is one image embedding plus one text embedding per language.
//! Texts are stored instance-major, then language: text `(j, k)` lives at row
//! `j·K + k` of the text matrix. Token sequences for the masked-language
//! objective are kept separately in [`TokenCorpus`].

mod io;
mod synthetic;

use std::collections::HashSet;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{DenseMatrix, UNIT_NORM_TOL};

pub use io::{
    decode_binary, encode_binary, load_corpus, load_tokens, parse_csv, parse_jsonl, save_corpus,
    save_tokens, write_csv, write_jsonl, CorpusFormat, IMAGE_LANGUAGE,
};
pub use synthetic::{generate_synthetic, SyntheticConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct MultilingualCorpus {
    images: DenseMatrix,
    texts: DenseMatrix,
    language_codes: Vec<String>,
    instance_ids: Vec<String>,
    normalized: bool,
}

impl MultilingualCorpus {
    /// Build a corpus from an `N×d` image matrix and an `(N·K)×d` text matrix.
    pub fn new(
        images: DenseMatrix,
        texts: DenseMatrix,
        language_codes: Vec<String>,
        instance_ids: Vec<String>,
    ) -> Result<Self> {
        let n = images.rows();
        let k = language_codes.len();
        if n == 0 {
            return Err(Error::InvalidConfig("corpus needs at least one instance".into()));
        }
        if k == 0 {
            return Err(Error::InvalidConfig("corpus needs at least one language".into()));
        }
        if images.cols() == 0 {
            return Err(Error::InvalidConfig("embedding dimension must be positive".into()));
        }
        if texts.rows() != n * k || texts.cols() != images.cols() {
            return Err(Error::DimensionMismatch(format!(
                "text block is {}x{}, expected {}x{}",
                texts.rows(),
                texts.cols(),
                n * k,
                images.cols()
            )));
        }
        if instance_ids.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "{} instance ids for {n} instances",
                instance_ids.len()
            )));
        }
        let mut seen = HashSet::new();
        for code in &language_codes {
            if code == IMAGE_LANGUAGE {
                return Err(Error::InvalidConfig(format!(
                    "language code {IMAGE_LANGUAGE:?} is reserved for images"
                )));
            }
            if !seen.insert(code.as_str()) {
                return Err(Error::InvalidConfig(format!("duplicate language code {code:?}")));
            }
        }
        let normalized =
            images.rows_are_unit(UNIT_NORM_TOL) && texts.rows_are_unit(UNIT_NORM_TOL);
        Ok(Self {
            images,
            texts,
            language_codes,
            instance_ids,
            normalized,
        })
    }

    /// Same ids and languages, new embeddings of identical shape.
    pub fn with_embeddings(&self, images: DenseMatrix, texts: DenseMatrix) -> Result<Self> {
        if images.rows() != self.n_instances() {
            return Err(Error::DimensionMismatch(format!(
                "{} image rows for {} instances",
                images.rows(),
                self.n_instances()
            )));
        }
        Self::new(
            images,
            texts,
            self.language_codes.clone(),
            self.instance_ids.clone(),
        )
    }

    /// Copy with every embedding scaled to unit norm.
    pub fn normalized(&self) -> Result<Self> {
        let images = self.images.normalize_rows()?;
        let texts = self.texts.normalize_rows()?;
        Ok(Self {
            images,
            texts,
            language_codes: self.language_codes.clone(),
            instance_ids: self.instance_ids.clone(),
            normalized: true,
        })
    }

    pub fn n_instances(&self) -> usize {
        self.images.rows()
    }

    pub fn n_languages(&self) -> usize {
        self.language_codes.len()
    }

    pub fn dim(&self) -> usize {
        self.images.cols()
    }

    pub fn images(&self) -> &DenseMatrix {
        &self.images
    }

    pub fn texts(&self) -> &DenseMatrix {
        &self.texts
    }

    pub fn image(&self, j: usize) -> &[f64] {
        self.images.row(j)
    }

    pub fn text(&self, j: usize, k: usize) -> &[f64] {
        self.texts.row(self.text_index(j, k))
    }

    #[inline]
    pub fn text_index(&self, j: usize, k: usize) -> usize {
        j * self.n_languages() + k
    }

    pub fn language_codes(&self) -> &[String] {
        &self.language_codes
    }

    pub fn instance_ids(&self) -> &[String] {
        &self.instance_ids
    }

    pub fn instance_index(&self, id: &str) -> Option<usize> {
        self.instance_ids.iter().position(|i| i == id)
    }

    pub fn language_index(&self, code: &str) -> Option<usize> {
        self.language_codes.iter().position(|c| c == code)
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub(crate) fn require_normalized(&self) -> Result<()> {
        if self.normalized {
            Ok(())
        } else {
            Err(Error::NotNormalized)
        }
    }
}

/// Reserved token id replacing masked positions.
pub const MASK_TOKEN: u32 = 0;

/// Discrete token sequences aligned with a [`MultilingualCorpus`].
///
/// Id 0 is `[MASK]`; each language owns a disjoint id interval after it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenCorpus {
    pub vocab_size: u32,
    pub n_languages: usize,
    /// `N·K` sequences, instance-major then language.
    pub sequences: Vec<Vec<u32>>,
    pub language_vocab_ranges: Vec<Range<u32>>,
    pub concept_of_instance: Vec<usize>,
}

impl TokenCorpus {
    pub fn n_instances(&self) -> usize {
        self.concept_of_instance.len()
    }

    pub fn sequence(&self, j: usize, k: usize) -> &[u32] {
        &self.sequences[j * self.n_languages + k]
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.concept_of_instance.len();
        let k = self.n_languages;
        if k == 0 || n == 0 {
            return Err(Error::InvalidConfig("token corpus is empty".into()));
        }
        if self.language_vocab_ranges.len() != k {
            return Err(Error::DimensionMismatch(format!(
                "{} vocabulary ranges for {k} languages",
                self.language_vocab_ranges.len()
            )));
        }
        if self.sequences.len() != n * k {
            return Err(Error::DimensionMismatch(format!(
                "{} sequences for {n} instances x {k} languages",
                self.sequences.len()
            )));
        }
        let mut ranges: Vec<&Range<u32>> = self.language_vocab_ranges.iter().collect();
        ranges.sort_by_key(|r| r.start);
        for r in &ranges {
            if r.start >= r.end || r.end > self.vocab_size || r.contains(&MASK_TOKEN) {
                return Err(Error::InvalidConfig(format!("bad vocabulary range {r:?}")));
            }
        }
        if ranges.windows(2).any(|w| w[0].end > w[1].start) {
            return Err(Error::InvalidConfig("vocabulary ranges overlap".into()));
        }
        for (idx, seq) in self.sequences.iter().enumerate() {
            if seq.is_empty() {
                return Err(Error::EmptySequence);
            }
            let range = &self.language_vocab_ranges[idx % k];
            if let Some(t) = seq.iter().find(|t| !range.contains(t)) {
                return Err(Error::InvalidConfig(format!(
                    "token {t} of sequence {idx} lies outside its language range {range:?}"
                )));
            }
        }
        Ok(())
    }

    /// Consistency with the embedding corpus it accompanies.
    pub fn check_matches(&self, corpus: &MultilingualCorpus) -> Result<()> {
        if self.n_instances() != corpus.n_instances() || self.n_languages != corpus.n_languages()
        {
            return Err(Error::DimensionMismatch(format!(
                "tokens cover {}x{}, corpus is {}x{}",
                self.n_instances(),
                self.n_languages,
                corpus.n_instances(),
                corpus.n_languages()
            )));
        }
        Ok(())
    }
}
