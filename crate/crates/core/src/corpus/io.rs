//! Corpus file formats.
//!
//! Binary (little-endian):
//!
//! ```text
//! "CCRK" | u32 version=1 | u32 N | u32 K | u32 d
//! N×d f32 images | N×K×d f32 texts (instance-major, then language)
//! u32 metadata length | UTF-8 JSON {"languages": [...], "instance_ids": [...]}
//! ```
//!
//! CSV and JSONL hold one embedding per record keyed by `(instance_id,
//! language)`; the language `IMG` marks image embeddings. Instance and
//! language order follow first appearance.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{MultilingualCorpus, TokenCorpus};
use crate::error::{Error, Result};
use crate::numerics::DenseMatrix;

pub const MAGIC: &[u8; 4] = b"CCRK";
pub const VERSION: u32 = 1;
pub const IMAGE_LANGUAGE: &str = "IMG";

const HEADER_LEN: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusFormat {
    Binary,
    Csv,
    Jsonl,
}

impl CorpusFormat {
    /// Guess from the file extension; anything unrecognized is binary.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => CorpusFormat::Csv,
            Some(e) if e.eq_ignore_ascii_case("jsonl") => CorpusFormat::Jsonl,
            _ => CorpusFormat::Binary,
        }
    }
}

impl FromStr for CorpusFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "binary" | "bin" | "ccrk" => Ok(CorpusFormat::Binary),
            "csv" => Ok(CorpusFormat::Csv),
            "jsonl" => Ok(CorpusFormat::Jsonl),
            other => Err(Error::InvalidConfig(format!("unknown corpus format {other:?}"))),
        }
    }
}

pub fn load_corpus(path: &Path, format: CorpusFormat) -> Result<MultilingualCorpus> {
    match format {
        CorpusFormat::Binary => decode_binary(&fs::read(path)?),
        CorpusFormat::Csv => parse_csv(BufReader::new(fs::File::open(path)?)),
        CorpusFormat::Jsonl => parse_jsonl(BufReader::new(fs::File::open(path)?)),
    }
}

pub fn save_corpus(c: &MultilingualCorpus, path: &Path, format: CorpusFormat) -> Result<()> {
    let mut file = std::io::BufWriter::new(fs::File::create(path)?);
    match format {
        CorpusFormat::Binary => file.write_all(&encode_binary(c)?)?,
        CorpusFormat::Csv => write_csv(c, &mut file)?,
        CorpusFormat::Jsonl => write_jsonl(c, &mut file)?,
    }
    file.flush()?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct Metadata {
    languages: Vec<String>,
    instance_ids: Vec<String>,
}

fn u32_len(value: usize, what: &str) -> Result<u32> {
    u32::try_from(value)
        .map_err(|_| Error::DimensionMismatch(format!("{what} = {value} does not fit in u32")))
}

pub fn encode_binary(c: &MultilingualCorpus) -> Result<Vec<u8>> {
    let meta = serde_json::to_vec(&Metadata {
        languages: c.language_codes().to_vec(),
        instance_ids: c.instance_ids().to_vec(),
    })
    .map_err(|e| Error::InvalidConfig(format!("metadata serialization failed: {e}")))?;
    let n_floats = c.images().as_slice().len() + c.texts().as_slice().len();
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * n_floats + 4 + meta.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&u32_len(c.n_instances(), "N")?.to_le_bytes());
    out.extend_from_slice(&u32_len(c.n_languages(), "K")?.to_le_bytes());
    out.extend_from_slice(&u32_len(c.dim(), "d")?.to_le_bytes());
    for &v in c.images().as_slice().iter().chain(c.texts().as_slice()) {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out.extend_from_slice(&u32_len(meta.len(), "metadata length")?.to_le_bytes());
    out.extend_from_slice(&meta);
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn fail(&self, message: impl Into<String>) -> Error {
        Error::Format {
            offset: self.pos as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < len {
            return Err(self.fail(format!(
                "truncated: need {len} bytes, {} remain",
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + len];
        self.pos += len;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32_block(&mut self, count: usize) -> Result<Vec<f64>> {
        let start = self.pos;
        let bytes = self.take(count * 4)?;
        bytes
            .chunks_exact(4)
            .enumerate()
            .map(|(i, b)| {
                let v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
                if v.is_finite() {
                    Ok(v as f64)
                } else {
                    Err(Error::Format {
                        offset: (start + 4 * i) as u64,
                        message: "non-finite embedding value".into(),
                    })
                }
            })
            .collect()
    }
}

pub fn decode_binary(bytes: &[u8]) -> Result<MultilingualCorpus> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    let magic = cur.take(4)?;
    if magic != MAGIC {
        return Err(Error::UnknownMagic {
            found: magic.to_vec(),
        });
    }
    let version = cur.u32()?;
    if version != VERSION {
        cur.pos -= 4;
        return Err(cur.fail(format!("unsupported version {version}")));
    }
    let n = cur.u32()? as usize;
    let k = cur.u32()? as usize;
    let d = cur.u32()? as usize;
    if n == 0 || k == 0 || d == 0 {
        cur.pos = 8;
        return Err(cur.fail(format!("empty corpus header N={n} K={k} d={d}")));
    }
    // Sizes come from untrusted input; check before allocating.
    let image_floats = n.checked_mul(d);
    let text_floats = image_floats.and_then(|x| x.checked_mul(k));
    let (image_floats, text_floats) = match (image_floats, text_floats) {
        (Some(i), Some(t)) if i.checked_add(t).and_then(|s| s.checked_mul(4)).is_some() => (i, t),
        _ => return Err(cur.fail("header sizes overflow")),
    };
    let images = cur.f32_block(image_floats)?;
    let texts = cur.f32_block(text_floats)?;
    let meta_len = cur.u32()? as usize;
    let meta_start = cur.pos;
    let meta: Metadata = serde_json::from_slice(cur.take(meta_len)?).map_err(|e| Error::Format {
        offset: meta_start as u64,
        message: format!("bad metadata JSON: {e}"),
    })?;
    if cur.pos != bytes.len() {
        return Err(cur.fail(format!("{} trailing bytes", bytes.len() - cur.pos)));
    }
    if meta.languages.len() != k || meta.instance_ids.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "metadata lists {} languages and {} ids, header says K={k} N={n}",
            meta.languages.len(),
            meta.instance_ids.len()
        )));
    }
    MultilingualCorpus::new(
        DenseMatrix::new(n, d, images)?,
        DenseMatrix::new(n * k, d, texts)?,
        meta.languages,
        meta.instance_ids,
    )
    .map_err(|e| match e {
        Error::InvalidConfig(m) => Error::Format {
            offset: meta_start as u64,
            message: m,
        },
        other => other,
    })
}

/// Collects keyed embedding records in arrival order.
#[derive(Default)]
struct Assembler {
    dim: Option<usize>,
    ids: Vec<String>,
    id_index: HashMap<String, usize>,
    langs: Vec<String>,
    lang_index: HashMap<String, usize>,
    images: HashMap<usize, Vec<f64>>,
    texts: HashMap<(usize, usize), Vec<f64>>,
}

impl Assembler {
    fn push(&mut self, id: &str, lang: &str, values: Vec<f64>, offset: u64) -> Result<()> {
        match self.dim {
            None if values.is_empty() => {
                return Err(Error::Format {
                    offset,
                    message: "embedding has no components".into(),
                })
            }
            None => self.dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(Error::DimensionMismatch(format!(
                    "record at byte {offset} has {} components, expected {d}",
                    values.len()
                )))
            }
            _ => {}
        }
        let j = match self.id_index.get(id) {
            Some(&j) => j,
            None => {
                self.ids.push(id.to_string());
                self.id_index.insert(id.to_string(), self.ids.len() - 1);
                self.ids.len() - 1
            }
        };
        let duplicate = if lang == IMAGE_LANGUAGE {
            self.images.insert(j, values).is_some()
        } else {
            let k = match self.lang_index.get(lang) {
                Some(&k) => k,
                None => {
                    self.langs.push(lang.to_string());
                    self.lang_index.insert(lang.to_string(), self.langs.len() - 1);
                    self.langs.len() - 1
                }
            };
            self.texts.insert((j, k), values).is_some()
        };
        if duplicate {
            return Err(Error::Format {
                offset,
                message: format!("duplicate record for ({id}, {lang})"),
            });
        }
        Ok(())
    }

    fn finish(mut self, end_offset: u64) -> Result<MultilingualCorpus> {
        let fail = |message: String| Error::Format {
            offset: end_offset,
            message,
        };
        let d = self.dim.ok_or_else(|| fail("no embedding records".into()))?;
        let (n, k) = (self.ids.len(), self.langs.len());
        if k == 0 {
            return Err(fail("no text records".into()));
        }
        let mut images = Vec::with_capacity(n * d);
        let mut texts = Vec::with_capacity(n * k * d);
        for j in 0..n {
            let img = self
                .images
                .remove(&j)
                .ok_or_else(|| fail(format!("instance {:?} has no {IMAGE_LANGUAGE} record", self.ids[j])))?;
            images.extend(img);
            for lang in 0..k {
                let t = self.texts.remove(&(j, lang)).ok_or_else(|| {
                    fail(format!(
                        "instance {:?} has no text in language {:?}",
                        self.ids[j], self.langs[lang]
                    ))
                })?;
                texts.extend(t);
            }
        }
        MultilingualCorpus::new(
            DenseMatrix::new(n, d, images)?,
            DenseMatrix::new(n * k, d, texts)?,
            self.langs,
            self.ids,
        )
    }
}

fn parse_value(s: &str, offset: u64) -> Result<f64> {
    match s.trim().parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(Error::Format {
            offset,
            message: format!("invalid embedding value {s:?}"),
        }),
    }
}

/// Parse the CSV layout `instance_id,language,e0,…,e{d-1}`.
pub fn parse_csv<R: Read>(reader: R) -> Result<MultilingualCorpus> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let csv_err = |e: csv::Error| {
        let offset = e.position().map_or(0, |p| p.byte());
        Error::Format {
            offset,
            message: e.to_string(),
        }
    };
    let headers = rdr.headers().map_err(csv_err)?.clone();
    let bad_header = || Error::Format {
        offset: 0,
        message: "header must be instance_id,language,e0,...,e{d-1}".into(),
    };
    if headers.len() < 3 || &headers[0] != "instance_id" || &headers[1] != "language" {
        return Err(bad_header());
    }
    for (i, h) in headers.iter().skip(2).enumerate() {
        if h != format!("e{i}") {
            return Err(bad_header());
        }
    }
    let d = headers.len() - 2;
    let mut asm = Assembler::default();
    let mut record = csv::StringRecord::new();
    let mut end = 0;
    while rdr.read_record(&mut record).map_err(csv_err)? {
        let offset = record.position().map_or(0, |p| p.byte());
        if record.len() != d + 2 {
            return Err(Error::DimensionMismatch(format!(
                "record at byte {offset} has {} fields, expected {}",
                record.len(),
                d + 2
            )));
        }
        let values = record
            .iter()
            .skip(2)
            .map(|s| parse_value(s, offset))
            .collect::<Result<Vec<_>>>()?;
        asm.push(&record[0], &record[1], values, offset)?;
        end = rdr.position().byte();
    }
    asm.finish(end)
}

pub fn write_csv<W: Write>(c: &MultilingualCorpus, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let to_io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    let mut header = vec!["instance_id".to_string(), "language".to_string()];
    header.extend((0..c.dim()).map(|i| format!("e{i}")));
    w.write_record(&header).map_err(to_io)?;
    for j in 0..c.n_instances() {
        let id = &c.instance_ids()[j];
        let mut write = |lang: &str, v: &[f64]| {
            let mut rec = vec![id.clone(), lang.to_string()];
            // `{}` on f64 prints the shortest string that parses back exactly.
            rec.extend(v.iter().map(|x| format!("{x}")));
            w.write_record(&rec).map_err(to_io)
        };
        write(IMAGE_LANGUAGE, c.image(j))?;
        for (k, lang) in c.language_codes().iter().enumerate() {
            write(lang, c.text(j, k))?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonlRecord {
    instance_id: String,
    language: String,
    embedding: Vec<f64>,
}

/// Parse one `{"instance_id", "language", "embedding"}` object per line.
pub fn parse_jsonl<R: BufRead>(mut reader: R) -> Result<MultilingualCorpus> {
    let mut asm = Assembler::default();
    let mut offset = 0u64;
    let mut line = String::new();
    loop {
        line.clear();
        let read = reader.read_line(&mut line).map_err(|e| match e.kind() {
            std::io::ErrorKind::InvalidData => Error::Format {
                offset,
                message: "invalid UTF-8".into(),
            },
            _ => Error::Io(e),
        })?;
        if read == 0 {
            break;
        }
        if !line.trim().is_empty() {
            let rec: JsonlRecord = serde_json::from_str(&line).map_err(|e| Error::Format {
                offset,
                message: e.to_string(),
            })?;
            if let Some(i) = rec.embedding.iter().position(|v| !v.is_finite()) {
                return Err(Error::Format {
                    offset,
                    message: format!("non-finite component {i}"),
                });
            }
            asm.push(&rec.instance_id, &rec.language, rec.embedding, offset)?;
        }
        offset += read as u64;
    }
    asm.finish(offset)
}

pub fn write_jsonl<W: Write>(c: &MultilingualCorpus, mut out: W) -> Result<()> {
    let mut write = |id: &str, lang: &str, v: &[f64]| -> Result<()> {
        let rec = JsonlRecord {
            instance_id: id.to_string(),
            language: lang.to_string(),
            embedding: v.to_vec(),
        };
        serde_json::to_writer(&mut out, &rec).map_err(|e| Error::Io(e.into()))?;
        out.write_all(b"\n")?;
        Ok(())
    };
    for j in 0..c.n_instances() {
        let id = &c.instance_ids()[j];
        write(id, IMAGE_LANGUAGE, c.image(j))?;
        for (k, lang) in c.language_codes().iter().enumerate() {
            write(id, lang, c.text(j, k))?;
        }
    }
    Ok(())
}

pub fn save_tokens(t: &TokenCorpus, path: &Path) -> Result<()> {
    let file = std::io::BufWriter::new(fs::File::create(path)?);
    serde_json::to_writer(file, t).map_err(|e| Error::Io(e.into()))
}

pub fn load_tokens(path: &Path) -> Result<TokenCorpus> {
    TokenCorpus::from_json_slice(&fs::read(path)?)
}

impl TokenCorpus {
    /// Parse and validate a JSON token corpus.
    pub fn from_json_slice(bytes: &[u8]) -> Result<TokenCorpus> {
        let t: TokenCorpus = serde_json::from_slice(bytes).map_err(|e| Error::Format {
            offset: 0,
            message: format!("line {} column {}: {e}", e.line(), e.column()),
        })?;
        t.validate()?;
        Ok(t)
    }
}
