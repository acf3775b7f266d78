//! Corpus and multi-hop QA dataset ingestion.
//!
//! Both files are JSONL: one standalone JSON object per line. Blank lines are
//! skipped. Line numbers in errors are 1-based.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use num_rational::Ratio;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {detail}")]
    Format { line: usize, detail: String },
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("sample references unknown doc_id {0:?}")]
    DanglingReference(String),
    #[error("not enough {hop}-hop samples: need {needed}, pool has {available}")]
    InsufficientPool {
        hop: u8,
        needed: usize,
        available: usize,
    },
    #[error("invalid hop mix: {0}")]
    InvalidMix(String),
}

/// One corpus passage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub title: String,
    pub text: String,
}

impl Document {
    pub fn new(doc_id: impl Into<String>, title: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            doc_id: doc_id.into(),
            title: title.into(),
            text: text.into(),
        }
    }

    /// Title-only stub with no passage body.
    pub fn is_stub(&self) -> bool {
        self.text.is_empty()
    }

    /// Text fed to the embedder and the lexical reranker.
    pub fn indexed_text(&self) -> String {
        format!("{}\n{}", self.title, self.text)
    }
}

/// A multi-hop question with its gold answer and evidence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaSample {
    pub sample_id: String,
    pub question: String,
    pub gold_answer: String,
    #[serde(default)]
    pub answer_aliases: Vec<String>,
    pub hop_count: u8,
    pub supporting_doc_ids: Vec<String>,
}

/// Loaded corpus plus a doc_id lookup table.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    docs: Vec<Document>,
    by_id: BTreeMap<String, usize>,
}

impl Corpus {
    pub fn from_documents(docs: Vec<Document>) -> Result<Self, CorpusError> {
        let mut by_id = BTreeMap::new();
        for (i, d) in docs.iter().enumerate() {
            if d.doc_id.is_empty() {
                return Err(CorpusError::Format {
                    line: i + 1,
                    detail: "doc_id is empty".into(),
                });
            }
            if d.text.is_empty() && d.title.is_empty() {
                return Err(CorpusError::Format {
                    line: i + 1,
                    detail: "document has neither title nor text".into(),
                });
            }
            if by_id.insert(d.doc_id.clone(), i).is_some() {
                return Err(CorpusError::DuplicateId(d.doc_id.clone()));
            }
        }
        Ok(Self { docs, by_id })
    }

    pub fn documents(&self) -> &[Document] {
        &self.docs
    }

    pub fn get(&self, doc_id: &str) -> Option<&Document> {
        self.by_id.get(doc_id).map(|&i| &self.docs[i])
    }

    pub fn contains(&self, doc_id: &str) -> bool {
        self.by_id.contains_key(doc_id)
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    /// Ids of title-only stubs. These load fine but are worth a warning.
    pub fn stub_ids(&self) -> Vec<&str> {
        self.docs
            .iter()
            .filter(|d| d.is_stub())
            .map(|d| d.doc_id.as_str())
            .collect()
    }

    pub fn into_documents(self) -> Vec<Document> {
        self.docs
    }
}

fn read_to_string(path: &Path) -> Result<String, CorpusError> {
    fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn parse_jsonl<T: for<'de> Deserialize<'de>>(content: &str) -> Result<Vec<T>, CorpusError> {
    let mut out = Vec::new();
    for (i, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(line).map_err(|e| CorpusError::Format {
            line: i + 1,
            detail: e.to_string(),
        })?;
        out.push(item);
    }
    Ok(out)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DocumentLine {
    doc_id: String,
    title: String,
    text: String,
}

/// Parses corpus JSONL text. Order is preserved.
pub fn parse_corpus(content: &str) -> Result<Corpus, CorpusError> {
    let mut docs = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let raw: DocumentLine = serde_json::from_str(line).map_err(|e| CorpusError::Format {
            line: i + 1,
            detail: e.to_string(),
        })?;
        if raw.doc_id.is_empty() {
            return Err(CorpusError::Format {
                line: i + 1,
                detail: "doc_id is empty".into(),
            });
        }
        if raw.title.is_empty() && raw.text.is_empty() {
            return Err(CorpusError::Format {
                line: i + 1,
                detail: "document has neither title nor text".into(),
            });
        }
        if !seen.insert(raw.doc_id.clone()) {
            return Err(CorpusError::DuplicateId(raw.doc_id));
        }
        docs.push(Document {
            doc_id: raw.doc_id,
            title: raw.title,
            text: raw.text,
        });
    }
    Corpus::from_documents(docs)
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus, CorpusError> {
    let corpus = parse_corpus(&read_to_string(path.as_ref())?)?;
    let stubs = corpus.stub_ids();
    if !stubs.is_empty() {
        tracing::warn!(count = stubs.len(), first = stubs[0], "corpus contains title-only documents");
    }
    Ok(corpus)
}

/// Serializes a corpus back to JSONL, one document per line.
pub fn write_corpus(docs: &[Document], mut out: impl Write) -> std::io::Result<()> {
    for d in docs {
        serde_json::to_writer(&mut out, d)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn write_dataset(samples: &[QaSample], mut out: impl Write) -> std::io::Result<()> {
    for s in samples {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Parses dataset JSONL without checking document references.
pub fn parse_dataset(content: &str) -> Result<Vec<QaSample>, CorpusError> {
    let samples: Vec<QaSample> = parse_jsonl(content)?;
    let mut seen = HashSet::new();
    // line numbers are recomputed so errors point at the right line
    let mut line_of = content
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, _)| i + 1);
    for s in &samples {
        let line = line_of.next().unwrap_or(0);
        if !(2..=4).contains(&s.hop_count) {
            return Err(CorpusError::Format {
                line,
                detail: format!("hop_count {} outside 2..=4", s.hop_count),
            });
        }
        if s.sample_id.is_empty() {
            return Err(CorpusError::Format {
                line,
                detail: "sample_id is empty".into(),
            });
        }
        if s.supporting_doc_ids.is_empty() {
            return Err(CorpusError::Format {
                line,
                detail: "supporting_doc_ids is empty".into(),
            });
        }
        if !seen.insert(s.sample_id.as_str()) {
            return Err(CorpusError::DuplicateId(s.sample_id.clone()));
        }
    }
    Ok(samples)
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<QaSample>, CorpusError> {
    parse_dataset(&read_to_string(path.as_ref())?)
}

pub fn verify_references(samples: &[QaSample], corpus: &Corpus) -> Result<(), CorpusError> {
    for s in samples {
        if let Some(missing) = s.supporting_doc_ids.iter().find(|id| !corpus.contains(id)) {
            return Err(CorpusError::DanglingReference(missing.clone()));
        }
    }
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>, corpus: &Corpus) -> Result<Vec<QaSample>, CorpusError> {
    let samples = read_dataset(path)?;
    verify_references(&samples, corpus)?;
    Ok(samples)
}

/// Target composition of a sampled subset, by hop count.
///
/// Fractions are exact rationals; `from_fractions` accepts floats and
/// renormalizes them so the class counts always add up to `total`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HopMix {
    total: u64,
    fractions: [Ratio<u64>; 3],
}

impl HopMix {
    pub const HOPS: [u8; 3] = [2, 3, 4];

    pub fn new(total: u64, fractions: [Ratio<u64>; 3]) -> Result<Self, CorpusError> {
        let sum = fractions[0] + fractions[1] + fractions[2];
        if sum != Ratio::from_integer(1) {
            return Err(CorpusError::InvalidMix(format!("fractions sum to {sum}, not 1")));
        }
        Ok(Self { total, fractions })
    }

    /// Mix whose fractions are exactly the given per-class counts over their sum.
    pub fn from_counts(two: u64, three: u64, four: u64) -> Result<Self, CorpusError> {
        let total = two + three + four;
        if total == 0 {
            return Ok(Self::empty());
        }
        Self::new(
            total,
            [
                Ratio::new(two, total),
                Ratio::new(three, total),
                Ratio::new(four, total),
            ],
        )
    }

    /// Accepts decimal fractions that sum to 1 within 1e-9.
    pub fn from_fractions(total: u64, fractions: [f64; 3]) -> Result<Self, CorpusError> {
        if fractions.iter().any(|f| !f.is_finite() || *f < 0.0) {
            return Err(CorpusError::InvalidMix("fractions must be finite and non-negative".into()));
        }
        let sum: f64 = fractions.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(CorpusError::InvalidMix(format!("fractions sum to {sum}, not 1")));
        }
        const SCALE: u64 = 1_000_000_000_000;
        let scaled = fractions.map(|f| (f * SCALE as f64).round() as u64);
        let denom: u64 = scaled.iter().sum();
        if denom == 0 {
            return Err(CorpusError::InvalidMix("all fractions are zero".into()));
        }
        Ok(Self {
            total,
            fractions: scaled.map(|n| Ratio::new(n, denom)),
        })
    }

    fn empty() -> Self {
        Self {
            total: 0,
            fractions: [Ratio::from_integer(1), Ratio::from_integer(0), Ratio::from_integer(0)],
        }
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn fractions(&self) -> &[Ratio<u64>; 3] {
        &self.fractions
    }

    /// Per-class counts by the largest-remainder method. Ties in the
    /// remainder go to the lower hop class.
    pub fn class_counts(&self) -> [u64; 3] {
        let exact = self.fractions.map(|f| f * self.total);
        let mut counts = exact.map(|r| r.to_integer());
        let assigned: u64 = counts.iter().sum();
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| exact[b].fract().cmp(&exact[a].fract()).then(a.cmp(&b)));
        for &i in order.iter().take((self.total - assigned) as usize) {
            counts[i] += 1;
        }
        counts
    }
}

/// Seeded per-hop-class selection. The pool is sorted by sample_id first so
/// the result does not depend on input order.
pub fn sample_by_hops(pool: &[QaSample], mix: &HopMix, seed: u64) -> Result<Vec<QaSample>, CorpusError> {
    let mut sorted: Vec<&QaSample> = pool.iter().collect();
    sorted.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    sorted.dedup_by(|a, b| a.sample_id == b.sample_id);

    let counts = mix.class_counts();
    let mut out = Vec::with_capacity(mix.total() as usize);
    for (hop, &needed) in HopMix::HOPS.iter().zip(counts.iter()) {
        let mut class: Vec<&QaSample> = sorted.iter().copied().filter(|s| s.hop_count == *hop).collect();
        if (class.len() as u64) < needed {
            return Err(CorpusError::InsufficientPool {
                hop: *hop,
                needed: needed as usize,
                available: class.len(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (u64::from(*hop) << 56));
        class.shuffle(&mut rng);
        out.extend(class.into_iter().take(needed as usize).cloned());
    }
    Ok(out)
}
