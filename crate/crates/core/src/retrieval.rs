//! Two-stage search: exact dense top-M, rerank, truncate to top-K, attach
//! previews.
//!
//! Every ranked list in this module is ordered by score descending with ties
//! broken by ascending doc_id.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Document};
use crate::embedding::{dot, Embedder, EmbedderConfig, EmbeddingError, EmbeddingVector};
use crate::rewards::normalize_answer;

pub const DEFAULT_TOP_M: usize = 15;
pub const DEFAULT_TOP_K: usize = 10;
pub const DEFAULT_PREVIEW_CHARS: usize = 150;

#[derive(Debug, thiserror::Error)]
pub enum RetrievalError {
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error("cannot index an empty corpus")]
    EmptyCorpus,
    #[error("query is empty")]
    EmptyQuery,
    #[error("no candidates to rerank")]
    NoCandidates,
    #[error("reranker unavailable: {0}")]
    RerankerUnavailable(String),
    #[error("invalid pipeline config: {0}")]
    InvalidConfig(String),
    #[error("index does not match corpus: {0}")]
    IndexMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RerankerKind {
    Lexical,
    Remote,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub top_m: usize,
    pub top_k: usize,
    pub preview_chars: usize,
    pub reranker: RerankerKind,
    pub endpoint: Option<String>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            top_m: DEFAULT_TOP_M,
            top_k: DEFAULT_TOP_K,
            preview_chars: DEFAULT_PREVIEW_CHARS,
            reranker: RerankerKind::Lexical,
            endpoint: None,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), RetrievalError> {
        if self.top_k < 1 || self.top_k > self.top_m {
            return Err(RetrievalError::InvalidConfig(format!(
                "need 1 <= top_k ({}) <= top_m ({})",
                self.top_k, self.top_m
            )));
        }
        if self.preview_chars < 1 {
            return Err(RetrievalError::InvalidConfig("preview_chars must be >= 1".into()));
        }
        match (self.reranker, &self.endpoint) {
            (RerankerKind::Remote, None) => Err(RetrievalError::InvalidConfig("remote reranker needs an endpoint".into())),
            (RerankerKind::Remote, Some(url)) => crate::embedding::validate_endpoint(url).map_err(RetrievalError::InvalidConfig),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub doc_id: String,
    pub title: String,
    pub preview: String,
    pub score: f64,
}

/// Exact dense index: one vector per corpus document, in corpus order.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex {
    dim: usize,
    entries: Vec<(String, EmbeddingVector)>,
    norms: Vec<f64>,
}

impl VectorIndex {
    pub fn from_entries(dim: usize, entries: Vec<(String, EmbeddingVector)>) -> Result<Self, RetrievalError> {
        if let Some((id, v)) = entries.iter().find(|(_, v)| v.dim() != dim) {
            return Err(RetrievalError::IndexMismatch(format!(
                "entry {id:?} has dim {}, index dim is {dim}",
                v.dim()
            )));
        }
        let norms = entries.iter().map(|(_, v)| v.norm()).collect();
        Ok(Self { dim, entries, norms })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(String, EmbeddingVector)] {
        &self.entries
    }

    /// Checks the index covers exactly the corpus documents.
    pub fn check_against(&self, corpus: &Corpus) -> Result<(), RetrievalError> {
        if self.len() != corpus.len() {
            return Err(RetrievalError::IndexMismatch(format!(
                "index has {} entries, corpus has {} documents",
                self.len(),
                corpus.len()
            )));
        }
        let mut seen = HashSet::with_capacity(self.len());
        for (id, _) in &self.entries {
            if !corpus.contains(id) {
                return Err(RetrievalError::IndexMismatch(format!("doc_id {id:?} not in corpus")));
            }
            if !seen.insert(id.as_str()) {
                return Err(RetrievalError::IndexMismatch(format!("doc_id {id:?} indexed twice")));
            }
        }
        Ok(())
    }

    /// Top `m` entries by cosine similarity to `query_vec`. A zero query or
    /// zero document vector scores 0.
    pub fn nearest(&self, query_vec: &EmbeddingVector, m: usize) -> Vec<(String, f64)> {
        let qn = query_vec.norm();
        let mut scored: Vec<(&str, f64)> = self
            .entries
            .iter()
            .zip(&self.norms)
            .map(|((id, v), &dn)| {
                let sim = if qn == 0.0 || dn == 0.0 {
                    0.0
                } else {
                    (dot(query_vec.values(), v.values()) / (qn * dn)).clamp(-1.0, 1.0)
                };
                (id.as_str(), sim)
            })
            .collect();
        let m = m.min(scored.len());
        if m == 0 {
            return Vec::new();
        }
        if m < scored.len() {
            scored.select_nth_unstable_by(m - 1, |a, b| rank_order(a.0, a.1, b.0, b.1));
            scored.truncate(m);
        }
        scored.sort_by(|a, b| rank_order(a.0, a.1, b.0, b.1));
        scored.into_iter().map(|(id, s)| (id.to_string(), s)).collect()
    }
}

/// Score descending, then doc_id ascending.
pub fn rank_order(a_id: &str, a_score: f64, b_id: &str, b_score: f64) -> Ordering {
    b_score.total_cmp(&a_score).then_with(|| a_id.cmp(b_id))
}

fn sort_ranked(list: &mut [(String, f64)]) {
    list.sort_by(|a, b| rank_order(&a.0, a.1, &b.0, b.1));
}

pub fn build_index(corpus: &Corpus, embedder: &Embedder) -> Result<VectorIndex, RetrievalError> {
    if corpus.is_empty() {
        return Err(RetrievalError::EmptyCorpus);
    }
    let texts: Vec<String> = corpus.documents().iter().map(Document::indexed_text).collect();
    let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
    let vectors = embedder.embed_batch(&refs)?;
    let entries = corpus
        .documents()
        .iter()
        .zip(vectors)
        .map(|(d, v)| (d.doc_id.clone(), v))
        .collect();
    VectorIndex::from_entries(embedder.dim(), entries)
}

pub fn dense_topm(index: &VectorIndex, embedder: &Embedder, query: &str, m: usize) -> Result<Vec<(String, f64)>, RetrievalError> {
    if query.trim().is_empty() {
        return Err(RetrievalError::EmptyQuery);
    }
    let qv = embedder.embed(query)?;
    Ok(index.nearest(&qv, m))
}

/// Unique normalized terms of `text`.
pub fn lexical_terms(text: &str) -> HashSet<String> {
    normalize_answer(text).split(' ').filter(|t| !t.is_empty()).map(str::to_owned).collect()
}

/// Fraction of unique query terms present in the document. 0 when the query
/// has no terms.
pub fn lexical_overlap(query_terms: &HashSet<String>, doc: &Document) -> f64 {
    if query_terms.is_empty() {
        return 0.0;
    }
    let doc_terms = lexical_terms(&doc.indexed_text());
    let hits = query_terms.iter().filter(|t| doc_terms.contains(*t)).count();
    hits as f64 / query_terms.len() as f64
}

#[derive(Debug, Clone)]
pub enum Reranker {
    Lexical,
    Remote {
        endpoint: String,
        client: reqwest::blocking::Client,
    },
}

#[derive(Serialize)]
struct RerankDoc<'a> {
    doc_id: &'a str,
    text: String,
}

#[derive(Serialize)]
struct RerankRequest<'a> {
    query: &'a str,
    documents: Vec<RerankDoc<'a>>,
}

#[derive(Deserialize)]
struct RerankResponse {
    scores: Vec<f64>,
}

impl Reranker {
    pub fn from_config(config: &PipelineConfig) -> Result<Self, RetrievalError> {
        Self::with_timeout(config, crate::embedding::DEFAULT_TIMEOUT)
    }

    pub fn with_timeout(config: &PipelineConfig, timeout: Duration) -> Result<Self, RetrievalError> {
        config.validate()?;
        match config.reranker {
            RerankerKind::Lexical => Ok(Self::Lexical),
            RerankerKind::Remote => {
                let client = reqwest::blocking::Client::builder()
                    .timeout(timeout)
                    .build()
                    .map_err(|e| RetrievalError::RerankerUnavailable(e.to_string()))?;
                Ok(Self::Remote {
                    endpoint: config.endpoint.clone().expect("validated"),
                    client,
                })
            }
        }
    }

    pub fn rerank(&self, query: &str, candidates: &[&Document]) -> Result<Vec<(String, f64)>, RetrievalError> {
        if candidates.is_empty() {
            return Err(RetrievalError::NoCandidates);
        }
        let scores = match self {
            Self::Lexical => {
                let q = lexical_terms(query);
                candidates.iter().map(|d| lexical_overlap(&q, d)).collect()
            }
            Self::Remote { endpoint, client } => remote_scores(client, endpoint, query, candidates)?,
        };
        let mut ranked: Vec<(String, f64)> = candidates.iter().map(|d| d.doc_id.clone()).zip(scores).collect();
        sort_ranked(&mut ranked);
        Ok(ranked)
    }
}

fn remote_scores(
    client: &reqwest::blocking::Client,
    endpoint: &str,
    query: &str,
    candidates: &[&Document],
) -> Result<Vec<f64>, RetrievalError> {
    let url = format!("{}/rerank", endpoint.trim_end_matches('/'));
    let body = RerankRequest {
        query,
        documents: candidates
            .iter()
            .map(|d| RerankDoc {
                doc_id: &d.doc_id,
                text: d.indexed_text(),
            })
            .collect(),
    };
    let resp = client
        .post(&url)
        .json(&body)
        .send()
        .map_err(|e| RetrievalError::RerankerUnavailable(e.to_string()))?;
    if !resp.status().is_success() {
        return Err(RetrievalError::RerankerUnavailable(format!("{url} returned {}", resp.status())));
    }
    let parsed: RerankResponse = resp
        .json()
        .map_err(|e| RetrievalError::RerankerUnavailable(format!("bad response body: {e}")))?;
    if parsed.scores.len() != candidates.len() {
        return Err(RetrievalError::RerankerUnavailable(format!(
            "sent {} documents, got {} scores",
            candidates.len(),
            parsed.scores.len()
        )));
    }
    if parsed.scores.iter().any(|s| !s.is_finite()) {
        return Err(RetrievalError::RerankerUnavailable("non-finite score".into()));
    }
    Ok(parsed.scores)
}

/// First `n` code points of `text`.
pub fn make_preview(text: &str, n: usize) -> String {
    match text.char_indices().nth(n) {
        Some((cut, _)) => text[..cut].to_string(),
        None => text.to_string(),
    }
}

/// Output of one pipeline run, with the dense candidates kept for auditing.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub candidates: Vec<(String, f64)>,
    pub results: Vec<SearchResult>,
}

/// Index, corpus, encoders and config bundled for serving queries. Immutable
/// once built and safe to share across threads.
#[derive(Debug, Clone)]
pub struct SearchEngine {
    index: Arc<VectorIndex>,
    corpus: Arc<Corpus>,
    embedder: Embedder,
    reranker: Reranker,
    config: PipelineConfig,
}

impl SearchEngine {
    pub fn new(
        index: VectorIndex,
        corpus: Arc<Corpus>,
        embedder: Embedder,
        config: PipelineConfig,
    ) -> Result<Self, RetrievalError> {
        index.check_against(&corpus)?;
        if index.dim() != embedder.dim() {
            return Err(RetrievalError::IndexMismatch(format!(
                "index dim {} but embedder dim {}",
                index.dim(),
                embedder.dim()
            )));
        }
        let reranker = Reranker::from_config(&config)?;
        Ok(Self {
            index: Arc::new(index),
            corpus,
            embedder,
            reranker,
            config,
        })
    }

    /// Builds the index in memory with the given embedder.
    pub fn build(corpus: Arc<Corpus>, embedder_config: EmbedderConfig, config: PipelineConfig) -> Result<Self, RetrievalError> {
        let embedder = Embedder::new(embedder_config)?;
        let index = build_index(&corpus, &embedder)?;
        Self::new(index, corpus, embedder, config)
    }

    pub fn index(&self) -> &VectorIndex {
        &self.index
    }

    pub fn corpus(&self) -> &Corpus {
        &self.corpus
    }

    pub fn corpus_arc(&self) -> Arc<Corpus> {
        Arc::clone(&self.corpus)
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn dense_topm(&self, query: &str, m: usize) -> Result<Vec<(String, f64)>, RetrievalError> {
        dense_topm(&self.index, &self.embedder, query, m)
    }

    pub fn rerank(&self, query: &str, candidates: &[&Document]) -> Result<Vec<(String, f64)>, RetrievalError> {
        self.reranker.rerank(query, candidates)
    }

    pub fn search(&self, query: &str) -> Result<Vec<SearchResult>, RetrievalError> {
        Ok(self.search_detailed(query, self.config.top_k)?.results)
    }

    /// Dense top-M, rerank, cut to `top_k` (capped at the configured top_m).
    pub fn search_detailed(&self, query: &str, top_k: usize) -> Result<PipelineOutput, RetrievalError> {
        let candidates = self.dense_topm(query, self.config.top_m)?;
        let docs: Vec<&Document> = candidates
            .iter()
            .map(|(id, _)| self.corpus.get(id).expect("index checked against corpus"))
            .collect();
        let ranked = self.rerank(query, &docs)?;
        let results = ranked
            .into_iter()
            .take(top_k.min(self.config.top_m))
            .map(|(doc_id, score)| {
                let doc = self.corpus.get(&doc_id).expect("candidate from corpus");
                let source = if doc.text.is_empty() { &doc.title } else { &doc.text };
                SearchResult {
                    preview: make_preview(source, self.config.preview_chars),
                    title: doc.title.clone(),
                    doc_id,
                    score,
                }
            })
            .collect();
        Ok(PipelineOutput { candidates, results })
    }
}

/// Free-function form of the pipeline.
pub fn search_pipeline(engine: &SearchEngine, query: &str) -> Result<Vec<SearchResult>, RetrievalError> {
    engine.search(query)
}
