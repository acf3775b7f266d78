//! Text-to-vector encoders.
//!
//! The hash embedder is a signed feature-hashing bag of words: lowercase,
//! split on non-alphanumeric characters, FNV-1a 64 each word, bucket by
//! `hash % dim`, sign from bit 63, then L2-normalize. It needs no model and
//! is bit-reproducible across platforms.
//!
//! The remote embedder speaks `POST {endpoint}/embed {"texts": [..]}` and
//! expects `{"vectors": [[..]]}` back.

use std::time::Duration;

use serde::{Deserialize, Serialize};

pub const DEFAULT_DIM: usize = 768;
pub const MIN_DIM: usize = 8;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);
pub const REMOTE_BATCH: usize = 64;

#[derive(Debug, thiserror::Error)]
pub enum EmbeddingError {
    #[error("remote service unavailable: {0}")]
    RemoteUnavailable(String),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("invalid embedder config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    values: Vec<f32>,
    normalized: bool,
}

impl EmbeddingVector {
    /// Wraps raw values and L2-normalizes them. All-zero input stays zero and
    /// is flagged unnormalized.
    pub fn normalized_from(mut values: Vec<f32>) -> Self {
        let norm = l2_norm(&values);
        if norm == 0.0 {
            return Self {
                values,
                normalized: false,
            };
        }
        for v in &mut values {
            *v = (f64::from(*v) / norm) as f32;
        }
        Self {
            values,
            normalized: true,
        }
    }

    /// Trusts the caller about normalization. Used when reading an index.
    pub fn from_raw(values: Vec<f32>, normalized: bool) -> Self {
        Self { values, normalized }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|v| *v == 0.0)
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.values)
    }
}

fn l2_norm(values: &[f32]) -> f64 {
    values.iter().map(|v| f64::from(*v) * f64::from(*v)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedderKind {
    Hash,
    Remote,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbedderConfig {
    pub kind: EmbedderKind,
    pub dim: usize,
    pub endpoint: Option<String>,
    pub timeout: Duration,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self::hash(DEFAULT_DIM)
    }
}

impl EmbedderConfig {
    pub fn hash(dim: usize) -> Self {
        Self {
            kind: EmbedderKind::Hash,
            dim,
            endpoint: None,
            timeout: DEFAULT_TIMEOUT,
        }
    }

    pub fn remote(endpoint: impl Into<String>, dim: usize) -> Self {
        Self {
            kind: EmbedderKind::Remote,
            dim,
            endpoint: Some(endpoint.into()),
            timeout: DEFAULT_TIMEOUT,
        }
    }

    pub fn validate(&self) -> Result<(), EmbeddingError> {
        if self.dim < MIN_DIM {
            return Err(EmbeddingError::InvalidConfig(format!("dim {} below {MIN_DIM}", self.dim)));
        }
        match (&self.kind, &self.endpoint) {
            (EmbedderKind::Remote, None) => Err(EmbeddingError::InvalidConfig("remote embedder needs an endpoint".into())),
            (EmbedderKind::Remote, Some(url)) => validate_endpoint(url).map_err(EmbeddingError::InvalidConfig),
            (EmbedderKind::Hash, Some(_)) => Err(EmbeddingError::InvalidConfig("hash embedder takes no endpoint".into())),
            (EmbedderKind::Hash, None) => Ok(()),
        }
    }
}

pub(crate) fn validate_endpoint(url: &str) -> Result<(), String> {
    let parsed = reqwest::Url::parse(url).map_err(|e| format!("bad endpoint {url:?}: {e}"))?;
    match parsed.scheme() {
        "http" | "https" if parsed.host().is_some() => Ok(()),
        _ => Err(format!("endpoint {url:?} must be an http(s) URL with a host")),
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, b| (h ^ u64::from(*b)).wrapping_mul(FNV_PRIME))
}

/// Lowercased alphanumeric runs.
pub fn hash_tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

/// Unnormalized signed bucket counts.
pub fn hash_counts(text: &str, dim: usize) -> Vec<f32> {
    let mut acc = vec![0f32; dim];
    for word in hash_tokens(text) {
        let h = fnv1a64(word.as_bytes());
        let bucket = (h % dim as u64) as usize;
        if h >> 63 == 0 {
            acc[bucket] += 1.0;
        } else {
            acc[bucket] -= 1.0;
        }
    }
    acc
}

pub fn hash_embed(text: &str, dim: usize) -> EmbeddingVector {
    EmbeddingVector::normalized_from(hash_counts(text, dim))
}

/// Encoder behind a config. Remote embedders hold a pooled HTTP client.
#[derive(Debug, Clone)]
pub struct Embedder {
    config: EmbedderConfig,
    client: Option<reqwest::blocking::Client>,
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f32>>,
}

impl Embedder {
    pub fn new(config: EmbedderConfig) -> Result<Self, EmbeddingError> {
        config.validate()?;
        let client = match config.kind {
            EmbedderKind::Hash => None,
            EmbedderKind::Remote => Some(
                reqwest::blocking::Client::builder()
                    .timeout(config.timeout)
                    .build()
                    .map_err(|e| EmbeddingError::RemoteUnavailable(e.to_string()))?,
            ),
        };
        Ok(Self { config, client })
    }

    pub fn config(&self) -> &EmbedderConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError> {
        let mut v = self.embed_batch(&[text])?;
        Ok(v.pop().expect("one vector per text"))
    }

    /// Order-preserving. A failure anywhere fails the whole batch.
    pub fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        match self.config.kind {
            EmbedderKind::Hash => Ok(texts.iter().map(|t| hash_embed(t, self.config.dim)).collect()),
            EmbedderKind::Remote => {
                let mut out = Vec::with_capacity(texts.len());
                for chunk in texts.chunks(REMOTE_BATCH) {
                    out.extend(self.remote_batch(chunk)?);
                }
                Ok(out)
            }
        }
    }

    fn remote_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        let client = self.client.as_ref().expect("remote embedder has a client");
        let endpoint = self.config.endpoint.as_deref().expect("validated");
        let url = format!("{}/embed", endpoint.trim_end_matches('/'));
        let resp = client
            .post(&url)
            .json(&EmbedRequest { texts })
            .send()
            .map_err(|e| EmbeddingError::RemoteUnavailable(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(EmbeddingError::RemoteUnavailable(format!("{url} returned {}", resp.status())));
        }
        let body: EmbedResponse = resp
            .json()
            .map_err(|e| EmbeddingError::RemoteUnavailable(format!("bad response body: {e}")))?;
        if body.vectors.len() != texts.len() {
            return Err(EmbeddingError::RemoteUnavailable(format!(
                "asked for {} vectors, got {}",
                texts.len(),
                body.vectors.len()
            )));
        }
        body.vectors
            .into_iter()
            .map(|v| {
                if v.len() != self.config.dim {
                    Err(EmbeddingError::DimensionMismatch {
                        expected: self.config.dim,
                        actual: v.len(),
                    })
                } else {
                    Ok(EmbeddingVector::normalized_from(v))
                }
            })
            .collect()
    }
}

/// Convenience wrapper building a one-off embedder.
pub fn embed(text: &str, config: &EmbedderConfig) -> Result<EmbeddingVector, EmbeddingError> {
    Embedder::new(config.clone())?.embed(text)
}

pub fn embed_batch(texts: &[&str], config: &EmbedderConfig) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
    Embedder::new(config.clone())?.embed_batch(texts)
}

pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, EmbeddingError> {
    if a.dim() != b.dim() {
        return Err(EmbeddingError::DimensionMismatch {
            expected: a.dim(),
            actual: b.dim(),
        });
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(EmbeddingError::ZeroVector);
    }
    let value = dot(a.values(), b.values()) / (na * nb);
    Ok(value.clamp(-1.0, 1.0))
}

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn empty_text_is_zero_and_unnormalized() {
        let v = hash_embed("", 16);
        assert_eq!(v.dim(), 16);
        assert!(v.is_zero());
        assert!(!v.is_normalized());
    }

    #[test]
    fn repeated_word_same_direction() {
        let a = hash_embed("apple apple", 64);
        let b = hash_embed("apple", 64);
        assert!((cosine(&a, &b).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn deterministic() {
        let a = hash_embed("apple", DEFAULT_DIM);
        let b = hash_embed("apple", DEFAULT_DIM);
        assert_eq!(a.values(), b.values());
    }

    #[test]
    fn case_and_punctuation_ignored() {
        assert_eq!(hash_embed("Red, FOX!", 32), hash_embed("red fox", 32));
    }

    #[test]
    fn cosine_identity_and_orthogonality() {
        let v = hash_embed("the quick brown fox", 128);
        assert!((cosine(&v, &v).unwrap() - 1.0).abs() < 1e-9);
        let mut e0 = vec![0f32; 8];
        e0[0] = 1.0;
        let mut e1 = vec![0f32; 8];
        e1[1] = 1.0;
        let (e0, e1) = (EmbeddingVector::normalized_from(e0), EmbeddingVector::normalized_from(e1));
        assert_eq!(cosine(&e0, &e1).unwrap(), 0.0);
    }

    #[test]
    fn cosine_errors() {
        let a = hash_embed("x", 8);
        let b = hash_embed("x", 16);
        assert!(matches!(cosine(&a, &b), Err(EmbeddingError::DimensionMismatch { .. })));
        let z = hash_embed("", 8);
        assert!(matches!(cosine(&a, &z), Err(EmbeddingError::ZeroVector)));
    }

    #[test]
    fn config_validation() {
        assert!(EmbedderConfig::hash(4).validate().is_err());
        assert!(EmbedderConfig::hash(8).validate().is_ok());
        let mut remote = EmbedderConfig::remote("http://127.0.0.1:9", 16);
        assert!(remote.validate().is_ok());
        remote.endpoint = Some("not a url".into());
        assert!(remote.validate().is_err());
        remote.endpoint = None;
        assert!(remote.validate().is_err());
    }

    #[test]
    fn unreachable_remote() {
        let mut cfg = EmbedderConfig::remote("http://127.0.0.1:1", 16);
        cfg.timeout = Duration::from_secs(2);
        let err = embed("hello", &cfg).unwrap_err();
        assert!(matches!(err, EmbeddingError::RemoteUnavailable(_)));
    }
}
