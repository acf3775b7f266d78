//! Search gym: a local search-engine simulator and training environment for
//! tool-using question-answering agents.
//!
//! - [`corpus`]: JSONL corpus and multi-hop dataset loading, hop-stratified sampling
//! - [`embedding`]: hash and remote text encoders
//! - [`retrieval`]: exact dense top-M, rerank to top-K, previews
//! - [`protocol`]: the `<tool>` / `<result>` / `<answer>` dialect
//! - [`server`]: HTTP `websearch` / `scrape` endpoints
//! - [`episode`]: budgeted agent episodes and reference policies
//! - [`rewards`]: stage-weighted verifiable rewards
//! - [`eval`]: batch runs, reports, trace replay

pub mod corpus;
pub mod embedding;
pub mod episode;
pub mod eval;
pub mod index_file;
pub mod protocol;
pub mod retrieval;
pub mod rewards;
pub mod server;
pub mod synthetic;

pub use corpus::{Corpus, Document, HopMix, QaSample};
pub use embedding::{EmbedderConfig, EmbedderKind, EmbeddingVector};
pub use episode::{Episode, EpisodeConfig, Policy, Termination, TokenCounter, ToolRegistry};
pub use eval::{EvalReport, PolicySpec};
pub use protocol::{ParseError, ParseErrorKind, TaggedSegment, ToolCall};
pub use retrieval::{PipelineConfig, RerankerKind, SearchEngine, SearchResult, VectorIndex};
pub use rewards::{RewardBreakdown, StageWeights};
pub use server::{SearchService, ServerState};
