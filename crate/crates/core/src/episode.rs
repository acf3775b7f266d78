//! Agent episodes: alternate policy turns with tool execution until the
//! policy answers, the turn cap is hit, or the transcript outgrows the
//! context budget.

use std::collections::HashMap;
use std::fmt;
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::corpus::{Corpus, QaSample};
use crate::embedding::fnv1a64;
use crate::protocol::{escape_body, parse_assistant_message, render_answer, render_result, render_tool_call, Parsed, SegmentKind, Tag, ToolCall};
use crate::rewards::RewardInputs;
use crate::server::{SearchService, TOOL_ENDPOINTS};

pub const DEFAULT_MAX_TURNS: usize = 16;
pub const SHORT_CONTEXT_TOKENS: usize = 8192;
pub const LONG_CONTEXT_TOKENS: usize = 40960;
pub const MIN_CONTEXT_TOKENS: usize = 256;

pub const MALFORMED_NOTICE: &str = "ERROR: malformed tool call";
pub const ERROR_PREFIX: &str = "ERROR:";

#[derive(Debug, thiserror::Error)]
pub enum EpisodeError {
    #[error("tool registry lacks {0:?}")]
    MissingTool(&'static str),
    #[error("invalid episode config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, thiserror::Error)]
pub enum PolicyError {
    #[error("policy endpoint unavailable: {0}")]
    RemoteUnavailable(String),
    #[error("policy failed: {0}")]
    Failed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenCounter {
    #[default]
    CharsDiv4,
    WhitespaceWords,
}

/// Approximate token count: `ceil(code_points / 4)` or the number of
/// whitespace-separated words.
pub fn count_tokens(text: &str, counter: TokenCounter) -> usize {
    match counter {
        TokenCounter::CharsDiv4 => text.chars().count().div_ceil(4),
        TokenCounter::WhitespaceWords => text.split_whitespace().count(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpisodeConfig {
    pub max_turns: usize,
    pub context_budget_tokens: usize,
    pub stage: u8,
    pub token_counter: TokenCounter,
    /// Set when the budget was chosen explicitly rather than from the stage
    /// preset. Lets stage 3 run below the long-context preset.
    pub budget_overridden: bool,
}

impl EpisodeConfig {
    /// Stages 1 and 2 get the 8K preset, stage 3 the 40K one.
    pub fn for_stage(stage: u8) -> Self {
        Self {
            max_turns: DEFAULT_MAX_TURNS,
            context_budget_tokens: if stage >= 3 { LONG_CONTEXT_TOKENS } else { SHORT_CONTEXT_TOKENS },
            stage,
            token_counter: TokenCounter::CharsDiv4,
            budget_overridden: false,
        }
    }

    pub fn with_budget(mut self, tokens: usize) -> Self {
        self.context_budget_tokens = tokens;
        self.budget_overridden = true;
        self
    }

    pub fn validate(&self) -> Result<(), EpisodeError> {
        if self.max_turns < 1 {
            return Err(EpisodeError::InvalidConfig("max_turns must be >= 1".into()));
        }
        if self.context_budget_tokens < MIN_CONTEXT_TOKENS {
            return Err(EpisodeError::InvalidConfig(format!(
                "context budget {} below {MIN_CONTEXT_TOKENS}",
                self.context_budget_tokens
            )));
        }
        if !(1..=3).contains(&self.stage) {
            return Err(EpisodeError::InvalidConfig(format!("stage {} not in 1..=3", self.stage)));
        }
        if self.stage == 3 && self.context_budget_tokens < LONG_CONTEXT_TOKENS && !self.budget_overridden {
            return Err(EpisodeError::InvalidConfig(format!(
                "stage 3 needs a budget of at least {LONG_CONTEXT_TOKENS} tokens"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Answered,
    MaxTurns,
    BudgetExceeded,
    PolicyError,
}

impl Termination {
    pub const ALL: [Termination; 4] = [Self::Answered, Self::MaxTurns, Self::BudgetExceeded, Self::PolicyError];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Answered => "answered",
            Self::MaxTurns => "max_turns",
            Self::BudgetExceeded => "budget_exceeded",
            Self::PolicyError => "policy_error",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.as_str() == s)
    }
}

impl fmt::Display for Termination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Question,
    Policy,
    Result,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Question => "question",
            Self::Policy => "policy",
            Self::Result => "result",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEvent {
    pub turn: usize,
    pub kind: EventKind,
    pub payload: String,
}

impl TranscriptEvent {
    /// The text this event contributes to the transcript a policy sees.
    pub fn render(&self) -> String {
        match self.kind {
            EventKind::Question => format!("Question: {}", escape_body(&self.payload)),
            EventKind::Policy => self.payload.clone(),
            EventKind::Result => render_result(&self.payload),
        }
    }
}

pub fn render_transcript(events: &[TranscriptEvent]) -> String {
    events.iter().map(TranscriptEvent::render).collect::<Vec<_>>().join("\n")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    pub sample_id: String,
    pub events: Vec<TranscriptEvent>,
    pub tool_calls_total: usize,
    pub tool_calls_failed: usize,
    pub final_answer: Option<String>,
    pub termination: Termination,
}

impl Episode {
    /// Derives counters and the final answer from the event list. Used both
    /// by the runner and when replaying a trace.
    pub fn from_events(sample_id: impl Into<String>, events: Vec<TranscriptEvent>, termination: Termination) -> Self {
        let results = events.iter().filter(|e| e.kind == EventKind::Result);
        let tool_calls_total = results.clone().count();
        let tool_calls_failed = results.filter(|e| e.payload.starts_with(ERROR_PREFIX)).count();
        let final_answer = match termination {
            Termination::Answered => events
                .iter()
                .rev()
                .find(|e| e.kind == EventKind::Policy)
                .and_then(|e| parse_assistant_message(&e.payload).answer().map(str::to_owned)),
            _ => None,
        };
        Self {
            sample_id: sample_id.into(),
            events,
            tool_calls_total,
            tool_calls_failed,
            final_answer,
            termination,
        }
    }

    pub fn policy_messages(&self) -> impl Iterator<Item = &str> {
        self.events.iter().filter(|e| e.kind == EventKind::Policy).map(|e| e.payload.as_str())
    }

    pub fn policy_turns(&self) -> usize {
        self.policy_messages().count()
    }

    pub fn reward_inputs(&self) -> RewardInputs {
        let mut policy_turns = 0;
        let mut clean_turns = 0;
        let mut final_turn_text = String::new();
        for m in self.policy_messages() {
            policy_turns += 1;
            if parse_assistant_message(m).is_clean() {
                clean_turns += 1;
            }
            final_turn_text = m.to_string();
        }
        RewardInputs {
            final_answer: self.final_answer.clone(),
            tool_calls_total: self.tool_calls_total,
            tool_calls_failed: self.tool_calls_failed,
            policy_turns,
            clean_turns,
            final_turn_text,
        }
    }
}

/// Anything that can produce the next assistant message from a transcript.
pub trait Policy {
    fn next_message(&mut self, transcript: &str) -> Result<String, PolicyError>;
}

impl<F> Policy for F
where
    F: FnMut(&str) -> Result<String, PolicyError>,
{
    fn next_message(&mut self, transcript: &str) -> Result<String, PolicyError> {
        self(transcript)
    }
}

/// Executes tool calls. `Err` carries a short error string that becomes an
/// `ERROR: ...` result payload.
pub trait ToolRegistry: Sync {
    fn has_tool(&self, name: &str) -> bool;
    fn call(&self, call: &ToolCall) -> Result<String, String>;
}

/// In-process tools backed by a [`SearchService`].
#[derive(Debug, Clone)]
pub struct LocalTools {
    service: SearchService,
}

impl LocalTools {
    pub fn new(service: SearchService) -> Self {
        Self { service }
    }

    pub fn service(&self) -> &SearchService {
        &self.service
    }
}

impl ToolRegistry for LocalTools {
    fn has_tool(&self, name: &str) -> bool {
        TOOL_ENDPOINTS.iter().any(|(n, _)| *n == name)
    }

    fn call(&self, call: &ToolCall) -> Result<String, String> {
        let args = Value::Object(call.args.clone());
        let body = match call.name.as_str() {
            "websearch" => self.service.search_json(&args).map(|r| serde_json::to_string(&r)),
            "scrape" => self.service.scrape_json(&args).map(|d| serde_json::to_string(&d)),
            other => return Err(format!("unknown tool {other}")),
        };
        match body {
            Ok(json) => Ok(json.expect("response serializes")),
            Err(e) => Err(e.code().to_string()),
        }
    }
}

/// Tools served by a running search server.
#[derive(Debug, Clone)]
pub struct HttpTools {
    base_url: String,
    client: reqwest::blocking::Client,
}

impl HttpTools {
    pub fn new(base_url: impl Into<String>, timeout: Duration) -> Result<Self, reqwest::Error> {
        Ok(Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            client: reqwest::blocking::Client::builder().timeout(timeout).build()?,
        })
    }
}

impl ToolRegistry for HttpTools {
    fn has_tool(&self, name: &str) -> bool {
        TOOL_ENDPOINTS.iter().any(|(n, _)| *n == name)
    }

    fn call(&self, call: &ToolCall) -> Result<String, String> {
        let Some((_, path)) = TOOL_ENDPOINTS.iter().find(|(n, _)| *n == call.name) else {
            return Err(format!("unknown tool {}", call.name));
        };
        let resp = self
            .client
            .post(format!("{}{path}", self.base_url))
            .json(&call.args)
            .send()
            .map_err(|e| format!("unavailable ({e})"))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| format!("unavailable ({e})"))?;
        if status.is_success() {
            return Ok(text);
        }
        let code = serde_json::from_str::<Value>(&text)
            .ok()
            .and_then(|v| v.get("error").and_then(Value::as_str).map(str::to_owned))
            .unwrap_or_else(|| format!("http {}", status.as_u16()));
        Err(code)
    }
}

enum Action<'a> {
    Call(&'a ToolCall),
    Malformed,
    Answer,
}

/// Tool calls, malformed regions and answers in textual order.
fn actions(parsed: &Parsed) -> Vec<Action<'_>> {
    let mut out: Vec<(usize, Action<'_>)> = Vec::new();
    for s in &parsed.segments {
        match &s.kind {
            SegmentKind::ToolCall(c) => out.push((s.span.start, Action::Call(c))),
            SegmentKind::Answer(_) => out.push((s.span.start, Action::Answer)),
            _ => {}
        }
    }
    out.extend(parsed.errors.iter().map(|e| (e.span.start, Action::Malformed)));
    out.sort_by_key(|(at, _)| *at);
    out.into_iter().map(|(_, a)| a).collect()
}

/// Runs one episode. Policy failures end the episode with
/// [`Termination::PolicyError`]; they are never returned as `Err`.
pub fn run_episode(
    policy: &mut dyn Policy,
    tools: &dyn ToolRegistry,
    sample: &QaSample,
    config: &EpisodeConfig,
) -> Result<Episode, EpisodeError> {
    config.validate()?;
    for (name, _) in TOOL_ENDPOINTS {
        if !tools.has_tool(name) {
            return Err(EpisodeError::MissingTool(name));
        }
    }

    let question = TranscriptEvent {
        turn: 0,
        kind: EventKind::Question,
        payload: sample.question.clone(),
    };
    let mut transcript = question.render();
    let mut events = vec![question];
    fn push(events: &mut Vec<TranscriptEvent>, transcript: &mut String, ev: TranscriptEvent) {
        transcript.push('\n');
        transcript.push_str(&ev.render());
        events.push(ev);
    }

    let mut turn = 0;
    let termination = loop {
        if turn >= config.max_turns {
            break Termination::MaxTurns;
        }
        if count_tokens(&transcript, config.token_counter) > config.context_budget_tokens {
            break Termination::BudgetExceeded;
        }
        let message = match policy.next_message(&transcript) {
            Ok(m) => m,
            Err(e) => {
                tracing::debug!(sample = %sample.sample_id, error = %e, "policy failed");
                break Termination::PolicyError;
            }
        };
        turn += 1;
        let parsed = parse_assistant_message(&message);
        push(
            &mut events,
            &mut transcript,
            TranscriptEvent {
                turn,
                kind: EventKind::Policy,
                payload: message.clone(),
            },
        );
        let mut answered = false;
        for action in actions(&parsed) {
            let payload = match action {
                Action::Answer => {
                    answered = true;
                    break;
                }
                Action::Malformed => MALFORMED_NOTICE.to_string(),
                Action::Call(call) => match tools.call(call) {
                    Ok(body) => body,
                    Err(e) => format!("{ERROR_PREFIX} {e}"),
                },
            };
            push(
                &mut events,
                &mut transcript,
                TranscriptEvent {
                    turn,
                    kind: EventKind::Result,
                    payload,
                },
            );
        }
        if answered {
            break Termination::Answered;
        }
    };
    Ok(Episode::from_events(sample.sample_id.clone(), events, termination))
}

/// Scripted stand-in for a trained agent: per supporting document, search by
/// title then scrape by id; then answer with the gold string.
#[derive(Debug, Clone)]
pub struct OraclePolicy {
    hops: Vec<(String, String)>,
    gold_answer: String,
}

pub fn oracle_policy(sample: &QaSample, corpus: &Corpus) -> OraclePolicy {
    let hops = sample
        .supporting_doc_ids
        .iter()
        .map(|id| {
            let title = corpus.get(id).map(|d| d.title.clone()).unwrap_or_default();
            (id.clone(), title)
        })
        .collect();
    OraclePolicy {
        hops,
        gold_answer: sample.gold_answer.clone(),
    }
}

impl OraclePolicy {
    fn search_found(transcript: &Parsed, doc_id: &str) -> bool {
        let last_result = transcript.segments.iter().rev().find_map(|s| match &s.kind {
            SegmentKind::ToolResult(r) => Some(r),
            _ => None,
        });
        let Some(Ok(v)) = last_result.map(|r| serde_json::from_str::<Value>(r)) else {
            return false;
        };
        v.get("results")
            .and_then(Value::as_array)
            .is_some_and(|rs| rs.iter().any(|r| r.get("doc_id").and_then(Value::as_str) == Some(doc_id)))
    }
}

impl Policy for OraclePolicy {
    fn next_message(&mut self, transcript: &str) -> Result<String, PolicyError> {
        let parsed = parse_assistant_message(transcript);
        let done = parsed.tool_calls().count();
        if done >= 2 * self.hops.len() {
            return Ok(render_answer(&self.gold_answer));
        }
        let (doc_id, title) = &self.hops[done / 2];
        let call = if done % 2 == 0 {
            let query = if title.trim().is_empty() { doc_id } else { title };
            ToolCall::new("websearch", object(json!({ "query": query })))
        } else {
            if !Self::search_found(&parsed, doc_id) {
                tracing::debug!(doc_id, "search missed supporting doc, scraping by id");
            }
            ToolCall::new("scrape", object(json!({ "doc_id": doc_id })))
        };
        Ok(render_tool_call(&call))
    }
}

fn object(v: Value) -> Map<String, Value> {
    match v {
        Value::Object(m) => m,
        _ => unreachable!("literal object"),
    }
}

const RANDOM_WORDS: &[&str] = &[
    "river", "history", "born", "capital", "album", "founded", "city", "team", "war", "film", "author", "company", "island",
    "language", "president", "season", "county", "station", "museum", "record", "church", "league", "award", "mountain",
];

/// Noise baseline: well-formed but meaningless tool calls, answering with
/// probability 0.1 per turn. The draw depends only on the seed and the
/// transcript.
#[derive(Debug, Clone)]
pub struct RandomPolicy {
    seed: u64,
    tool_names: Vec<String>,
}

pub const RANDOM_ANSWER_PROB: f64 = 0.1;

pub fn random_policy(seed: u64, tool_names: &[&str]) -> RandomPolicy {
    RandomPolicy {
        seed,
        tool_names: tool_names.iter().map(|s| s.to_string()).collect(),
    }
}

fn random_token(rng: &mut ChaCha8Rng, len: usize) -> String {
    const ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyz0123456789";
    (0..len).map(|_| ALPHABET[rng.gen_range(0..ALPHABET.len())] as char).collect()
}

impl Policy for RandomPolicy {
    fn next_message(&mut self, transcript: &str) -> Result<String, PolicyError> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a64(transcript.as_bytes()));
        if self.tool_names.is_empty() || rng.gen_bool(RANDOM_ANSWER_PROB) {
            return Ok(render_answer(&random_token(&mut rng, 8)));
        }
        let name = self.tool_names.choose(&mut rng).expect("non-empty").clone();
        let args = if name == "scrape" {
            json!({ "doc_id": format!("d{}", rng.gen_range(0..10_000)) })
        } else {
            let n = rng.gen_range(1..=4);
            let words: Vec<&str> = (0..n).map(|_| *RANDOM_WORDS.choose(&mut rng).expect("non-empty")).collect();
            json!({ "query": words.join(" ") })
        };
        Ok(render_tool_call(&ToolCall::new(name, object(args))))
    }
}

/// Adapter to an external text generator.
///
/// `POST {endpoint}/generate {"transcript": str, "stop": ["</tool>", "</answer>"]}`
/// answers `{"text": str}`. Generators usually strip the matched stop
/// sequence, so it is re-appended when the text ends inside an open tag.
#[derive(Debug, Clone)]
pub struct RemotePolicy {
    url: String,
    client: reqwest::blocking::Client,
}

pub const STOP_SEQUENCES: [&str; 2] = ["</tool>", "</answer>"];

#[derive(Serialize)]
struct GenerateRequest<'a> {
    transcript: &'a str,
    stop: [&'static str; 2],
}

#[derive(Deserialize)]
struct GenerateResponse {
    text: String,
}

pub fn remote_policy(endpoint: &str, timeout: Duration) -> Result<RemotePolicy, PolicyError> {
    crate::embedding::validate_endpoint(endpoint).map_err(PolicyError::RemoteUnavailable)?;
    let client = reqwest::blocking::Client::builder()
        .timeout(timeout)
        .build()
        .map_err(|e| PolicyError::RemoteUnavailable(e.to_string()))?;
    Ok(RemotePolicy {
        url: format!("{}/generate", endpoint.trim_end_matches('/')),
        client,
    })
}

/// Closes a trailing `<tool>` or `<answer>` the generator left open.
pub fn restore_stop_sequence(text: &str) -> String {
    let last_open = [Tag::Tool, Tag::Answer]
        .into_iter()
        .filter_map(|t| text.rfind(t.open()).map(|at| (at, t)))
        .max_by_key(|(at, _)| *at);
    match last_open {
        Some((at, tag)) if !text[at..].contains(tag.close()) => format!("{text}{}", tag.close()),
        _ => text.to_string(),
    }
}

impl Policy for RemotePolicy {
    fn next_message(&mut self, transcript: &str) -> Result<String, PolicyError> {
        let resp = self
            .client
            .post(&self.url)
            .json(&GenerateRequest {
                transcript,
                stop: STOP_SEQUENCES,
            })
            .send()
            .map_err(|e| PolicyError::RemoteUnavailable(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(PolicyError::RemoteUnavailable(format!("{} returned {}", self.url, resp.status())));
        }
        let body: GenerateResponse = resp.json().map_err(|e| PolicyError::Failed(format!("bad response body: {e}")))?;
        Ok(restore_stop_sequence(&body.text))
    }
}

/// Tool registry that answers from a fixed table; handy in tests.
#[derive(Debug, Clone, Default)]
pub struct StaticTools {
    pub responses: HashMap<String, Result<String, String>>,
}

impl ToolRegistry for StaticTools {
    fn has_tool(&self, name: &str) -> bool {
        TOOL_ENDPOINTS.iter().any(|(n, _)| *n == name)
    }

    fn call(&self, call: &ToolCall) -> Result<String, String> {
        self.responses
            .get(&call.name)
            .cloned()
            .unwrap_or_else(|| Err(format!("unknown tool {}", call.name)))
    }
}
