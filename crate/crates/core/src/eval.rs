//! Batch evaluation: run one episode per sample, aggregate a report, write
//! and replay JSONL traces.
//!
//! A trace is one JSON object per line, `{"turn": int, "kind": str,
//! "payload": str}`. Each episode is framed by a `start` line whose payload
//! is the sample_id and an `end` line whose payload is the termination
//! cause; the lines between are the episode's transcript events.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, QaSample};
use crate::episode::{
    oracle_policy, random_policy, remote_policy, run_episode, Episode, EpisodeConfig, EpisodeError, EventKind, Policy, PolicyError,
    Termination, ToolRegistry, TranscriptEvent,
};
use crate::rewards::{stage_reward, RewardBreakdown, RewardError, StageWeights};
use crate::server::TOOL_ENDPOINTS;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Episode(#[from] EpisodeError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error("trace line {line}: {detail}")]
    Trace { line: usize, detail: String },
    #[error("trace and dataset disagree: {0}")]
    Mismatch(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("thread pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum PolicySpec {
    Oracle,
    Random { seed: u64 },
    Remote { endpoint: String, timeout: Duration },
}

/// Metric summary of a batch. Means over zero samples are `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_samples: usize,
    pub accuracy: Option<f64>,
    pub mean_total_reward: Option<f64>,
    pub mean_tool_calls: Option<f64>,
    pub per_hop_accuracy: BTreeMap<String, f64>,
    pub termination_histogram: BTreeMap<String, usize>,
}

#[derive(Debug, Clone)]
pub struct BatchOutput {
    pub episodes: Vec<Episode>,
    pub rewards: Vec<RewardBreakdown>,
    pub report: EvalReport,
}

/// Sums in slice order so replays reproduce the same bits.
pub fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let mut n = 0usize;
    let mut sum = 0.0;
    for v in values {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

pub fn build_report(samples: &[QaSample], episodes: &[Episode], rewards: &[RewardBreakdown]) -> EvalReport {
    let n = samples.len();
    let correct = |i: usize| rewards[i].correctness == 1.0 && episodes[i].termination == Termination::Answered;
    let accuracy = mean((0..n).map(|i| if correct(i) { 1.0 } else { 0.0 }));
    let mut per_hop: BTreeMap<u8, (usize, usize)> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        let e = per_hop.entry(s.hop_count).or_default();
        e.1 += 1;
        if correct(i) {
            e.0 += 1;
        }
    }
    let mut termination_histogram: BTreeMap<String, usize> = Termination::ALL.iter().map(|t| (t.as_str().to_string(), 0)).collect();
    for e in episodes {
        *termination_histogram.get_mut(e.termination.as_str()).expect("all causes present") += 1;
    }
    EvalReport {
        n_samples: n,
        accuracy,
        mean_total_reward: mean(rewards.iter().map(|r| r.total)),
        mean_tool_calls: mean(episodes.iter().map(|e| e.tool_calls_total as f64)),
        per_hop_accuracy: per_hop
            .into_iter()
            .map(|(h, (ok, total))| (h.to_string(), ok as f64 / total as f64))
            .collect(),
        termination_histogram,
    }
}

fn make_policy(spec: &PolicySpec, sample: &QaSample, corpus: &Corpus) -> Result<Box<dyn Policy>, PolicyError> {
    Ok(match spec {
        PolicySpec::Oracle => Box::new(oracle_policy(sample, corpus)),
        PolicySpec::Random { seed } => {
            let names: Vec<&str> = TOOL_ENDPOINTS.iter().map(|(n, _)| *n).collect();
            Box::new(random_policy(*seed, &names))
        }
        PolicySpec::Remote { endpoint, timeout } => Box::new(remote_policy(endpoint, *timeout)?),
    })
}

/// A policy that fails on every turn, standing in when construction failed.
struct Broken(String);

impl Policy for Broken {
    fn next_message(&mut self, _: &str) -> Result<String, PolicyError> {
        Err(PolicyError::Failed(self.0.clone()))
    }
}

/// Runs every sample, `parallel` episodes at a time. Output order follows
/// `samples`.
pub fn run_batch(
    samples: &[QaSample],
    corpus: &Corpus,
    tools: &dyn ToolRegistry,
    policy: &PolicySpec,
    config: &EpisodeConfig,
    weights: &StageWeights,
    parallel: usize,
) -> Result<BatchOutput, EvalError> {
    config.validate()?;
    weights.validate()?;
    let run_one = |sample: &QaSample| -> Result<(Episode, RewardBreakdown), EvalError> {
        let mut p = make_policy(policy, sample, corpus).unwrap_or_else(|e| Box::new(Broken(e.to_string())));
        let episode = run_episode(p.as_mut(), tools, sample, config)?;
        let reward = stage_reward(&episode.reward_inputs(), sample, weights)?;
        tracing::debug!(sample = %sample.sample_id, termination = %episode.termination, total = reward.total, "episode done");
        Ok((episode, reward))
    };
    let results: Vec<Result<(Episode, RewardBreakdown), EvalError>> = if parallel <= 1 {
        samples.iter().map(run_one).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(parallel)
            .build()
            .map_err(|e| EvalError::Pool(e.to_string()))?;
        pool.install(|| samples.par_iter().map(run_one).collect())
    };
    let mut episodes = Vec::with_capacity(samples.len());
    let mut rewards = Vec::with_capacity(samples.len());
    for r in results {
        let (e, w) = r?;
        episodes.push(e);
        rewards.push(w);
    }
    let report = build_report(samples, &episodes, &rewards);
    Ok(BatchOutput { episodes, rewards, report })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceLine {
    pub turn: usize,
    pub kind: String,
    pub payload: String,
}

pub fn write_trace(episodes: &[Episode], mut out: impl Write) -> std::io::Result<()> {
    for ep in episodes {
        let mut line = |turn: usize, kind: &str, payload: &str| -> std::io::Result<()> {
            serde_json::to_writer(
                &mut out,
                &TraceLine {
                    turn,
                    kind: kind.to_string(),
                    payload: payload.to_string(),
                },
            )?;
            out.write_all(b"\n")
        };
        line(0, "start", &ep.sample_id)?;
        for ev in &ep.events {
            line(ev.turn, ev.kind.as_str(), &ev.payload)?;
        }
        line(ep.policy_turns(), "end", ep.termination.as_str())?;
    }
    out.flush()
}

pub fn read_trace(input: impl BufRead) -> Result<Vec<Episode>, EvalError> {
    let mut episodes = Vec::new();
    let mut open: Option<(String, Vec<TranscriptEvent>)> = None;
    let mut last_line = 0;
    for (i, line) in input.lines().enumerate() {
        let n = i + 1;
        last_line = n;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |detail: String| EvalError::Trace { line: n, detail };
        let t: TraceLine = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        match (t.kind.as_str(), open.as_mut()) {
            ("start", None) => open = Some((t.payload, Vec::new())),
            ("start", Some(_)) => return Err(bad("start inside an open episode".into())),
            ("end", Some(_)) => {
                let termination = Termination::parse(&t.payload).ok_or_else(|| bad(format!("unknown termination {:?}", t.payload)))?;
                let (id, events) = open.take().expect("matched Some");
                episodes.push(Episode::from_events(id, events, termination));
            }
            (kind, Some((_, events))) => {
                let kind = match kind {
                    "question" => EventKind::Question,
                    "policy" => EventKind::Policy,
                    "result" => EventKind::Result,
                    other => return Err(bad(format!("unknown event kind {other:?}"))),
                };
                events.push(TranscriptEvent {
                    turn: t.turn,
                    kind,
                    payload: t.payload,
                });
            }
            (_, None) => return Err(bad("event outside an episode".into())),
        }
    }
    if open.is_some() {
        return Err(EvalError::Trace {
            line: last_line,
            detail: "trace ends inside an episode".into(),
        });
    }
    Ok(episodes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub sample_id: String,
    #[serde(flatten)]
    pub reward: RewardBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub n: usize,
    pub mean_correctness: Option<f64>,
    pub mean_tool_execution: Option<f64>,
    pub mean_format_adherence: Option<f64>,
    pub mean_xml_compliance: Option<f64>,
    pub mean_step_penalty: Option<f64>,
    pub mean_total: Option<f64>,
}

impl Aggregate {
    pub fn of(rewards: &[RewardBreakdown]) -> Self {
        Self {
            n: rewards.len(),
            mean_correctness: mean(rewards.iter().map(|r| r.correctness)),
            mean_tool_execution: mean(rewards.iter().map(|r| r.tool_execution)),
            mean_format_adherence: mean(rewards.iter().map(|r| r.format_adherence)),
            mean_xml_compliance: mean(rewards.iter().map(|r| r.xml_compliance)),
            mean_step_penalty: mean(rewards.iter().map(|r| r.step_penalty)),
            mean_total: mean(rewards.iter().map(|r| r.total)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreOutput {
    pub rows: Vec<ScoreRow>,
    pub aggregate: Aggregate,
}

/// Re-scores replayed episodes against the dataset.
pub fn score_episodes(episodes: &[Episode], samples: &[QaSample], weights: &StageWeights) -> Result<ScoreOutput, EvalError> {
    weights.validate()?;
    let by_id: HashMap<&str, &QaSample> = samples.iter().map(|s| (s.sample_id.as_str(), s)).collect();
    let mut rows = Vec::with_capacity(episodes.len());
    for ep in episodes {
        let sample = by_id
            .get(ep.sample_id.as_str())
            .ok_or_else(|| EvalError::Mismatch(format!("sample {:?} is not in the dataset", ep.sample_id)))?;
        rows.push(ScoreRow {
            sample_id: ep.sample_id.clone(),
            reward: stage_reward(&ep.reward_inputs(), sample, weights)?,
        });
    }
    let rewards: Vec<RewardBreakdown> = rows.iter().map(|r| r.reward).collect();
    Ok(ScoreOutput {
        aggregate: Aggregate::of(&rewards),
        rows,
    })
}

/// JSON lines: one row per episode, then `{"aggregate": {...}}`.
pub fn write_score(output: &ScoreOutput, mut out: impl Write) -> std::io::Result<()> {
    for row in &output.rows {
        serde_json::to_writer(&mut out, row)?;
        out.write_all(b"\n")?;
    }
    serde_json::to_writer(&mut out, &serde_json::json!({ "aggregate": output.aggregate }))?;
    out.write_all(b"\n")?;
    out.flush()
}
