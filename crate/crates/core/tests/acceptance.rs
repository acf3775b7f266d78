//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::HashSet;
use std::io::Cursor;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::{json, Map, Value};

use searchgym_core::corpus::{sample_by_hops, Corpus, Document, HopMix, QaSample};
use searchgym_core::episode::{count_tokens, oracle_policy, random_policy, run_episode, LocalTools, PolicyError};
use searchgym_core::eval::{read_trace, run_batch, score_episodes, write_trace, Aggregate, BatchOutput};
use searchgym_core::protocol::{parse_assistant_message, render_tool_call, SegmentKind, ToolCall};
use searchgym_core::rewards::{stage_reward, RewardInputs};
use searchgym_core::server::spawn_server;
use searchgym_core::synthetic::generate;
use searchgym_core::{
    EmbedderConfig, Episode, EpisodeConfig, PipelineConfig, PolicySpec, SearchEngine, SearchService, ServerState, StageWeights,
    TokenCounter,
};

struct Outcome {
    passed: bool,
    detail: String,
}

fn pass(detail: impl Into<String>) -> Outcome {
    Outcome {
        passed: true,
        detail: detail.into(),
    }
}

fn fail(detail: impl Into<String>) -> Outcome {
    Outcome {
        passed: false,
        detail: detail.into(),
    }
}

fn check_time(outcome: Outcome, elapsed: Duration, limit: Option<Duration>) -> Outcome {
    match limit {
        Some(l) if elapsed >= l && outcome.passed => fail(format!("{} but took {:.1}s (limit {}s)", outcome.detail, elapsed.as_secs_f64(), l.as_secs())),
        _ => outcome,
    }
}

fn local_service(corpus: Arc<Corpus>, config: PipelineConfig) -> SearchService {
    let engine = SearchEngine::build(corpus, EmbedderConfig::default(), config).expect("engine builds");
    SearchService::new(engine, 512)
}

// ---------------------------------------------------------------------------

fn pipeline_shape() -> Outcome {
    let set = generate(5000, 0, 1);
    let corpus = Arc::new(set.corpus);
    let service = local_service(corpus.clone(), PipelineConfig::default());
    let engine = service.engine().clone();
    let server = spawn_server("127.0.0.1:0".parse().unwrap(), ServerState::ready(service)).expect("server binds");
    let url = format!("{}/search", server.url());

    let vocab: Vec<String> = corpus
        .documents()
        .iter()
        .take(400)
        .flat_map(|d| d.title.split(' ').chain(d.text.split(' ').take(5)).map(|w| w.trim_end_matches('.').to_string()))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    let client = reqwest::blocking::Client::new();
    let mut violations = Vec::new();
    let mut max_results = 0;
    let mut max_candidates = 0;
    for q in 0..1000 {
        let n = rng.gen_range(1..=6);
        let query: Vec<String> = (0..n)
            .map(|_| {
                if rng.gen_bool(0.8) {
                    vocab.choose(&mut rng).unwrap().clone()
                } else {
                    (0..rng.gen_range(1..10)).map(|_| rng.gen_range(b'a'..=b'z') as char).collect()
                }
            })
            .collect();
        let query = query.join(" ");
        let resp: Value = match client.post(&url).json(&json!({ "query": query })).send().and_then(|r| r.json()) {
            Ok(v) => v,
            Err(e) => return fail(format!("query {q}: {e}")),
        };
        let results = resp["results"].as_array().cloned().unwrap_or_default();
        max_results = max_results.max(results.len());
        if results.len() > 10 || results.is_empty() {
            violations.push(format!("query {q}: {} results", results.len()));
        }
        for r in &results {
            let id = r["doc_id"].as_str().unwrap_or_default();
            let preview = r["preview"].as_str().unwrap_or_default();
            let Some(doc) = corpus.get(id) else {
                violations.push(format!("query {q}: unknown doc {id}"));
                continue;
            };
            let source = if doc.text.is_empty() { &doc.title } else { &doc.text };
            if preview.chars().count() > 150 || !source.starts_with(preview) {
                violations.push(format!("query {q}: bad preview for {id}"));
            }
        }
        let out = engine.search_detailed(&query, 10).expect("pipeline runs");
        max_candidates = max_candidates.max(out.candidates.len());
        if out.candidates.len() > 15 {
            violations.push(format!("query {q}: {} candidates", out.candidates.len()));
        }
        let served: Vec<&str> = results.iter().filter_map(|r| r["doc_id"].as_str()).collect();
        let direct: Vec<&str> = out.results.iter().map(|r| r.doc_id.as_str()).collect();
        if served != direct {
            violations.push(format!("query {q}: server and pipeline disagree"));
        }
    }
    if violations.is_empty() {
        pass(format!("1000 queries on 5000 docs, max {max_results} results, max {max_candidates} candidates"))
    } else {
        fail(format!("{} violations, first: {}", violations.len(), violations[0]))
    }
}

// ---------------------------------------------------------------------------

/// Reference lexical scoring written out independently of the library.
mod reference {
    use std::collections::HashSet;

    fn is_punct(c: char) -> bool {
        c.is_ascii_punctuation() || "\u{2018}\u{2019}\u{201C}\u{201D}\u{2013}\u{2014}\u{2026}\u{00BF}\u{00A1}".contains(c)
    }

    pub fn terms(text: &str) -> HashSet<String> {
        let lower = text.to_lowercase();
        let cleaned: String = lower.chars().filter(|c| !is_punct(*c)).collect();
        cleaned
            .split_whitespace()
            .filter(|w| *w != "a" && *w != "an" && *w != "the")
            .map(String::from)
            .collect()
    }

    /// (doc_id, score, preview) for the full corpus, best first.
    pub fn rank(docs: &[(String, String, String)], query: &str, k: usize, preview_chars: usize) -> Vec<(String, f64, String)> {
        let q = terms(query);
        let mut scored: Vec<(String, f64, String)> = docs
            .iter()
            .map(|(id, title, text)| {
                let d = terms(&format!("{title}\n{text}"));
                let hits = q.iter().filter(|t| d.contains(*t)).count();
                let score = if q.is_empty() { 0.0 } else { hits as f64 / q.len() as f64 };
                let source = if text.is_empty() { title } else { text };
                (id.clone(), score, source.chars().take(preview_chars).collect())
            })
            .collect();
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
        scored.truncate(k);
        scored
    }
}

fn oracle_equivalence() -> Outcome {
    const WORDS: &[&str] = &[
        "river", "stone", "The", "a", "an", "bridge", "king's", "Queen", "tower", "north", "south", "old", "new", "castle", "fields",
        "Éclair", "naïve", "mountain", "\u{201C}quoted\u{201D}", "lake", "gate", "road", "well-known", "1914", "42", "x", "\u{2014}",
    ];
    let mut checked = 0;
    let mut disagreements = Vec::new();
    for c in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + c);
        let n = rng.gen_range(1..=200);
        let phrase = |rng: &mut ChaCha8Rng, max: usize| -> String {
            let len = rng.gen_range(0..=max);
            let mut s: Vec<String> = (0..len).map(|_| WORDS.choose(rng).unwrap().to_string()).collect();
            if rng.gen_bool(0.2) {
                s.push(".".into());
            }
            s.join(" ")
        };
        let mut raw = Vec::with_capacity(n);
        for i in 0..n {
            let mut title = phrase(&mut rng, 4);
            let text = phrase(&mut rng, 200);
            if title.is_empty() && text.is_empty() {
                title = "untitled".into();
            }
            raw.push((format!("c{c}-{:03}", (i * 7919) % 1000), title, text));
        }
        let corpus = Arc::new(
            Corpus::from_documents(raw.iter().map(|(i, t, x)| Document::new(i.clone(), t.clone(), x.clone())).collect()).unwrap(),
        );
        let config = PipelineConfig {
            top_m: n,
            top_k: n.min(10),
            ..PipelineConfig::default()
        };
        let engine = SearchEngine::build(corpus, EmbedderConfig::hash(64), config).unwrap();
        for _ in 0..20 {
            let query = loop {
                let q = phrase(&mut rng, 5);
                if !q.trim().is_empty() {
                    break q;
                }
            };
            let got: Vec<(String, f64, String)> = match searchgym_core::retrieval::search_pipeline(&engine, &query) {
                Ok(r) => r.into_iter().map(|r| (r.doc_id, r.score, r.preview)).collect(),
                Err(e) => {
                    disagreements.push(format!("corpus {c} query {query:?}: {e}"));
                    continue;
                }
            };
            let want = reference::rank(&raw, &query, n.min(10), 150);
            let same = got.len() == want.len()
                && got.iter().zip(&want).all(|(g, w)| g.0 == w.0 && g.1.to_bits() == w.1.to_bits() && g.2 == w.2);
            if !same {
                disagreements.push(format!("corpus {c} query {query:?}"));
            }
            checked += 1;
        }
    }
    if disagreements.is_empty() {
        pass(format!("50 corpora, {checked} queries, 100% agreement including tie order"))
    } else {
        fail(format!("{} of {checked} disagree, first: {}", disagreements.len(), disagreements[0]))
    }
}

// ---------------------------------------------------------------------------

const TAG_PIECES: &[&[u8]] = &[
    b"<tool>",
    b"</tool>",
    b"<result>",
    b"</result>",
    b"<answer>",
    b"</answer>",
    b"{\"name\":\"websearch\",\"args\":{\"query\":\"q\"}}",
    b"{\"name\":1}",
    b"\"args\":[]",
    b"&lt;",
    b"&amp;",
    b"<",
    b">",
    b"{",
    b"}",
    b"\"",
    b"\\",
    b"\xff\xfe",
    b"\xe2\x82",
];

fn fuzz_input(rng: &mut ChaCha8Rng) -> Vec<u8> {
    let len = rng.gen_range(0..=4096);
    let mut buf = Vec::with_capacity(len);
    if rng.gen_bool(0.5) {
        buf.resize(len, 0);
        rng.fill(&mut buf[..]);
    } else {
        while buf.len() < len {
            if rng.gen_bool(0.4) {
                buf.extend_from_slice(TAG_PIECES.choose(rng).unwrap());
            } else {
                let n = rng.gen_range(1..12);
                buf.extend((0..n).map(|_| rng.gen_range(0x20u8..0x7f)));
            }
        }
        buf.truncate(len);
    }
    buf
}

fn covers(input: &str) -> bool {
    let parsed = parse_assistant_message(input);
    let mut at = 0;
    for seg in &parsed.segments {
        if seg.span.start != at || seg.span.end < seg.span.start || seg.span.end > input.len() {
            return false;
        }
        at = seg.span.end;
    }
    at == input.len()
}

fn random_json(rng: &mut ChaCha8Rng, depth: u32) -> Value {
    match rng.gen_range(0..if depth == 0 { 5 } else { 7 }) {
        0 => Value::Null,
        1 => Value::Bool(rng.gen()),
        2 => Value::from(rng.gen::<i64>()),
        3 => Value::from(rng.gen::<f64>() * 10f64.powi(rng.gen_range(-20..20))),
        4 => Value::String(random_string(rng, 16)),
        5 => Value::Array((0..rng.gen_range(0..4)).map(|_| random_json(rng, depth - 1)).collect()),
        _ => Value::Object((0..rng.gen_range(0..4)).map(|_| (random_string(rng, 8), random_json(rng, depth - 1))).collect()),
    }
}

fn random_string(rng: &mut ChaCha8Rng, max: usize) -> String {
    const SPECIAL: &[&str] = &["<", ">", "</tool>", "<tool>", "&", "\"", "\\", "\n", "é", "\u{1F600}", "\u{0}", "&lt;"];
    let n = rng.gen_range(0..=max);
    (0..n)
        .map(|_| {
            if rng.gen_bool(0.3) {
                SPECIAL.choose(rng).unwrap().to_string()
            } else {
                char::from_u32(rng.gen_range(0x20..0x2000)).unwrap_or('?').to_string()
            }
        })
        .collect()
}

fn protocol_robustness() -> Outcome {
    const ITERS: u64 = 1_000_000;
    const CHUNK: u64 = 10_000;
    let results: Vec<(u64, Duration)> = (0..ITERS / CHUNK)
        .into_par_iter()
        .map(|chunk| {
            let mut rng = ChaCha8Rng::seed_from_u64(3_000_000 + chunk);
            let mut bad = 0u64;
            let mut slowest = Duration::ZERO;
            for _ in 0..CHUNK {
                let bytes = fuzz_input(&mut rng);
                let text = String::from_utf8_lossy(&bytes);
                let started = Instant::now();
                let ok = std::panic::catch_unwind(|| covers(&text)).unwrap_or(false);
                slowest = slowest.max(started.elapsed());
                if !ok {
                    bad += 1;
                }
            }
            (bad, slowest)
        })
        .collect();
    let bad: u64 = results.iter().map(|r| r.0).sum();
    let slowest = results.iter().map(|r| r.1).max().unwrap_or_default();

    let mut rng = ChaCha8Rng::seed_from_u64(4000);
    let mut round_trip_failures = 0;
    for _ in 0..10_000 {
        let name = loop {
            let s = random_string(&mut rng, 12);
            if !s.is_empty() {
                break s;
            }
        };
        let args: Map<String, Value> = (0..rng.gen_range(0..5)).map(|_| (random_string(&mut rng, 8), random_json(&mut rng, 3))).collect();
        let call = ToolCall::new(name, args);
        let parsed = parse_assistant_message(&render_tool_call(&call));
        let ok = parsed.is_clean() && parsed.segments.len() == 1 && parsed.segments[0].kind == SegmentKind::ToolCall(call);
        if !ok {
            round_trip_failures += 1;
        }
    }
    let detail = format!(
        "{ITERS} fuzz inputs, {bad} crash/coverage failures, slowest parse {:.2}ms; 10000 tool calls, {round_trip_failures} round-trip failures",
        slowest.as_secs_f64() * 1e3
    );
    if bad == 0 && round_trip_failures == 0 && slowest < Duration::from_secs(1) {
        pass(detail)
    } else {
        fail(detail)
    }
}

// ---------------------------------------------------------------------------

fn sampler_fidelity() -> Outcome {
    let mut pool = Vec::new();
    for (hop, n) in [(2u8, 7600), (3, 2400), (4, 1300)] {
        for i in 0..n {
            pool.push(QaSample {
                sample_id: format!("h{hop}-{i:05}"),
                question: format!("question {hop} {i}"),
                gold_answer: "x".into(),
                answer_aliases: vec![],
                hop_count: hop,
                supporting_doc_ids: vec!["d".into()],
            });
        }
    }
    pool.shuffle(&mut ChaCha8Rng::seed_from_u64(5));
    // 7000/10325, 2150/10325, 1175/10325 exactly
    let mix = HopMix::from_counts(7000, 2150, 1175).unwrap();
    if mix.total() != 10_325 {
        return fail(format!("total {}", mix.total()));
    }
    let a = sample_by_hops(&pool, &mix, 42).unwrap();
    let b = sample_by_hops(&pool, &mix, 42).unwrap();
    let mut reversed = pool.clone();
    reversed.reverse();
    let c = sample_by_hops(&reversed, &mix, 42).unwrap();
    let counts = [2u8, 3, 4].map(|h| a.iter().filter(|s| s.hop_count == h).count());
    let ids = |v: &[QaSample]| v.iter().map(|s| s.sample_id.clone()).collect::<Vec<_>>();
    let unique: HashSet<&str> = a.iter().map(|s| s.sample_id.as_str()).collect();
    let detail = format!("counts {}/{}/{}", counts[0], counts[1], counts[2]);
    if counts == [7000, 2150, 1175] && ids(&a) == ids(&b) && ids(&a) == ids(&c) && unique.len() == 10_325 {
        pass(format!("{detail}, identical across runs and input orders"))
    } else {
        fail(detail)
    }
}

// ---------------------------------------------------------------------------

fn end_to_end() -> Outcome {
    let set = generate(200, 50, 77);
    let corpus = Arc::new(set.corpus);
    let tools = LocalTools::new(local_service(corpus.clone(), PipelineConfig::default()));
    let weights = StageWeights::for_stage(1).unwrap();
    let config = EpisodeConfig::for_stage(1);
    let oracle = run_batch(&set.samples, &corpus, &tools, &PolicySpec::Oracle, &config, &weights, 1).unwrap();
    let random = run_batch(&set.samples, &corpus, &tools, &PolicySpec::Random { seed: 7 }, &config, &weights, 1).unwrap();
    let (oa, ot, ra) = (oracle.report.accuracy, oracle.report.mean_total_reward, random.report.accuracy);
    let detail = format!("oracle accuracy {oa:?}, oracle stage-1 mean total {ot:?}, random(seed 7) accuracy {ra:?}");
    if oa == Some(1.0) && ot == Some(1.0) && ra.is_some_and(|a| a <= 0.05) {
        pass(detail)
    } else {
        fail(detail)
    }
}

// ---------------------------------------------------------------------------

/// A policy that mixes tool calls, malformed tags, chatter and answers.
fn noisy_policy(seed: u64, gold: String) -> impl FnMut(&str) -> Result<String, PolicyError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    move |_transcript: &str| {
        let mut msg = String::new();
        for _ in 0..rng.gen_range(1..=3) {
            match rng.gen_range(0..10) {
                0..=4 => msg.push_str(&format!(
                    "<tool>{{\"name\":\"websearch\",\"args\":{{\"query\":\"w{}\"}}}}</tool>",
                    rng.gen_range(0..50)
                )),
                5 | 6 => msg.push_str(&format!("<tool>{{\"name\":\"scrape\",\"args\":{{\"doc_id\":\"doc{:05}\"}}}}</tool>", rng.gen_range(0..300))),
                7 => msg.push_str("<tool>{broken</tool>"),
                _ => msg.push_str("thinking out loud. "),
            }
        }
        if rng.gen_bool(0.15) {
            let answer = if rng.gen_bool(0.5) { gold.clone() } else { "nobody".into() };
            msg.push_str(&format!("<answer>{answer}</answer>"));
        }
        Ok(msg)
    }
}

fn stage_weight_semantics() -> Outcome {
    let set = generate(200, 60, 9);
    let corpus = Arc::new(set.corpus);
    let tools = LocalTools::new(local_service(corpus.clone(), PipelineConfig::default()));
    let config = EpisodeConfig::for_stage(1);
    let names = ["websearch", "scrape"];
    let records: Vec<(Episode, QaSample)> = (0..1000u64)
        .into_par_iter()
        .map(|i| {
            let sample = set.samples[i as usize % set.samples.len()].clone();
            let episode = match i % 4 {
                0 => run_episode(&mut oracle_policy(&sample, &corpus), &tools, &sample, &config),
                1 | 2 => run_episode(&mut random_policy(i, &names), &tools, &sample, &config),
                _ => {
                    let mut p = noisy_policy(i, sample.gold_answer.clone());
                    run_episode(&mut p, &tools, &sample, &config)
                }
            }
            .unwrap();
            (episode, sample)
        })
        .collect();

    let w1 = StageWeights::for_stage(1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6000);
    let mut invariance_breaks = 0;
    let mut monotone_breaks = 0;
    let mut decreases = 0;
    let mut saturated = 0;
    for (episode, sample) in &records {
        let base = episode.reward_inputs();
        for stage in [2u8, 3] {
            let w = StageWeights::for_stage(stage).unwrap();
            let reference = stage_reward(&base, sample, &w).unwrap().total.to_bits();
            for _ in 0..8 {
                let mut p = base.clone();
                p.tool_calls_failed = rng.gen_range(0..=p.tool_calls_total);
                p.clean_turns = rng.gen_range(0..=p.policy_turns);
                if stage_reward(&p, sample, &w).unwrap().total.to_bits() != reference {
                    invariance_breaks += 1;
                }
            }
        }
        let with = |answer: &str| RewardInputs {
            final_answer: Some(answer.to_string()),
            ..base.clone()
        };
        let wrong = stage_reward(&with("definitely not it"), sample, &w1).unwrap();
        let right = stage_reward(&with(&sample.gold_answer), sample, &w1).unwrap();
        if wrong.correctness != 0.0 || right.correctness != 1.0 || right.total <= wrong.total {
            monotone_breaks += 1;
        }
        if right.total < wrong.total {
            decreases += 1;
        }
        if wrong.total == 0.0 && right.total == 0.0 {
            saturated += 1;
        }
    }
    let detail = format!(
        "{} runner-built records; stage-2/3 changes under perturbation: {invariance_breaks}; stage-1 non-strict flips: {monotone_breaks} ({saturated} where the step penalty clamps both totals to 0), decreases: {decreases}",
        records.len()
    );
    if invariance_breaks == 0 && monotone_breaks == 0 {
        pass(detail)
    } else {
        fail(detail)
    }
}

// ---------------------------------------------------------------------------

fn budget_enforcement() -> Outcome {
    let set = generate(300, 30, 12);
    let corpus = Arc::new(set.corpus);
    let tools = LocalTools::new(local_service(corpus.clone(), PipelineConfig::default()));
    let mut lines = Vec::new();
    let mut ok = true;
    for budget in [8192usize, 40960] {
        for counter in [TokenCounter::CharsDiv4, TokenCounter::WhitespaceWords] {
            let config = EpisodeConfig {
                max_turns: 10_000,
                token_counter: counter,
                ..EpisodeConfig::for_stage(if budget == 8192 { 1 } else { 3 })
            };
            let results: Vec<(usize, bool, bool)> = (0..500u64)
                .into_par_iter()
                .map(|i| {
                    let sample = &set.samples[i as usize % set.samples.len()];
                    let mut rng = ChaCha8Rng::seed_from_u64(7000 + i);
                    let mut worst = 0usize;
                    let mut policy = |transcript: &str| -> Result<String, PolicyError> {
                        worst = worst.max(count_tokens(transcript, counter));
                        let words = rng.gen_range(10..budget / 6);
                        let mut msg: String = (0..words).map(|k| if k % 9 == 8 { "ab\n" } else { "verbose " }).collect();
                        match rng.gen_range(0..3) {
                            0 => msg.push_str(&format!("<tool>{{\"name\":\"websearch\",\"args\":{{\"query\":\"keeper {i}\"}}}}</tool>")),
                            1 => msg.push_str(&format!("<tool>{{\"name\":\"scrape\",\"args\":{{\"doc_id\":\"doc{:05}\"}}}}</tool>", rng.gen_range(0..300))),
                            _ => {}
                        }
                        Ok(msg)
                    };
                    let ep = run_episode(&mut policy, &tools, sample, &config).unwrap();
                    (worst, worst <= budget, ep.termination == searchgym_core::Termination::BudgetExceeded)
                })
                .collect();
            let worst = results.iter().map(|r| r.0).max().unwrap_or(0);
            let within = results.iter().all(|r| r.1);
            let hit = results.iter().filter(|r| r.2).count();
            ok &= within && hit > 0;
            lines.push(format!("{budget}/{counter:?}: max {worst}, {hit} budget stops"));
        }
    }
    let detail = format!("500 episodes per config; {}", lines.join("; "));
    if ok {
        pass(detail)
    } else {
        fail(detail)
    }
}

// ---------------------------------------------------------------------------

fn aggregates_equal(a: &Aggregate, b: &Aggregate) -> bool {
    let bits = |x: Option<f64>| x.map(f64::to_bits);
    a.n == b.n
        && bits(a.mean_correctness) == bits(b.mean_correctness)
        && bits(a.mean_tool_execution) == bits(b.mean_tool_execution)
        && bits(a.mean_format_adherence) == bits(b.mean_format_adherence)
        && bits(a.mean_xml_compliance) == bits(b.mean_xml_compliance)
        && bits(a.mean_step_penalty) == bits(b.mean_step_penalty)
        && bits(a.mean_total) == bits(b.mean_total)
}

fn replay_determinism() -> Outcome {
    let mut fixtures = 0;
    let mut mismatches = Vec::new();
    for (n_docs, n_samples, seed) in [(60usize, 12usize, 1u64), (200, 50, 2), (120, 33, 3)] {
        let set = generate(n_docs, n_samples, seed);
        let corpus = Arc::new(set.corpus);
        let tools = LocalTools::new(local_service(corpus.clone(), PipelineConfig::default()));
        for stage in 1..=3u8 {
            let weights = StageWeights::for_stage(stage).unwrap();
            let config = EpisodeConfig::for_stage(stage);
            for policy in [PolicySpec::Oracle, PolicySpec::Random { seed: 7 }, PolicySpec::Random { seed: 99 }] {
                for parallel in [1, 4] {
                    fixtures += 1;
                    let BatchOutput { episodes, rewards, report } =
                        run_batch(&set.samples, &corpus, &tools, &policy, &config, &weights, parallel).unwrap();
                    let mut buf = Vec::new();
                    write_trace(&episodes, &mut buf).unwrap();
                    let replayed = read_trace(Cursor::new(&buf)).unwrap();
                    let scored = score_episodes(&replayed, &set.samples, &weights).unwrap();
                    let in_run = Aggregate::of(&rewards);
                    let rows_equal = scored.rows.len() == rewards.len()
                        && scored.rows.iter().zip(&rewards).all(|(r, w)| r.reward.total.to_bits() == w.total.to_bits() && r.reward == *w);
                    let report_equal = report.mean_total_reward.map(f64::to_bits) == scored.aggregate.mean_total.map(f64::to_bits);
                    if replayed != episodes || !rows_equal || !aggregates_equal(&in_run, &scored.aggregate) || !report_equal {
                        mismatches.push(format!("{n_docs}/{n_samples} stage {stage} {policy:?} parallel {parallel}"));
                    }
                }
            }
        }
    }
    if mismatches.is_empty() {
        pass(format!("{fixtures} fixtures, aggregates bit-identical after trace replay"))
    } else {
        fail(format!("{} of {fixtures} fixtures differ, first: {}", mismatches.len(), mismatches[0]))
    }
}

// ---------------------------------------------------------------------------

type Criterion = (&'static str, fn() -> Outcome, Option<Duration>);

fn main() {
    let criteria: [Criterion; 8] = [
        ("pipeline shape conformance", pipeline_shape, Some(Duration::from_secs(60))),
        ("retrieval oracle equivalence", oracle_equivalence, Some(Duration::from_secs(30))),
        ("protocol robustness", protocol_robustness, None),
        ("dataset sampler fidelity", sampler_fidelity, None),
        ("end-to-end oracle run", end_to_end, Some(Duration::from_secs(120))),
        ("stage-weight semantics", stage_weight_semantics, None),
        ("budget enforcement", budget_enforcement, None),
        ("replay determinism", replay_determinism, None),
    ];
    let mut failures = 0;
    for (i, (name, run, limit)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            fail(format!("panicked: {msg}"))
        });
        let elapsed = started.elapsed();
        let outcome = check_time(outcome, elapsed, *limit);
        if !outcome.passed {
            failures += 1;
        }
        println!(
            "{} [{}] {name}: {} ({:.1}s)",
            if outcome.passed { "PASS" } else { "FAIL" },
            i + 1,
            outcome.detail,
            elapsed.as_secs_f64()
        );
    }
    println!("acceptance: {} passed, {failures} failed", criteria.len() - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
