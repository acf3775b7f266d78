use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use tokio::sync::oneshot;
use tracing_subscriber::EnvFilter;

use searchgym_core::corpus::{load_corpus, load_dataset};
use searchgym_core::embedding::{Embedder, DEFAULT_DIM};
use searchgym_core::episode::{HttpTools, LocalTools, ToolRegistry};
use searchgym_core::eval::{read_trace, run_batch, score_episodes, write_score, write_trace};
use searchgym_core::index_file::{load_index, save_index};
use searchgym_core::retrieval::{build_index, DEFAULT_PREVIEW_CHARS, DEFAULT_TOP_K, DEFAULT_TOP_M};
use searchgym_core::server::{serve, DEFAULT_MAX_QUERY_CHARS};
use searchgym_core::{
    EmbedderConfig, EpisodeConfig, PipelineConfig, PolicySpec, RerankerKind, SearchEngine, SearchService, ServerState, StageWeights,
    TokenCounter,
};

#[derive(Parser)]
#[command(name = "searchgym", version, about = "Local search simulator and agent episode runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum EmbedderArg {
    Hash,
    Remote,
}

#[derive(Clone, Copy, ValueEnum)]
enum RerankerArg {
    Lexical,
    Remote,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    Oracle,
    Random,
    Remote,
}

#[derive(Clone, Copy, ValueEnum)]
enum CounterArg {
    CharsDiv4,
    WhitespaceWords,
}

#[derive(clap::Args)]
struct EmbedderOpts {
    #[arg(long, value_enum, default_value = "hash")]
    embedder: EmbedderArg,
    /// Base URL of a remote encoder exposing POST /embed.
    #[arg(long = "embed-endpoint")]
    embed_endpoint: Option<String>,
}

impl EmbedderOpts {
    fn config(&self, dim: usize) -> Result<EmbedderConfig> {
        Ok(match self.embedder {
            EmbedderArg::Hash => EmbedderConfig::hash(dim),
            EmbedderArg::Remote => {
                let url = self.embed_endpoint.as_deref().context("--embedder remote needs --embed-endpoint")?;
                EmbedderConfig::remote(url, dim)
            }
        })
    }
}

#[derive(Subcommand)]
enum Command {
    /// Embed a corpus and write an index file.
    Index {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "hash")]
        embedder: EmbedderArg,
        /// Remote encoder base URL.
        #[arg(long)]
        endpoint: Option<String>,
        #[arg(long, default_value_t = DEFAULT_DIM)]
        dim: usize,
    },
    /// Serve /search, /scrape and /health over HTTP.
    Serve {
        #[arg(long)]
        index: PathBuf,
        /// The corpus the index was built from; scrape and previews read it.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long = "top-m", default_value_t = DEFAULT_TOP_M)]
        top_m: usize,
        #[arg(long = "top-k", default_value_t = DEFAULT_TOP_K)]
        top_k: usize,
        #[arg(long = "preview-chars", default_value_t = DEFAULT_PREVIEW_CHARS)]
        preview_chars: usize,
        #[arg(long, value_enum, default_value = "lexical")]
        reranker: RerankerArg,
        /// Base URL of a remote reranker exposing POST /rerank.
        #[arg(long = "rerank-endpoint")]
        rerank_endpoint: Option<String>,
        #[arg(long = "max-query-chars", default_value_t = DEFAULT_MAX_QUERY_CHARS)]
        max_query_chars: usize,
        #[command(flatten)]
        embed: EmbedderOpts,
    },
    /// Run one episode per sample and print an evaluation report.
    Run {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum)]
        policy: PolicyArg,
        /// Policy endpoint exposing POST /generate.
        #[arg(long)]
        endpoint: Option<String>,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
        stage: u8,
        #[arg(long = "max-turns", default_value_t = searchgym_core::episode::DEFAULT_MAX_TURNS)]
        max_turns: usize,
        /// Context budget in tokens; defaults to 8192 for stages 1-2 and 40960 for stage 3.
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long = "token-counter", value_enum, default_value = "chars-div4")]
        token_counter: CounterArg,
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        parallel: usize,
        /// Seed for the random policy.
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// JSON file overriding the stage weights.
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Use a running search server instead of an in-process index.
        #[arg(long = "search-url")]
        search_url: Option<String>,
        /// Prebuilt index for the in-process search engine.
        #[arg(long)]
        index: Option<PathBuf>,
        /// Hash embedder dimension when no index is given.
        #[arg(long, default_value_t = DEFAULT_DIM)]
        dim: usize,
        /// Seconds to wait on remote policy and search calls.
        #[arg(long, default_value_t = 60)]
        timeout: u64,
    },
    /// Replay a trace and print per-sample rewards plus aggregate means.
    Score {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
        stage: u8,
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Corpus used to check the dataset's supporting references.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_env("SEARCHGYM_LOG").unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(io::stderr)
        .init();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Index {
            corpus,
            out,
            embedder,
            endpoint,
            dim,
        } => cmd_index(&corpus, &out, EmbedderOpts { embedder, embed_endpoint: endpoint }, dim),
        Command::Serve {
            index,
            corpus,
            port,
            host,
            top_m,
            top_k,
            preview_chars,
            reranker,
            rerank_endpoint,
            max_query_chars,
            embed,
        } => {
            let config = PipelineConfig {
                top_m,
                top_k,
                preview_chars,
                reranker: match reranker {
                    RerankerArg::Lexical => RerankerKind::Lexical,
                    RerankerArg::Remote => RerankerKind::Remote,
                },
                endpoint: rerank_endpoint,
            };
            config.validate()?;
            let addr: SocketAddr = format!("{host}:{port}").parse().with_context(|| format!("bad address {host}:{port}"))?;
            cmd_serve(addr, index, corpus, config, embed, max_query_chars)
        }
        Command::Run {
            dataset,
            corpus,
            policy,
            endpoint,
            stage,
            max_turns,
            budget,
            token_counter,
            trace,
            parallel,
            seed,
            weights,
            search_url,
            index,
            dim,
            timeout,
        } => {
            let timeout = Duration::from_secs(timeout);
            let policy = match policy {
                PolicyArg::Oracle => PolicySpec::Oracle,
                PolicyArg::Random => PolicySpec::Random { seed },
                PolicyArg::Remote => PolicySpec::Remote {
                    endpoint: endpoint.context("--policy remote needs --endpoint")?,
                    timeout,
                },
            };
            let config = episode_config(stage, budget, max_turns, token_counter)?;
            let search = match search_url {
                Some(url) => Search::Remote { url, timeout },
                None => Search::Local { index, dim },
            };
            cmd_run(&dataset, &corpus, &policy, &config, &stage_weights(stage, weights.as_deref())?, trace.as_deref(), parallel, search)
        }
        Command::Score {
            trace,
            dataset,
            stage,
            weights,
            corpus,
        } => cmd_score(&trace, &dataset, &stage_weights(stage, weights.as_deref())?, corpus.as_deref()),
    }
}

/// Stage presets pick the budget unless `--budget` was given.
fn episode_config(stage: u8, budget: Option<usize>, max_turns: usize, counter: CounterArg) -> Result<EpisodeConfig> {
    let mut config = EpisodeConfig::for_stage(stage);
    if let Some(b) = budget {
        config = config.with_budget(b);
    }
    config.max_turns = max_turns;
    config.token_counter = match counter {
        CounterArg::CharsDiv4 => TokenCounter::CharsDiv4,
        CounterArg::WhitespaceWords => TokenCounter::WhitespaceWords,
    };
    config.validate()?;
    tracing::debug!(budget = config.context_budget_tokens, max_turns, "episode config");
    Ok(config)
}

fn stage_weights(stage: u8, file: Option<&Path>) -> Result<StageWeights> {
    let w = match file {
        Some(p) => StageWeights::from_file(p)?,
        None => StageWeights::for_stage(stage)?,
    };
    if w.stage != stage {
        bail!("weights file is for stage {} but --stage is {stage}", w.stage);
    }
    Ok(w)
}

fn cmd_index(corpus_path: &Path, out: &Path, embed: EmbedderOpts, dim: usize) -> Result<()> {
    let corpus = load_corpus(corpus_path).with_context(|| format!("loading {}", corpus_path.display()))?;
    let embedder = Embedder::new(embed.config(dim)?)?;
    let index = build_index(&corpus, &embedder)?;
    save_index(&index, out).with_context(|| format!("writing {}", out.display()))?;
    println!("indexed {} documents", index.len());
    Ok(())
}

fn load_service(index: &Path, corpus: &Path, config: PipelineConfig, embed: &EmbedderOpts, max_query_chars: usize) -> Result<SearchService> {
    let index = load_index(index).with_context(|| format!("loading index {}", index.display()))?;
    let corpus = Arc::new(load_corpus(corpus).with_context(|| format!("loading corpus {}", corpus.display()))?);
    let embedder = Embedder::new(embed.config(index.dim())?)?;
    let engine = SearchEngine::new(index, corpus, embedder, config)?;
    Ok(SearchService::new(engine, max_query_chars))
}

fn cmd_serve(
    addr: SocketAddr,
    index: PathBuf,
    corpus: PathBuf,
    config: PipelineConfig,
    embed: EmbedderOpts,
    max_query_chars: usize,
) -> Result<()> {
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await.with_context(|| format!("binding {addr}"))?;
        tracing::info!(addr = %listener.local_addr()?, "listening; loading index");
        let state = ServerState::loading();
        let (stop_tx, stop_rx) = oneshot::channel::<()>();
        let server = tokio::spawn(serve(listener, state.clone(), async move {
            tokio::select! {
                _ = tokio::signal::ctrl_c() => tracing::info!("interrupted, draining"),
                _ = stop_rx => {}
            }
        }));
        let loaded = tokio::task::spawn_blocking(move || load_service(&index, &corpus, config, &embed, max_query_chars)).await?;
        match loaded {
            Ok(service) => {
                tracing::info!(documents = service.health().corpus_size, "ready");
                state.install(service);
                server.await??;
                drop(stop_tx);
                Ok(())
            }
            Err(e) => {
                let _ = stop_tx.send(());
                server.await??;
                Err(e)
            }
        }
    })
}

enum Search {
    Remote { url: String, timeout: Duration },
    Local { index: Option<PathBuf>, dim: usize },
}

#[allow(clippy::too_many_arguments)]
fn cmd_run(
    dataset: &Path,
    corpus_path: &Path,
    policy: &PolicySpec,
    config: &EpisodeConfig,
    weights: &StageWeights,
    trace: Option<&Path>,
    parallel: usize,
    search: Search,
) -> Result<()> {
    let corpus = Arc::new(load_corpus(corpus_path).with_context(|| format!("loading corpus {}", corpus_path.display()))?);
    let samples = load_dataset(dataset, &corpus).with_context(|| format!("loading dataset {}", dataset.display()))?;
    let tools: Box<dyn ToolRegistry> = match search {
        Search::Remote { url, timeout } => Box::new(HttpTools::new(url, timeout)?),
        Search::Local { index, dim } => {
            let engine = match index {
                Some(p) => {
                    let index = load_index(&p).with_context(|| format!("loading index {}", p.display()))?;
                    let embedder = Embedder::new(EmbedderConfig::hash(index.dim()))?;
                    SearchEngine::new(index, corpus.clone(), embedder, PipelineConfig::default())?
                }
                None => SearchEngine::build(corpus.clone(), EmbedderConfig::hash(dim), PipelineConfig::default())?,
            };
            Box::new(LocalTools::new(SearchService::new(engine, DEFAULT_MAX_QUERY_CHARS)))
        }
    };
    let out = run_batch(&samples, &corpus, tools.as_ref(), policy, config, weights, parallel.max(1))?;
    if let Some(path) = trace {
        let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
        write_trace(&out.episodes, &mut w)?;
        w.flush()?;
    }
    let stdout = io::stdout();
    let mut lock = stdout.lock();
    serde_json::to_writer(&mut lock, &out.report)?;
    writeln!(lock)?;
    Ok(())
}

fn cmd_score(trace: &Path, dataset: &Path, weights: &StageWeights, corpus: Option<&Path>) -> Result<()> {
    let samples = match corpus {
        Some(c) => load_dataset(dataset, &load_corpus(c)?)?,
        None => searchgym_core::corpus::read_dataset(dataset)?,
    };
    let reader = BufReader::new(File::open(trace).with_context(|| format!("opening {}", trace.display()))?);
    let episodes = read_trace(reader)?;
    let output = score_episodes(&episodes, &samples, weights)?;
    write_score(&output, io::stdout().lock())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;
    use searchgym_core::episode::{LONG_CONTEXT_TOKENS, SHORT_CONTEXT_TOKENS};

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn stage_three_budget_precedence() {
        let c = episode_config(3, None, 16, CounterArg::CharsDiv4).unwrap();
        assert_eq!(c.context_budget_tokens, LONG_CONTEXT_TOKENS);
        let c = episode_config(3, Some(8192), 16, CounterArg::CharsDiv4).unwrap();
        assert_eq!(c.context_budget_tokens, 8192);
        for stage in [1, 2] {
            assert_eq!(episode_config(stage, None, 16, CounterArg::CharsDiv4).unwrap().context_budget_tokens, SHORT_CONTEXT_TOKENS);
        }
        assert!(episode_config(1, Some(10), 16, CounterArg::CharsDiv4).is_err());
        assert!(episode_config(1, None, 0, CounterArg::CharsDiv4).is_err());
    }

    #[test]
    fn weights_file_must_match_stage() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.json");
        std::fs::write(&p, serde_json::to_string(&StageWeights::for_stage(2).unwrap()).unwrap()).unwrap();
        assert!(stage_weights(2, Some(&p)).is_ok());
        assert!(stage_weights(3, Some(&p)).is_err());
    }
}
