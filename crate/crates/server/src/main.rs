use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use ragscope_core::ann::{BuildParams, DEFAULT_ALPHA, DEFAULT_BUILD_BEAM, DEFAULT_MAX_DEGREE, DEFAULT_SEARCH_BEAM};
use ragscope_core::backend::{GenerationParams, ReferenceBackend};
use ragscope_core::bench::{compare_snippeting, parse_queries, run_latency, PipelineRunner, QueryRunner};
use ragscope_core::context::RetrievalPlan;
use ragscope_core::corpus::{self, CorpusStore, DEFAULT_TEXT_FIELD};
use ragscope_core::embed::{Embedder, ReferenceEmbedder};
use ragscope_core::synth;
use ragscope_server::config::Config;
use ragscope_server::live_bench::ApiRunner;
use ragscope_server::remote::RemoteEmbedder;
use ragscope_server::worker::{self, WorkerOptions, WorkerState};
use ragscope_server::{api, indexer, model_server, stack};
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(name = "ragscope", version, about = "RAG diagnostics stack: ingest, index, serve, benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest a JSONL corpus into a corpus store directory.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = DEFAULT_TEXT_FIELD)]
        field: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Embed a corpus store and build partition indexes.
    Index(IndexArgs),
    /// Serve one partition index.
    Worker {
        #[arg(long)]
        listen: SocketAddr,
        #[arg(long)]
        index: PathBuf,
        #[arg(long, default_value_t = DEFAULT_SEARCH_BEAM)]
        beam: usize,
        /// Require `Authorization: Bearer <token>` on /search.
        #[arg(long, env = "RAGSCOPE_WORKER_TOKEN")]
        token: Option<String>,
        #[arg(long)]
        max_concurrent: Option<usize>,
    },
    /// Serve the public API.
    Api {
        #[arg(long)]
        config: PathBuf,
    },
    /// Serve the reference model and embedder over HTTP.
    ModelServer {
        #[arg(long)]
        listen: SocketAddr,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 0)]
        embed_seed: u64,
        #[arg(long, default_value_t = 4)]
        layers: usize,
        #[arg(long, default_value_t = 8)]
        heads: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a seeded synthetic corpus (JSONL) and query file.
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 1000)]
        docs: usize,
        #[arg(long, default_value_t = 50)]
        queries: usize,
        #[arg(long, default_value_t = 200)]
        min_tokens: usize,
        #[arg(long, default_value_t = 600)]
        max_tokens: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Latency and snippeting benchmarks.
    #[command(subcommand)]
    Bench(BenchCommand),
}

#[derive(Args)]
struct IndexArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    partitions: u32,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    /// Reference embedder hash seed.
    #[arg(long, default_value_t = 0)]
    embed_seed: u64,
    /// Use an embedding service instead of the reference embedder.
    #[arg(long)]
    embed_url: Option<String>,
    #[arg(long, default_value_t = DEFAULT_MAX_DEGREE)]
    max_degree: usize,
    #[arg(long, default_value_t = DEFAULT_BUILD_BEAM)]
    build_beam: usize,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    alpha: f32,
    #[arg(long, default_value_t = 0)]
    build_seed: u64,
}

#[derive(Subcommand)]
enum BenchCommand {
    /// Per-stage latency percentiles over a query file.
    Latency {
        #[arg(long)]
        queries: PathBuf,
        /// API base URL for live mode.
        #[arg(long, required_unless_present = "in_process")]
        api: Option<String>,
        #[arg(long, env = "RAGSCOPE_API_KEY", required_unless_present = "in_process")]
        key: Option<String>,
        /// Run the pipeline in this process instead of calling an API.
        #[arg(long, requires = "config")]
        in_process: bool,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        repeats: usize,
        /// Write the JSON report here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Naive-first vs sliding-window snippet similarity and latency.
    Snippet {
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 128)]
        window: usize,
        #[arg(long, default_value_t = 64)]
        stride: usize,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

#[tokio::main]
async fn main() {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    if let Err(e) = run(Cli::parse()).await {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

async fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Ingest { input, field, out } => {
            let stats = corpus::ingest(&input, &field, &out)?;
            println!("{}", serde_json::to_string(&stats)?);
        }
        Command::Index(args) => index(args).await?,
        Command::Worker {
            listen,
            index,
            beam,
            token,
            max_concurrent,
        } => {
            let mut opts = WorkerOptions {
                default_beam: beam,
                token,
                ..WorkerOptions::default()
            };
            if let Some(n) = max_concurrent {
                opts.max_concurrent = n;
            }
            let state = WorkerState::loading(opts);
            let listener = tokio::net::TcpListener::bind(listen).await?;
            tracing::info!(%listen, index = %index.display(), "worker listening; loading index");
            let load = worker::spawn_load(state.clone(), index);
            tokio::spawn(async move {
                match load.await {
                    Ok(Ok(())) => {}
                    Ok(Err(e)) => {
                        tracing::error!(error = %e, "index failed to load");
                        std::process::exit(1);
                    }
                    Err(e) => {
                        tracing::error!(error = %e, "index loader panicked");
                        std::process::exit(1);
                    }
                }
            });
            serve(listener, worker::router(state)).await?;
        }
        Command::Api { config } => {
            let cfg = Config::load(&config)?;
            let state = stack::build_api_state(&cfg).await?;
            let listener = tokio::net::TcpListener::bind(cfg.api.listen).await?;
            tracing::info!(listen = %cfg.api.listen, "api listening");
            serve(listener, api::router(Arc::new(state))).await?;
        }
        Command::ModelServer {
            listen,
            dim,
            embed_seed,
            layers,
            heads,
            seed,
        } => {
            let embedder = ReferenceEmbedder::new(dim, embed_seed);
            let state = model_server::ModelServerState {
                backend: Arc::new(ReferenceBackend::new(embedder, layers, heads, seed)),
                embedder,
            };
            let listener = tokio::net::TcpListener::bind(listen).await?;
            tracing::info!(%listen, "model server listening");
            serve(listener, model_server::router(state)).await?;
        }
        Command::Synth {
            out_dir,
            docs,
            queries,
            min_tokens,
            max_tokens,
            seed,
        } => {
            if min_tokens == 0 || min_tokens > max_tokens {
                bail!("need 1 <= min-tokens <= max-tokens");
            }
            std::fs::create_dir_all(&out_dir)?;
            let texts = synth::synthetic_documents(docs, min_tokens, max_tokens, seed);
            let qs = synth::synthetic_queries(&texts, queries, seed.wrapping_add(1));
            std::fs::write(out_dir.join("corpus.jsonl"), synth::to_jsonl(&texts, DEFAULT_TEXT_FIELD))?;
            std::fs::write(out_dir.join("queries.txt"), qs.join("\n") + "\n")?;
            println!("wrote {} documents and {} queries to {}", texts.len(), qs.len(), out_dir.display());
        }
        Command::Bench(cmd) => bench(cmd).await?,
    }
    Ok(())
}

async fn serve(listener: tokio::net::TcpListener, app: axum::Router) -> anyhow::Result<()> {
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

async fn index(args: IndexArgs) -> anyhow::Result<()> {
    let store = CorpusStore::open(&args.corpus).with_context(|| format!("opening {}", args.corpus.display()))?;
    let embedder: Box<dyn Embedder> = match &args.embed_url {
        Some(url) => Box::new(RemoteEmbedder::new(url, args.dim, Duration::from_secs(60), 4)?),
        None => Box::new(ReferenceEmbedder::new(args.dim, args.embed_seed)),
    };
    let vectors = indexer::embed_corpus(&store, embedder.as_ref()).await?;
    let params = BuildParams {
        max_degree: args.max_degree,
        build_beam: args.build_beam,
        alpha: args.alpha,
        seed: args.build_seed,
    };
    let (dim, parts, out) = (args.dim, args.partitions, args.out.clone());
    let manifest =
        tokio::task::spawn_blocking(move || indexer::build_partitions(&vectors, dim, parts, params, &out)).await??;
    println!("{}", serde_json::to_string_pretty(&manifest)?);
    Ok(())
}

fn read_queries(path: &Path) -> anyhow::Result<Vec<String>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(parse_queries(&text))
}

fn write_report<T: serde::Serialize>(path: Option<&Path>, report: &T) -> anyhow::Result<()> {
    if let Some(p) = path {
        std::fs::write(p, serde_json::to_string_pretty(report)?)?;
        eprintln!("report written to {}", p.display());
    }
    Ok(())
}

async fn bench(cmd: BenchCommand) -> anyhow::Result<()> {
    match cmd {
        BenchCommand::Latency {
            queries,
            api,
            key,
            in_process,
            config,
            repeats,
            report,
        } => {
            let qs = read_queries(&queries)?;
            let runner: Box<dyn QueryRunner> = if in_process {
                let cfg = Config::load(config.as_deref().expect("clap enforces --config"))?;
                let defaults = stack::query_defaults(&cfg);
                Box::new(PipelineRunner {
                    pipeline: stack::build_pipeline(&cfg).await?,
                    plan: RetrievalPlan {
                        k: defaults.k,
                        method: defaults.method,
                        window: defaults.window,
                        stride: defaults.stride,
                        excluded: Default::default(),
                    },
                    params: GenerationParams {
                        max_tokens: defaults.max_tokens,
                        seed: defaults.seed,
                    },
                })
            } else {
                Box::new(ApiRunner::new(
                    api.as_deref().expect("clap enforces --api"),
                    key.expect("clap enforces --key"),
                ))
            };
            let r = run_latency(runner.as_ref(), &qs, repeats).await?;
            print!("{}", r.render_table());
            write_report(report.as_deref(), &r)?;
        }
        BenchCommand::Snippet {
            queries,
            config,
            window,
            stride,
            k,
            report,
        } => {
            let qs = read_queries(&queries)?;
            let cfg = Config::load(&config)?;
            let p = stack::build_pipeline(&cfg).await?;
            let k = k.unwrap_or(cfg.retrieval.k_default);
            let r = compare_snippeting(
                p.embedder.as_ref(),
                p.retriever.as_ref(),
                &p.corpus,
                &qs,
                k,
                window,
                stride,
            )
            .await?;
            print!("{}", r.render_table());
            write_report(report.as_deref(), &r)?;
        }
    }
    Ok(())
}
