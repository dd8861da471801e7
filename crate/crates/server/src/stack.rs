//! Wires a [`Pipeline`] and API state from a [`Config`].

use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context};
use ragscope_core::ann::AnnGraph;
use ragscope_core::backend::{InferenceGateway, ModelBackend, ReferenceBackend};
use ragscope_core::context::{LocalFanout, PromptTemplate, Retriever};
use ragscope_core::corpus::CorpusStore;
use ragscope_core::embed::{Embedder, ReferenceEmbedder};
use ragscope_core::pipeline::Pipeline;

use crate::api::{ApiState, QueryDefaults};
use crate::auth::KeySet;
use crate::config::{BackendKind, Config, EmbedderKind, WORKER_DEFAULT_BEAM};
use crate::fanout::HttpFanout;
use crate::remote::{LimitedBackend, RemoteBackend, RemoteEmbedder};
use crate::worker::HealthResponse;

pub async fn build_embedder(cfg: &Config) -> anyhow::Result<Arc<dyn Embedder>> {
    let e = &cfg.embedder;
    Ok(match e.kind {
        EmbedderKind::Reference => Arc::new(ReferenceEmbedder::new(e.dim, e.seed)),
        EmbedderKind::Remote => {
            let url = e.remote_url.as_deref().expect("validated");
            let remote = RemoteEmbedder::new(url, e.dim, Duration::from_millis(e.timeout_ms), e.max_in_flight)?;
            // A mismatched service fails here rather than on the first query.
            remote
                .embed("dimension probe")
                .await
                .with_context(|| format!("probing embedding service at {url}"))?;
            Arc::new(remote)
        }
    })
}

async fn build_retriever(cfg: &Config) -> anyhow::Result<Arc<dyn Retriever>> {
    if !cfg.local_partitions.is_empty() {
        let mut graphs = Vec::with_capacity(cfg.local_partitions.len());
        for path in &cfg.local_partitions {
            let g = AnnGraph::load(path).with_context(|| format!("loading {}", path.display()))?;
            if g.dim() != cfg.embedder.dim {
                bail!(
                    "{} has dimension {}, embedder.dim is {}",
                    path.display(),
                    g.dim(),
                    cfg.embedder.dim
                );
            }
            graphs.push(Arc::new(g));
        }
        let beam = cfg.fanout.beam.unwrap_or(WORKER_DEFAULT_BEAM);
        return Ok(Arc::new(LocalFanout::new(graphs, beam)));
    }
    let timeout = Duration::from_millis(cfg.fanout.timeout_ms);
    let fanout = HttpFanout::new(cfg.workers.clone(), timeout, cfg.fanout.beam, cfg.fanout.token.clone())?;
    check_worker_dims(&fanout, cfg.embedder.dim, timeout).await?;
    Ok(Arc::new(fanout))
}

/// Fails on a reachable worker with the wrong dimension; unreachable workers only warn.
async fn check_worker_dims(fanout: &HttpFanout, dim: usize, timeout: Duration) -> anyhow::Result<()> {
    let client = reqwest::Client::builder().timeout(timeout).build()?;
    for w in fanout.workers() {
        let health = async {
            client
                .get(format!("{w}/health"))
                .send()
                .await?
                .error_for_status()?
                .json::<HealthResponse>()
                .await
        };
        match health.await {
            Ok(h) if h.dim != dim => bail!("worker {w} serves dimension {}, embedder.dim is {dim}", h.dim),
            Ok(_) => {}
            Err(e) => tracing::warn!(worker = %w, error = %e, "worker not ready at startup"),
        }
    }
    Ok(())
}

async fn build_gateway(cfg: &Config) -> anyhow::Result<InferenceGateway> {
    let b = &cfg.backend;
    let inner: Arc<dyn ModelBackend> = match b.kind {
        BackendKind::Reference => Arc::new(ReferenceBackend::new(
            ReferenceEmbedder::new(cfg.embedder.dim, cfg.embedder.seed),
            b.layers,
            b.heads,
            b.seed,
        )),
        BackendKind::Remote => Arc::new(RemoteBackend::new(
            b.url.as_deref().expect("validated"),
            Duration::from_millis(b.timeout_ms),
        )?),
    };
    let limited = Arc::new(LimitedBackend::new(inner, b.max_in_flight));
    InferenceGateway::connect(limited)
        .await
        .context("connecting to model backend")
}

fn load_template(cfg: &Config) -> anyhow::Result<PromptTemplate> {
    match &cfg.prompt.template_path {
        None => Ok(PromptTemplate::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(PromptTemplate::parse(&text)?)
        }
    }
}

pub async fn build_pipeline(cfg: &Config) -> anyhow::Result<Pipeline> {
    let corpus = CorpusStore::open(&cfg.corpus.dir)
        .with_context(|| format!("opening corpus {}", cfg.corpus.dir.display()))?;
    Ok(Pipeline {
        embedder: build_embedder(cfg).await?,
        retriever: build_retriever(cfg).await?,
        corpus: Arc::new(corpus),
        gateway: build_gateway(cfg).await?,
        template: load_template(cfg)?,
    })
}

pub fn query_defaults(cfg: &Config) -> QueryDefaults {
    QueryDefaults {
        k: cfg.retrieval.k_default,
        method: cfg.snippet.method,
        window: cfg.snippet.window,
        stride: cfg.snippet.stride,
        max_tokens: cfg.backend.max_tokens,
        seed: cfg.backend.seed,
    }
}

pub async fn build_api_state(cfg: &Config) -> anyhow::Result<ApiState> {
    Ok(ApiState {
        pipeline: build_pipeline(cfg).await?,
        keys: KeySet::new(&cfg.api.keys),
        defaults: query_defaults(cfg),
        cors_origins: cfg.cors.origins.clone(),
    })
}
