#![allow(dead_code)]

use std::collections::BTreeSet;
use std::sync::Arc;
use std::time::Duration;

use ragscope_core::ann::{AnnGraph, BuildParams, PartitionManifest};
use ragscope_core::backend::{InferenceGateway, ModelBackend, ReferenceBackend};
use ragscope_core::context::PromptTemplate;
use ragscope_core::corpus::{ingest_reader, CorpusStore};
use ragscope_core::embed::{EmbeddingVector, ReferenceEmbedder};
use ragscope_core::pipeline::Pipeline;
use ragscope_core::synth;
use ragscope_server::api::{self, ApiState, QueryDefaults, QueryRequest, API_KEY_HEADER};
use ragscope_server::auth::KeySet;
use ragscope_server::fanout::HttpFanout;
use ragscope_server::worker::{self, WorkerOptions, WorkerState};

pub const DIM: usize = 64;
pub const EMBED_SEED: u64 = 11;
pub const API_KEY: &str = "test-key-0123456789abcdef";

/// Serves `app` on an ephemeral loopback port and returns its base URL.
pub async fn spawn(app: axum::Router) -> String {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move {
        axum::serve(listener, app).await.unwrap();
    });
    format!("http://{addr}")
}

/// A URL nothing listens on.
pub async fn dead_url() -> String {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    format!("http://{addr}")
}

pub fn small_params(seed: u64) -> BuildParams {
    BuildParams {
        max_degree: 16,
        build_beam: 32,
        seed,
        ..BuildParams::default()
    }
}

/// Builds one graph per tile of `vectors`.
pub fn build_graphs(vectors: &[EmbeddingVector], parts: u32, params: BuildParams) -> Vec<AnnGraph> {
    PartitionManifest::tile(vectors.len() as u64, parts)
        .into_iter()
        .map(|m| {
            let lo = m.global_offset as usize;
            AnnGraph::build(DIM, &vectors[lo..lo + m.count as usize], m, params).unwrap()
        })
        .collect()
}

pub struct Stack {
    pub api_url: String,
    pub worker_urls: Vec<String>,
    pub workers: Vec<Arc<WorkerState>>,
    pub corpus: Arc<CorpusStore>,
    pub client: reqwest::Client,
    _dir: tempfile::TempDir,
}

pub struct StackOptions {
    pub parts: u32,
    pub defaults: QueryDefaults,
    pub backend: Option<Arc<dyn ModelBackend>>,
    /// Extra worker URLs appended after the live ones.
    pub extra_workers: Vec<String>,
    /// Route the API to these URLs instead of the live workers.
    pub replace_workers: Option<Vec<String>>,
    pub cors_origins: Vec<String>,
}

impl Default for StackOptions {
    fn default() -> Self {
        Self {
            parts: 2,
            defaults: QueryDefaults {
                k: 2,
                window: 32,
                stride: 16,
                max_tokens: 40,
                seed: 5,
                ..QueryDefaults::default()
            },
            backend: None,
            extra_workers: Vec::new(),
            replace_workers: None,
            cors_origins: vec!["http://ui.example".into()],
        }
    }
}

pub fn reference_backend() -> Arc<dyn ModelBackend> {
    Arc::new(ReferenceBackend::new(ReferenceEmbedder::new(DIM, EMBED_SEED), 2, 3, 7))
}

/// Ingests `docs`, indexes them across HTTP workers and starts the API.
pub async fn start_stack(docs: &[String], opts: StackOptions) -> Stack {
    let dir = tempfile::tempdir().unwrap();
    let jsonl = synth::to_jsonl(docs, "text");
    ingest_reader(jsonl.as_bytes(), "text", dir.path()).unwrap();
    let corpus = Arc::new(CorpusStore::open(dir.path()).unwrap());

    let embedder = ReferenceEmbedder::new(DIM, EMBED_SEED);
    let vectors = embedder.embed_texts(docs).unwrap();
    let mut workers = Vec::new();
    let mut worker_urls = Vec::new();
    for g in build_graphs(&vectors, opts.parts, small_params(3)) {
        let beam = g.len().max(1);
        let state = WorkerState::ready(
            g,
            WorkerOptions {
                default_beam: beam,
                ..WorkerOptions::default()
            },
        );
        worker_urls.push(spawn(worker::router(state.clone())).await);
        workers.push(state);
    }
    let mut all = opts.replace_workers.unwrap_or_else(|| worker_urls.clone());
    all.extend(opts.extra_workers);
    let fanout = HttpFanout::new(all, Duration::from_secs(5), None, None).unwrap();
    let gateway = InferenceGateway::connect(opts.backend.unwrap_or_else(reference_backend))
        .await
        .unwrap();
    let pipeline = Pipeline {
        embedder: Arc::new(embedder),
        retriever: Arc::new(fanout),
        corpus: corpus.clone(),
        gateway,
        template: PromptTemplate::default(),
    };
    let state = ApiState {
        pipeline,
        keys: KeySet::new([API_KEY, "second-key-abcdef0123456789"]),
        defaults: opts.defaults,
        cors_origins: opts.cors_origins,
    };
    let api_url = spawn(api::router(Arc::new(state))).await;
    Stack {
        api_url,
        worker_urls,
        workers,
        corpus,
        client: reqwest::Client::new(),
        _dir: dir,
    }
}

impl Stack {
    pub fn worker_requests(&self) -> u64 {
        self.workers.iter().map(|w| w.request_count()).sum()
    }

    pub async fn post_raw(&self, path: &str, key: Option<&str>, body: &QueryRequest) -> reqwest::Response {
        let mut b = self.client.post(format!("{}{path}", self.api_url)).json(body);
        if let Some(k) = key {
            b = b.header(API_KEY_HEADER, k);
        }
        b.send().await.unwrap()
    }

    pub async fn query(&self, body: &QueryRequest) -> serde_json::Value {
        self.call("/api/query", body).await
    }

    pub async fn rewrite(&self, body: &QueryRequest) -> serde_json::Value {
        self.call("/api/rewrite", body).await
    }

    async fn call(&self, path: &str, body: &QueryRequest) -> serde_json::Value {
        let resp = self.post_raw(path, Some(API_KEY), body).await;
        let status = resp.status();
        let text = resp.text().await.unwrap();
        assert!(status.is_success(), "{path} returned {status}: {text}");
        serde_json::from_str(&text).unwrap()
    }
}

/// Removes fields that legitimately differ between identical requests.
pub fn strip_volatile(mut v: serde_json::Value) -> serde_json::Value {
    let obj = v.as_object_mut().unwrap();
    obj.remove("request_id");
    obj.remove("timings");
    v
}

pub fn doc_ids_in(resp: &serde_json::Value) -> (BTreeSet<u64>, BTreeSet<u64>, BTreeSet<u64>) {
    let ids = |arr: &serde_json::Value, key: &str| -> BTreeSet<u64> {
        arr.as_array()
            .unwrap()
            .iter()
            .filter_map(|x| x.get(key).and_then(serde_json::Value::as_u64))
            .collect()
    };
    (
        ids(&resp["hits"], "doc_id"),
        ids(&resp["prompt"]["segments"], "doc_id"),
        ids(&resp["doc_scores"], "doc_id"),
    )
}

/// Small topical corpus with one HTML-heavy document at id 0.
pub fn demo_corpus() -> Vec<String> {
    let mut docs = vec![
        "HTML is the markup language of the web : <html> <head> <title> pages </title> </head> <body> tags </body> </html> wrap every element."
            .to_owned(),
        "HyperText documents describe page structure and are rendered by a web browser for the reader.".to_owned(),
    ];
    docs.extend(synth::synthetic_documents(30, 40, 90, 21));
    docs
}

/// Ranks `demo_corpus` doc 0 first under the reference embedder.
pub const HTML_QUERY: &str = "What is the HTML markup language of the web with <html> <head> <title> tags?";
