//! Scatter-gather over HTTP partition workers.

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use async_trait::async_trait;
use futures::future::join_all;
use ragscope_core::ann::SearchHit;
use ragscope_core::context::{merge_hits, per_partition_depth, ContextError, FanoutResult, Retriever};
use ragscope_core::embed::EmbeddingVector;

use crate::worker::{SearchRequest, SearchResponse};

#[derive(Debug, Clone)]
pub struct HttpFanout {
    client: reqwest::Client,
    workers: Vec<String>,
    beam: Option<usize>,
    token: Option<String>,
}

impl HttpFanout {
    /// `timeout` bounds each worker call, connection included.
    pub fn new(
        workers: Vec<String>,
        timeout: Duration,
        beam: Option<usize>,
        token: Option<String>,
    ) -> reqwest::Result<Self> {
        let client = reqwest::Client::builder().timeout(timeout).build()?;
        Ok(Self {
            client,
            workers: workers
                .into_iter()
                .map(|w| w.trim_end_matches('/').to_owned())
                .collect(),
            beam,
            token,
        })
    }

    pub fn workers(&self) -> &[String] {
        &self.workers
    }

    async fn call(&self, worker: &str, req: &SearchRequest) -> Result<Vec<SearchHit>, String> {
        let mut builder = self.client.post(format!("{worker}/search")).json(req);
        if let Some(t) = &self.token {
            builder = builder.bearer_auth(t);
        }
        let resp = builder.send().await.map_err(|e| describe(worker, &e))?;
        let status = resp.status();
        if !status.is_success() {
            let body = resp.text().await.unwrap_or_default();
            return Err(format!("{worker}: HTTP {status}: {body}"));
        }
        let parsed: SearchResponse = resp.json().await.map_err(|e| describe(worker, &e))?;
        Ok(parsed.hits)
    }
}

fn describe(worker: &str, e: &reqwest::Error) -> String {
    let kind = if e.is_timeout() {
        "timed out"
    } else if e.is_connect() {
        "connection failed"
    } else if e.is_decode() {
        "malformed response"
    } else {
        "request failed"
    };
    format!("{worker}: {kind}: {e}")
}

#[async_trait]
impl Retriever for HttpFanout {
    async fn fanout_search(
        &self,
        query: &EmbeddingVector,
        k: usize,
        excluded: &BTreeSet<u64>,
    ) -> Result<FanoutResult, ContextError> {
        if k == 0 {
            return Err(ContextError::InvalidPlan("k must be >= 1".into()));
        }
        if self.workers.is_empty() {
            return Err(ContextError::RetrievalUnavailable("no workers configured".into()));
        }
        let req = SearchRequest {
            embedding: query.as_slice().to_vec(),
            k: per_partition_depth(k, excluded),
            beam: self.beam,
        };
        let calls = self.workers.iter().map(|w| {
            let req = &req;
            async move {
                let started = Instant::now();
                let out = self.call(w, req).await;
                (out, started.elapsed())
            }
        });
        let mut partials = Vec::with_capacity(self.workers.len());
        let mut failures = Vec::new();
        let mut call_times = Vec::new();
        for (out, elapsed) in join_all(calls).await {
            match out {
                Ok(hits) => {
                    partials.push(hits);
                    call_times.push(elapsed);
                }
                Err(e) => {
                    tracing::warn!(error = %e, "worker call failed");
                    failures.push(e);
                }
            }
        }
        if partials.is_empty() {
            return Err(ContextError::RetrievalUnavailable(failures.join("; ")));
        }
        Ok(FanoutResult {
            hits: merge_hits(partials, k, excluded),
            partitions_total: self.workers.len(),
            failures,
            call_times,
        })
    }
}
