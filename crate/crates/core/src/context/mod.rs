//! Context building: scatter-gather retrieval, snippeting and prompt assembly.

mod prompt;
mod snippet;

use std::collections::BTreeSet;
use std::sync::Arc;
use std::time::{Duration, Instant};

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use prompt::{
    assemble_prompt, AssembledPrompt, ContextLayout, PromptTemplate, Segment, SegmentKind,
    DEFAULT_TEMPLATE, DOCUMENTS_PLACEHOLDER, QUERY_PLACEHOLDER,
};
pub use snippet::{
    candidate_windows, score_snippet, snippet_naive_first, snippet_sliding_window, Snippet,
    SnippetMethod, DEFAULT_STRIDE, DEFAULT_WINDOW,
};

use crate::ann::{hit_order, AnnGraph, SearchHit};
use crate::embed::{EmbedError, EmbeddingVector};

#[derive(Debug, Error)]
pub enum ContextError {
    #[error("document {0} has no tokens")]
    EmptyDocument(u64),
    #[error("invalid retrieval plan: {0}")]
    InvalidPlan(String),
    #[error("invalid prompt template: {0}")]
    Template(String),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("retrieval unavailable: {0}")]
    RetrievalUnavailable(String),
}

/// Per-request retrieval and snippeting settings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalPlan {
    pub k: usize,
    pub method: SnippetMethod,
    pub window: usize,
    pub stride: usize,
    #[serde(default)]
    pub excluded: BTreeSet<u64>,
}

impl Default for RetrievalPlan {
    fn default() -> Self {
        Self {
            k: 3,
            method: SnippetMethod::default(),
            window: DEFAULT_WINDOW,
            stride: DEFAULT_STRIDE,
            excluded: BTreeSet::new(),
        }
    }
}

impl RetrievalPlan {
    pub fn validate(&self) -> Result<(), ContextError> {
        if self.k == 0 {
            return Err(ContextError::InvalidPlan("k must be >= 1".into()));
        }
        if self.window == 0 {
            return Err(ContextError::InvalidPlan("window must be >= 1".into()));
        }
        if self.stride == 0 || self.stride > self.window {
            return Err(ContextError::InvalidPlan(format!(
                "stride must be in 1..={}, got {}",
                self.window, self.stride
            )));
        }
        Ok(())
    }
}

/// Merged result of one scatter-gather search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FanoutResult {
    pub hits: Vec<SearchHit>,
    pub partitions_total: usize,
    /// Descriptions of the partitions that failed to answer.
    pub failures: Vec<String>,
    /// Round-trip time of each successful partition call.
    #[serde(skip)]
    pub call_times: Vec<Duration>,
}

impl FanoutResult {
    /// True when some partitions did not contribute.
    pub fn partial(&self) -> bool {
        !self.failures.is_empty()
    }
}

/// Depth to request from each partition so that `k` hits survive exclusion.
pub fn per_partition_depth(k: usize, excluded: &BTreeSet<u64>) -> usize {
    k + excluded.len()
}

/// Merges partition results: drops excluded ids and duplicates, orders by
/// score descending then doc id ascending, and keeps the first `k`.
pub fn merge_hits<I>(partials: I, k: usize, excluded: &BTreeSet<u64>) -> Vec<SearchHit>
where
    I: IntoIterator<Item = Vec<SearchHit>>,
{
    let mut all: Vec<SearchHit> = partials
        .into_iter()
        .flatten()
        .filter(|h| !excluded.contains(&h.doc_id))
        .collect();
    all.sort_by(hit_order);
    all.dedup_by_key(|h| h.doc_id);
    all.truncate(k);
    all
}

/// Something that can answer a global top-k query over all partitions.
#[async_trait]
pub trait Retriever: Send + Sync {
    async fn fanout_search(
        &self,
        query: &EmbeddingVector,
        k: usize,
        excluded: &BTreeSet<u64>,
    ) -> Result<FanoutResult, ContextError>;
}

/// In-process retriever over loaded partition graphs (no network).
#[derive(Debug, Clone)]
pub struct LocalFanout {
    partitions: Vec<Arc<AnnGraph>>,
    beam: usize,
}

impl LocalFanout {
    pub fn new(partitions: Vec<Arc<AnnGraph>>, beam: usize) -> Self {
        Self { partitions, beam }
    }
}

#[async_trait]
impl Retriever for LocalFanout {
    async fn fanout_search(
        &self,
        query: &EmbeddingVector,
        k: usize,
        excluded: &BTreeSet<u64>,
    ) -> Result<FanoutResult, ContextError> {
        if k == 0 {
            return Err(ContextError::InvalidPlan("k must be >= 1".into()));
        }
        if self.partitions.is_empty() {
            return Err(ContextError::RetrievalUnavailable("no partitions configured".into()));
        }
        let depth = per_partition_depth(k, excluded);
        let mut partials = Vec::with_capacity(self.partitions.len());
        let mut failures = Vec::new();
        let mut call_times = Vec::new();
        for graph in &self.partitions {
            let started = Instant::now();
            match graph.search(query.as_slice(), depth, self.beam.max(depth)) {
                Ok(hits) => {
                    call_times.push(started.elapsed());
                    partials.push(hits);
                }
                Err(e) => failures.push(format!("partition {}: {e}", graph.manifest().partition_id)),
            }
        }
        if partials.is_empty() {
            return Err(ContextError::RetrievalUnavailable(failures.join("; ")));
        }
        Ok(FanoutResult {
            hits: merge_hits(partials, k, excluded),
            partitions_total: self.partitions.len(),
            failures,
            call_times,
        })
    }
}
