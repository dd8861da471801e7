//! End-to-end query pipeline: embed, scatter-gather, fetch, snippet, generate, attribute.

use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ann::SearchHit;
use crate::backend::{BackendError, GenerationParams, GenerationResult, InferenceGateway};
use crate::context::{
    assemble_prompt, snippet_naive_first, snippet_sliding_window, AssembledPrompt, ContextError,
    PromptTemplate, RetrievalPlan, Retriever, Snippet, SnippetMethod,
};
use crate::corpus::{CorpusError, CorpusStore};
use crate::embed::{EmbedError, Embedder};

/// Instrumented pipeline stages. `SingleAnnCall` is nested inside `FanoutTotal`
/// and `Total` spans everything, so neither counts toward the disjoint sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Embed,
    SingleAnnCall,
    FanoutTotal,
    FetchDocuments,
    Snippeting,
    Generation,
    AttentionForward,
    Total,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Embed,
        Stage::SingleAnnCall,
        Stage::FanoutTotal,
        Stage::FetchDocuments,
        Stage::Snippeting,
        Stage::Generation,
        Stage::AttentionForward,
        Stage::Total,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Embed => "embed",
            Stage::SingleAnnCall => "single_ann_call",
            Stage::FanoutTotal => "fanout_total",
            Stage::FetchDocuments => "fetch_documents",
            Stage::Snippeting => "snippeting",
            Stage::Generation => "generation",
            Stage::AttentionForward => "attention_forward",
            Stage::Total => "total",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            Stage::Embed => "Query embedding and tokenization",
            Stage::SingleAnnCall => "Single ANN search call",
            Stage::FanoutTotal => "Total ANN fan-out and merge",
            Stage::FetchDocuments => "Fetching documents from the corpus",
            Stage::Snippeting => "Snippeting",
            Stage::Generation => "Model generation",
            Stage::AttentionForward => "Forward pass for attention outputs",
            Stage::Total => "Total query time",
        }
    }

    /// Stages that partition the request's wall time (the rest is residual).
    pub fn is_disjoint(self) -> bool {
        !matches!(self, Stage::SingleAnnCall | Stage::Total)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: Stage,
    pub seconds: f64,
}

/// One duration per stage, in [`Stage::ALL`] order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StageTimings(Vec<StageTiming>);

impl Default for StageTimings {
    fn default() -> Self {
        Self(
            Stage::ALL
                .iter()
                .map(|&stage| StageTiming { stage, seconds: 0.0 })
                .collect(),
        )
    }
}

impl StageTimings {
    pub fn set(&mut self, stage: Stage, elapsed: Duration) {
        self.set_seconds(stage, elapsed.as_secs_f64());
    }

    pub fn set_seconds(&mut self, stage: Stage, seconds: f64) {
        if let Some(row) = self.0.iter_mut().find(|r| r.stage == stage) {
            row.seconds = seconds;
        }
    }

    pub fn get(&self, stage: Stage) -> f64 {
        self.0
            .iter()
            .find(|r| r.stage == stage)
            .map_or(0.0, |r| r.seconds)
    }

    pub fn rows(&self) -> &[StageTiming] {
        &self.0
    }

    /// True when every stage appears exactly once.
    pub fn is_complete(&self) -> bool {
        self.0.len() == Stage::ALL.len() && Stage::ALL.iter().all(|s| self.0.iter().any(|r| r.stage == *s))
    }

    pub fn disjoint_sum(&self) -> f64 {
        self.0
            .iter()
            .filter(|r| r.stage.is_disjoint())
            .map(|r| r.seconds)
            .sum()
    }

    /// Total time not attributed to any disjoint stage.
    pub fn residual(&self) -> f64 {
        self.get(Stage::Total) - self.disjoint_sum()
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("retrieval unavailable: {0}")]
    RetrievalUnavailable(String),
    #[error("embedding failed: {0}")]
    Embed(EmbedError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

impl From<EmbedError> for PipelineError {
    fn from(e: EmbedError) -> Self {
        match e {
            EmbedError::InvalidInput { .. } => PipelineError::InvalidRequest(e.to_string()),
            other => PipelineError::Embed(other),
        }
    }
}

impl From<ContextError> for PipelineError {
    fn from(e: ContextError) -> Self {
        match e {
            ContextError::RetrievalUnavailable(m) => PipelineError::RetrievalUnavailable(m),
            ContextError::Embed(e) => e.into(),
            other => PipelineError::InvalidRequest(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineOutput {
    pub hits: Vec<SearchHit>,
    pub partitions_total: usize,
    pub retrieval_failures: Vec<String>,
    pub snippets: Vec<Snippet>,
    /// Retrieved documents dropped because they had no tokens.
    pub skipped_documents: Vec<u64>,
    pub prompt: AssembledPrompt,
    pub generation: GenerationResult,
    pub timings: StageTimings,
}

/// Everything needed to answer one query.
#[derive(Clone)]
pub struct Pipeline {
    pub embedder: Arc<dyn Embedder>,
    pub retriever: Arc<dyn Retriever>,
    pub corpus: Arc<CorpusStore>,
    pub gateway: InferenceGateway,
    pub template: PromptTemplate,
}

impl Pipeline {
    pub async fn run(
        &self,
        query: &str,
        plan: &RetrievalPlan,
        params: &GenerationParams,
    ) -> Result<PipelineOutput, PipelineError> {
        if query.trim().is_empty() {
            return Err(PipelineError::InvalidRequest("query must not be empty".into()));
        }
        plan.validate()?;
        if params.max_tokens == 0 {
            return Err(PipelineError::InvalidRequest("max_tokens must be >= 1".into()));
        }
        let request_started = Instant::now();
        let mut timings = StageTimings::default();

        let started = Instant::now();
        let query_vec = self.embedder.embed(query).await?;
        timings.set(Stage::Embed, started.elapsed());

        let started = Instant::now();
        let fanout = self
            .retriever
            .fanout_search(&query_vec, plan.k, &plan.excluded)
            .await?;
        timings.set(Stage::FanoutTotal, started.elapsed());
        timings.set(
            Stage::SingleAnnCall,
            fanout.call_times.iter().max().copied().unwrap_or_default(),
        );
        if fanout.partial() {
            tracing::warn!(
                failed = fanout.failures.len(),
                total = fanout.partitions_total,
                "partial retrieval coverage"
            );
        }

        let started = Instant::now();
        let docs = fanout
            .hits
            .iter()
            .map(|h| self.corpus.get_document(h.doc_id))
            .collect::<Result<Vec<_>, _>>()?;
        timings.set(Stage::FetchDocuments, started.elapsed());

        let started = Instant::now();
        let mut snippets = Vec::with_capacity(docs.len());
        let mut skipped = Vec::new();
        for doc in &docs {
            let snippet = match plan.method {
                SnippetMethod::NaiveFirst => snippet_naive_first(doc, plan.window),
                SnippetMethod::SlidingWindow => {
                    snippet_sliding_window(doc, &query_vec, plan.window, plan.stride, &*self.embedder)
                        .await
                }
            };
            match snippet {
                Ok(s) => snippets.push(s),
                Err(ContextError::EmptyDocument(id)) => {
                    tracing::warn!(doc_id = id, "skipping empty document");
                    skipped.push(id);
                }
                Err(e) => return Err(e.into()),
            }
        }
        timings.set(Stage::Snippeting, started.elapsed());

        let prompt = assemble_prompt(&snippets, query, &self.template)?;
        let (generation, gw) = self
            .gateway
            .run(&prompt.surfaces(), &prompt.layout, params)
            .await?;
        timings.set(Stage::Generation, gw.generation);
        timings.set(Stage::AttentionForward, gw.attention_forward);
        timings.set(Stage::Total, request_started.elapsed());

        Ok(PipelineOutput {
            hits: fanout.hits,
            partitions_total: fanout.partitions_total,
            retrieval_failures: fanout.failures,
            snippets,
            skipped_documents: skipped,
            prompt,
            generation,
            timings,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn timings_cover_every_stage() {
        let mut t = StageTimings::default();
        assert!(t.is_complete());
        t.set_seconds(Stage::Embed, 0.5);
        t.set_seconds(Stage::SingleAnnCall, 0.2);
        t.set_seconds(Stage::FanoutTotal, 0.3);
        t.set_seconds(Stage::Total, 1.0);
        assert_eq!(t.disjoint_sum(), 0.8);
        assert!((t.residual() - 0.2).abs() < 1e-12);
        let json = serde_json::to_string(&t).unwrap();
        assert!(json.starts_with("[{\"stage\":\"embed\""));
        assert_eq!(serde_json::from_str::<StageTimings>(&json).unwrap(), t);
    }
}
