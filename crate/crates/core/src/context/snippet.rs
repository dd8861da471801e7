//! Snippet extraction: pick one contiguous token window to stand in for a document.

use serde::{Deserialize, Serialize};

use super::ContextError;
use crate::corpus::DocumentRecord;
use crate::embed::{EmbeddingVector, Embedder};

pub const DEFAULT_WINDOW: usize = 128;
pub const DEFAULT_STRIDE: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SnippetMethod {
    #[default]
    NaiveFirst,
    SlidingWindow,
}

impl std::str::FromStr for SnippetMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "naive_first" | "naive-first" => Ok(Self::NaiveFirst),
            "sliding_window" | "sliding-window" => Ok(Self::SlidingWindow),
            other => Err(format!("unknown snippet method `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snippet {
    pub doc_id: u64,
    /// First token index in the document.
    pub token_start: usize,
    /// One past the last token index.
    pub token_end: usize,
    pub tokens: Vec<String>,
    /// Source text of the span, with the document's original spacing.
    pub text: String,
    /// Inner product between the snippet embedding and the query, once computed.
    pub similarity: Option<f32>,
}

impl Snippet {
    fn from_span(doc: &DocumentRecord, start: usize, end: usize) -> Self {
        Self {
            doc_id: doc.doc_id,
            token_start: start,
            token_end: end,
            tokens: doc.tokens[start..end].iter().map(|t| t.surface.clone()).collect(),
            text: doc
                .span_text(start, end)
                .expect("span within document")
                .to_owned(),
            similarity: None,
        }
    }

    pub fn len(&self) -> usize {
        self.token_end - self.token_start
    }

    pub fn is_empty(&self) -> bool {
        self.token_end == self.token_start
    }
}

fn check_window(doc: &DocumentRecord, window: usize) -> Result<(), ContextError> {
    if doc.tokens.is_empty() {
        return Err(ContextError::EmptyDocument(doc.doc_id));
    }
    if window == 0 {
        return Err(ContextError::InvalidPlan("window must be >= 1".into()));
    }
    Ok(())
}

/// The document's first `window` tokens. Similarity is left unset.
pub fn snippet_naive_first(doc: &DocumentRecord, window: usize) -> Result<Snippet, ContextError> {
    check_window(doc, window)?;
    Ok(Snippet::from_span(doc, 0, window.min(doc.tokens.len())))
}

/// Candidate windows `[start, min(start + window, len))` for
/// `start = 0, stride, 2 * stride, ...` while `start < len`.
pub fn candidate_windows(len: usize, window: usize, stride: usize) -> Vec<(usize, usize)> {
    (0..len)
        .step_by(stride.max(1))
        .map(|start| (start, (start + window).min(len)))
        .collect()
}

/// Scores every candidate window against `query` and keeps the best one,
/// breaking ties by the smallest start.
pub async fn snippet_sliding_window(
    doc: &DocumentRecord,
    query: &EmbeddingVector,
    window: usize,
    stride: usize,
    embedder: &dyn Embedder,
) -> Result<Snippet, ContextError> {
    check_window(doc, window)?;
    if stride == 0 || stride > window {
        return Err(ContextError::InvalidPlan(format!(
            "stride must be in 1..={window}, got {stride}"
        )));
    }
    let spans = candidate_windows(doc.tokens.len(), window, stride);
    let texts: Vec<String> = spans
        .iter()
        .map(|&(s, e)| doc.span_text(s, e).expect("span within document").to_owned())
        .collect();
    let vectors = embedder.embed_batch(&texts).await?;
    if vectors.len() != spans.len() {
        return Err(ContextError::Embed(crate::embed::EmbedError::Protocol(format!(
            "asked for {} window embeddings, got {}",
            spans.len(),
            vectors.len()
        ))));
    }

    let mut best: Option<(usize, f32)> = None;
    for (i, v) in vectors.iter().enumerate() {
        let score = v.dot(query);
        // Strict comparison keeps the earliest window on ties.
        if best.is_none_or(|(_, s)| score > s) {
            best = Some((i, score));
        }
    }
    let (winner, score) = best.expect("at least one candidate window");
    let (start, end) = spans[winner];
    let mut snippet = Snippet::from_span(doc, start, end);
    snippet.similarity = Some(score);
    Ok(snippet)
}

/// Fills in `snippet.similarity` by embedding its text.
pub async fn score_snippet(
    snippet: &mut Snippet,
    query: &EmbeddingVector,
    embedder: &dyn Embedder,
) -> Result<f32, ContextError> {
    let v = embedder.embed(&snippet.text).await?;
    let score = v.dot(query);
    snippet.similarity = Some(score);
    Ok(score)
}
