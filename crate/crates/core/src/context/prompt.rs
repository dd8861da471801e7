//! Prompt assembly with a token-level layout of where each prompt token came from.

use serde::{Deserialize, Serialize};

use super::{ContextError, Snippet};
use crate::tokenize::{tokenize, Token};

pub const DOCUMENTS_PLACEHOLDER: &str = "{documents}";
pub const QUERY_PLACEHOLDER: &str = "{query}";

pub const DEFAULT_TEMPLATE: &str = "Answer the question using the provided documents.\n\n\
{documents}\n\nQuestion: {query}\nAnswer:";

/// A prompt template split around its `{documents}` and `{query}` placeholders.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub preamble: String,
    pub query_prefix: String,
    pub suffix: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self::parse(DEFAULT_TEMPLATE).expect("default template is valid")
    }
}

impl PromptTemplate {
    pub fn parse(template: &str) -> Result<Self, ContextError> {
        let count = |p: &str| template.matches(p).count();
        if count(DOCUMENTS_PLACEHOLDER) != 1 || count(QUERY_PLACEHOLDER) != 1 {
            return Err(ContextError::Template(format!(
                "template must contain {DOCUMENTS_PLACEHOLDER} and {QUERY_PLACEHOLDER} exactly once each"
            )));
        }
        let (preamble, rest) = template
            .split_once(DOCUMENTS_PLACEHOLDER)
            .expect("placeholder present");
        let (query_prefix, suffix) = rest.split_once(QUERY_PLACEHOLDER).ok_or_else(|| {
            ContextError::Template(format!(
                "{DOCUMENTS_PLACEHOLDER} must come before {QUERY_PLACEHOLDER}"
            ))
        })?;
        Ok(Self {
            preamble: preamble.to_owned(),
            query_prefix: query_prefix.to_owned(),
            suffix: suffix.to_owned(),
        })
    }

    /// Visible ordinal header placed before the `rank`-th (1-based) document.
    pub fn document_header(rank: usize) -> String {
        format!("\n[{rank}] ")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    Template,
    Document,
    Query,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub kind: SegmentKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub doc_id: Option<u64>,
    pub prompt_token_start: usize,
    pub prompt_token_end: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.prompt_token_end - self.prompt_token_start
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextLayout {
    pub segments: Vec<Segment>,
}

impl ContextLayout {
    pub fn prompt_len(&self) -> usize {
        self.segments.last().map_or(0, |s| s.prompt_token_end)
    }

    pub fn documents(&self) -> impl Iterator<Item = &Segment> {
        self.segments.iter().filter(|s| s.kind == SegmentKind::Document)
    }

    /// Checks that the segments tile `[0, prompt_len)` and hold exactly one query.
    pub fn validate(&self, prompt_len: usize) -> Result<(), String> {
        let mut cursor = 0;
        for (i, s) in self.segments.iter().enumerate() {
            if s.prompt_token_start != cursor || s.prompt_token_end <= s.prompt_token_start {
                return Err(format!(
                    "segment {i} spans [{}, {}) but expected to start at {cursor}",
                    s.prompt_token_start, s.prompt_token_end
                ));
            }
            if (s.kind == SegmentKind::Document) != s.doc_id.is_some() {
                return Err(format!("segment {i} has inconsistent doc_id"));
            }
            cursor = s.prompt_token_end;
        }
        if cursor != prompt_len {
            return Err(format!("segments end at {cursor}, prompt has {prompt_len} tokens"));
        }
        let queries = self
            .segments
            .iter()
            .filter(|s| s.kind == SegmentKind::Query)
            .count();
        if queries != 1 {
            return Err(format!("expected exactly one query segment, found {queries}"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssembledPrompt {
    pub text: String,
    pub tokens: Vec<Token>,
    pub layout: ContextLayout,
}

impl AssembledPrompt {
    pub fn surfaces(&self) -> Vec<String> {
        self.tokens.iter().map(|t| t.surface.clone()).collect()
    }
}

struct PromptWriter {
    text: String,
    tokens: Vec<Token>,
    layout: ContextLayout,
}

impl PromptWriter {
    fn push(&mut self, kind: SegmentKind, doc_id: Option<u64>, piece: &str) {
        let piece_tokens = tokenize(piece);
        if piece_tokens.is_empty() {
            // Keep whitespace-only template text so the rendering matches the template.
            self.text.push_str(piece);
            return;
        }
        // Pieces must stay whitespace-separated so the whole prompt re-tokenizes identically.
        let needs_space = self.text.chars().next_back().is_some_and(|c| !c.is_whitespace())
            && piece.chars().next().is_some_and(|c| !c.is_whitespace());
        if needs_space {
            self.text.push(' ');
        }
        let base = self.text.len();
        self.text.push_str(piece);

        let start = self.tokens.len();
        self.tokens.extend(piece_tokens.into_iter().map(|t| Token {
            surface: t.surface,
            char_start: t.char_start + base,
            char_end: t.char_end + base,
        }));
        let end = self.tokens.len();

        // Adjacent template pieces merge into one segment.
        if let Some(last) = self.layout.segments.last_mut() {
            if kind == SegmentKind::Template && last.kind == SegmentKind::Template {
                last.prompt_token_end = end;
                return;
            }
        }
        self.layout.segments.push(Segment {
            kind,
            doc_id,
            prompt_token_start: start,
            prompt_token_end: end,
        });
    }
}

/// Renders `template` around ranked snippets and the query.
///
/// Each snippet is preceded by a template-kind `[n]` header so header tokens
/// never count toward a document's attention.
pub fn assemble_prompt(
    snippets: &[Snippet],
    query: &str,
    template: &PromptTemplate,
) -> Result<AssembledPrompt, ContextError> {
    if tokenize(query).is_empty() {
        return Err(ContextError::InvalidPlan("query has no tokens".into()));
    }
    let mut w = PromptWriter {
        text: String::new(),
        tokens: Vec::new(),
        layout: ContextLayout::default(),
    };
    w.push(SegmentKind::Template, None, &template.preamble);
    for (rank, snippet) in snippets.iter().enumerate() {
        w.push(SegmentKind::Template, None, &PromptTemplate::document_header(rank + 1));
        w.push(SegmentKind::Document, Some(snippet.doc_id), &snippet.text);
    }
    w.push(SegmentKind::Template, None, &template.query_prefix);
    w.push(SegmentKind::Query, None, query);
    w.push(SegmentKind::Template, None, &template.suffix);
    Ok(AssembledPrompt {
        text: w.text,
        tokens: w.tokens,
        layout: w.layout,
    })
}
