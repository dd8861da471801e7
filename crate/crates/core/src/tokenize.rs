//! Display tokenizer shared by the corpus, snippeting and prompt layout.
//!
//! Text is split on Unicode whitespace; within each whitespace-delimited run,
//! leading and trailing ASCII punctuation characters are detached into
//! single-character tokens. Interior punctuation (`don't`, `e.g`) stays put.

use serde::{Deserialize, Serialize};

/// A token and its byte span in the source text.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Token {
    pub surface: String,
    /// Byte offset of the first byte.
    pub char_start: usize,
    /// Byte offset one past the last byte.
    pub char_end: usize,
}

impl Token {
    fn new(text: &str, start: usize, end: usize) -> Self {
        Self {
            surface: text[start..end].to_owned(),
            char_start: start,
            char_end: end,
        }
    }

    pub fn len(&self) -> usize {
        self.char_end - self.char_start
    }

    pub fn is_empty(&self) -> bool {
        self.char_end == self.char_start
    }
}

pub fn tokenize(text: &str) -> Vec<Token> {
    let mut tokens = Vec::new();
    let mut run_start: Option<usize> = None;
    for (idx, ch) in text.char_indices() {
        if ch.is_whitespace() {
            if let Some(start) = run_start.take() {
                split_run(text, start, idx, &mut tokens);
            }
        } else if run_start.is_none() {
            run_start = Some(idx);
        }
    }
    if let Some(start) = run_start {
        split_run(text, start, text.len(), &mut tokens);
    }
    tokens
}

/// Splits one whitespace-free run `text[start..end]` into tokens.
fn split_run(text: &str, start: usize, end: usize, out: &mut Vec<Token>) {
    let bytes = text.as_bytes();
    // ASCII punctuation is always a single byte, so byte-stepping is safe here.
    let mut lo = start;
    while lo < end && bytes[lo].is_ascii_punctuation() {
        out.push(Token::new(text, lo, lo + 1));
        lo += 1;
    }
    let mut hi = end;
    while hi > lo && bytes[hi - 1].is_ascii_punctuation() {
        hi -= 1;
    }
    if lo < hi {
        out.push(Token::new(text, lo, hi));
    }
    for p in hi..end {
        out.push(Token::new(text, p, p + 1));
    }
}

/// Byte range of `text` covered by `tokens[start..end]`.
pub fn span_bytes(tokens: &[Token], start: usize, end: usize) -> Option<(usize, usize)> {
    if start >= end || end > tokens.len() {
        return None;
    }
    Some((tokens[start].char_start, tokens[end - 1].char_end))
}
