//! Attention tensors and their reductions to token- and document-level attributions.
//!
//! A backend returns, for every layer, head and generated token, a softmax row
//! over the prompt plus any previously generated tokens. Rows are truncated to
//! the prompt positions and renormalized, giving an [`AttentionTensor`] over
//! input tokens only. Averaging that tensor over layers and heads gives a
//! [`TokenAttribution`]; summing attribution mass over each document segment
//! and averaging over output tokens gives [`DocumentAttentionScore`]s.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context::{ContextLayout, SegmentKind};

/// Row-sum tolerance for stochastic rows.
pub const ROW_SUM_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AttentionError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("layer {layer} head {head} output {output}: {reason}")]
    InvalidRow {
        layer: usize,
        head: usize,
        output: usize,
        reason: String,
    },
    #[error("output index {index} out of range for {out_len} output tokens")]
    SelectionOutOfRange { index: usize, out_len: usize },
}

/// Attention exactly as a backend reports it: `weights[layer][head][output][position]`,
/// where positions cover the prompt followed by earlier generated tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawAttention {
    pub layers: usize,
    pub heads: usize,
    pub weights: Vec<Vec<Vec<Vec<f64>>>>,
}

/// Input-only attention, flat in `[layer][head][output][input]` order.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTensor {
    layers: usize,
    heads: usize,
    out_len: usize,
    in_len: usize,
    weights: Vec<f64>,
}

impl AttentionTensor {
    /// Wraps row-stochastic weights, checking shape, signs and row sums.
    pub fn new(
        layers: usize,
        heads: usize,
        out_len: usize,
        in_len: usize,
        weights: Vec<f64>,
    ) -> Result<Self, AttentionError> {
        if layers == 0 || heads == 0 || out_len == 0 || in_len == 0 {
            return Err(AttentionError::Shape(format!(
                "all dimensions must be positive, got {layers}x{heads}x{out_len}x{in_len}"
            )));
        }
        if weights.len() != layers * heads * out_len * in_len {
            return Err(AttentionError::Shape(format!(
                "expected {} weights, got {}",
                layers * heads * out_len * in_len,
                weights.len()
            )));
        }
        for (r, row) in weights.chunks_exact(in_len).enumerate() {
            let (layer, head, output) = (r / (heads * out_len), (r / out_len) % heads, r % out_len);
            if row.iter().any(|&w| !w.is_finite() || w < 0.0) {
                return Err(AttentionError::InvalidRow {
                    layer,
                    head,
                    output,
                    reason: "negative or non-finite weight".into(),
                });
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(AttentionError::InvalidRow {
                    layer,
                    head,
                    output,
                    reason: format!("row sums to {sum}"),
                });
            }
        }
        Ok(Self {
            layers,
            heads,
            out_len,
            in_len,
            weights,
        })
    }

    /// Truncates each backend row to the first `in_len` positions and renormalizes.
    ///
    /// The declared `(layers, heads)` must match the payload exactly, and every
    /// row must cover at least the prompt.
    pub fn from_raw(
        raw: &RawAttention,
        in_len: usize,
        out_len: usize,
        expected_layers: usize,
        expected_heads: usize,
    ) -> Result<Self, AttentionError> {
        if raw.layers != expected_layers || raw.heads != expected_heads {
            return Err(AttentionError::Shape(format!(
                "backend declared {}x{} (layers x heads), expected {expected_layers}x{expected_heads}",
                raw.layers, raw.heads
            )));
        }
        if raw.weights.len() != raw.layers {
            return Err(AttentionError::Shape(format!(
                "payload has {} layers, header says {}",
                raw.weights.len(),
                raw.layers
            )));
        }
        let mut flat = Vec::with_capacity(raw.layers * raw.heads * out_len * in_len);
        for (layer, heads) in raw.weights.iter().enumerate() {
            if heads.len() != raw.heads {
                return Err(AttentionError::Shape(format!(
                    "layer {layer} has {} heads, header says {}",
                    heads.len(),
                    raw.heads
                )));
            }
            for (head, rows) in heads.iter().enumerate() {
                if rows.len() != out_len {
                    return Err(AttentionError::Shape(format!(
                        "layer {layer} head {head} has {} rows, expected {out_len}",
                        rows.len()
                    )));
                }
                for (output, row) in rows.iter().enumerate() {
                    let bad = |reason: String| AttentionError::InvalidRow {
                        layer,
                        head,
                        output,
                        reason,
                    };
                    if row.len() < in_len {
                        return Err(bad(format!("row has {} positions, prompt has {in_len}", row.len())));
                    }
                    let input = &row[..in_len];
                    if input.iter().any(|&w| !w.is_finite() || w < 0.0) {
                        return Err(bad("negative or non-finite weight".into()));
                    }
                    let mass: f64 = input.iter().sum();
                    if mass <= 0.0 {
                        return Err(bad("no attention mass on prompt tokens".into()));
                    }
                    flat.extend(input.iter().map(|&w| w / mass));
                }
            }
        }
        Self::new(raw.layers, raw.heads, out_len, in_len, flat)
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn out_len(&self) -> usize {
        self.out_len
    }

    pub fn in_len(&self) -> usize {
        self.in_len
    }

    pub fn row(&self, layer: usize, head: usize, output: usize) -> &[f64] {
        let r = (layer * self.heads + head) * self.out_len + output;
        &self.weights[r * self.in_len..(r + 1) * self.in_len]
    }
}

/// Mean attention over layers and heads: `[out_len][in_len]`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenAttribution {
    pub out_len: usize,
    pub in_len: usize,
    pub data: Vec<f64>,
}

impl TokenAttribution {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, AttentionError> {
        let in_len = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != in_len) {
            return Err(AttentionError::Shape("ragged attribution rows".into()));
        }
        Ok(Self {
            out_len: rows.len(),
            in_len,
            data: rows.concat(),
        })
    }

    pub fn row(&self, output: usize) -> &[f64] {
        &self.data[output * self.in_len..(output + 1) * self.in_len]
    }

    pub fn get(&self, output: usize, input: usize) -> f64 {
        self.data[output * self.in_len + input]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.in_len.max(1)).take(self.out_len)
    }
}

pub fn aggregate_attribution(tensor: &AttentionTensor) -> TokenAttribution {
    let slices = (tensor.layers * tensor.heads) as f64;
    let slice_len = tensor.out_len * tensor.in_len;
    let mut data = vec![0.0f64; slice_len];
    for slice in tensor.weights.chunks_exact(slice_len) {
        for (acc, &w) in data.iter_mut().zip(slice) {
            *acc += w;
        }
    }
    for v in &mut data {
        *v /= slices;
    }
    TokenAttribution {
        out_len: tensor.out_len,
        in_len: tensor.in_len,
        data,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentAttentionScore {
    pub doc_id: u64,
    /// Mean over output tokens of the attribution mass on this document's segment.
    pub raw: f64,
    /// `raw` divided by the total raw mass of all documents.
    pub share: f64,
}

/// Attribution mass of every layout segment, averaged over output tokens.
pub fn segment_masses(
    attr: &TokenAttribution,
    layout: &ContextLayout,
) -> Result<Vec<f64>, AttentionError> {
    if layout.prompt_len() != attr.in_len {
        return Err(AttentionError::Shape(format!(
            "layout covers {} prompt tokens, attribution has {}",
            layout.prompt_len(),
            attr.in_len
        )));
    }
    if attr.out_len == 0 {
        return Ok(vec![0.0; layout.segments.len()]);
    }
    let outputs = attr.out_len as f64;
    Ok(layout
        .segments
        .iter()
        .map(|seg| {
            attr.rows()
                .map(|row| row[seg.prompt_token_start..seg.prompt_token_end].iter().sum::<f64>())
                .sum::<f64>()
                / outputs
        })
        .collect())
}

/// One score per document segment, in layout order.
pub fn score_documents(
    attr: &TokenAttribution,
    layout: &ContextLayout,
) -> Result<Vec<DocumentAttentionScore>, AttentionError> {
    let masses = segment_masses(attr, layout)?;
    let docs: Vec<(u64, f64)> = layout
        .segments
        .iter()
        .zip(masses)
        .filter(|(seg, _)| seg.kind == SegmentKind::Document)
        .map(|(seg, mass)| (seg.doc_id.expect("document segment has doc_id"), mass))
        .collect();
    let total: f64 = docs.iter().map(|(_, m)| m).sum();
    Ok(docs
        .into_iter()
        .map(|(doc_id, raw)| DocumentAttentionScore {
            doc_id,
            raw,
            share: if total > 0.0 { raw / total } else { 0.0 },
        })
        .collect())
}

/// Per-input-token attention summed over a set of output tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionAttribution {
    pub sums: Vec<f64>,
    /// `sums` divided by its maximum; all zeros for an empty selection.
    pub scaled: Vec<f64>,
}

pub fn selection_attribution(
    attr: &TokenAttribution,
    selected: &BTreeSet<usize>,
) -> Result<SelectionAttribution, AttentionError> {
    if let Some(&index) = selected.iter().find(|&&o| o >= attr.out_len) {
        return Err(AttentionError::SelectionOutOfRange {
            index,
            out_len: attr.out_len,
        });
    }
    let mut sums = vec![0.0f64; attr.in_len];
    for &o in selected {
        for (acc, &w) in sums.iter_mut().zip(attr.row(o)) {
            *acc += w;
        }
    }
    let max = sums.iter().copied().fold(0.0f64, f64::max);
    let scaled = if max > 0.0 {
        sums.iter().map(|v| v / max).collect()
    } else {
        vec![0.0; sums.len()]
    };
    Ok(SelectionAttribution { sums, scaled })
}
