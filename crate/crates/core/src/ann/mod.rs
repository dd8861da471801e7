//! Graph-based approximate nearest-neighbor index over one partition.
//!
//! Build follows the Vamana recipe: start from a random regular graph, then
//! make two passes over the points in random order, greedy-searching for each
//! point from the medoid and robust-pruning its neighborhood (first with
//! `alpha = 1`, then with the configured slack). Reverse edges are added and
//! pruned back to the degree bound. A final repair step guarantees that every
//! node is reachable from the entry point.
//!
//! Similarity is inner product on unit vectors. Results are ordered by score
//! descending with ties broken by ascending document id.

mod build;
mod io;
mod search;

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use io::{FORMAT_VERSION, MAGIC};

pub const DEFAULT_MAX_DEGREE: usize = 64;
pub const DEFAULT_BUILD_BEAM: usize = 64;
pub const DEFAULT_ALPHA: f32 = 1.2;
pub const DEFAULT_SEARCH_BEAM: usize = 64;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("index format error: {0}")]
    Format(String),
    #[error("corrupt index file: {0}")]
    Corrupt(String),
    #[error("vector {index} has dimension {actual}, expected {expected}")]
    DimensionMismatch {
        index: usize,
        expected: usize,
        actual: usize,
    },
    #[error("manifest declares {declared} vectors but {actual} were supplied")]
    CountMismatch { declared: u64, actual: u64 },
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
}

/// Placement of one partition in the global document id space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionManifest {
    pub partition_id: u32,
    /// First global doc id held by this partition.
    pub global_offset: u64,
    pub count: u64,
}

impl PartitionManifest {
    /// Splits `[0, total)` into `parts` contiguous partitions whose sizes differ by at most one.
    pub fn tile(total: u64, parts: u32) -> Vec<PartitionManifest> {
        assert!(parts > 0, "need at least one partition");
        let base = total / u64::from(parts);
        let extra = total % u64::from(parts);
        let mut offset = 0;
        (0..parts)
            .map(|p| {
                let count = base + u64::from(u64::from(p) < extra);
                let m = PartitionManifest {
                    partition_id: p,
                    global_offset: offset,
                    count,
                };
                offset += count;
                m
            })
            .collect()
    }

    /// Checks that `parts` tile `[0, total)`: sorted, contiguous, non-overlapping.
    pub fn validate_tiling(parts: &[PartitionManifest], total: u64) -> Result<(), String> {
        let mut sorted = parts.to_vec();
        sorted.sort_by_key(|p| p.global_offset);
        let mut next = 0u64;
        for p in &sorted {
            if p.global_offset != next {
                return Err(format!(
                    "partition {} starts at {} but previous ends at {next}",
                    p.partition_id, p.global_offset
                ));
            }
            next += p.count;
        }
        if next != total {
            return Err(format!("partitions cover {next} documents, corpus has {total}"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BuildParams {
    /// Maximum out-degree (R).
    pub max_degree: usize,
    /// Beam width used while building (L_build).
    pub build_beam: usize,
    /// Pruning slack; must be >= 1.
    pub alpha: f32,
    pub seed: u64,
}

impl Default for BuildParams {
    fn default() -> Self {
        Self {
            max_degree: DEFAULT_MAX_DEGREE,
            build_beam: DEFAULT_BUILD_BEAM,
            alpha: DEFAULT_ALPHA,
            seed: 0,
        }
    }
}

impl BuildParams {
    fn validate(&self) -> Result<(), IndexError> {
        if self.max_degree == 0 || self.max_degree > u32::MAX as usize {
            return Err(IndexError::InvalidParam(format!(
                "max_degree must be in 1..=u32::MAX, got {}",
                self.max_degree
            )));
        }
        if self.build_beam == 0 {
            return Err(IndexError::InvalidParam("build_beam must be >= 1".into()));
        }
        if !(self.alpha >= 1.0 && self.alpha.is_finite()) {
            return Err(IndexError::InvalidParam(format!(
                "alpha must be a finite value >= 1, got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    pub doc_id: u64,
    pub score: f32,
}

/// Score descending, then doc id ascending.
pub fn hit_order(a: &SearchHit, b: &SearchHit) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.doc_id.cmp(&b.doc_id))
}

/// An immutable, searchable partition index.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnGraph {
    dim: usize,
    manifest: PartitionManifest,
    params: BuildParams,
    vectors: Vec<f32>,
    neighbors: Vec<Vec<u32>>,
    entry_point: u32,
}

impl AnnGraph {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn manifest(&self) -> PartitionManifest {
        self.manifest
    }

    pub fn params(&self) -> BuildParams {
        self.params
    }

    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn entry_point(&self) -> u32 {
        self.entry_point
    }

    pub fn neighbors(&self, node: u32) -> &[u32] {
        &self.neighbors[node as usize]
    }

    pub fn vector(&self, node: u32) -> &[f32] {
        let start = node as usize * self.dim;
        &self.vectors[start..start + self.dim]
    }

    /// Number of nodes reachable from the entry point.
    pub fn reachable_count(&self) -> usize {
        if self.is_empty() {
            return 0;
        }
        build::reachable(&self.neighbors, self.entry_point)
            .iter()
            .filter(|&&r| r)
            .count()
    }
}
