use std::cmp::Ordering;

use super::{AnnGraph, IndexError, SearchHit};
use crate::embed::inner_product;

/// Fixed-size bitset over node ids.
pub(super) struct Visited(Vec<u64>);

impl Visited {
    pub(super) fn new(n: usize) -> Self {
        Self(vec![0; n.div_ceil(64)])
    }

    /// Marks `id`, returning true if it was not already marked.
    #[inline]
    pub(super) fn insert(&mut self, id: u32) -> bool {
        let (word, bit) = (id as usize / 64, id % 64);
        let mask = 1u64 << bit;
        let fresh = self.0[word] & mask == 0;
        self.0[word] |= mask;
        fresh
    }
}

#[derive(Clone, Copy)]
struct Candidate {
    score: f32,
    id: u32,
    expanded: bool,
}

#[inline]
fn better(a: &Candidate, b: &Candidate) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.id.cmp(&b.id))
}

/// Result of one greedy beam search.
pub(super) struct BeamResult {
    /// Best candidates, sorted best first; at most `beam` entries.
    pub pool: Vec<(u32, f32)>,
    /// Nodes whose adjacency lists were expanded, in expansion order.
    pub expanded: Vec<u32>,
}

/// Greedy beam search from `entry` over `neighbors`, scoring with `vector_of`.
pub(super) fn beam_search<'a, F>(
    neighbors: &[Vec<u32>],
    vector_of: F,
    entry: u32,
    query: &[f32],
    beam: usize,
) -> BeamResult
where
    F: Fn(u32) -> &'a [f32],
{
    let mut visited = Visited::new(neighbors.len());
    visited.insert(entry);
    let mut pool = vec![Candidate {
        score: inner_product(query, vector_of(entry)),
        id: entry,
        expanded: false,
    }];
    let mut expanded = Vec::new();

    while let Some(pos) = pool.iter().position(|c| !c.expanded) {
        pool[pos].expanded = true;
        let node = pool[pos].id;
        expanded.push(node);
        for &nb in &neighbors[node as usize] {
            if !visited.insert(nb) {
                continue;
            }
            let cand = Candidate {
                score: inner_product(query, vector_of(nb)),
                id: nb,
                expanded: false,
            };
            if pool.len() >= beam && better(&cand, pool.last().expect("non-empty pool")).is_ge() {
                continue;
            }
            let at = pool
                .binary_search_by(|probe| better(probe, &cand))
                .unwrap_or_else(|i| i);
            pool.insert(at, cand);
            pool.truncate(beam);
        }
    }

    BeamResult {
        pool: pool.into_iter().map(|c| (c.id, c.score)).collect(),
        expanded,
    }
}

impl AnnGraph {
    /// Approximate top-`k` by inner product, with global doc ids.
    ///
    /// A beam of at least `len()` makes the search exhaustive, so the result
    /// equals exact top-`k`.
    pub fn search(&self, query: &[f32], k: usize, beam: usize) -> Result<Vec<SearchHit>, IndexError> {
        if query.len() != self.dim {
            return Err(IndexError::DimensionMismatch {
                index: 0,
                expected: self.dim,
                actual: query.len(),
            });
        }
        if k == 0 {
            return Err(IndexError::InvalidParam("k must be >= 1".into()));
        }
        if self.is_empty() {
            return Ok(Vec::new());
        }
        let beam = beam.max(k);
        let result = beam_search(
            &self.neighbors,
            |id| self.vector(id),
            self.entry_point,
            query,
            beam,
        );
        let offset = self.manifest.global_offset;
        Ok(result
            .pool
            .into_iter()
            .take(k)
            .map(|(id, score)| SearchHit {
                doc_id: offset + u64::from(id),
                score,
            })
            .collect())
    }
}
