use std::collections::VecDeque;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::search::beam_search;
use super::{AnnGraph, BuildParams, IndexError, PartitionManifest};
use crate::embed::{inner_product, EmbeddingVector};

/// Euclidean distance between unit vectors, derived from their inner product.
#[inline]
fn unit_distance(a: &[f32], b: &[f32]) -> f32 {
    (2.0 - 2.0 * inner_product(a, b)).max(0.0).sqrt()
}

struct Builder<'a> {
    dim: usize,
    vectors: &'a [f32],
    neighbors: Vec<Vec<u32>>,
    max_degree: usize,
}

impl Builder<'_> {
    fn vector(&self, id: u32) -> &[f32] {
        let start = id as usize * self.dim;
        &self.vectors[start..start + self.dim]
    }

    /// Keeps at most `max_degree` of `candidates`, closest first, dropping any
    /// candidate that an already-kept neighbor covers within `alpha` slack.
    fn robust_prune(&self, node: u32, candidates: &mut Vec<u32>, alpha: f32) -> Vec<u32> {
        let base = self.vector(node);
        candidates.sort_unstable();
        candidates.dedup();
        let mut scored: Vec<(f32, u32)> = candidates
            .iter()
            .filter(|&&c| c != node)
            .map(|&c| (unit_distance(base, self.vector(c)), c))
            .collect();
        scored.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));

        let mut kept = Vec::with_capacity(self.max_degree);
        while let Some(&(_, best)) = scored.first() {
            kept.push(best);
            if kept.len() == self.max_degree {
                break;
            }
            let best_vec = self.vector(best);
            scored.retain(|&(d, c)| c != best && alpha * unit_distance(best_vec, self.vector(c)) > d);
        }
        kept
    }

    fn insert_pass(&mut self, order: &[u32], entry: u32, beam: usize, alpha: f32) {
        for &node in order {
            let search = beam_search(
                &self.neighbors,
                |id| {
                    let start = id as usize * self.dim;
                    &self.vectors[start..start + self.dim]
                },
                entry,
                self.vector(node),
                beam,
            );
            let mut candidates = search.expanded;
            candidates.extend_from_slice(&self.neighbors[node as usize]);
            let pruned = self.robust_prune(node, &mut candidates, alpha);
            self.neighbors[node as usize] = pruned.clone();

            for nb in pruned {
                let list = &self.neighbors[nb as usize];
                if list.contains(&node) {
                    continue;
                }
                if list.len() < self.max_degree {
                    self.neighbors[nb as usize].push(node);
                } else {
                    let mut candidates = list.clone();
                    candidates.push(node);
                    self.neighbors[nb as usize] = self.robust_prune(nb, &mut candidates, alpha);
                }
            }
        }
    }

    fn farthest_neighbor(&self, node: u32) -> usize {
        let base = self.vector(node);
        self.neighbors[node as usize]
            .iter()
            .enumerate()
            .map(|(i, &w)| (i, inner_product(base, self.vector(w))))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(i, _)| i)
            .expect("full adjacency list is non-empty")
    }

    /// Adds edges until every node is reachable from `entry`.
    fn repair_connectivity(&mut self, entry: u32) {
        let n = self.neighbors.len();
        let mut reached = reachable(&self.neighbors, entry);
        while let Some(orphan) = reached.iter().position(|&r| !r) {
            let orphan = orphan as u32;
            let target = self.vector(orphan);
            let closest = |require_room: bool| {
                (0..n as u32)
                    .filter(|&v| reached[v as usize])
                    .filter(|&v| !require_room || self.neighbors[v as usize].len() < self.max_degree)
                    .map(|v| (inner_product(target, self.vector(v)), v))
                    .max_by(|a, b| a.0.total_cmp(&b.0).then_with(|| b.1.cmp(&a.1)))
                    .map(|(_, v)| v)
            };
            match closest(true) {
                Some(v) => {
                    self.neighbors[v as usize].push(orphan);
                    mark_from(&self.neighbors, orphan, &mut reached);
                }
                None => {
                    // Every reachable node is full. Reroute v -> w as v -> orphan -> w:
                    // everything reachable before stays reachable and the orphan joins.
                    let v = closest(false).expect("entry point is always reachable");
                    let far_pos = self.farthest_neighbor(v);
                    let w = std::mem::replace(&mut self.neighbors[v as usize][far_pos], orphan);
                    if !self.neighbors[orphan as usize].contains(&w) {
                        if self.neighbors[orphan as usize].len() < self.max_degree {
                            self.neighbors[orphan as usize].push(w);
                        } else {
                            let pos = self.farthest_neighbor(orphan);
                            self.neighbors[orphan as usize][pos] = w;
                        }
                    }
                    reached = reachable(&self.neighbors, entry);
                }
            }
        }
    }
}

pub(super) fn reachable(neighbors: &[Vec<u32>], entry: u32) -> Vec<bool> {
    let mut reached = vec![false; neighbors.len()];
    mark_from(neighbors, entry, &mut reached);
    reached
}

fn mark_from(neighbors: &[Vec<u32>], start: u32, reached: &mut [bool]) {
    if reached[start as usize] {
        return;
    }
    reached[start as usize] = true;
    let mut queue = VecDeque::from([start]);
    while let Some(node) = queue.pop_front() {
        for &nb in &neighbors[node as usize] {
            if !reached[nb as usize] {
                reached[nb as usize] = true;
                queue.push_back(nb);
            }
        }
    }
}

/// Node whose vector has the largest inner product with the normalized centroid.
fn medoid(vectors: &[f32], dim: usize, n: usize) -> u32 {
    let mut centroid = vec![0.0f64; dim];
    for row in vectors.chunks_exact(dim) {
        for (c, &v) in centroid.iter_mut().zip(row) {
            *c += f64::from(v);
        }
    }
    let centroid: Vec<f32> = centroid.into_iter().map(|c| (c / n as f64) as f32).collect();
    vectors
        .chunks_exact(dim)
        .enumerate()
        .map(|(i, row)| (inner_product(&centroid, row), i as u32))
        .max_by(|a, b| a.0.total_cmp(&b.0).then_with(|| b.1.cmp(&a.1)))
        .map(|(_, i)| i)
        .unwrap_or(0)
}

impl AnnGraph {
    /// Builds a partition index. Deterministic for a given `params.seed` and input.
    pub fn build(
        dim: usize,
        vectors: &[EmbeddingVector],
        manifest: PartitionManifest,
        params: BuildParams,
    ) -> Result<AnnGraph, IndexError> {
        params.validate()?;
        if dim == 0 {
            return Err(IndexError::InvalidParam("dimension must be >= 1".into()));
        }
        if vectors.len() as u64 != manifest.count {
            return Err(IndexError::CountMismatch {
                declared: manifest.count,
                actual: vectors.len() as u64,
            });
        }
        if vectors.len() > u32::MAX as usize {
            return Err(IndexError::InvalidParam("partition exceeds u32 node ids".into()));
        }
        if let Some((index, v)) = vectors.iter().enumerate().find(|(_, v)| v.dim() != dim) {
            return Err(IndexError::DimensionMismatch {
                index,
                expected: dim,
                actual: v.dim(),
            });
        }

        let n = vectors.len();
        let flat: Vec<f32> = vectors.iter().flat_map(|v| v.as_slice().iter().copied()).collect();
        if n == 0 {
            return Ok(AnnGraph {
                dim,
                manifest,
                params,
                vectors: flat,
                neighbors: Vec::new(),
                entry_point: 0,
            });
        }

        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let start_degree = params.max_degree.min(n - 1);
        let initial: Vec<Vec<u32>> = (0..n)
            .map(|node| {
                // Sample from n-1 slots and skip over `node` to avoid self-loops.
                index::sample(&mut rng, n - 1, start_degree)
                    .into_iter()
                    .map(|j| if j >= node { j as u32 + 1 } else { j as u32 })
                    .collect()
            })
            .collect();

        let entry = medoid(&flat, dim, n);
        let mut builder = Builder {
            dim,
            vectors: &flat,
            neighbors: initial,
            max_degree: params.max_degree,
        };

        let mut order: Vec<u32> = (0..n as u32).collect();
        for alpha in [1.0, params.alpha] {
            order.shuffle(&mut rng);
            builder.insert_pass(&order, entry, params.build_beam, alpha);
        }
        builder.repair_connectivity(entry);
        let neighbors = builder.neighbors;

        tracing::debug!(
            partition = manifest.partition_id,
            nodes = n,
            entry,
            "built partition graph"
        );
        Ok(AnnGraph {
            dim,
            manifest,
            params,
            vectors: flat,
            neighbors,
            entry_point: entry,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ann::SearchHit;
    use rand::Rng;

    fn random_unit_vectors(n: usize, dim: usize, seed: u64) -> Vec<EmbeddingVector> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let raw: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
                EmbeddingVector::normalized(raw).unwrap()
            })
            .collect()
    }

    fn manifest(count: usize, offset: u64) -> PartitionManifest {
        PartitionManifest {
            partition_id: 0,
            global_offset: offset,
            count: count as u64,
        }
    }

    fn brute_force(vectors: &[EmbeddingVector], q: &[f32], k: usize, offset: u64) -> Vec<u64> {
        let mut all: Vec<SearchHit> = vectors
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let mut s = 0.0f32;
                for (a, b) in q.iter().zip(v.as_slice()) {
                    s += a * b;
                }
                SearchHit {
                    doc_id: offset + i as u64,
                    score: s,
                }
            })
            .collect();
        all.sort_by(crate::ann::hit_order);
        all.into_iter().take(k).map(|h| h.doc_id).collect()
    }

    #[test]
    fn singleton_graph() {
        let vs = random_unit_vectors(1, 8, 1);
        let g = AnnGraph::build(8, &vs, manifest(1, 0), BuildParams::default()).unwrap();
        assert_eq!(g.len(), 1);
        assert!(g.neighbors(0).is_empty());
        assert_eq!(g.entry_point(), 0);
        assert_eq!(g.reachable_count(), 1);
    }

    #[test]
    fn empty_graph_searches_empty() {
        let g = AnnGraph::build(8, &[], manifest(0, 0), BuildParams::default()).unwrap();
        assert!(g.is_empty());
        assert!(g.search(&[0.0; 8], 5, 16).unwrap().is_empty());
    }

    #[test]
    fn degree_bound_no_self_loops_and_connected() {
        let vs = random_unit_vectors(100, 16, 2);
        let params = BuildParams {
            max_degree: 16,
            ..BuildParams::default()
        };
        let g = AnnGraph::build(16, &vs, manifest(100, 0), params).unwrap();
        for node in 0..100u32 {
            let nbs = g.neighbors(node);
            assert!(nbs.len() <= 16);
            assert!(!nbs.contains(&node));
            assert!(nbs.iter().all(|&j| j < 100));
            let mut sorted = nbs.to_vec();
            sorted.sort_unstable();
            sorted.dedup();
            assert_eq!(sorted.len(), nbs.len(), "duplicate edge at {node}");
        }
        assert_eq!(g.reachable_count(), 100);
    }

    #[test]
    fn tiny_degree_still_connected() {
        let vs = random_unit_vectors(300, 8, 3);
        let params = BuildParams {
            max_degree: 2,
            build_beam: 8,
            ..BuildParams::default()
        };
        let g = AnnGraph::build(8, &vs, manifest(300, 0), params).unwrap();
        assert_eq!(g.reachable_count(), 300);
        assert!((0..300).all(|n| g.neighbors(n).len() <= 2));
    }

    #[test]
    fn deterministic_for_seed() {
        let vs = random_unit_vectors(200, 16, 4);
        let a = AnnGraph::build(16, &vs, manifest(200, 0), BuildParams::default()).unwrap();
        let b = AnnGraph::build(16, &vs, manifest(200, 0), BuildParams::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn self_retrieval_with_global_ids() {
        let vs = random_unit_vectors(100, 16, 5);
        let g = AnnGraph::build(16, &vs, manifest(100, 500), BuildParams::default()).unwrap();
        for (i, v) in vs.iter().enumerate() {
            let hits = g.search(v.as_slice(), 3, 32).unwrap();
            assert_eq!(hits[0].doc_id, 500 + i as u64);
            assert!((hits[0].score - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn truncates_to_partition_size() {
        let vs = random_unit_vectors(2, 4, 6);
        let g = AnnGraph::build(4, &vs, manifest(2, 0), BuildParams::default()).unwrap();
        assert_eq!(g.search(vs[0].as_slice(), 3, 3).unwrap().len(), 2);
    }

    #[test]
    fn exhaustive_beam_is_exact() {
        let vs = random_unit_vectors(400, 12, 7);
        let g = AnnGraph::build(12, &vs, manifest(400, 0), BuildParams::default()).unwrap();
        let qs = random_unit_vectors(20, 12, 8);
        for q in &qs {
            let got: Vec<u64> = g
                .search(q.as_slice(), 10, 400)
                .unwrap()
                .iter()
                .map(|h| h.doc_id)
                .collect();
            assert_eq!(got, brute_force(&vs, q.as_slice(), 10, 0));
        }
    }

    #[test]
    fn scores_match_recomputation_and_are_sorted() {
        let vs = random_unit_vectors(300, 16, 9);
        let g = AnnGraph::build(16, &vs, manifest(300, 0), BuildParams::default()).unwrap();
        for q in random_unit_vectors(10, 16, 10) {
            let hits = g.search(q.as_slice(), 10, 40).unwrap();
            assert!(hits.windows(2).all(|w| crate::ann::hit_order(&w[0], &w[1]).is_lt()));
            for h in &hits {
                let direct = q.dot(&vs[h.doc_id as usize]);
                assert!((direct - h.score).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn rejects_bad_input() {
        let vs = random_unit_vectors(3, 4, 11);
        assert!(matches!(
            AnnGraph::build(4, &vs, manifest(2, 0), BuildParams::default()),
            Err(IndexError::CountMismatch { .. })
        ));
        assert!(matches!(
            AnnGraph::build(5, &vs, manifest(3, 0), BuildParams::default()),
            Err(IndexError::DimensionMismatch { index: 0, .. })
        ));
        let bad = BuildParams {
            alpha: 0.5,
            ..BuildParams::default()
        };
        assert!(AnnGraph::build(4, &vs, manifest(3, 0), bad).is_err());
        let g = AnnGraph::build(4, &vs, manifest(3, 0), BuildParams::default()).unwrap();
        assert!(g.search(&[1.0; 3], 1, 4).is_err());
        assert!(g.search(vs[0].as_slice(), 0, 4).is_err());
    }

    #[test]
    fn tiling_helpers() {
        let parts = PartitionManifest::tile(10, 4);
        assert_eq!(parts.iter().map(|p| p.count).collect::<Vec<_>>(), [3, 3, 2, 2]);
        assert_eq!(parts[3].global_offset, 8);
        assert!(PartitionManifest::validate_tiling(&parts, 10).is_ok());
        assert!(PartitionManifest::validate_tiling(&parts[1..], 10).is_err());
        assert!(PartitionManifest::validate_tiling(&parts, 11).is_err());
    }
}
