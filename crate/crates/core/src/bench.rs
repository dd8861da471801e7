//! Latency and snippeting benchmarks.
//!
//! Percentiles use the nearest-rank definition: for `n` sorted samples the
//! `p`-th percentile is the sample at 1-based rank `ceil(p * n)`. The median
//! is the 50th percentile under the same rule.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::time::{Duration, Instant};

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::GenerationParams;
use crate::context::{
    score_snippet, snippet_naive_first, snippet_sliding_window, ContextError, RetrievalPlan,
    Retriever, SnippetMethod,
};
use crate::corpus::CorpusStore;
use crate::embed::Embedder;
use crate::pipeline::{Pipeline, Stage, StageTimings};

pub const MIN_QUERIES: usize = 10;
pub const MAX_FAILURE_RATE: f64 = 0.2;
pub const RESIDUAL_ROW: &str = "other";

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("need at least {MIN_QUERIES} queries, got {0}")]
    TooFewQueries(usize),
    #[error("{failed} of {attempted} queries failed (limit {limit:.0}%); first error: {first}", limit = MAX_FAILURE_RATE * 100.0)]
    TooManyFailures {
        failed: usize,
        attempted: usize,
        first: String,
    },
    #[error("no samples to summarize")]
    NoSamples,
    #[error(transparent)]
    Context(#[from] ContextError),
    #[error("corpus error: {0}")]
    Corpus(#[from] crate::corpus::CorpusError),
}

/// Nearest-rank percentile of already-sorted samples; `p` in `(0, 1]`.
pub fn percentile_nearest_rank(sorted: &[f64], p: f64) -> Option<f64> {
    if sorted.is_empty() || !(p > 0.0 && p <= 1.0) {
        return None;
    }
    let n = sorted.len();
    let rank = ((p * n as f64).ceil() as usize).clamp(1, n);
    Some(sorted[rank - 1])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub median: f64,
    pub p95: f64,
}

impl Summary {
    pub fn of(samples: &[f64]) -> Option<Summary> {
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        Some(Summary {
            median: percentile_nearest_rank(&sorted, 0.5)?,
            p95: percentile_nearest_rank(&sorted, 0.95)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRow {
    pub stage: String,
    pub description: String,
    pub median: f64,
    pub p95: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub queries: usize,
    pub repeats: usize,
    pub samples: usize,
    pub failures: usize,
    /// One row per instrumented stage, `total` last.
    pub stages: Vec<StageRow>,
    /// Total minus the disjoint stages: transport, serialization, prompt assembly.
    pub other: StageRow,
}

impl LatencyReport {
    /// Summarizes per-request server timings. Pure in its inputs.
    pub fn from_samples(
        samples: &[StageTimings],
        queries: usize,
        repeats: usize,
        failures: usize,
    ) -> Result<LatencyReport, BenchError> {
        if samples.is_empty() {
            return Err(BenchError::NoSamples);
        }
        let row = |name: &str, description: &str, values: Vec<f64>| {
            let s = Summary::of(&values).expect("non-empty samples");
            StageRow {
                stage: name.to_owned(),
                description: description.to_owned(),
                median: s.median,
                p95: s.p95,
            }
        };
        let stages = Stage::ALL
            .iter()
            .map(|&stage| {
                row(
                    stage.as_str(),
                    stage.description(),
                    samples.iter().map(|t| t.get(stage)).collect(),
                )
            })
            .collect();
        let other = row(
            RESIDUAL_ROW,
            "Unattributed (transport, serialization, prompt assembly)",
            samples.iter().map(StageTimings::residual).collect(),
        );
        Ok(LatencyReport {
            queries,
            repeats,
            samples: samples.len(),
            failures,
            stages,
            other,
        })
    }

    /// Rows in display order: the stages, the residual, then the total.
    pub fn display_rows(&self) -> Vec<&StageRow> {
        let (total, body): (Vec<&StageRow>, Vec<&StageRow>) = self
            .stages
            .iter()
            .partition(|r| r.stage == Stage::Total.as_str());
        body.into_iter()
            .chain(std::iter::once(&self.other))
            .chain(total)
            .collect()
    }

    pub fn render_table(&self) -> String {
        let rows = self.display_rows();
        let width = rows.iter().map(|r| r.description.len()).max().unwrap_or(0).max(8);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<width$}  {:>14}  {:>14}",
            "Function", "Median (s)", "p95 (s)"
        );
        let _ = writeln!(out, "{}", "-".repeat(width + 32));
        for r in rows {
            let _ = writeln!(
                out,
                "{:<width$}  {:>14.6e}  {:>14.6e}",
                r.description, r.median, r.p95
            );
        }
        let _ = writeln!(
            out,
            "{} queries x {} repeats, {} samples, {} failures",
            self.queries, self.repeats, self.samples, self.failures
        );
        out
    }
}

/// Runs one query and reports the server-side stage timings.
#[async_trait]
pub trait QueryRunner: Send + Sync {
    async fn run_query(&self, query: &str) -> Result<StageTimings, String>;
}

/// In-process runner: calls the pipeline directly.
pub struct PipelineRunner {
    pub pipeline: Pipeline,
    pub plan: RetrievalPlan,
    pub params: GenerationParams,
}

#[async_trait]
impl QueryRunner for PipelineRunner {
    async fn run_query(&self, query: &str) -> Result<StageTimings, String> {
        self.pipeline
            .run(query, &self.plan, &self.params)
            .await
            .map(|out| out.timings)
            .map_err(|e| e.to_string())
    }
}

/// Issues every query `repeats` times, sequentially, and summarizes the timings.
pub async fn run_latency(
    runner: &dyn QueryRunner,
    queries: &[String],
    repeats: usize,
) -> Result<LatencyReport, BenchError> {
    if queries.len() < MIN_QUERIES {
        return Err(BenchError::TooFewQueries(queries.len()));
    }
    let repeats = repeats.max(1);
    let mut samples = Vec::with_capacity(queries.len() * repeats);
    let mut errors = Vec::new();
    for _ in 0..repeats {
        for q in queries {
            match runner.run_query(q).await {
                Ok(t) => samples.push(t),
                Err(e) => {
                    tracing::warn!(query = %q, error = %e, "benchmark query failed");
                    errors.push(e);
                }
            }
        }
    }
    let attempted = queries.len() * repeats;
    if errors.len() as f64 > MAX_FAILURE_RATE * attempted as f64 {
        return Err(BenchError::TooManyFailures {
            failed: errors.len(),
            attempted,
            first: errors.swap_remove(0),
        });
    }
    LatencyReport::from_samples(&samples, queries.len(), repeats, errors.len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: SnippetMethod,
    pub mean_similarity: f64,
    /// Median over queries of the per-query snippeting time.
    pub median_latency: f64,
}

/// One (query, document) comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnippetPair {
    pub query_index: usize,
    pub doc_id: u64,
    pub naive_similarity: f32,
    pub sliding_similarity: f32,
    pub naive_span: (usize, usize),
    pub sliding_span: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnippetComparison {
    pub queries: usize,
    pub window: usize,
    pub stride: usize,
    pub k: usize,
    pub methods: Vec<MethodRow>,
    pub pairs: Vec<SnippetPair>,
}

impl SnippetComparison {
    pub fn method(&self, method: SnippetMethod) -> Option<&MethodRow> {
        self.methods.iter().find(|m| m.method == method)
    }

    /// Pairs where sliding-window similarity fell below naive-first.
    pub fn dominance_violations(&self) -> usize {
        self.pairs
            .iter()
            .filter(|p| p.sliding_similarity < p.naive_similarity)
            .count()
    }

    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<16}  {:>12}  {:>14}", "Method", "Similarity", "Latency (s)");
        let _ = writeln!(out, "{}", "-".repeat(46));
        for m in &self.methods {
            let name = match m.method {
                SnippetMethod::NaiveFirst => "Naive first",
                SnippetMethod::SlidingWindow => "Sliding window",
            };
            let _ = writeln!(
                out,
                "{:<16}  {:>12.5}  {:>14.6e}",
                name, m.mean_similarity, m.median_latency
            );
        }
        let _ = writeln!(
            out,
            "{} queries, top-{} documents, window {}, stride {}, {} pairs, {} dominance violations",
            self.queries,
            self.k,
            self.window,
            self.stride,
            self.pairs.len(),
            self.dominance_violations()
        );
        out
    }
}

/// Compares naive-first and sliding-window snippets over every retrieved document.
///
/// Naive-first latency covers span extraction only; its similarity is
/// computed afterwards, outside the timed region. Sliding-window latency
/// includes embedding every candidate window.
pub async fn compare_snippeting(
    embedder: &dyn Embedder,
    retriever: &dyn Retriever,
    corpus: &CorpusStore,
    queries: &[String],
    k: usize,
    window: usize,
    stride: usize,
) -> Result<SnippetComparison, BenchError> {
    if queries.is_empty() {
        return Err(BenchError::NoSamples);
    }
    let plan = RetrievalPlan {
        k,
        method: SnippetMethod::SlidingWindow,
        window,
        stride,
        excluded: BTreeSet::new(),
    };
    plan.validate()?;

    let mut pairs = Vec::new();
    let mut naive_times = Vec::with_capacity(queries.len());
    let mut sliding_times = Vec::with_capacity(queries.len());
    for (qi, query) in queries.iter().enumerate() {
        let qv = embedder.embed(query).await.map_err(ContextError::from)?;
        let hits = retriever.fanout_search(&qv, k, &plan.excluded).await?.hits;
        let mut naive_total = Duration::ZERO;
        let mut sliding_total = Duration::ZERO;
        for hit in hits {
            let doc = corpus.get_document(hit.doc_id)?;
            if doc.tokens.is_empty() {
                continue;
            }
            let started = Instant::now();
            let mut naive = snippet_naive_first(&doc, window)?;
            naive_total += started.elapsed();

            let started = Instant::now();
            let sliding = snippet_sliding_window(&doc, &qv, window, stride, embedder).await?;
            sliding_total += started.elapsed();

            let naive_similarity = score_snippet(&mut naive, &qv, embedder).await?;
            pairs.push(SnippetPair {
                query_index: qi,
                doc_id: doc.doc_id,
                naive_similarity,
                sliding_similarity: sliding.similarity.expect("sliding window scores its snippet"),
                naive_span: (naive.token_start, naive.token_end),
                sliding_span: (sliding.token_start, sliding.token_end),
            });
        }
        naive_times.push(naive_total.as_secs_f64());
        sliding_times.push(sliding_total.as_secs_f64());
    }
    if pairs.is_empty() {
        return Err(BenchError::NoSamples);
    }

    let mean = |f: fn(&SnippetPair) -> f32| {
        pairs.iter().map(|p| f64::from(f(p))).sum::<f64>() / pairs.len() as f64
    };
    let median = |v: &[f64]| Summary::of(v).expect("one entry per query").median;
    Ok(SnippetComparison {
        queries: queries.len(),
        window,
        stride,
        k,
        methods: vec![
            MethodRow {
                method: SnippetMethod::NaiveFirst,
                mean_similarity: mean(|p| p.naive_similarity),
                median_latency: median(&naive_times),
            },
            MethodRow {
                method: SnippetMethod::SlidingWindow,
                mean_similarity: mean(|p| p.sliding_similarity),
                median_latency: median(&sliding_times),
            },
        ],
        pairs,
    })
}

/// Reads one query per line, skipping blank lines and `#` comments.
pub fn parse_queries(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_owned)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Sort-based oracle written independently of `percentile_nearest_rank`.
    fn oracle(samples: &[f64], pct: u32) -> f64 {
        let mut v = samples.to_vec();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = v.len() as u32;
        // Smallest rank r with r * 100 >= pct * n.
        let r = (1..=n).find(|r| r * 100 >= pct * n).unwrap();
        v[(r - 1) as usize]
    }

    #[test]
    fn p95_of_one_to_hundred() {
        let s: Vec<f64> = (1..=100).map(f64::from).collect();
        let sorted = s.clone();
        assert_eq!(percentile_nearest_rank(&sorted, 0.95), Some(95.0));
        assert_eq!(percentile_nearest_rank(&sorted, 0.5), Some(50.0));
        assert_eq!(Summary::of(&s).unwrap(), Summary { median: 50.0, p95: 95.0 });
    }

    #[test]
    fn constant_samples() {
        let s = vec![0.25; 37];
        assert_eq!(Summary::of(&s).unwrap(), Summary { median: 0.25, p95: 0.25 });
    }

    #[test]
    fn edge_cases() {
        assert_eq!(percentile_nearest_rank(&[], 0.5), None);
        assert_eq!(percentile_nearest_rank(&[1.0], 0.0), None);
        assert_eq!(percentile_nearest_rank(&[3.0], 0.95), Some(3.0));
        assert_eq!(percentile_nearest_rank(&[1.0, 2.0], 1.0), Some(2.0));
    }

    #[test]
    fn matches_sort_oracle_on_varied_lengths() {
        let mut x = 0.123_f64;
        for n in 1..120 {
            let samples: Vec<f64> = (0..n)
                .map(|_| {
                    x = (x * 997.0 + 0.31).fract();
                    x
                })
                .collect();
            let s = Summary::of(&samples).unwrap();
            assert_eq!(s.median, oracle(&samples, 50), "n={n}");
            assert_eq!(s.p95, oracle(&samples, 95), "n={n}");
        }
    }

    fn timings(scale: f64) -> StageTimings {
        let mut t = StageTimings::default();
        for (i, s) in Stage::ALL.iter().enumerate() {
            t.set_seconds(*s, scale * (i + 1) as f64);
        }
        t.set_seconds(Stage::Total, scale * 100.0);
        t
    }

    #[test]
    fn report_has_every_stage_plus_residual() {
        let samples: Vec<StageTimings> = (1..=50).map(|i| timings(f64::from(i))).collect();
        let r = LatencyReport::from_samples(&samples, 50, 1, 0).unwrap();
        assert_eq!(r.stages.len(), 8);
        let names: Vec<&str> = r.display_rows().iter().map(|r| r.stage.as_str()).collect();
        assert_eq!(
            names,
            [
                "embed",
                "single_ann_call",
                "fanout_total",
                "fetch_documents",
                "snippeting",
                "generation",
                "attention_forward",
                "other",
                "total"
            ]
        );
        for row in r.display_rows() {
            assert!(row.median <= row.p95);
        }
        // residual = 100 - (1 + 3 + 4 + 5 + 6 + 7) = 74 per unit scale
        assert_eq!(r.other.median, 74.0 * 25.0);
        assert!(r.render_table().contains("Total query time"));
    }

    struct Flaky {
        fail_every: usize,
        calls: std::sync::atomic::AtomicUsize,
    }

    #[async_trait]
    impl QueryRunner for Flaky {
        async fn run_query(&self, _: &str) -> Result<StageTimings, String> {
            let n = self.calls.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
            if self.fail_every > 0 && n % self.fail_every == 0 {
                Err(format!("boom {n}"))
            } else {
                Ok(timings(1.0))
            }
        }
    }

    #[tokio::test]
    async fn failures_are_counted_then_abort_past_limit() {
        let qs: Vec<String> = (0..10).map(|i| format!("q{i}")).collect();
        let ok = Flaky {
            fail_every: 10,
            calls: 0.into(),
        };
        let r = run_latency(&ok, &qs, 2).await.unwrap();
        assert_eq!((r.failures, r.samples), (2, 18));

        let bad = Flaky {
            fail_every: 3,
            calls: 0.into(),
        };
        assert!(matches!(
            run_latency(&bad, &qs, 1).await,
            Err(BenchError::TooManyFailures { failed: 4, .. })
        ));
        assert!(matches!(
            run_latency(&ok, &qs[..9], 1).await,
            Err(BenchError::TooFewQueries(9))
        ));
    }

    #[test]
    fn query_file_parsing() {
        let qs = parse_queries("What is HTML?\n\n# comment\n  Why do pigs fly?  \n");
        assert_eq!(qs, ["What is HTML?", "Why do pigs fly?"]);
    }
}
