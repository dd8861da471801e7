use std::sync::Arc;

use ragscope_core::backend::{GenerationParams, InferenceGateway, ModelBackend, ReferenceBackend};
use ragscope_core::context::{assemble_prompt, PromptTemplate, Snippet};
use ragscope_core::embed::ReferenceEmbedder;
use ragscope_core::tokenize::tokenize;
use xxhash_rust::xxh3::xxh3_64_with_seed;

const SEED: u64 = 77;

fn tau(layer: usize, head: usize) -> f64 {
    let mut key = Vec::with_capacity(16);
    key.extend_from_slice(&(layer as u64).to_le_bytes());
    key.extend_from_slice(&(head as u64).to_le_bytes());
    let u = (xxh3_64_with_seed(&key, SEED) >> 11) as f64 * 2f64.powi(-53);
    1.0 + 9.0 * u
}

fn dot32(a: &[f32], b: &[f32]) -> f32 {
    let mut s = 0.0f32;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

fn surfaces(text: &str) -> Vec<String> {
    tokenize(text).into_iter().map(|t| t.surface).collect()
}

#[tokio::test]
async fn attention_equals_temperature_softmax_over_token_similarity() {
    let embedder = ReferenceEmbedder::new(48, 5);
    let backend = ReferenceBackend::new(embedder, 3, 2, SEED);
    let prompt = surfaces("Documents: the glacier carved a deep valley. Question: what carved the valley?");
    let out = backend
        .generate(&prompt, &GenerationParams { max_tokens: 15, seed: 1 })
        .await
        .unwrap();
    assert!(out.iter().all(|t| prompt.contains(t)));
    let raw = backend.attention(&prompt, &out).await.unwrap();
    assert_eq!((raw.layers, raw.heads), (3, 2));

    let vec_of = |t: &String| embedder.embed_text(t).unwrap().into_inner();
    let context: Vec<Vec<f32>> = prompt.iter().chain(&out).map(vec_of).collect();
    for l in 0..3 {
        for h in 0..2 {
            let t = tau(l, h);
            assert_eq!(t, backend.temperature(l, h));
            for (o, tok) in out.iter().enumerate() {
                let q = vec_of(tok);
                let visible = &context[..prompt.len() + o];
                let e: Vec<f64> = visible.iter().map(|k| (t * f64::from(dot32(&q, k))).exp()).collect();
                let z: f64 = e.iter().sum();
                let row = &raw.weights[l][h][o];
                assert_eq!(row.len(), visible.len());
                for (got, num) in row.iter().zip(&e) {
                    assert!((got - num / z).abs() < 1e-12, "layer {l} head {h} output {o}");
                }
            }
        }
    }
}

#[tokio::test]
async fn gateway_reduces_reference_attention_to_prompt_shares() {
    let embedder = ReferenceEmbedder::new(48, 5);
    let backend = Arc::new(ReferenceBackend::new(embedder, 2, 4, SEED));
    let gateway = InferenceGateway::connect(backend.clone()).await.unwrap();
    let snippet = |doc_id: u64, text: &str| Snippet {
        doc_id,
        token_start: 0,
        token_end: tokenize(text).len(),
        tokens: surfaces(text),
        text: text.to_owned(),
        similarity: None,
    };
    let prompt = assemble_prompt(
        &[
            snippet(4, "Glaciers move slowly and carve valleys."),
            snippet(9, "Rivers also erode rock over long periods."),
        ],
        "What carves valleys?",
        &PromptTemplate::default(),
    )
    .unwrap();
    let tokens = prompt.surfaces();
    let params = GenerationParams { max_tokens: 12, seed: 3 };
    let (result, _) = gateway.run(&tokens, &prompt.layout, &params).await.unwrap();

    let raw = backend.attention(&tokens, &result.output_tokens).await.unwrap();
    let n = tokens.len();
    for o in 0..result.output_tokens.len() {
        for i in 0..n {
            let mut acc = 0.0;
            for heads in &raw.weights {
                for rows in heads {
                    let mass: f64 = rows[o][..n].iter().sum();
                    acc += rows[o][i] / mass;
                }
            }
            let expected = acc / 8.0;
            assert!((result.attribution.get(o, i) - expected).abs() < 1e-12);
        }
    }
    let ids: Vec<u64> = result.doc_scores.iter().map(|s| s.doc_id).collect();
    assert_eq!(ids, [4, 9]);
    let share_sum: f64 = result.doc_scores.iter().map(|s| s.share).sum();
    assert!((share_sum - 1.0).abs() < 1e-9);
}
