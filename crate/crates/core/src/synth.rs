//! Seeded synthetic data: random unit vectors, topical documents and queries.
//!
//! Used by the test suites and the `synth` CLI command; every generator is a
//! pure function of its arguments.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::embed::EmbeddingVector;

const SYLLABLES: &[&str] = &[
    "ka", "lo", "mi", "ren", "tu", "sa", "vel", "or", "pi", "dan", "qu", "es", "ni", "bor", "fa",
    "gli", "to", "mar", "shi", "un", "ze", "rho", "cal", "di", "pen", "ya", "wor", "ix", "ba", "tel",
];

const FUNCTION_WORDS: &[&str] = &[
    "the", "of", "and", "a", "in", "to", "is", "was", "for", "on", "with", "as", "by", "that",
];

const TOPICS: usize = 64;
const WORDS_PER_TOPIC: usize = 24;

/// `n` vectors drawn uniformly from the unit sphere in `dim` dimensions.
pub fn random_unit_vectors(n: usize, dim: usize, seed: u64) -> Vec<EmbeddingVector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let v: Vec<f32> = (0..dim).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
        if let Some(u) = EmbeddingVector::normalized(v) {
            out.push(u);
        }
    }
    out
}

fn vocabulary(rng: &mut ChaCha8Rng) -> Vec<Vec<String>> {
    let mut seen = std::collections::HashSet::new();
    let mut topics = Vec::with_capacity(TOPICS);
    for _ in 0..TOPICS {
        let mut words = Vec::with_capacity(WORDS_PER_TOPIC);
        while words.len() < WORDS_PER_TOPIC {
            let n = rng.random_range(2..=4);
            let w: String = (0..n).map(|_| *SYLLABLES.choose(rng).unwrap()).collect();
            if seen.insert(w.clone()) {
                words.push(w);
            }
        }
        topics.push(words);
    }
    topics
}

/// `n` documents of `min_tokens..=max_tokens` display tokens each.
///
/// A document is a run of sentences; each sentence draws its content words
/// from one of the document's 3 to 6 topics, so different windows of the
/// same document are about different things.
pub fn synthetic_documents(n: usize, min_tokens: usize, max_tokens: usize, seed: u64) -> Vec<String> {
    assert!(min_tokens >= 1 && min_tokens <= max_tokens);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let topics = vocabulary(&mut rng);
    (0..n)
        .map(|_| {
            let target = rng.random_range(min_tokens..=max_tokens);
            let n_topics = rng.random_range(3..=6);
            let doc_topics: Vec<usize> = rand::seq::index::sample(&mut rng, TOPICS, n_topics).into_vec();
            let mut words: Vec<String> = Vec::with_capacity(target);
            while words.len() < target {
                let topic = &topics[*doc_topics.choose(&mut rng).unwrap()];
                let room = target - words.len();
                // One token per sentence goes to the trailing period.
                let len = rng.random_range(6..=18).min(room.saturating_sub(1)).max(1);
                for i in 0..len {
                    let w = if rng.random_bool(0.25) {
                        FUNCTION_WORDS.choose(&mut rng).unwrap().to_string()
                    } else {
                        topic.choose(&mut rng).unwrap().clone()
                    };
                    words.push(if i == 0 { capitalize(&w) } else { w });
                }
                if words.len() < target {
                    words.push(".".into());
                }
            }
            let mut text = String::new();
            for w in words {
                if !text.is_empty() && w != "." {
                    text.push(' ');
                }
                text.push_str(&w);
            }
            text
        })
        .collect()
}

fn capitalize(w: &str) -> String {
    let mut c = w.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

/// `n` questions, each built from 3 to 6 consecutive words at a random
/// position of a random document.
pub fn synthetic_queries(docs: &[String], n: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..docs.len()).collect();
    order.shuffle(&mut rng);
    let mut out = Vec::with_capacity(n);
    let mut i = 0;
    while out.len() < n && !docs.is_empty() {
        let doc = &docs[order[i % order.len()]];
        i += 1;
        let words: Vec<&str> = doc
            .split_whitespace()
            .map(|w| w.trim_matches(|c: char| c.is_ascii_punctuation()))
            .filter(|w| !w.is_empty())
            .collect();
        if words.is_empty() {
            if i > docs.len() {
                break;
            }
            continue;
        }
        let len = rng.random_range(3..=6).min(words.len());
        let start = rng.random_range(0..=words.len() - len);
        out.push(format!("What about {}?", words[start..start + len].join(" ").to_lowercase()));
    }
    out
}

/// One JSON object per document under `field`, newline-terminated.
pub fn to_jsonl(docs: &[String], field: &str) -> String {
    let mut out = String::new();
    for d in docs {
        let mut obj = serde_json::Map::new();
        obj.insert(field.to_owned(), serde_json::Value::String(d.clone()));
        out.push_str(&serde_json::Value::Object(obj).to_string());
        out.push('\n');
    }
    out
}
