//! Core building blocks of the ragscope RAG diagnostics stack: corpus storage,
//! embeddings, the partition ANN index, snippeting and prompt layout, the
//! model-backend gateway and the attention attribution math.

pub mod ann;
pub mod attention;
pub mod backend;
pub mod bench;
pub mod context;
pub mod corpus;
pub mod embed;
pub mod pipeline;
pub mod synth;
pub mod tokenize;
