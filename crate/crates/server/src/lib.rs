//! HTTP services and tooling around `ragscope-core`: partition workers, the
//! public API, remote embedder/model clients, a reference model server and
//! the benchmark harness.

pub mod api;
pub mod auth;
pub mod config;
pub mod fanout;
pub mod indexer;
pub mod live_bench;
pub mod model_server;
pub mod remote;
pub mod stack;
pub mod worker;
