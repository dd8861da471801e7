//! TOML deployment config for the API service.
//!
//! Relative paths are resolved against the directory holding the config file.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use ragscope_core::ann::DEFAULT_SEARCH_BEAM;
use ragscope_core::backend::DEFAULT_MAX_TOKENS;
use ragscope_core::context::{SnippetMethod, DEFAULT_STRIDE, DEFAULT_WINDOW};
use serde::Deserialize;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    /// Worker base URLs, one per partition.
    #[serde(default)]
    pub workers: Vec<String>,
    /// Partition index files searched in-process instead of over HTTP.
    #[serde(default)]
    pub local_partitions: Vec<PathBuf>,
    pub corpus: CorpusConfig,
    pub embedder: EmbedderConfig,
    pub api: ApiConfig,
    #[serde(default)]
    pub cors: CorsConfig,
    #[serde(default)]
    pub retrieval: RetrievalConfig,
    #[serde(default)]
    pub snippet: SnippetConfig,
    #[serde(default)]
    pub prompt: PromptConfig,
    #[serde(default)]
    pub fanout: FanoutConfig,
    pub backend: BackendConfig,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    Reference,
    Remote,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedderConfig {
    pub kind: EmbedderKind,
    pub dim: usize,
    #[serde(default)]
    pub seed: u64,
    pub remote_url: Option<String>,
    #[serde(default = "default_embed_timeout")]
    pub timeout_ms: u64,
    #[serde(default = "default_embed_in_flight")]
    pub max_in_flight: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApiConfig {
    pub listen: SocketAddr,
    pub keys: Vec<String>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorsConfig {
    #[serde(default)]
    pub origins: Vec<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrievalConfig {
    #[serde(default = "default_k")]
    pub k_default: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self { k_default: default_k() }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SnippetConfig {
    #[serde(default)]
    pub method: SnippetMethod,
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default = "default_stride")]
    pub stride: usize,
}

impl Default for SnippetConfig {
    fn default() -> Self {
        Self {
            method: SnippetMethod::default(),
            window: DEFAULT_WINDOW,
            stride: DEFAULT_STRIDE,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptConfig {
    pub template_path: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FanoutConfig {
    #[serde(default = "default_fanout_timeout")]
    pub timeout_ms: u64,
    /// Search beam sent to workers; `None` uses each worker's default.
    pub beam: Option<usize>,
    /// Bearer token presented to workers.
    pub token: Option<String>,
}

impl Default for FanoutConfig {
    fn default() -> Self {
        Self {
            timeout_ms: default_fanout_timeout(),
            beam: None,
            token: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Reference,
    Remote,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub url: Option<String>,
    #[serde(default = "default_layers")]
    pub layers: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: usize,
    #[serde(default = "default_backend_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_backend_timeout")]
    pub timeout_ms: u64,
}

fn default_embed_timeout() -> u64 {
    10_000
}
fn default_embed_in_flight() -> usize {
    8
}
fn default_k() -> usize {
    3
}
fn default_window() -> usize {
    DEFAULT_WINDOW
}
fn default_stride() -> usize {
    DEFAULT_STRIDE
}
fn default_fanout_timeout() -> u64 {
    2_000
}
fn default_layers() -> usize {
    4
}
fn default_heads() -> usize {
    8
}
fn default_max_tokens() -> usize {
    DEFAULT_MAX_TOKENS
}
fn default_backend_in_flight() -> usize {
    1
}
fn default_backend_timeout() -> u64 {
    120_000
}

/// Default worker beam when neither the request nor the config sets one.
pub const WORKER_DEFAULT_BEAM: usize = DEFAULT_SEARCH_BEAM;

impl Config {
    pub fn load(path: &Path) -> anyhow::Result<Config> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg = Config::parse(&text).with_context(|| format!("in {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn parse(text: &str) -> anyhow::Result<Config> {
        let cfg: Config = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.corpus.dir);
        self.local_partitions.iter_mut().for_each(fix);
        if let Some(p) = self.prompt.template_path.as_mut() {
            fix(p);
        }
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        match (self.workers.is_empty(), self.local_partitions.is_empty()) {
            (true, true) => bail!("configure `workers` or `local_partitions`"),
            (false, false) => bail!("`workers` and `local_partitions` are mutually exclusive"),
            _ => {}
        }
        if self.api.keys.is_empty() || self.api.keys.iter().any(String::is_empty) {
            bail!("api.keys must list at least one non-empty key");
        }
        if self.embedder.dim == 0 {
            bail!("embedder.dim must be >= 1");
        }
        if self.embedder.kind == EmbedderKind::Remote && self.embedder.remote_url.is_none() {
            bail!("embedder.remote_url is required for a remote embedder");
        }
        if self.embedder.max_in_flight == 0 || self.backend.max_in_flight == 0 {
            bail!("max_in_flight must be >= 1");
        }
        if self.retrieval.k_default == 0 {
            bail!("retrieval.k_default must be >= 1");
        }
        if self.snippet.stride == 0 || self.snippet.stride > self.snippet.window {
            bail!("snippet.stride must satisfy 1 <= stride <= window");
        }
        if self.backend.kind == BackendKind::Remote && self.backend.url.is_none() {
            bail!("backend.url is required for a remote backend");
        }
        if self.backend.layers == 0 || self.backend.heads == 0 || self.backend.max_tokens == 0 {
            bail!("backend.layers, backend.heads and backend.max_tokens must be >= 1");
        }
        if self.fanout.beam == Some(0) {
            bail!("fanout.beam must be >= 1");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
workers = ["http://127.0.0.1:9001"]

[corpus]
dir = "corpus"

[embedder]
kind = "reference"
dim = 64

[api]
listen = "127.0.0.1:8080"
keys = ["secret"]

[backend]
kind = "reference"
"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = Config::parse(MINIMAL).unwrap();
        assert_eq!(cfg.retrieval.k_default, 3);
        assert_eq!(cfg.snippet.window, 128);
        assert_eq!(cfg.snippet.stride, 64);
        assert_eq!(cfg.snippet.method, SnippetMethod::NaiveFirst);
        assert_eq!(cfg.backend.max_tokens, 100);
        assert_eq!(cfg.backend.max_in_flight, 1);
        assert!(cfg.fanout.beam.is_none());
    }

    #[test]
    fn rejects_bad_settings() {
        let no_keys = MINIMAL.replace(r#"keys = ["secret"]"#, "keys = []");
        assert!(Config::parse(&no_keys).is_err());
        let stride = format!("{MINIMAL}\n[snippet]\nwindow = 8\nstride = 9\n");
        assert!(Config::parse(&stride).is_err());
        let remote = MINIMAL.replace(r#"kind = "reference"
dim"#, r#"kind = "remote"
dim"#);
        assert!(Config::parse(&remote).is_err());
        let unknown = format!("{MINIMAL}\n[extra]\nx = 1\n");
        assert!(Config::parse(&unknown).is_err());
        let both = MINIMAL.replace("workers = ", "local_partitions = [\"p.rvix\"]\nworkers = ");
        assert!(Config::parse(&both).is_err());
    }

    #[test]
    fn paths_resolve_against_config_dir() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ragscope.toml");
        std::fs::write(&path, MINIMAL).unwrap();
        let cfg = Config::load(&path).unwrap();
        assert_eq!(cfg.corpus.dir, dir.path().join("corpus"));
    }
}
