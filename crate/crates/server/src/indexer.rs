//! Embeds a corpus and writes one index file per partition plus a manifest.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use ragscope_core::ann::{AnnGraph, BuildParams, PartitionManifest};
use ragscope_core::corpus::CorpusStore;
use ragscope_core::embed::{Embedder, EmbeddingVector};
use serde::{Deserialize, Serialize};

pub const MANIFEST_FILE: &str = "manifest.json";
const EMBED_BATCH: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionEntry {
    #[serde(flatten)]
    pub manifest: PartitionManifest,
    /// Index file name, relative to the manifest's directory.
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexManifest {
    pub dim: usize,
    pub total: u64,
    pub params: BuildParams,
    pub partitions: Vec<PartitionEntry>,
}

impl IndexManifest {
    pub fn load(dir: &Path) -> anyhow::Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn paths(&self, dir: &Path) -> Vec<PathBuf> {
        self.partitions.iter().map(|p| dir.join(&p.file)).collect()
    }
}

pub fn partition_file_name(partition_id: u32) -> String {
    format!("part-{partition_id:03}.rvix")
}

/// Embeds every document in doc-id order.
pub async fn embed_corpus(corpus: &CorpusStore, embedder: &dyn Embedder) -> anyhow::Result<Vec<EmbeddingVector>> {
    let mut out = Vec::with_capacity(corpus.len() as usize);
    let mut batch = Vec::with_capacity(EMBED_BATCH);
    for doc in corpus.iter() {
        let doc = doc?;
        if doc.tokens.is_empty() {
            bail!("document {} is empty and cannot be embedded", doc.doc_id);
        }
        batch.push(doc.text);
        if batch.len() == EMBED_BATCH {
            out.extend(embedder.embed_batch(&batch).await?);
            batch.clear();
        }
    }
    if !batch.is_empty() {
        out.extend(embedder.embed_batch(&batch).await?);
    }
    Ok(out)
}

/// Splits `vectors` into `parts` contiguous partitions, builds and saves each.
pub fn build_partitions(
    vectors: &[EmbeddingVector],
    dim: usize,
    parts: u32,
    params: BuildParams,
    out_dir: &Path,
) -> anyhow::Result<IndexManifest> {
    if parts == 0 {
        bail!("need at least one partition");
    }
    std::fs::create_dir_all(out_dir)?;
    let total = vectors.len() as u64;
    let mut entries = Vec::new();
    for m in PartitionManifest::tile(total, parts) {
        let lo = m.global_offset as usize;
        let slice = &vectors[lo..lo + m.count as usize];
        let graph = AnnGraph::build(dim, slice, m, params)?;
        let file = partition_file_name(m.partition_id);
        graph.save(&out_dir.join(&file))?;
        tracing::info!(partition = m.partition_id, count = m.count, file = %file, "partition built");
        entries.push(PartitionEntry { manifest: m, file });
    }
    let manifest = IndexManifest {
        dim,
        total,
        params,
        partitions: entries,
    };
    std::fs::write(out_dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}
