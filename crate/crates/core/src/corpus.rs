//! On-disk corpus store.
//!
//! A store directory holds two files:
//!
//! * `docs.bin`: records laid end to end, each a little-endian `u32` byte
//!   length followed by that many bytes of UTF-8 text.
//! * `docs.idx`: one little-endian `u64` per document giving the byte offset
//!   of its record in `docs.bin`. Document `k` is entry `k`.
//!
//! Ingestion writes both files to temporary names and renames them into place,
//! so a store is always replaced wholesale. Once opened, a store is read-only
//! and lookups use positional reads, so `&CorpusStore` can be shared freely.

use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tokenize::{tokenize, Token};

pub const DOCS_FILE: &str = "docs.bin";
pub const INDEX_FILE: &str = "docs.idx";
pub const DEFAULT_TEXT_FIELD: &str = "text";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: malformed JSON: {message}")]
    MalformedLine { line: usize, message: String },
    #[error("line {line}: missing string field `{field}`")]
    MissingField { line: usize, field: String },
    #[error("document {doc_id} not found (corpus has {len} documents)")]
    NotFound { doc_id: u64, len: u64 },
    #[error("corrupt corpus store: {0}")]
    Corrupt(String),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentRecord {
    pub doc_id: u64,
    pub text: String,
    pub tokens: Vec<Token>,
}

impl DocumentRecord {
    pub fn new(doc_id: u64, text: String) -> Self {
        let tokens = tokenize(&text);
        Self {
            doc_id,
            text,
            tokens,
        }
    }

    /// Source text covered by tokens `[start, end)`.
    pub fn span_text(&self, start: usize, end: usize) -> Option<&str> {
        crate::tokenize::span_bytes(&self.tokens, start, end).map(|(s, e)| &self.text[s..e])
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub num_documents: u64,
    pub num_tokens: u64,
}

/// Ingests a JSONL file into a store at `store_dir`, replacing any existing store.
pub fn ingest(jsonl_path: &Path, field: &str, store_dir: &Path) -> Result<CorpusStats> {
    let file = File::open(jsonl_path)?;
    ingest_reader(BufReader::new(file), field, store_dir)
}

pub fn ingest_reader<R: BufRead>(reader: R, field: &str, store_dir: &Path) -> Result<CorpusStats> {
    fs::create_dir_all(store_dir)?;
    let docs_tmp = store_dir.join(format!("{DOCS_FILE}.tmp"));
    let idx_tmp = store_dir.join(format!("{INDEX_FILE}.tmp"));

    let mut docs = BufWriter::new(File::create(&docs_tmp)?);
    let mut idx = BufWriter::new(File::create(&idx_tmp)?);
    let mut stats = CorpusStats::default();
    let mut offset = 0u64;

    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| CorpusError::MalformedLine {
                line: line_no,
                message: e.to_string(),
            })?;
        let text = value
            .get(field)
            .and_then(serde_json::Value::as_str)
            .ok_or_else(|| CorpusError::MissingField {
                line: line_no,
                field: field.to_owned(),
            })?;

        let len = u32::try_from(text.len()).map_err(|_| CorpusError::MalformedLine {
            line: line_no,
            message: "document exceeds 4 GiB".into(),
        })?;
        idx.write_all(&offset.to_le_bytes())?;
        docs.write_all(&len.to_le_bytes())?;
        docs.write_all(text.as_bytes())?;
        offset += 4 + u64::from(len);

        stats.num_documents += 1;
        stats.num_tokens += tokenize(text).len() as u64;
    }

    docs.into_inner().map_err(|e| e.into_error())?.sync_all()?;
    idx.into_inner().map_err(|e| e.into_error())?.sync_all()?;
    fs::rename(&docs_tmp, store_dir.join(DOCS_FILE))?;
    fs::rename(&idx_tmp, store_dir.join(INDEX_FILE))?;
    tracing::info!(
        documents = stats.num_documents,
        tokens = stats.num_tokens,
        dir = %store_dir.display(),
        "ingested corpus"
    );
    Ok(stats)
}

/// Read-only handle on an ingested corpus.
#[derive(Debug)]
pub struct CorpusStore {
    dir: PathBuf,
    docs: File,
    docs_len: u64,
    offsets: Vec<u64>,
}

impl CorpusStore {
    pub fn open(store_dir: &Path) -> Result<Self> {
        let docs = File::open(store_dir.join(DOCS_FILE))?;
        let docs_len = docs.metadata()?.len();

        let mut raw = Vec::new();
        File::open(store_dir.join(INDEX_FILE))?.read_to_end(&mut raw)?;
        if raw.len() % 8 != 0 {
            return Err(CorpusError::Corrupt(format!(
                "{INDEX_FILE} length {} is not a multiple of 8",
                raw.len()
            )));
        }
        let offsets: Vec<u64> = raw
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        if let Some(bad) = offsets.iter().find(|&&o| o + 4 > docs_len) {
            return Err(CorpusError::Corrupt(format!(
                "offset {bad} beyond {DOCS_FILE} length {docs_len}"
            )));
        }
        Ok(Self {
            dir: store_dir.to_owned(),
            docs,
            docs_len,
            offsets,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn len(&self) -> u64 {
        self.offsets.len() as u64
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    pub fn get_text(&self, doc_id: u64) -> Result<String> {
        let offset = usize::try_from(doc_id)
            .ok()
            .and_then(|i| self.offsets.get(i))
            .copied()
            .ok_or(CorpusError::NotFound {
                doc_id,
                len: self.len(),
            })?;

        let mut len_buf = [0u8; 4];
        read_exact_at(&self.docs, &mut len_buf, offset)?;
        let len = u64::from(u32::from_le_bytes(len_buf));
        if offset + 4 + len > self.docs_len {
            return Err(CorpusError::Corrupt(format!(
                "record {doc_id} runs past end of {DOCS_FILE}"
            )));
        }
        let mut buf = vec![0u8; len as usize];
        read_exact_at(&self.docs, &mut buf, offset + 4)?;
        String::from_utf8(buf)
            .map_err(|_| CorpusError::Corrupt(format!("record {doc_id} is not valid UTF-8")))
    }

    pub fn get_document(&self, doc_id: u64) -> Result<DocumentRecord> {
        Ok(DocumentRecord::new(doc_id, self.get_text(doc_id)?))
    }

    /// Streams every document in id order.
    pub fn iter(&self) -> impl Iterator<Item = Result<DocumentRecord>> + '_ {
        (0..self.len()).map(move |id| self.get_document(id))
    }
}

#[cfg(unix)]
fn read_exact_at(file: &File, buf: &mut [u8], offset: u64) -> io::Result<()> {
    use std::os::unix::fs::FileExt;
    file.read_exact_at(buf, offset)
}

#[cfg(windows)]
fn read_exact_at(file: &File, mut buf: &mut [u8], mut offset: u64) -> io::Result<()> {
    use std::os::windows::fs::FileExt;
    while !buf.is_empty() {
        match file.seek_read(buf, offset)? {
            0 => return Err(io::ErrorKind::UnexpectedEof.into()),
            n => {
                buf = &mut buf[n..];
                offset += n as u64;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn store_from(lines: &str) -> (tempfile::TempDir, CorpusStats, CorpusStore) {
        let dir = tempfile::tempdir().unwrap();
        let stats = ingest_reader(Cursor::new(lines.to_owned()), "text", dir.path()).unwrap();
        let store = CorpusStore::open(dir.path()).unwrap();
        (dir, stats, store)
    }

    #[test]
    fn two_line_corpus() {
        let (_dir, stats, store) = store_from("{\"text\":\"a b\"}\n{\"text\":\"c\"}\n");
        assert_eq!(
            stats,
            CorpusStats {
                num_documents: 2,
                num_tokens: 3
            }
        );
        let doc = store.get_document(0).unwrap();
        assert_eq!(doc.text, "a b");
        assert_eq!(doc.tokens.len(), 2);
        assert_eq!(store.get_document(1).unwrap().text, "c");
        assert!(matches!(
            store.get_document(2),
            Err(CorpusError::NotFound { doc_id: 2, len: 2 })
        ));
    }

    #[test]
    fn empty_file() {
        let (_dir, stats, store) = store_from("");
        assert_eq!(stats, CorpusStats::default());
        assert!(store.is_empty());
    }

    #[test]
    fn malformed_line_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let err = ingest_reader(
            Cursor::new("{\"text\":\"ok\"}\n{not json\n"),
            "text",
            dir.path(),
        )
        .unwrap_err();
        assert!(matches!(err, CorpusError::MalformedLine { line: 2, .. }), "{err}");
    }

    #[test]
    fn missing_or_non_string_field_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let err = ingest_reader(Cursor::new("{\"body\":\"x\"}\n"), "text", dir.path()).unwrap_err();
        assert!(matches!(err, CorpusError::MissingField { line: 1, .. }));
        let err = ingest_reader(
            Cursor::new("{\"text\":\"x\"}\n{\"text\":3}\n"),
            "text",
            dir.path(),
        )
        .unwrap_err();
        assert!(matches!(err, CorpusError::MissingField { line: 2, .. }));
    }

    #[test]
    fn custom_field_and_reingest_replaces() {
        let dir = tempfile::tempdir().unwrap();
        ingest_reader(Cursor::new("{\"body\":\"first\"}\n{\"body\":\"second\"}\n"), "body", dir.path())
            .unwrap();
        ingest_reader(Cursor::new("{\"body\":\"only\"}\n"), "body", dir.path()).unwrap();
        let store = CorpusStore::open(dir.path()).unwrap();
        assert_eq!(store.len(), 1);
        assert_eq!(store.get_text(0).unwrap(), "only");
    }

    #[test]
    fn rejects_truncated_index() {
        let (dir, _, _) = store_from("{\"text\":\"a\"}\n");
        let idx = dir.path().join(INDEX_FILE);
        let mut raw = fs::read(&idx).unwrap();
        raw.pop();
        fs::write(&idx, raw).unwrap();
        assert!(matches!(
            CorpusStore::open(dir.path()),
            Err(CorpusError::Corrupt(_))
        ));
    }

    #[test]
    fn span_text_uses_source_bytes() {
        let doc = DocumentRecord::new(0, "Hello,  big   world!".into());
        assert_eq!(doc.span_text(0, 3), Some("Hello,  big"));
        assert_eq!(doc.span_text(3, 3), None);
    }
}
