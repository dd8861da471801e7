//! Index file layout, all integers and floats little-endian:
//!
//! ```text
//! magic        4 bytes  "RVIX"
//! version      u32
//! dim          u32
//! count        u64
//! global_off   u64
//! max_degree   u32
//! entry_point  u64
//! vectors      count * dim * f32
//! adjacency    count * (u32 degree, degree * u32 ids)
//! trailer      u32 partition_id, u32 build_beam, f32 alpha, u64 seed
//! ```

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use super::{AnnGraph, BuildParams, IndexError, PartitionManifest};

pub const MAGIC: [u8; 4] = *b"RVIX";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 40;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], IndexError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                IndexError::Corrupt(format!("truncated while reading {what} at byte {}", self.pos))
            })?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32, IndexError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, IndexError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

impl AnnGraph {
    pub fn to_bytes(&self) -> Vec<u8> {
        let edges: usize = self.neighbors.iter().map(Vec::len).sum();
        let mut out =
            Vec::with_capacity(HEADER_LEN + self.vectors.len() * 4 + self.neighbors.len() * 4 + edges * 4 + 20);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.neighbors.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.manifest.global_offset.to_le_bytes());
        out.extend_from_slice(&(self.params.max_degree as u32).to_le_bytes());
        out.extend_from_slice(&u64::from(self.entry_point).to_le_bytes());
        for v in &self.vectors {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for list in &self.neighbors {
            out.extend_from_slice(&(list.len() as u32).to_le_bytes());
            for id in list {
                out.extend_from_slice(&id.to_le_bytes());
            }
        }
        out.extend_from_slice(&self.manifest.partition_id.to_le_bytes());
        out.extend_from_slice(&(self.params.build_beam as u32).to_le_bytes());
        out.extend_from_slice(&self.params.alpha.to_le_bytes());
        out.extend_from_slice(&self.params.seed.to_le_bytes());
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<AnnGraph, IndexError> {
        let mut r = Reader { buf, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(IndexError::Format(format!(
                "bad magic {magic:02x?}, expected {MAGIC:02x?}"
            )));
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(IndexError::Format(format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let dim = r.u32("dim")? as usize;
        let count = r.u64("count")?;
        let global_offset = r.u64("global offset")?;
        let max_degree = r.u32("max degree")? as usize;
        let entry_point = r.u64("entry point")?;

        if dim == 0 {
            return Err(IndexError::Corrupt("dimension is zero".into()));
        }
        if count > u64::from(u32::MAX) {
            return Err(IndexError::Corrupt(format!("count {count} exceeds u32 node ids")));
        }
        let count = count as usize;
        if count > 0 && entry_point >= count as u64 {
            return Err(IndexError::Corrupt(format!(
                "entry point {entry_point} out of range for {count} nodes"
            )));
        }

        let vector_bytes = count
            .checked_mul(dim)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| IndexError::Corrupt("vector block size overflows".into()))?;
        let vectors: Vec<f32> = r
            .take(vector_bytes, "vectors")?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();

        let mut neighbors = Vec::with_capacity(count);
        for node in 0..count {
            let degree = r.u32("degree")? as usize;
            if degree > max_degree {
                return Err(IndexError::Corrupt(format!(
                    "node {node} has degree {degree} > max {max_degree}"
                )));
            }
            let list: Vec<u32> = r
                .take(degree * 4, "adjacency")?
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if let Some(bad) = list.iter().find(|&&id| id as usize >= count || id as usize == node) {
                return Err(IndexError::Corrupt(format!("node {node} has invalid edge to {bad}")));
            }
            neighbors.push(list);
        }

        let partition_id = r.u32("partition id")?;
        let build_beam = r.u32("build beam")? as usize;
        let alpha = f32::from_le_bytes(r.take(4, "alpha")?.try_into().unwrap());
        let seed = r.u64("seed")?;
        if r.pos != buf.len() {
            return Err(IndexError::Corrupt(format!(
                "{} trailing bytes after index",
                buf.len() - r.pos
            )));
        }

        Ok(AnnGraph {
            dim,
            manifest: PartitionManifest {
                partition_id,
                global_offset,
                count: count as u64,
            },
            params: BuildParams {
                max_degree,
                build_beam,
                alpha,
                seed,
            },
            vectors,
            neighbors,
            entry_point: entry_point as u32,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), IndexError> {
        let mut file = BufWriter::new(File::create(path)?);
        file.write_all(&self.to_bytes())?;
        file.into_inner().map_err(|e| e.into_error())?.sync_all()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<AnnGraph, IndexError> {
        let mut buf = Vec::new();
        File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}
