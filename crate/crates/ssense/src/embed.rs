//! Frozen 512-d sentence embedding provider.
//!
//! Embeddings come from a precomputed file or a remote embedding service;
//! either way they are validated (finite, dimension 512) and L2-normalized
//! on load. The text side is frozen by construction: nothing in this crate
//! ever computes a gradient for these vectors.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::encoder::EMBED_DIM;
use crate::error::{Error, Result};

/// Ordered sentences with their unit-norm 512-d vectors.
#[derive(Debug, Clone)]
pub struct SentenceEmbeddingSet {
    pub sentences: Vec<String>,
    /// One row per sentence.
    pub vectors: Vec<Vec<f64>>,
    pub source_tag: String,
}

impl SentenceEmbeddingSet {
    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn vector_for(&self, sentence: &str) -> Result<&[f64]> {
        self.sentences
            .iter()
            .position(|s| s == sentence)
            .map(|i| self.vectors[i].as_slice())
            .ok_or_else(|| Error::MissingEmbedding(sentence.to_string()))
    }
}

fn normalize_vector(v: &mut [f64], index: usize) -> Result<()> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Remote(format!(
            "non-finite component in vector {index}"
        )));
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return Err(Error::ZeroEmbedding(index));
    }
    for x in v.iter_mut() {
        *x /= norm;
    }
    Ok(())
}

const EMB_MAGIC: &[u8; 4] = b"SSTX";
const EMB_VERSION: u32 = 1;

/// Write an embeddings file: magic "SSTX", version, count, dim, f32le data,
/// then length-prefixed UTF-8 sentences.
pub fn save_embeddings(path: &Path, set: &SentenceEmbeddingSet) -> Result<()> {
    let mut w = std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| Error::io(path, e))?,
    );
    let io = |e: std::io::Error| Error::io(path, e);
    w.write_all(EMB_MAGIC).map_err(io)?;
    w.write_u32::<LittleEndian>(EMB_VERSION).map_err(io)?;
    w.write_u32::<LittleEndian>(set.sentences.len() as u32)
        .map_err(io)?;
    w.write_u32::<LittleEndian>(EMBED_DIM as u32).map_err(io)?;
    for v in &set.vectors {
        for &x in v {
            w.write_f32::<LittleEndian>(x as f32).map_err(io)?;
        }
    }
    for s in &set.sentences {
        let b = s.as_bytes();
        w.write_u32::<LittleEndian>(b.len() as u32).map_err(io)?;
        w.write_all(b).map_err(io)?;
    }
    Ok(())
}

/// Load and renormalize an embeddings file; sentence order is preserved.
pub fn load_embeddings(path: &Path) -> Result<SentenceEmbeddingSet> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut r = std::io::BufReader::new(
        std::fs::File::open(path).map_err(|e| Error::io(path, e))?,
    );
    let io = |e: std::io::Error| Error::io(path, e);
    let bad = |reason: &str| Error::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != EMB_MAGIC {
        return Err(bad("bad magic, expected SSTX"));
    }
    let version = r.read_u32::<LittleEndian>().map_err(io)?;
    if version != EMB_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let count = r.read_u32::<LittleEndian>().map_err(io)? as usize;
    let dim = r.read_u32::<LittleEndian>().map_err(io)?;
    if dim as usize != EMBED_DIM {
        return Err(Error::EmbeddingDim(dim));
    }
    let mut vectors = Vec::with_capacity(count);
    for i in 0..count {
        let mut v = Vec::with_capacity(EMBED_DIM);
        for _ in 0..EMBED_DIM {
            v.push(r.read_f32::<LittleEndian>().map_err(io)? as f64);
        }
        normalize_vector(&mut v, i)?;
        vectors.push(v);
    }
    let mut sentences = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        let mut buf = vec![0u8; len];
        r.read_exact(&mut buf).map_err(io)?;
        sentences.push(String::from_utf8(buf).map_err(|_| bad("invalid utf-8 sentence"))?);
    }
    if sentences.len() != vectors.len() {
        return Err(Error::EmbeddingCount {
            expected: sentences.len(),
            actual: vectors.len(),
        });
    }
    let source_tag = format!(
        "file:{}",
        path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
    );
    Ok(SentenceEmbeddingSet {
        sentences,
        vectors,
        source_tag,
    })
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    sentences: &'a [String],
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f64>>,
}

/// Remote source of frozen embeddings, with a local file cache keyed by the
/// content hash of the requested sentence list.
pub struct RemoteProvider {
    pub endpoint: String,
    pub timeout: Duration,
    pub cache_dir: PathBuf,
    requests_made: AtomicUsize,
}

/// Requests are batched at most this many sentences per POST.
pub const MAX_BATCH: usize = 64;

impl RemoteProvider {
    pub fn new(endpoint: &str, timeout: Duration, cache_dir: &Path) -> Self {
        RemoteProvider {
            endpoint: endpoint.to_string(),
            timeout,
            cache_dir: cache_dir.to_path_buf(),
            requests_made: AtomicUsize::new(0),
        }
    }

    /// Number of HTTP requests issued so far (cache hits issue none).
    pub fn requests_made(&self) -> usize {
        self.requests_made.load(Ordering::SeqCst)
    }

    fn cache_path(&self, sentences: &[String]) -> PathBuf {
        let joined = sentences.join("\u{1f}");
        self.cache_dir
            .join(format!("{}.sstx", crate::config::digest_hex(&joined)))
    }

    /// Fetch embeddings for `sentences`, in order. A partial or malformed
    /// response fails the whole call; successful results are cached.
    pub fn fetch(&self, sentences: &[String]) -> Result<SentenceEmbeddingSet> {
        let cache_file = self.cache_path(sentences);
        if cache_file.exists() {
            let mut set = load_embeddings(&cache_file)?;
            set.source_tag = format!("remote:{} (cached)", self.endpoint);
            return Ok(set);
        }

        let client = reqwest::blocking::Client::builder()
            .timeout(self.timeout)
            .build()
            .map_err(|e| Error::Remote(e.to_string()))?;
        let mut vectors: Vec<Vec<f64>> = Vec::with_capacity(sentences.len());
        for chunk in sentences.chunks(MAX_BATCH) {
            self.requests_made.fetch_add(1, Ordering::SeqCst);
            let resp = client
                .post(&self.endpoint)
                .json(&EmbedRequest { sentences: chunk })
                .send()
                .map_err(|e| Error::Remote(e.to_string()))?;
            if !resp.status().is_success() {
                return Err(Error::Remote(format!("server returned {}", resp.status())));
            }
            let body: EmbedResponse = resp.json().map_err(|e| Error::Remote(e.to_string()))?;
            if body.vectors.len() != chunk.len() {
                return Err(Error::EmbeddingCount {
                    expected: chunk.len(),
                    actual: body.vectors.len(),
                });
            }
            for (i, mut v) in body.vectors.into_iter().enumerate() {
                if v.len() != EMBED_DIM {
                    return Err(Error::EmbeddingDim(v.len() as u32));
                }
                normalize_vector(&mut v, vectors.len() + i)?;
                vectors.push(v);
            }
        }
        let set = SentenceEmbeddingSet {
            sentences: sentences.to_vec(),
            vectors,
            source_tag: format!("remote:{}", self.endpoint),
        };
        std::fs::create_dir_all(&self.cache_dir)
            .map_err(|e| Error::io(&self.cache_dir, e))?;
        save_embeddings(&cache_file, &set)?;
        Ok(set)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    fn basis_vector(i: usize, scale: f64) -> Vec<f64> {
        let mut v = vec![0.0; EMBED_DIM];
        v[i % EMBED_DIM] = scale;
        v
    }

    #[test]
    fn load_normalizes() {
        let dir = TempDir::new().unwrap();
        let mut v = vec![0.0; EMBED_DIM];
        v[0] = 3.0;
        v[1] = 4.0;
        let set = SentenceEmbeddingSet {
            sentences: vec!["a".into()],
            vectors: vec![v],
            source_tag: "test".into(),
        };
        let p = dir.path().join("e.sstx");
        save_embeddings(&p, &set).unwrap();
        let back = load_embeddings(&p).unwrap();
        assert!((back.vectors[0][0] - 0.6).abs() < 1e-7);
        assert!((back.vectors[0][1] - 0.8).abs() < 1e-7);
        assert!(back.vectors[0][2..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn wrong_dim_rejected() {
        let dir = TempDir::new().unwrap();
        let p = dir.path().join("bad.sstx");
        // handcraft a dim=768 header
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"SSTX");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&0u32.to_le_bytes());
        bytes.extend_from_slice(&768u32.to_le_bytes());
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(load_embeddings(&p), Err(Error::EmbeddingDim(768))));
    }

    #[test]
    fn zero_vector_rejected() {
        let dir = TempDir::new().unwrap();
        let set = SentenceEmbeddingSet {
            sentences: vec!["a".into()],
            vectors: vec![vec![0.0; EMBED_DIM]],
            source_tag: "test".into(),
        };
        let p = dir.path().join("z.sstx");
        save_embeddings(&p, &set).unwrap();
        assert!(matches!(load_embeddings(&p), Err(Error::ZeroEmbedding(0))));
    }

    #[test]
    fn save_load_idempotent_bytes() {
        let dir = TempDir::new().unwrap();
        let set = SentenceEmbeddingSet {
            sentences: (0..5).map(|i| format!("sentence {i}")).collect(),
            vectors: (0..5).map(|i| basis_vector(i, 2.0 + i as f64)).collect(),
            source_tag: "test".into(),
        };
        // the first save holds raw vectors; normalization happens on load,
        // so the cycle is idempotent from the second generation onward
        let p1 = dir.path().join("a.sstx");
        let p2 = dir.path().join("b.sstx");
        let p3 = dir.path().join("c.sstx");
        save_embeddings(&p1, &set).unwrap();
        let loaded = load_embeddings(&p1).unwrap();
        save_embeddings(&p2, &loaded).unwrap();
        let reloaded = load_embeddings(&p2).unwrap();
        save_embeddings(&p3, &reloaded).unwrap();
        assert_eq!(std::fs::read(&p2).unwrap(), std::fs::read(&p3).unwrap());
        assert_eq!(loaded.vectors, reloaded.vectors);
        assert_eq!(loaded.sentences, reloaded.sentences);
    }
}
