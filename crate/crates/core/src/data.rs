//! Overlapping fixed-length chunks, epoch ordering and batch accounting.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::CleanDocument;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::tokenizer::{Vocab, BOS, EOS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChunkerConfig {
    pub seq_len: usize,
    pub stride: usize,
    pub min_tail: usize,
}

impl Default for ChunkerConfig {
    fn default() -> Self {
        ChunkerConfig { seq_len: 1024, stride: 512, min_tail: 32 }
    }
}

impl ChunkerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.stride > self.seq_len {
            return Err(Error::config("chunker.stride", "must satisfy 0 < stride <= seq_len"));
        }
        if self.min_tail > self.seq_len {
            return Err(Error::config("chunker.min_tail", "must not exceed seq_len"));
        }
        Ok(())
    }

    /// Tokens at the start of a non-initial chunk already scored by its
    /// predecessor.
    pub fn overlap(&self) -> usize {
        self.seq_len - self.stride
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub doc_id: String,
    pub offset: usize,
    pub ids: Vec<u32>,
}

impl Chunk {
    /// Prediction mask for evaluation: `mask[t]` covers logits `t`
    /// predicting `ids[t + 1]`. Non-initial chunks only score tokens past
    /// the overlap so that no document token is counted twice.
    pub fn eval_mask(&self, cfg: &ChunkerConfig) -> Vec<bool> {
        let n = self.ids.len().saturating_sub(1);
        if self.offset == 0 {
            vec![true; n]
        } else {
            (0..n).map(|t| t + 1 >= cfg.overlap()).collect()
        }
    }
}

/// `(offset, length)` of every chunk of a document of `len` tokens.
///
/// Full windows start at `0, stride, 2*stride, ...` while they fit. If the
/// last full window stops short of the end, one more window at the next
/// stride offset takes the remainder, kept only if it is at least
/// `min_tail` long. Documents shorter than `seq_len` give one chunk when
/// they reach `min_tail`.
pub fn chunk_spans(len: usize, cfg: &ChunkerConfig) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    if len < cfg.seq_len {
        if len > 0 && len >= cfg.min_tail {
            spans.push((0, len));
        }
        return spans;
    }
    let mut offset = 0;
    while offset + cfg.seq_len <= len {
        spans.push((offset, cfg.seq_len));
        offset += cfg.stride;
    }
    let covered = offset - cfg.stride + cfg.seq_len;
    if covered < len {
        let tail = len - offset;
        if tail >= cfg.min_tail {
            spans.push((offset, tail));
        }
    }
    spans
}

pub fn chunk_document(doc_id: &str, ids: &[u32], cfg: &ChunkerConfig) -> Vec<Chunk> {
    chunk_spans(ids.len(), cfg)
        .into_iter()
        .map(|(offset, len)| Chunk {
            doc_id: doc_id.to_string(),
            offset,
            ids: ids[offset..offset + len].to_vec(),
        })
        .collect()
}

/// A document as model input: `BOS text EOS`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedDoc {
    pub doc_id: String,
    pub ids: Vec<u32>,
}

pub fn tokenize_documents(docs: &[CleanDocument], vocab: &Vocab, exec: Exec) -> Vec<TokenizedDoc> {
    exec.map(docs, |d| {
        let mut ids = Vec::with_capacity(d.text.len() / 3 + 2);
        ids.push(BOS);
        ids.extend(vocab.encode(&d.text));
        ids.push(EOS);
        TokenizedDoc { doc_id: d.doc_id.clone(), ids }
    })
}

/// Fill `token_count` (text tokens, specials excluded).
pub fn count_tokens(docs: &mut [CleanDocument], vocab: &Vocab, exec: Exec) {
    let counts = exec.map(docs, |d| vocab.encode(&d.text).len());
    for (d, n) in docs.iter_mut().zip(counts) {
        d.token_count = n;
    }
}

pub fn chunk_documents(docs: &[TokenizedDoc], cfg: &ChunkerConfig, exec: Exec) -> Vec<Chunk> {
    exec.map(docs, |d| chunk_document(&d.doc_id, &d.ids, cfg))
        .into_iter()
        .flatten()
        .collect()
}

/// Seeded document-level split into `(train, val)`.
pub fn split_documents<T: Clone>(docs: &[T], val_fraction: f64, seed: u64) -> (Vec<T>, Vec<T>) {
    let mut order: Vec<usize> = (0..docs.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((docs.len() as f64) * val_fraction).round() as usize;
    let n_val = n_val.clamp(usize::from(docs.len() > 1), docs.len().saturating_sub(1));
    let mut val_idx: Vec<usize> = order[..n_val].to_vec();
    let mut train_idx: Vec<usize> = order[n_val..].to_vec();
    val_idx.sort_unstable();
    train_idx.sort_unstable();
    (
        train_idx.iter().map(|&i| docs[i].clone()).collect(),
        val_idx.iter().map(|&i| docs[i].clone()).collect(),
    )
}

/// One epoch's visiting order: a seeded permutation of chunk indices. No
/// replay, no interleaving schedule.
pub fn build_epoch(n_chunks: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n_chunks).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

/// `b` sequences per device, `a` accumulation steps, `d` devices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BatchPlan {
    pub b: usize,
    pub a: usize,
    pub d: usize,
    pub seq_len: usize,
}

impl Default for BatchPlan {
    fn default() -> Self {
        // Single-device profile.
        BatchPlan { b: 4, a: 8, d: 1, seq_len: 1024 }
    }
}

impl BatchPlan {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("plan.b", self.b), ("plan.a", self.a), ("plan.d", self.d), ("plan.seq_len", self.seq_len)] {
            if v == 0 {
                return Err(Error::config(name, "must be >= 1"));
            }
        }
        Ok(())
    }

    pub fn sequences_per_step(&self) -> usize {
        self.b * self.a * self.d
    }

    pub fn steps_per_epoch(&self, n_chunks: usize) -> usize {
        n_chunks.div_ceil(self.sequences_per_step())
    }
}

/// Effective batch as `(sequences, tokens)`.
pub fn eff_batch(plan: &BatchPlan) -> (usize, usize) {
    let seqs = plan.b * plan.a * plan.d;
    (seqs, seqs * plan.seq_len)
}

const STORE_MAGIC: &[u8; 4] = b"PCHK";
const STORE_VERSION: u32 = 1;

/// Write chunks as a binary token file plus a tab-separated index sidecar
/// (`<path>.idx`: `doc_id offset length`).
///
/// Binary layout, little-endian: magic `PCHK`, version u32, seq_len u32,
/// stride u32, min_tail u32, token count u64, then u32 token ids.
pub fn write_chunk_store(path: &Path, chunks: &[Chunk], cfg: &ChunkerConfig) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(fs::File::create(path).map_err(io)?);
    let total: u64 = chunks.iter().map(|c| c.ids.len() as u64).sum();
    w.write_all(STORE_MAGIC).map_err(io)?;
    for v in [STORE_VERSION, cfg.seq_len as u32, cfg.stride as u32, cfg.min_tail as u32] {
        w.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    w.write_all(&total.to_le_bytes()).map_err(io)?;
    for c in chunks {
        for id in &c.ids {
            w.write_all(&id.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)?;

    let idx = index_path(path);
    let io = |e| Error::io(&idx, e);
    let mut w = BufWriter::new(fs::File::create(&idx).map_err(io)?);
    for c in chunks {
        writeln!(w, "{}\t{}\t{}", c.doc_id, c.offset, c.ids.len()).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_chunk_store(path: &Path) -> Result<(Vec<Chunk>, ChunkerConfig)> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 28 || &bytes[..4] != STORE_MAGIC {
        return Err(Error::Format(format!("{}: not a chunk store", path.display())));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    if u32_at(4) != STORE_VERSION {
        return Err(Error::Format(format!("chunk store version {}", u32_at(4))));
    }
    let cfg = ChunkerConfig {
        seq_len: u32_at(8) as usize,
        stride: u32_at(12) as usize,
        min_tail: u32_at(16) as usize,
    };
    let total = u64::from_le_bytes(bytes[20..28].try_into().unwrap()) as usize;
    if bytes.len() != 28 + 4 * total {
        return Err(Error::Format("chunk store truncated".into()));
    }
    let idx = index_path(path);
    let file = fs::File::open(&idx).map_err(|e| Error::io(&idx, e))?;
    let mut chunks = Vec::new();
    let mut pos = 0usize;
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(&idx, e))?;
        let mut parts = line.rsplitn(3, '\t');
        let (Some(len), Some(offset), Some(doc_id)) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::Format(format!("bad index line {line:?}")));
        };
        let len: usize = len.parse().map_err(|_| Error::Format(format!("bad length in {line:?}")))?;
        let offset: usize = offset.parse().map_err(|_| Error::Format(format!("bad offset in {line:?}")))?;
        if pos + len > total {
            return Err(Error::Format("index exceeds token file".into()));
        }
        let ids = (pos..pos + len).map(|i| u32_at(28 + 4 * i)).collect();
        chunks.push(Chunk { doc_id: doc_id.to_string(), offset, ids });
        pos += len;
    }
    if pos != total {
        return Err(Error::Format("index does not cover token file".into()));
    }
    Ok((chunks, cfg))
}

fn index_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".idx");
    PathBuf::from(p)
}
