//! Deterministic byte-level BPE.
//!
//! Ids `0..256` are raw bytes, followed by the BOS/EOS/PAD specials, followed
//! by merges in creation order. Text is pre-split into words (a word is a
//! run of non-space bytes with at most one leading space); merges never
//! cross word boundaries.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::exec::Exec;

pub const BYTE_TOKENS: usize = 256;
pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const PAD: u32 = 258;
pub const N_SPECIALS: usize = 3;
pub const MIN_VOCAB: usize = BYTE_TOKENS + N_SPECIALS;
const FORMAT_VERSION: u32 = 1;
const MIN_PAIR_COUNT: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Specials {
    pub bos: u32,
    pub eos: u32,
    pub pad: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabFile", into = "VocabFile")]
pub struct Vocab {
    merges: Vec<(u32, u32)>,
    seed: u64,
    id_to_bytes: Vec<Vec<u8>>,
    ranks: HashMap<(u32, u32), u32>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    version: u32,
    vocab_size: usize,
    seed: u64,
    specials: Specials,
    merges: Vec<(u32, u32)>,
}

impl From<Vocab> for VocabFile {
    fn from(v: Vocab) -> Self {
        VocabFile {
            version: FORMAT_VERSION,
            vocab_size: v.vocab_size(),
            seed: v.seed,
            specials: v.specials(),
            merges: v.merges,
        }
    }
}

impl TryFrom<VocabFile> for Vocab {
    type Error = Error;

    fn try_from(f: VocabFile) -> Result<Self> {
        if f.version != FORMAT_VERSION {
            return Err(Error::Tokenizer(format!("unsupported vocab version {}", f.version)));
        }
        let v = Vocab::from_merges(f.merges, f.seed)?;
        if v.vocab_size() != f.vocab_size {
            return Err(Error::Tokenizer(format!(
                "vocab_size {} does not match {} merges",
                f.vocab_size,
                v.merges.len()
            )));
        }
        Ok(v)
    }
}

impl Vocab {
    /// Rebuild from an ordered merge list, checking creation order.
    pub fn from_merges(merges: Vec<(u32, u32)>, seed: u64) -> Result<Self> {
        let mut id_to_bytes: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        id_to_bytes.extend(std::iter::repeat_n(Vec::new(), N_SPECIALS));
        let mut ranks = HashMap::with_capacity(merges.len());
        for (rank, &(a, b)) in merges.iter().enumerate() {
            let next = id_to_bytes.len() as u32;
            for operand in [a, b] {
                if operand >= next || (BOS..=PAD).contains(&operand) {
                    return Err(Error::Tokenizer(format!(
                        "merge {rank} uses operand {operand} before it exists"
                    )));
                }
            }
            let mut bytes = id_to_bytes[a as usize].clone();
            bytes.extend_from_slice(&id_to_bytes[b as usize]);
            id_to_bytes.push(bytes);
            if ranks.insert((a, b), rank as u32).is_some() {
                return Err(Error::Tokenizer(format!("duplicate merge ({a}, {b})")));
            }
        }
        Ok(Vocab { merges, seed, id_to_bytes, ranks })
    }

    pub fn vocab_size(&self) -> usize {
        self.id_to_bytes.len()
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn specials(&self) -> Specials {
        Specials { bos: BOS, eos: EOS, pad: PAD }
    }

    pub fn token_bytes(&self, id: u32) -> Option<&[u8]> {
        self.id_to_bytes.get(id as usize).map(Vec::as_slice)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("vocab serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::with_capacity(text.len() / 3 + 1);
        for word in split_words(text.as_bytes()) {
            self.encode_word(word, &mut out);
        }
        out
    }

    fn encode_word(&self, word: &[u8], out: &mut Vec<u32>) {
        let mut syms: Vec<u32> = word.iter().map(|&b| u32::from(b)).collect();
        loop {
            let best = syms
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| self.ranks.get(&(w[0], w[1])).map(|&r| (r, i)))
                .min();
            let Some((rank, _)) = best else { break };
            let (a, b) = self.merges[rank as usize];
            let id = (MIN_VOCAB + rank as usize) as u32;
            let mut merged = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && syms[i] == a && syms[i + 1] == b {
                    merged.push(id);
                    i += 2;
                } else {
                    merged.push(syms[i]);
                    i += 1;
                }
            }
            syms = merged;
        }
        out.extend_from_slice(&syms);
    }

    /// Encode many texts; output order follows input.
    pub fn encode_batch(&self, texts: &[&str], exec: Exec) -> Vec<Vec<u32>> {
        exec.map(texts, |t| self.encode(t))
    }

    pub fn decode_bytes(&self, ids: &[u32]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for (index, &id) in ids.iter().enumerate() {
            let bytes = self.token_bytes(id).ok_or(Error::TokenOutOfRange {
                id,
                index,
                vocab_size: self.vocab_size(),
            })?;
            out.extend_from_slice(bytes);
        }
        Ok(out)
    }

    /// Decode to text. Specials decode to nothing; byte sequences that are not
    /// valid UTF-8 become U+FFFD (use [`Vocab::decode_bytes`] for raw output).
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let bytes = self.decode_bytes(ids)?;
        Ok(match String::from_utf8(bytes) {
            Ok(s) => s,
            Err(e) => String::from_utf8_lossy(e.as_bytes()).into_owned(),
        })
    }
}

/// Split into words: each word starts at a space byte or at the first
/// non-space byte after a boundary, so `"a  b"` becomes `["a", " ", " b"]`.
fn split_words(text: &[u8]) -> impl Iterator<Item = &[u8]> {
    let mut start = 0;
    std::iter::from_fn(move || {
        if start >= text.len() {
            return None;
        }
        let mut i = start + 1;
        while i < text.len() && !is_space(text[i]) {
            i += 1;
        }
        let w = &text[start..i];
        start = i;
        Some(w)
    })
}

fn is_space(b: u8) -> bool {
    matches!(b, b' ' | b'\n' | b'\t' | b'\r')
}

/// Train byte-level BPE. Pair ties are broken by the lexicographic order of
/// the operands' bytes, so the result depends only on the corpus and size.
pub fn train_tokenizer<'a, I>(docs: I, vocab_size: usize, seed: u64) -> Result<Vocab>
where
    I: IntoIterator<Item = &'a str>,
{
    if vocab_size < MIN_VOCAB {
        return Err(Error::Tokenizer(format!(
            "vocab_size {vocab_size} below minimum {MIN_VOCAB}"
        )));
    }
    let mut word_counts: HashMap<&[u8], u64> = HashMap::new();
    let mut any = false;
    for doc in docs {
        for w in split_words(doc.as_bytes()) {
            any = true;
            *word_counts.entry(w).or_default() += 1;
        }
    }
    if !any {
        return Err(Error::Tokenizer("empty corpus".into()));
    }
    let mut words: Vec<(Vec<u32>, u64)> = word_counts
        .into_iter()
        .map(|(w, c)| (w.iter().map(|&b| u32::from(b)).collect(), c))
        .collect();
    words.sort();

    let mut id_to_bytes: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
    id_to_bytes.extend(std::iter::repeat_n(Vec::new(), N_SPECIALS));

    let mut pair_counts: HashMap<(u32, u32), u64> = HashMap::new();
    let mut where_: HashMap<(u32, u32), Vec<usize>> = HashMap::new();
    for (wi, (syms, c)) in words.iter().enumerate() {
        for p in syms.windows(2) {
            *pair_counts.entry((p[0], p[1])).or_default() += c;
            where_.entry((p[0], p[1])).or_default().push(wi);
        }
    }

    let mut merges = Vec::new();
    while id_to_bytes.len() < vocab_size {
        let best = pair_counts
            .iter()
            .filter(|(_, &c)| c >= MIN_PAIR_COUNT)
            .max_by(|(pa, ca), (pb, cb)| {
                ca.cmp(cb).then_with(|| cmp_pair_bytes(&id_to_bytes, **pb, **pa))
            })
            .map(|(&p, _)| p);
        let Some(pair) = best else { break };
        let new_id = id_to_bytes.len() as u32;
        let mut bytes = id_to_bytes[pair.0 as usize].clone();
        bytes.extend_from_slice(&id_to_bytes[pair.1 as usize]);
        id_to_bytes.push(bytes);
        merges.push(pair);

        let mut targets = where_.remove(&pair).unwrap_or_default();
        targets.dedup();
        for wi in targets {
            let (syms, c) = &mut words[wi];
            if !syms.windows(2).any(|w| (w[0], w[1]) == pair) {
                continue;
            }
            for p in syms.windows(2) {
                let key = (p[0], p[1]);
                if let Some(n) = pair_counts.get_mut(&key) {
                    *n -= *c;
                    if *n == 0 {
                        pair_counts.remove(&key);
                    }
                }
            }
            let mut merged = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && (syms[i], syms[i + 1]) == pair {
                    merged.push(new_id);
                    i += 2;
                } else {
                    merged.push(syms[i]);
                    i += 1;
                }
            }
            *syms = merged;
            for p in syms.windows(2) {
                let key = (p[0], p[1]);
                *pair_counts.entry(key).or_default() += *c;
                let list = where_.entry(key).or_default();
                if list.last() != Some(&wi) {
                    list.push(wi);
                }
            }
        }
        pair_counts.remove(&pair);
    }
    Vocab::from_merges(merges, seed)
}

fn cmp_pair_bytes(table: &[Vec<u8>], a: (u32, u32), b: (u32, u32)) -> Ordering {
    table[a.0 as usize]
        .cmp(&table[b.0 as usize])
        .then_with(|| table[a.1 as usize].cmp(&table[b.1 as usize]))
        // Distinct ids can spell the same bytes ("a"+"bc" vs "ab"+"c").
        .then_with(|| a.cmp(&b))
}
