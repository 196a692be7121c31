//! Byte-pair encoding over encoded trajectories.
//!
//! Ids `0..256` are raw bytes, merge `i` creates id `256 + i`. Text is split
//! into chunks that end after every `|` and every newline, and merges never
//! cross a chunk boundary. One extra id, [`Tokenizer::eos_id`], marks the end
//! of a document.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_VOCAB_SIZE: usize = 1024;

#[derive(Debug, Error)]
pub enum TokError {
    #[error("cannot train on an empty corpus")]
    EmptyCorpus,
    #[error("vocab_size must be at least 257, got {0}")]
    VocabTooSmall(usize),
    #[error("unknown token id {0}")]
    UnknownId(u32),
    #[error("token ids do not form valid UTF-8")]
    InvalidUtf8,
    #[error("invalid vocabulary file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tokenizer {
    merges: Vec<(u32, u32)>,
    expansions: Vec<Vec<u8>>,
    ranks: HashMap<(u32, u32), u32>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    merges: Vec<[u32; 2]>,
    vocab_size: usize,
}

/// Chunks never merged across: each ends after `|` or `\n` (or at the end).
pub fn pre_split(text: &str) -> impl Iterator<Item = &[u8]> {
    text.as_bytes()
        .split_inclusive(|&b| b == b'|' || b == b'\n')
}

impl Tokenizer {
    /// Rebuild from a merge list, checking every id and expansion.
    pub fn from_merges(merges: Vec<(u32, u32)>) -> Result<Self, TokError> {
        let mut expansions: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        let mut seen: HashSet<Vec<u8>> = expansions.iter().cloned().collect();
        let mut ranks = HashMap::with_capacity(merges.len());
        for (i, &(l, r)) in merges.iter().enumerate() {
            let n = expansions.len() as u32;
            if l >= n || r >= n {
                return Err(TokError::Format(format!(
                    "merge {i} refers to an id not yet defined"
                )));
            }
            let mut e = expansions[l as usize].clone();
            e.extend_from_slice(&expansions[r as usize]);
            if !seen.insert(e.clone()) {
                return Err(TokError::Format(format!(
                    "merge {i} duplicates an existing token"
                )));
            }
            if ranks.insert((l, r), i as u32).is_some() {
                return Err(TokError::Format(format!(
                    "merge {i} repeats an earlier pair"
                )));
            }
            expansions.push(e);
        }
        Ok(Self {
            merges,
            expansions,
            ranks,
        })
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    /// Number of byte and merged tokens (excluding end-of-sequence).
    pub fn vocab_size(&self) -> usize {
        self.expansions.len()
    }

    pub fn eos_id(&self) -> u32 {
        self.expansions.len() as u32
    }

    /// Output dimension a language model needs: every token plus EOS.
    pub fn model_vocab_size(&self) -> usize {
        self.expansions.len() + 1
    }

    pub fn expansion(&self, id: u32) -> Option<&[u8]> {
        self.expansions.get(id as usize).map(Vec::as_slice)
    }

    pub fn expansions(&self) -> &[Vec<u8>] {
        &self.expansions
    }

    fn tokenize_chunk(&self, chunk: &[u8], out: &mut Vec<u32>) {
        let mut ids: Vec<u32> = chunk.iter().map(|&b| b as u32).collect();
        loop {
            let best = ids
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0], w[1])).map(|&r| (r, (w[0], w[1]))))
                .min();
            let Some((rank, pair)) = best else { break };
            ids = merge_pair(&ids, pair, 256 + rank);
        }
        out.extend(ids);
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::with_capacity(text.len() / 2);
        for chunk in pre_split(text) {
            self.tokenize_chunk(chunk, &mut out);
        }
        out
    }

    pub fn detokenize_bytes(&self, ids: &[u32]) -> Result<Vec<u8>, TokError> {
        let mut out = Vec::new();
        for &id in ids {
            out.extend_from_slice(self.expansion(id).ok_or(TokError::UnknownId(id))?);
        }
        Ok(out)
    }

    pub fn detokenize(&self, ids: &[u32]) -> Result<String, TokError> {
        String::from_utf8(self.detokenize_bytes(ids)?).map_err(|_| TokError::InvalidUtf8)
    }

    pub fn to_json(&self) -> String {
        let file = VocabFile {
            merges: self.merges.iter().map(|&(l, r)| [l, r]).collect(),
            vocab_size: self.vocab_size(),
        };
        serde_json::to_string(&file).expect("vocabulary serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, TokError> {
        let file: VocabFile =
            serde_json::from_str(text).map_err(|e| TokError::Format(e.to_string()))?;
        let tok = Self::from_merges(file.merges.into_iter().map(|[l, r]| (l, r)).collect())?;
        if tok.vocab_size() != file.vocab_size {
            return Err(TokError::Format(format!(
                "vocab_size {} does not match {} merges",
                file.vocab_size,
                tok.merges.len()
            )));
        }
        Ok(tok)
    }

    pub fn save(&self, path: &Path) -> Result<(), TokError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TokError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

fn merge_pair(ids: &[u32], pair: (u32, u32), new_id: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(ids.len());
    let mut i = 0;
    while i < ids.len() {
        if i + 1 < ids.len() && (ids[i], ids[i + 1]) == pair {
            out.push(new_id);
            i += 2;
        } else {
            out.push(ids[i]);
            i += 1;
        }
    }
    out
}

/// Greedy most-frequent-pair merging until `vocab_size` tokens exist or no
/// pair occurs at least twice. Ties go to the pair whose byte expansions are
/// lexicographically smallest. A pair whose expansion already names a token
/// is never merged.
pub fn train_bpe<S: AsRef<str>>(corpus: &[S], vocab_size: usize) -> Result<Tokenizer, TokError> {
    if vocab_size < 257 {
        return Err(TokError::VocabTooSmall(vocab_size));
    }
    let mut word_counts: HashMap<&[u8], i64> = HashMap::new();
    for doc in corpus {
        for chunk in pre_split(doc.as_ref()) {
            *word_counts.entry(chunk).or_default() += 1;
        }
    }
    if word_counts.is_empty() {
        return Err(TokError::EmptyCorpus);
    }
    // Sorted for a deterministic word order.
    let mut words: Vec<(&[u8], i64)> = word_counts.into_iter().collect();
    words.sort_unstable();
    let counts: Vec<i64> = words.iter().map(|w| w.1).collect();
    let mut words: Vec<Vec<u32>> = words
        .iter()
        .map(|(w, _)| w.iter().map(|&b| b as u32).collect())
        .collect();

    let mut pair_counts: HashMap<(u32, u32), i64> = HashMap::new();
    let mut where_: HashMap<(u32, u32), HashSet<usize>> = HashMap::new();
    for (wi, w) in words.iter().enumerate() {
        for p in w.windows(2) {
            *pair_counts.entry((p[0], p[1])).or_default() += counts[wi];
            where_.entry((p[0], p[1])).or_default().insert(wi);
        }
    }

    let mut expansions: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
    let mut known: HashSet<Vec<u8>> = expansions.iter().cloned().collect();
    let mut banned: HashSet<(u32, u32)> = HashSet::new();
    let mut merges = Vec::new();
    while expansions.len() < vocab_size {
        let best = pair_counts
            .iter()
            .filter(|(p, &c)| c >= 2 && !banned.contains(p))
            .max_by(|(pa, ca), (pb, cb)| {
                ca.cmp(cb).then_with(|| {
                    let ka = (&expansions[pa.0 as usize], &expansions[pa.1 as usize]);
                    let kb = (&expansions[pb.0 as usize], &expansions[pb.1 as usize]);
                    kb.cmp(&ka)
                })
            })
            .map(|(&p, _)| p);
        let Some(pair) = best else { break };
        let mut e = expansions[pair.0 as usize].clone();
        e.extend_from_slice(&expansions[pair.1 as usize]);
        if !known.insert(e.clone()) {
            banned.insert(pair);
            continue;
        }
        let new_id = expansions.len() as u32;
        expansions.push(e);
        merges.push(pair);

        let mut affected: Vec<usize> = where_
            .remove(&pair)
            .unwrap_or_default()
            .into_iter()
            .collect();
        affected.sort_unstable();
        for wi in affected {
            let c = counts[wi];
            for p in words[wi].windows(2) {
                let key = (p[0], p[1]);
                *pair_counts.get_mut(&key).expect("counted pair") -= c;
                if let Some(set) = where_.get_mut(&key) {
                    set.remove(&wi);
                }
            }
            words[wi] = merge_pair(&words[wi], pair, new_id);
            for p in words[wi].windows(2) {
                *pair_counts.entry((p[0], p[1])).or_default() += c;
                where_.entry((p[0], p[1])).or_default().insert(wi);
            }
        }
        pair_counts.retain(|_, c| *c > 0);
    }
    Tokenizer::from_merges(merges)
}
