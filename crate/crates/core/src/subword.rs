//! Subword vocabulary shared by both languages of a bitext.
//!
//! Training is merge-based: whitespace pre-tokenization, then iterative
//! merging of the highest-frequency adjacent symbol pair (ties go to the
//! lexicographically smallest pair, so training is deterministic). Pieces
//! that continue a word carry the `##` prefix. Encoding is greedy
//! longest-match from the left; characters outside the vocabulary become
//! `[UNK]`.

use crate::error::{Error, Result};
use sha2::{Digest, Sha256};
use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const BOS_ID: u32 = 2;
pub const EOS_ID: u32 = 3;
pub const MASK_ID: u32 = 4;
pub const NUM_SPECIALS: usize = 5;
pub const CONTINUATION_PREFIX: &str = "##";

const SPECIALS: [&str; NUM_SPECIALS] = ["[PAD]", "[UNK]", "[BOS]", "[EOS]", "[MASK]"];

/// Immutable token inventory. Indices 0-4 are the specials, in the order
/// PAD, UNK, BOS, EOS, MASK.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubwordVocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl SubwordVocab {
    /// Build from an explicit token list. The first five entries must be the
    /// special tokens and all entries must be unique.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < NUM_SPECIALS {
            return Err(Error::Vocab(format!(
                "vocab needs at least the {NUM_SPECIALS} special tokens, got {}",
                tokens.len()
            )));
        }
        for (i, expected) in SPECIALS.iter().enumerate() {
            if tokens[i] != *expected {
                return Err(Error::Vocab(format!(
                    "token {i} must be {expected}, got {}",
                    tokens[i]
                )));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Vocab(format!("duplicate token {t}")));
            }
        }
        Ok(SubwordVocab { tokens, index })
    }

    /// Train a vocabulary of (up to) `target_size` tokens over the corpus.
    /// Merges may exhaust earlier, in which case the vocab is smaller.
    pub fn train<S: AsRef<str>>(corpus_lines: &[S], target_size: usize) -> Result<Self> {
        // word -> count, with words as symbol sequences
        let mut word_counts: HashMap<Vec<String>, u64> = HashMap::new();
        for line in corpus_lines {
            for word in line.as_ref().split_whitespace() {
                let symbols: Vec<String> = word
                    .chars()
                    .enumerate()
                    .map(|(i, c)| {
                        if i == 0 {
                            c.to_string()
                        } else {
                            format!("{CONTINUATION_PREFIX}{c}")
                        }
                    })
                    .collect();
                *word_counts.entry(symbols).or_insert(0) += 1;
            }
        }
        if word_counts.is_empty() {
            return Err(Error::Vocab("empty corpus".into()));
        }

        let mut alphabet: Vec<String> = word_counts
            .keys()
            .flat_map(|w| w.iter().cloned())
            .collect();
        alphabet.sort();
        alphabet.dedup();

        let min_size = NUM_SPECIALS + alphabet.len();
        if target_size < min_size {
            return Err(Error::Vocab(format!(
                "target_size {target_size} below minimum {min_size} \
                 ({NUM_SPECIALS} specials + {} alphabet symbols)",
                alphabet.len()
            )));
        }

        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(alphabet);

        let mut words: Vec<(Vec<String>, u64)> = word_counts.into_iter().collect();
        while tokens.len() < target_size {
            let mut pair_counts: HashMap<(String, String), u64> = HashMap::new();
            for (symbols, count) in &words {
                for pair in symbols.windows(2) {
                    *pair_counts
                        .entry((pair[0].clone(), pair[1].clone()))
                        .or_insert(0) += count;
                }
            }
            // highest count, ties to the lexicographically smallest pair
            let Some((best, _)) = pair_counts
                .into_iter()
                .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)))
            else {
                break;
            };
            let merged = format!(
                "{}{}",
                best.0,
                best.1.strip_prefix(CONTINUATION_PREFIX).unwrap_or(&best.1)
            );
            for (symbols, _) in &mut words {
                let mut out = Vec::with_capacity(symbols.len());
                let mut i = 0;
                while i < symbols.len() {
                    if i + 1 < symbols.len() && symbols[i] == best.0 && symbols[i + 1] == best.1 {
                        out.push(merged.clone());
                        i += 2;
                    } else {
                        out.push(symbols[i].clone());
                        i += 1;
                    }
                }
                *symbols = out;
            }
            tokens.push(merged);
        }

        SubwordVocab::from_tokens(tokens)
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn is_special(id: u32) -> bool {
        (id as usize) < NUM_SPECIALS
    }

    /// Greedy longest-match segmentation. Word-internal pieces carry the
    /// continuation prefix; unknown characters become `[UNK]`. No BOS/EOS.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut ids = Vec::new();
        for word in text.split_whitespace() {
            let chars: Vec<char> = word.chars().collect();
            let mut pos = 0;
            while pos < chars.len() {
                let mut matched = None;
                for end in (pos + 1..=chars.len()).rev() {
                    let piece: String = chars[pos..end].iter().collect();
                    let candidate = if pos == 0 {
                        piece
                    } else {
                        format!("{CONTINUATION_PREFIX}{piece}")
                    };
                    if let Some(id) = self.index.get(&candidate) {
                        matched = Some((*id, end));
                        break;
                    }
                }
                match matched {
                    Some((id, end)) => {
                        ids.push(id);
                        pos = end;
                    }
                    None => {
                        ids.push(UNK_ID);
                        pos += 1;
                    }
                }
            }
        }
        ids
    }

    /// Inverse of [`SubwordVocab::encode`] up to whitespace normalization.
    /// Continuation pieces glue to the previous piece; specials are dropped.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut out = String::new();
        for (pos, &id) in ids.iter().enumerate() {
            let Some(token) = self.token(id) else {
                return Err(Error::Vocab(format!(
                    "id {id} at position {pos} out of range for vocab of size {}",
                    self.size()
                )));
            };
            if Self::is_special(id) {
                continue;
            }
            if let Some(rest) = token.strip_prefix(CONTINUATION_PREFIX) {
                out.push_str(rest);
            } else {
                if !out.is_empty() {
                    out.push(' ');
                }
                out.push_str(token);
            }
        }
        Ok(out)
    }

    /// One token per line, index order, specials first.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            let _ = writeln!(s, "{t}");
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string())
            .map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let tokens: Vec<String> = text.lines().map(String::from).collect();
        SubwordVocab::from_tokens(tokens)
    }

    /// Content hash used to pair checkpoints with the vocab they were
    /// trained against.
    pub fn content_hash(&self) -> String {
        let digest = Sha256::digest(self.to_file_string().as_bytes());
        let mut hex = String::with_capacity(64);
        for b in digest {
            let _ = write!(hex, "{b:02x}");
        }
        hex
    }
}
