//! Parallel corpora, dual-directional mixing, token-count batching, and
//! dynamic masking.

use crate::error::{Error, Result};
use crate::numcore::seeded_rng;
use crate::subword::{SubwordVocab, MASK_ID, NUM_SPECIALS, PAD_ID};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use std::path::Path;

/// Which way a sentence pair points relative to the original bitext.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Swapped,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Forward => "forward",
            Direction::Swapped => "swapped",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "forward" => Ok(Direction::Forward),
            "swapped" => Ok(Direction::Swapped),
            other => Err(Error::Data(format!("unknown direction tag {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentencePair {
    pub source: String,
    pub target: String,
    pub direction: Direction,
}

/// Aligned sentence pairs, each tagged with its direction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParallelCorpus {
    pairs: Vec<SentencePair>,
}

impl ParallelCorpus {
    pub fn new(pairs: Vec<SentencePair>) -> Result<Self> {
        for (i, p) in pairs.iter().enumerate() {
            if p.source.trim().is_empty() || p.target.trim().is_empty() {
                return Err(Error::Data(format!("pair {i} has an empty side")));
            }
        }
        Ok(ParallelCorpus { pairs })
    }

    pub fn from_lines<S: Into<String>>(pairs: impl IntoIterator<Item = (S, S)>) -> Result<Self> {
        ParallelCorpus::new(
            pairs
                .into_iter()
                .map(|(s, t)| SentencePair {
                    source: s.into(),
                    target: t.into(),
                    direction: Direction::Forward,
                })
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[SentencePair] {
        &self.pairs
    }

    /// Tab-separated `source<TAB>target<TAB>direction` lines.
    pub fn save_tsv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (i, p) in self.pairs.iter().enumerate() {
            if p.source.contains('\t') || p.target.contains('\t') {
                return Err(Error::Data(format!("pair {i} contains a tab character")));
            }
            out.push_str(&p.source);
            out.push('\t');
            out.push_str(&p.target);
            out.push('\t');
            out.push_str(p.direction.as_str());
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load_tsv(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let mut cols = line.split('\t');
            let (Some(s), Some(t), Some(d), None) =
                (cols.next(), cols.next(), cols.next(), cols.next())
            else {
                return Err(Error::Data(format!(
                    "{}: line {} is not three tab-separated columns",
                    path.display(),
                    i + 1
                )));
            };
            pairs.push(SentencePair {
                source: s.to_string(),
                target: t.to_string(),
                direction: Direction::parse(d)?,
            });
        }
        ParallelCorpus::new(pairs)
    }
}

/// Read two line-parallel files into a Forward-tagged corpus. Pairs with a
/// blank side are dropped; the count of dropped pairs is returned alongside.
pub fn load_parallel(src_path: &Path, tgt_path: &Path) -> Result<(ParallelCorpus, usize)> {
    let read = |p: &Path| -> Result<Vec<String>> {
        let text = std::fs::read_to_string(p).map_err(|e| Error::io(p.display().to_string(), e))?;
        Ok(text.lines().map(String::from).collect())
    };
    let src = read(src_path)?;
    let tgt = read(tgt_path)?;
    if src.len() != tgt.len() {
        return Err(Error::Data(format!(
            "line count mismatch {} vs {}",
            src.len(),
            tgt.len()
        )));
    }
    let mut pairs = Vec::with_capacity(src.len());
    let mut dropped = 0;
    for (s, t) in src.into_iter().zip(tgt) {
        if s.trim().is_empty() || t.trim().is_empty() {
            dropped += 1;
            continue;
        }
        pairs.push(SentencePair {
            source: s,
            target: t,
            direction: Direction::Forward,
        });
    }
    Ok((ParallelCorpus { pairs }, dropped))
}

/// Concatenate the corpus with its swapped mirror and shuffle the result.
/// The output has exactly 2N pairs, N Forward and N Swapped.
pub fn make_dual_directional(corpus: &ParallelCorpus, seed: u64) -> Result<ParallelCorpus> {
    if corpus.is_empty() {
        return Err(Error::Data("cannot mix an empty corpus".into()));
    }
    if corpus
        .pairs
        .iter()
        .any(|p| p.direction == Direction::Swapped)
    {
        return Err(Error::Data(
            "corpus already contains swapped pairs; refusing to swap twice".into(),
        ));
    }
    let mut pairs = corpus.pairs.clone();
    pairs.extend(corpus.pairs.iter().map(|p| SentencePair {
        source: p.target.clone(),
        target: p.source.clone(),
        direction: Direction::Swapped,
    }));
    let mut rng = seeded_rng(seed);
    pairs.shuffle(&mut rng);
    Ok(ParallelCorpus { pairs })
}

/// Keep only pairs tagged with `direction`, preserving order.
pub fn filter_direction(corpus: &ParallelCorpus, direction: Direction) -> Result<ParallelCorpus> {
    let pairs: Vec<SentencePair> = corpus
        .pairs
        .iter()
        .filter(|p| p.direction == direction)
        .cloned()
        .collect();
    if pairs.is_empty() {
        return Err(Error::Data(format!(
            "no pairs with direction {}",
            direction.as_str()
        )));
    }
    Ok(ParallelCorpus { pairs })
}

/// Greedy length-sorted packing of sequence indices: each group satisfies
/// `rows * longest_row <= max_tokens`. Returns groups of indices into
/// `lengths`.
pub fn pack_by_tokens(lengths: &[usize], max_tokens: usize) -> Result<Vec<Vec<usize>>> {
    if let Some((i, &len)) = lengths.iter().enumerate().find(|(_, &l)| l > max_tokens) {
        return Err(Error::Data(format!(
            "sequence {i} has {len} tokens, over the {max_tokens}-token budget"
        )));
    }
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.sort_by_key(|&i| std::cmp::Reverse(lengths[i]));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let mut width = 0usize;
    for &i in &order {
        if !current.is_empty() && (current.len() + 1) * width > max_tokens {
            groups.push(std::mem::take(&mut current));
        }
        if current.is_empty() {
            // sorted descending, so the first row of a group is its widest
            width = lengths[i];
        }
        current.push(i);
    }
    if !current.is_empty() {
        groups.push(current);
    }
    Ok(groups)
}

/// Pack id sequences into padded `[rows x width]` batches under a token
/// budget. Every input sequence appears in exactly one batch row.
pub fn batch_by_tokens(
    sequences: &[Vec<u32>],
    max_tokens: usize,
    pad_id: u32,
) -> Result<Vec<Array2<u32>>> {
    let lengths: Vec<usize> = sequences.iter().map(Vec::len).collect();
    let groups = pack_by_tokens(&lengths, max_tokens)?;
    let mut batches = Vec::with_capacity(groups.len());
    for group in groups {
        let width = group.iter().map(|&i| lengths[i]).max().unwrap_or(0);
        let mut rows = Array2::from_elem((group.len(), width), pad_id);
        for (r, &i) in group.iter().enumerate() {
            for (c, &id) in sequences[i].iter().enumerate() {
                rows[[r, c]] = id;
            }
        }
        batches.push(rows);
    }
    Ok(batches)
}

/// Label value meaning "no prediction at this position".
pub const IGNORE_LABEL: u32 = u32::MAX;

/// A dynamically masked batch for masked-LM training.
#[derive(Debug, Clone)]
pub struct MaskedBatch {
    pub input_ids: Array2<u32>,
    /// Original id at selected positions, [`IGNORE_LABEL`] elsewhere.
    pub labels: Array2<u32>,
    /// 1 at non-PAD positions, 0 at padding.
    pub attention_mask: Array2<u8>,
}

/// BERT-style dynamic masking: each non-special position is selected with
/// probability `mask_prob`; selected positions are 80% `[MASK]`, 10% a
/// random non-special token, 10% left as-is. Re-sampled per call.
pub fn mask_batch(
    input_ids: &Array2<u32>,
    vocab: &SubwordVocab,
    mask_prob: f64,
    rng_seed: u64,
) -> Result<MaskedBatch> {
    if !(0.0..=1.0).contains(&mask_prob) {
        return Err(Error::Config(format!(
            "mask_prob {mask_prob} outside [0, 1]"
        )));
    }
    let mut rng = seeded_rng(rng_seed);
    let mut masked = input_ids.clone();
    let mut labels = Array2::from_elem(input_ids.dim(), IGNORE_LABEL);
    let mut attention = Array2::zeros(input_ids.dim());
    for ((r, c), &id) in input_ids.indexed_iter() {
        if id != PAD_ID {
            attention[[r, c]] = 1;
        }
        if SubwordVocab::is_special(id) {
            continue;
        }
        debug_assert!((id as usize) < vocab.size());
        if rng.random::<f64>() >= mask_prob {
            continue;
        }
        labels[[r, c]] = id;
        let split = rng.random::<f64>();
        if split < 0.8 {
            masked[[r, c]] = MASK_ID;
        } else if split < 0.9 {
            masked[[r, c]] = rng.random_range(NUM_SPECIALS as u32..vocab.size() as u32);
        }
        // else: keep the original token
    }
    Ok(MaskedBatch {
        input_ids: masked,
        labels,
        attention_mask: attention,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::subword::{BOS_ID, EOS_ID};

    fn corpus(n: usize) -> ParallelCorpus {
        ParallelCorpus::from_lines((0..n).map(|i| (format!("src {i}"), format!("tgt {i}"))))
            .unwrap()
    }

    #[test]
    fn load_parallel_pairs_lines() {
        let dir = tempfile::tempdir().unwrap();
        let s = dir.path().join("train.src");
        let t = dir.path().join("train.tgt");
        std::fs::write(&s, "one\ntwo\n").unwrap();
        std::fs::write(&t, "eins\nzwei\n").unwrap();
        let (c, dropped) = load_parallel(&s, &t).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(dropped, 0);
        assert_eq!(c.pairs()[1].source, "two");
        assert_eq!(c.pairs()[1].target, "zwei");
        assert_eq!(c.pairs()[1].direction, Direction::Forward);
    }

    #[test]
    fn load_parallel_reports_line_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let s = dir.path().join("a.src");
        let t = dir.path().join("a.tgt");
        std::fs::write(&s, "1\n2\n3\n").unwrap();
        std::fs::write(&t, "1\n2\n3\n4\n").unwrap();
        let err = load_parallel(&s, &t).unwrap_err();
        assert!(err.to_string().contains("3 vs 4"), "{err}");
    }

    #[test]
    fn load_parallel_drops_blank_pairs() {
        let dir = tempfile::tempdir().unwrap();
        let s = dir.path().join("b.src");
        let t = dir.path().join("b.tgt");
        std::fs::write(&s, "1\n2\n\n4\n5\n").unwrap();
        std::fs::write(&t, "1\n2\n3\n4\n5\n").unwrap();
        let (c, dropped) = load_parallel(&s, &t).unwrap();
        assert_eq!(c.len(), 4);
        assert_eq!(dropped, 1);
    }

    #[test]
    fn load_parallel_missing_file_names_path() {
        let err = load_parallel(Path::new("/nonexistent.src"), Path::new("/nonexistent.tgt"))
            .unwrap_err();
        assert!(err.to_string().contains("/nonexistent.src"));
    }

    #[test]
    fn dual_directional_doubles_and_tags() {
        let c = corpus(2);
        let d = make_dual_directional(&c, 1).unwrap();
        assert_eq!(d.len(), 4);
        let fwd = d
            .pairs()
            .iter()
            .filter(|p| p.direction == Direction::Forward)
            .count();
        assert_eq!(fwd, 2);
        for p in c.pairs() {
            assert!(d.pairs().iter().any(|q| q.direction == Direction::Swapped
                && q.source == p.target
                && q.target == p.source));
        }
    }

    #[test]
    fn dual_directional_is_seed_deterministic() {
        let c = corpus(16);
        assert_eq!(
            make_dual_directional(&c, 9).unwrap(),
            make_dual_directional(&c, 9).unwrap()
        );
        assert_ne!(
            make_dual_directional(&c, 9).unwrap(),
            make_dual_directional(&c, 10).unwrap()
        );
    }

    #[test]
    fn dual_directional_rejects_double_swap() {
        let c = corpus(2);
        let d = make_dual_directional(&c, 1).unwrap();
        assert!(make_dual_directional(&d, 2).is_err());
    }

    #[test]
    fn filter_recovers_each_half() {
        let c = corpus(5);
        let d = make_dual_directional(&c, 3).unwrap();
        let fwd = filter_direction(&d, Direction::Forward).unwrap();
        assert_eq!(fwd.len(), 5);
        let mut got: Vec<_> = fwd.pairs().iter().map(|p| (&p.source, &p.target)).collect();
        let mut want: Vec<_> = c.pairs().iter().map(|p| (&p.source, &p.target)).collect();
        got.sort();
        want.sort();
        assert_eq!(got, want);
    }

    #[test]
    fn filter_on_missing_direction_errors() {
        let c = corpus(3);
        assert!(filter_direction(&c, Direction::Swapped).is_err());
    }

    #[test]
    fn single_sequence_single_batch() {
        let batches = batch_by_tokens(&[vec![2, 3, 4, 5, 6]], 2048, PAD_ID).unwrap();
        assert_eq!(batches.len(), 1);
        assert_eq!(batches[0].dim(), (1, 5));
    }

    #[test]
    fn packing_respects_budget() {
        // three rows of 4 under budget 8: 2 rows fit, third overflows
        let seqs = vec![vec![5; 4], vec![6; 4], vec![7; 4]];
        let batches = batch_by_tokens(&seqs, 8, PAD_ID).unwrap();
        assert_eq!(batches.len(), 2);
        assert_eq!(batches[0].nrows(), 2);
        assert_eq!(batches[1].nrows(), 1);
    }

    #[test]
    fn oversized_sequence_is_identified() {
        let err = batch_by_tokens(&[vec![1; 3], vec![1; 10]], 8, PAD_ID).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("sequence 1") && msg.contains("10"), "{msg}");
    }

    #[test]
    fn batches_partition_the_input() {
        let seqs: Vec<Vec<u32>> = (0..37)
            .map(|i| (0..(i % 7 + 1)).map(|j| (i * 10 + j) as u32 + 5).collect())
            .collect();
        let batches = batch_by_tokens(&seqs, 16, PAD_ID).unwrap();
        let mut recovered: Vec<Vec<u32>> = Vec::new();
        for b in &batches {
            for row in b.rows() {
                let seq: Vec<u32> = row.iter().cloned().filter(|&x| x != PAD_ID).collect();
                recovered.push(seq);
            }
        }
        let mut want = seqs.clone();
        recovered.sort();
        want.sort();
        assert_eq!(recovered, want);
    }

    #[test]
    fn mask_prob_zero_changes_nothing() {
        let v = SubwordVocab::train(&["a b c d"], 20).unwrap();
        let ids = Array2::from_shape_vec((1, 4), vec![BOS_ID, 5, 6, EOS_ID]).unwrap();
        let mb = mask_batch(&ids, &v, 0.0, 7).unwrap();
        assert_eq!(mb.input_ids, ids);
        assert!(mb.labels.iter().all(|&l| l == IGNORE_LABEL));
    }

    #[test]
    fn specials_are_never_masked() {
        let v = SubwordVocab::train(&["a b c d"], 20).unwrap();
        let ids = Array2::from_shape_vec((1, 5), vec![BOS_ID, 5, PAD_ID, EOS_ID, 6]).unwrap();
        let mb = mask_batch(&ids, &v, 1.0, 3).unwrap();
        assert_eq!(mb.input_ids[[0, 0]], BOS_ID);
        assert_eq!(mb.input_ids[[0, 2]], PAD_ID);
        assert_eq!(mb.input_ids[[0, 3]], EOS_ID);
        assert_eq!(mb.labels[[0, 0]], IGNORE_LABEL);
        assert_eq!(mb.labels[[0, 2]], IGNORE_LABEL);
        assert_eq!(mb.labels[[0, 3]], IGNORE_LABEL);
        // non-specials are all selected at p = 1
        assert_ne!(mb.labels[[0, 1]], IGNORE_LABEL);
        assert_ne!(mb.labels[[0, 4]], IGNORE_LABEL);
    }

    #[test]
    fn attention_mask_marks_non_pad() {
        let v = SubwordVocab::train(&["a b"], 7).unwrap();
        let ids = Array2::from_shape_vec((1, 4), vec![5, 6, PAD_ID, PAD_ID]).unwrap();
        let mb = mask_batch(&ids, &v, 0.15, 1).unwrap();
        assert_eq!(mb.attention_mask.row(0).to_vec(), vec![1, 1, 0, 0]);
    }

    #[test]
    fn masking_fraction_matches_probability() {
        let v = SubwordVocab::train(&["a b c d e f g h"], 30).unwrap();
        let n = 100_000;
        let ids = Array2::from_elem((100, n / 100), 5u32);
        let mb = mask_batch(&ids, &v, 0.15, 11).unwrap();
        let selected = mb.labels.iter().filter(|&&l| l != IGNORE_LABEL).count();
        let frac = selected as f64 / n as f64;
        assert!((frac - 0.15).abs() < 0.005, "fraction {frac}");
    }

    #[test]
    fn masking_split_is_80_10_10() {
        let v = SubwordVocab::train(&["a b c d e f g h i j k l"], 40).unwrap();
        let n = 200_000;
        let original = 6u32;
        let ids = Array2::from_elem((200, n / 200), original);
        let mb = mask_batch(&ids, &v, 0.5, 19).unwrap();
        let mut mask_n = 0u64;
        let mut keep_n = 0u64;
        let mut rand_n = 0u64;
        for ((r, c), &label) in mb.labels.indexed_iter() {
            if label == IGNORE_LABEL {
                continue;
            }
            let now = mb.input_ids[[r, c]];
            if now == MASK_ID {
                mask_n += 1;
            } else if now == original {
                keep_n += 1;
            } else {
                rand_n += 1;
            }
        }
        let total = (mask_n + keep_n + rand_n) as f64;
        assert!((mask_n as f64 / total - 0.8).abs() < 0.01);
        // a random draw can hit the original id, so allow that slack on both
        assert!((keep_n as f64 / total - 0.1).abs() < 0.012);
        assert!((rand_n as f64 / total - 0.1).abs() < 0.012);
    }

    #[test]
    fn masking_resamples_per_call() {
        let v = SubwordVocab::train(&["a b c d"], 20).unwrap();
        let ids = Array2::from_elem((4, 32), 5u32);
        let a = mask_batch(&ids, &v, 0.5, 1).unwrap();
        let b = mask_batch(&ids, &v, 0.5, 2).unwrap();
        assert_ne!(a.input_ids, b.input_ids);
        let a2 = mask_batch(&ids, &v, 0.5, 1).unwrap();
        assert_eq!(a.input_ids, a2.input_ids);
    }

    #[test]
    fn tsv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mixed.tsv");
        let d = make_dual_directional(&corpus(4), 5).unwrap();
        d.save_tsv(&path).unwrap();
        assert_eq!(ParallelCorpus::load_tsv(&path).unwrap(), d);
    }
}
