//! Deterministic toy bilingual corpora.
//!
//! Two synthetic languages over disjoint syllable inventories, linked by a
//! word-for-word lexicon. A sentence is 1..=3 phrases; a phrase is
//! `modifier noun` on the source side and `noun modifier` on the target
//! side, so translation is a systematic lexicon mapping plus local
//! reordering.
//!
//! Word choice mixes a Zipf prior with a deterministic word chain: with
//! probability 0.8 the next word is a fixed bijective function of the
//! previous one, otherwise a fresh Zipf draw. The chain gives sentences
//! internal structure (masked words are largely recoverable from their
//! neighbors, the way collocations behave), while the Zipf tail keeps many
//! words rare in a small parallel corpus yet well-covered by larger
//! monolingual text.

use crate::data::ParallelCorpus;
use crate::numcore::{derive_seed, seeded_rng};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Source,
    Target,
}

#[derive(Debug, Clone)]
pub struct ToyLanguage {
    modifiers_src: Vec<String>,
    nouns_src: Vec<String>,
    modifiers_tgt: Vec<String>,
    nouns_tgt: Vec<String>,
    zipf_cdf: Vec<f64>,
}

const MOD_SRC_SYL: [&str; 8] = ["ba", "de", "ki", "lo", "mu", "fa", "ge", "hi"];
const NOUN_SRC_SYL: [&str; 8] = ["na", "po", "re", "sa", "tu", "we", "ya", "zo"];
const MOD_TGT_SYL: [&str; 8] = ["al", "en", "ir", "os", "ul", "ec", "iv", "ob"];
const NOUN_TGT_SYL: [&str; 8] = ["am", "ev", "ik", "ol", "ud", "ar", "es", "if"];

fn words(syllables: &[&str]) -> Vec<String> {
    let mut out = Vec::with_capacity(syllables.len() * syllables.len());
    for a in syllables {
        for b in syllables {
            out.push(format!("{a}{b}"));
        }
    }
    out
}

impl ToyLanguage {
    pub fn new() -> Self {
        let modifiers_src = words(&MOD_SRC_SYL);
        let n = modifiers_src.len();
        let weights: Vec<f64> = (0..n).map(|i| 1.0 / (i as f64 + 1.0)).collect();
        let total: f64 = weights.iter().sum();
        let mut acc = 0.0;
        let zipf_cdf = weights
            .iter()
            .map(|w| {
                acc += w / total;
                acc
            })
            .collect();
        ToyLanguage {
            modifiers_src,
            nouns_src: words(&NOUN_SRC_SYL),
            modifiers_tgt: words(&MOD_TGT_SYL),
            nouns_tgt: words(&NOUN_TGT_SYL),
            zipf_cdf,
        }
    }

    pub fn word_types_per_language(&self) -> usize {
        self.modifiers_src.len() + self.nouns_src.len()
    }

    fn zipf(&self, rng: &mut ChaCha8Rng) -> usize {
        let u = rng.random::<f64>();
        self.zipf_cdf.partition_point(|&c| c < u).min(self.zipf_cdf.len() - 1)
    }

    /// Deterministic continuation bijections over word indices.
    fn chain_noun(&self, m: usize) -> usize {
        (37 * m + 11) % self.nouns_src.len()
    }

    fn chain_mod(&self, n: usize) -> usize {
        (29 * n + 7) % self.modifiers_src.len()
    }

    const CHAIN_PROB: f64 = 0.8;

    /// A sentence as phrase index pairs (modifier, noun): a Zipf-seeded
    /// mostly-deterministic word chain.
    fn sample_phrases(&self, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
        let n_phrases = rng.random_range(1..=3);
        let mut phrases = Vec::with_capacity(n_phrases);
        let mut m = self.zipf(rng);
        for _ in 0..n_phrases {
            let n = if rng.random::<f64>() < Self::CHAIN_PROB {
                self.chain_noun(m)
            } else {
                self.zipf(rng)
            };
            phrases.push((m, n));
            m = if rng.random::<f64>() < Self::CHAIN_PROB {
                self.chain_mod(n)
            } else {
                self.zipf(rng)
            };
        }
        phrases
    }

    fn source_text(&self, phrases: &[(usize, usize)]) -> String {
        phrases
            .iter()
            .flat_map(|&(m, n)| [self.modifiers_src[m].as_str(), self.nouns_src[n].as_str()])
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn target_text(&self, phrases: &[(usize, usize)]) -> String {
        // noun before modifier on the target side
        phrases
            .iter()
            .flat_map(|&(m, n)| [self.nouns_tgt[n].as_str(), self.modifiers_tgt[m].as_str()])
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// The reference translation of a source sentence generated by this
    /// language; panics on words it does not know.
    pub fn translate(&self, source: &str) -> String {
        let tokens: Vec<&str> = source.split_whitespace().collect();
        assert!(tokens.len() % 2 == 0, "source must be whole phrases");
        let mut out = Vec::with_capacity(tokens.len());
        for pair in tokens.chunks(2) {
            let m = self
                .modifiers_src
                .iter()
                .position(|w| w == pair[0])
                .expect("unknown modifier");
            let n = self
                .nouns_src
                .iter()
                .position(|w| w == pair[1])
                .expect("unknown noun");
            out.push(self.nouns_tgt[n].as_str());
            out.push(self.modifiers_tgt[m].as_str());
        }
        out.join(" ")
    }

    /// n aligned sentence pairs.
    pub fn gen_parallel(&self, n: usize, seed: u64) -> ParallelCorpus {
        let mut rng = seeded_rng(derive_seed(seed, "synth-parallel"));
        let pairs: Vec<(String, String)> = (0..n)
            .map(|_| {
                let phrases = self.sample_phrases(&mut rng);
                (self.source_text(&phrases), self.target_text(&phrases))
            })
            .collect();
        ParallelCorpus::from_lines(pairs).expect("generated sentences are never empty")
    }

    /// n monolingual sentences on one side, drawn independently of any
    /// parallel corpus.
    pub fn gen_monolingual(&self, n: usize, seed: u64, side: Side) -> Vec<String> {
        let label = match side {
            Side::Source => "synth-mono-src",
            Side::Target => "synth-mono-tgt",
        };
        let mut rng = seeded_rng(derive_seed(seed, label));
        (0..n)
            .map(|_| {
                let phrases = self.sample_phrases(&mut rng);
                match side {
                    Side::Source => self.source_text(&phrases),
                    Side::Target => self.target_text(&phrases),
                }
            })
            .collect()
    }

    /// Train/dev split with dev sources disjoint from training sources.
    pub fn gen_split(
        &self,
        n_train: usize,
        n_dev: usize,
        seed: u64,
    ) -> (ParallelCorpus, ParallelCorpus) {
        let pool = self.gen_parallel(n_train + 4 * n_dev, seed);
        let train: Vec<_> = pool.pairs()[..n_train].to_vec();
        let seen: std::collections::HashSet<&str> =
            train.iter().map(|p| p.source.as_str()).collect();
        let dev: Vec<_> = pool.pairs()[n_train..]
            .iter()
            .filter(|p| !seen.contains(p.source.as_str()))
            .take(n_dev)
            .cloned()
            .collect();
        (
            ParallelCorpus::new(train).expect("nonempty"),
            ParallelCorpus::new(dev).expect("nonempty"),
        )
    }
}

impl Default for ToyLanguage {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let lang = ToyLanguage::new();
        assert_eq!(lang.gen_parallel(10, 3), lang.gen_parallel(10, 3));
        assert_ne!(lang.gen_parallel(10, 3), lang.gen_parallel(10, 4));
    }

    #[test]
    fn targets_are_the_lexicon_translation() {
        let lang = ToyLanguage::new();
        let corpus = lang.gen_parallel(50, 7);
        for p in corpus.pairs() {
            assert_eq!(lang.translate(&p.source), p.target);
        }
    }

    #[test]
    fn languages_use_disjoint_inventories() {
        let lang = ToyLanguage::new();
        let corpus = lang.gen_parallel(100, 1);
        for p in corpus.pairs() {
            for w in p.source.split_whitespace() {
                assert!(
                    lang.modifiers_src.contains(&w.to_string())
                        || lang.nouns_src.contains(&w.to_string())
                );
            }
            for w in p.target.split_whitespace() {
                assert!(
                    lang.modifiers_tgt.contains(&w.to_string())
                        || lang.nouns_tgt.contains(&w.to_string())
                );
            }
        }
    }

    #[test]
    fn word_frequencies_are_heavily_skewed() {
        let lang = ToyLanguage::new();
        let mono = lang.gen_monolingual(2000, 5, Side::Source);
        let mut counts: std::collections::HashMap<&str, usize> = Default::default();
        for s in &mono {
            for w in s.split_whitespace() {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut sorted: Vec<usize> = counts.values().copied().collect();
        sorted.sort_unstable();
        let max = *sorted.last().unwrap();
        let median = sorted[sorted.len() / 2];
        assert!(max > 10 * median.max(1), "max {max}, median {median}");
    }

    #[test]
    fn neighbors_usually_determine_a_word() {
        // the chain makes a masked noun recoverable from its modifier about
        // CHAIN_PROB of the time
        let lang = ToyLanguage::new();
        let corpus = lang.gen_parallel(4000, 8);
        let mut chain_hits = 0usize;
        let mut total = 0usize;
        for p in corpus.pairs() {
            let words: Vec<&str> = p.source.split_whitespace().collect();
            for pair in words.chunks(2) {
                let m = lang
                    .modifiers_src
                    .iter()
                    .position(|w| w == pair[0])
                    .unwrap();
                let n = lang.nouns_src.iter().position(|w| w == pair[1]).unwrap();
                total += 1;
                if n == lang.chain_noun(m) {
                    chain_hits += 1;
                }
            }
        }
        let rate = chain_hits as f64 / total as f64;
        assert!((rate - 0.8).abs() < 0.05, "chain rate {rate}");
    }

    #[test]
    fn split_keeps_dev_sources_unseen() {
        let lang = ToyLanguage::new();
        let (train, dev) = lang.gen_split(500, 50, 9);
        assert_eq!(train.len(), 500);
        assert_eq!(dev.len(), 50);
        let seen: std::collections::HashSet<&str> =
            train.pairs().iter().map(|p| p.source.as_str()).collect();
        assert!(dev.pairs().iter().all(|p| !seen.contains(p.source.as_str())));
    }
}
