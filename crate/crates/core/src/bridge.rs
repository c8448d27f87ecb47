//! Frozen contextualized embeddings for the NMT encoder.
//!
//! The provider holds the pretrained LM with every parameter frozen and
//! serves per-sentence [`ContextStack`]s. During training one of the top K
//! layers is picked per batch from a uniform draw; at inference the input is
//! the mean of those K layers, the expectation of the training-time choice.

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::mlm::{lm_config_from_checkpoint, lm_encoder_outputs};
use crate::numcore::{Graph, ParamStore};
use crate::subword::{SubwordVocab, BOS_ID, EOS_ID};
use crate::transformer::{bind_params, ContextStack, TransformerConfig};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

/// Frozen LM plus its tokenizer; read-only after construction.
#[derive(Debug)]
pub struct EmbeddingProvider {
    cfg: TransformerConfig,
    store: ParamStore<f32>,
    vocab: SubwordVocab,
}

impl EmbeddingProvider {
    pub fn new(
        cfg: TransformerConfig,
        mut store: ParamStore<f32>,
        vocab: SubwordVocab,
    ) -> Result<Self> {
        cfg.validate()?;
        store.freeze_all();
        Ok(EmbeddingProvider { cfg, store, vocab })
    }

    /// Rebuild from an LM checkpoint, refusing a vocab whose hash differs
    /// from the one the LM was trained against.
    pub fn from_checkpoint(ckpt: &Checkpoint, vocab: SubwordVocab) -> Result<Self> {
        ckpt.require_vocab_hash("vocab_hash", &vocab.content_hash())?;
        let cfg = lm_config_from_checkpoint(ckpt)?;
        EmbeddingProvider::new(cfg, ckpt.to_store(true), vocab)
    }

    pub fn load(ckpt_path: &Path, vocab_path: &Path) -> Result<Self> {
        let ckpt = Checkpoint::load(ckpt_path)?;
        let vocab = SubwordVocab::load(vocab_path)?;
        EmbeddingProvider::from_checkpoint(&ckpt, vocab)
    }

    pub fn num_layers(&self) -> usize {
        self.cfg.num_layers
    }

    pub fn hidden_dim(&self) -> usize {
        self.cfg.hidden_dim
    }

    pub fn vocab(&self) -> &SubwordVocab {
        &self.vocab
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.cfg
    }

    /// Bit-stable fingerprint of the frozen parameters; used to prove that
    /// downstream training never touches them.
    pub fn fingerprint(&self) -> u64 {
        self.store.fingerprint()
    }

    /// Tokenize (BOS + pieces + EOS) and run the frozen encoder with
    /// dropout off; returns all M layer outputs.
    pub fn embed_stack(&self, source_text: &str) -> Result<ContextStack<f32>> {
        let mut ids = vec![BOS_ID];
        ids.extend(self.vocab.encode(source_text));
        ids.push(EOS_ID);
        if ids.len() > self.cfg.max_positions {
            return Err(Error::Data(format!(
                "sentence of {} pieces exceeds the LM's max_positions {}",
                ids.len(),
                self.cfg.max_positions
            )));
        }
        let row = Array2::from_shape_vec((1, ids.len()), ids)
            .expect("row construction cannot fail");
        let mut g: Graph<f32> = Graph::new();
        let bound = bind_params(&mut g, &self.store);
        let outputs = lm_encoder_outputs(&mut g, &bound, &self.cfg, &row)?;
        let layers: Vec<Array2<f32>> = outputs.iter().map(|&v| g.value(v).clone()).collect();
        ContextStack::new(layers)
    }
}

/// One uniform draw in [0, 1), shared by every sentence of a batch.
pub fn sample_p(rng: &mut ChaCha8Rng) -> f64 {
    rng.random::<f64>()
}

/// Training-time selection: partition [0, 1] into K intervals and return
/// layer M-i+1 for the interval containing p (p = 0 falls to i = 1, the top
/// layer).
pub fn select_train(stack: &ContextStack<f32>, k: usize, p: f64) -> Result<Array2<f32>> {
    let m = stack.num_layers();
    if k < 1 || k > m {
        return Err(Error::Config(format!("K = {k} must be in 1..={m} (M = {m})")));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("p = {p} outside [0, 1]")));
    }
    let i = ((p * k as f64).ceil() as usize).clamp(1, k);
    Ok(stack.layers[m - i].clone())
}

/// Inference-time selection: the element-wise mean of the top K layers,
/// which is the expectation of [`select_train`] under uniform p.
pub fn select_infer(stack: &ContextStack<f32>, k: usize) -> Result<Array2<f32>> {
    let m = stack.num_layers();
    if k < 1 || k > m {
        return Err(Error::Config(format!("K = {k} must be in 1..={m} (M = {m})")));
    }
    let mut mean = Array2::<f32>::zeros((stack.seq_len(), stack.hidden_dim()));
    for i in 1..=k {
        mean += &stack.layers[m - i];
    }
    mean /= k as f32;
    Ok(mean)
}
