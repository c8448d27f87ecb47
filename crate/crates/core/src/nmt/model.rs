//! The translation model: parameters, source-side modes, teacher-forced
//! forward pass, and checkpoint conversion.

use crate::bridge::{select_infer, select_train, EmbeddingProvider};
use crate::checkpoint::Checkpoint;
use crate::config::{LengthPenaltyKind, SourceEmbedding};
use crate::data::SentencePair;
use crate::error::{Error, Result};
use crate::numcore::{derive_seed, Graph, ParamStore, Var};
use crate::subword::{SubwordVocab, BOS_ID, EOS_ID, PAD_ID};
use crate::transformer::{
    causal_padding_mask, cross_padding_mask, decoder_forward, encoder_forward, init_decoder_stack,
    init_embedding, init_encoder_stack, init_output_head, padding_mask, position_rows,
    BoundParams, TransformerConfig,
};
use ndarray::Array2;
use std::collections::BTreeMap;

/// How the encoder input is produced during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSelection {
    /// Always the LM's last layer (the plain contextualized-embedding
    /// pipeline).
    FinalLayer,
    /// Uniform choice among the top K layers per batch, layer mean at
    /// inference.
    Stochastic { k: usize },
}

impl LayerSelection {
    pub fn k(self) -> usize {
        match self {
            LayerSelection::FinalLayer => 1,
            LayerSelection::Stochastic { k } => k,
        }
    }
}

/// Source-side embedding mode.
#[derive(Debug)]
pub enum SourceMode {
    /// Frozen contextualized embeddings from the pretrained LM.
    Bridge {
        provider: EmbeddingProvider,
        selection: LayerSelection,
        p_per_sentence: bool,
    },
    /// Randomly initialized trainable embedding table over the same
    /// vocabulary (the "random" baseline of the pretrained-vs-random
    /// comparison).
    Trainable { vocab: SubwordVocab },
}

impl SourceMode {
    pub fn vocab(&self) -> &SubwordVocab {
        match self {
            SourceMode::Bridge { provider, .. } => provider.vocab(),
            SourceMode::Trainable { vocab } => vocab,
        }
    }

    fn mode_str(&self) -> &'static str {
        match self {
            SourceMode::Bridge { .. } => "pretrained",
            SourceMode::Trainable { .. } => "random",
        }
    }
}

#[derive(Debug)]
pub struct NmtModel {
    pub enc_cfg: TransformerConfig,
    pub dec_cfg: TransformerConfig,
    pub decoder_vocab: SubwordVocab,
    pub source: SourceMode,
    pub store: ParamStore<f32>,
    pub tie_decoder_embeddings: bool,
    pub finetune_stages: u32,
}

impl NmtModel {
    pub fn new(
        enc_cfg: TransformerConfig,
        dec_cfg: TransformerConfig,
        decoder_vocab: SubwordVocab,
        source: SourceMode,
        tie_decoder_embeddings: bool,
        seed: u64,
    ) -> Result<Self> {
        enc_cfg.validate()?;
        dec_cfg.validate()?;
        if enc_cfg.hidden_dim != dec_cfg.hidden_dim {
            return Err(Error::Config(format!(
                "encoder hidden_dim {} != decoder hidden_dim {}",
                enc_cfg.hidden_dim, dec_cfg.hidden_dim
            )));
        }
        if let SourceMode::Bridge {
            provider,
            selection,
            ..
        } = &source
        {
            if provider.hidden_dim() != enc_cfg.hidden_dim {
                return Err(Error::Config(format!(
                    "dimension mismatch: provider hidden_dim {} vs encoder hidden_dim {} \
                     (equality is required, no projection)",
                    provider.hidden_dim(),
                    enc_cfg.hidden_dim
                )));
            }
            let k = selection.k();
            if k < 1 || k > provider.num_layers() {
                return Err(Error::Config(format!(
                    "K = {k} outside 1..={} (LM has M = {} layers)",
                    provider.num_layers(),
                    provider.num_layers()
                )));
            }
        }

        let init_seed = derive_seed(seed, "nmt-init");
        let mut store: ParamStore<f32> = ParamStore::new();
        if let SourceMode::Trainable { vocab } = &source {
            init_embedding(&mut store, "enc.src_embed", vocab.size(), enc_cfg.hidden_dim, init_seed);
        }
        init_encoder_stack(&mut store, &enc_cfg, "enc", init_seed);
        init_embedding(
            &mut store,
            "dec.embed.tok",
            decoder_vocab.size(),
            dec_cfg.hidden_dim,
            init_seed,
        );
        init_decoder_stack(&mut store, &dec_cfg, "dec", init_seed);
        if tie_decoder_embeddings {
            store.insert("dec.out.b", Array2::zeros((1, decoder_vocab.size())));
        } else {
            init_output_head(
                &mut store,
                "dec.out",
                dec_cfg.hidden_dim,
                decoder_vocab.size(),
                init_seed,
            );
        }

        Ok(NmtModel {
            enc_cfg,
            dec_cfg,
            decoder_vocab,
            source,
            store,
            tie_decoder_embeddings,
            finetune_stages: 0,
        })
    }

    pub fn source_vocab(&self) -> &SubwordVocab {
        self.source.vocab()
    }

    /// Source token ids as the LM sees them: BOS + pieces + EOS.
    pub fn encode_source(&self, text: &str) -> Vec<u32> {
        let mut ids = vec![BOS_ID];
        ids.extend(self.source_vocab().encode(text));
        ids.push(EOS_ID);
        ids
    }
}

/// How the bridge picks its layer for one forward pass.
#[derive(Debug, Clone)]
pub enum LayerChoice {
    /// Training: per-batch draw (one p), or per-sentence draws.
    Train(Vec<f64>),
    /// Inference: mean of the top K layers.
    Infer,
}

/// Source side of one batch, ready to enter the graph.
pub struct SourceBatch {
    /// Bridge mode: `[rows*len x d]` selected embeddings (zero rows at PAD).
    /// Trainable mode: flattened padded ids.
    pub bridge_rows: Option<Array2<f32>>,
    pub ids: Option<Vec<u32>>,
    pub len: usize,
    pub pad: Vec<Vec<bool>>, // per sentence, per position
}

/// Assemble the source batch outside the graph. For bridge mode the stacks
/// must already be computed (one per sentence, in batch order).
pub fn source_batch(
    model: &NmtModel,
    stacks: Option<&[&crate::transformer::ContextStack<f32>]>,
    texts: &[&str],
    choice: &LayerChoice,
) -> Result<SourceBatch> {
    let d = model.enc_cfg.hidden_dim;
    match &model.source {
        SourceMode::Bridge { selection, .. } => {
            let stacks =
                stacks.ok_or_else(|| Error::Train("bridge mode needs context stacks".into()))?;
            if stacks.len() != texts.len() {
                return Err(Error::Train(format!(
                    "{} stacks for {} sentences",
                    stacks.len(),
                    texts.len()
                )));
            }
            let k = selection.k();
            let selected: Vec<Array2<f32>> = match choice {
                LayerChoice::Infer => stacks
                    .iter()
                    .map(|s| select_infer(s, k))
                    .collect::<Result<_>>()?,
                LayerChoice::Train(ps) => {
                    if ps.len() != 1 && ps.len() != stacks.len() {
                        return Err(Error::Train(format!(
                            "{} p draws for {} sentences",
                            ps.len(),
                            stacks.len()
                        )));
                    }
                    stacks
                        .iter()
                        .enumerate()
                        .map(|(i, s)| {
                            let p = if ps.len() == 1 { ps[0] } else { ps[i] };
                            match selection {
                                LayerSelection::FinalLayer => select_train(s, 1, 0.5),
                                LayerSelection::Stochastic { k } => select_train(s, *k, p),
                            }
                        })
                        .collect::<Result<_>>()?
                }
            };
            let len = selected.iter().map(|h| h.nrows()).max().unwrap_or(0);
            let mut rows = Array2::<f32>::zeros((selected.len() * len, d));
            let mut pad = Vec::with_capacity(selected.len());
            for (b, h) in selected.iter().enumerate() {
                let mut flags = vec![true; len];
                for (i, row) in h.rows().into_iter().enumerate() {
                    rows.row_mut(b * len + i).assign(&row);
                    flags[i] = false;
                }
                pad.push(flags);
            }
            Ok(SourceBatch {
                bridge_rows: Some(rows),
                ids: None,
                len,
                pad,
            })
        }
        SourceMode::Trainable { .. } => {
            let encoded: Vec<Vec<u32>> = texts.iter().map(|t| model.encode_source(t)).collect();
            let len = encoded.iter().map(Vec::len).max().unwrap_or(0);
            let mut flat = Vec::with_capacity(texts.len() * len);
            let mut pad = Vec::with_capacity(texts.len());
            for ids in &encoded {
                let mut flags = vec![true; len];
                for (i, _) in ids.iter().enumerate() {
                    flags[i] = false;
                }
                flat.extend(ids.iter().copied());
                flat.extend(std::iter::repeat_n(PAD_ID, len - ids.len()));
                pad.push(flags);
            }
            Ok(SourceBatch {
                bridge_rows: None,
                ids: Some(flat),
                len,
                pad,
            })
        }
    }
}

/// Scale by sqrt(d), add sinusoidal positions, dropout.
fn embed_pipeline(
    g: &mut Graph<f32>,
    p: &BoundParams,
    cfg: &TransformerConfig,
    prefix: &str,
    x: Var,
    len: usize,
    blocks: usize,
) -> Result<Var> {
    let scaled = g.scale(x, (cfg.hidden_dim as f32).sqrt());
    let pos = position_rows(g, p, cfg, prefix, len, blocks)?;
    let x = g.add(scaled, pos)?;
    g.dropout(x, cfg.dropout_p)
}

/// Run the encoder over an assembled source batch; returns the final layer
/// `[rows*len x d]`.
pub fn encode_source_batch(
    g: &mut Graph<f32>,
    p: &BoundParams,
    model: &NmtModel,
    src: &SourceBatch,
) -> Result<Var> {
    let input = match (&src.bridge_rows, &src.ids) {
        (Some(rows), None) => g.constant(rows.clone()),
        (None, Some(ids)) => {
            let table = p.get("enc.src_embed")?;
            let flat: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
            g.embedding_lookup(table, &flat)?
        }
        _ => return Err(Error::Train("malformed source batch".into())),
    };
    let x = embed_pipeline(g, p, &model.enc_cfg, "enc", input, src.len, src.pad.len())?;
    let masks: Vec<Array2<f32>> = src.pad.iter().map(|flags| padding_mask(flags)).collect();
    let outs = encoder_forward(g, p, &model.enc_cfg, "enc", x, src.len, &masks)?;
    Ok(*outs.last().expect("num_layers >= 1"))
}

/// Decoder logits for teacher-forced input rows (flattened `[rows*len_t]`).
#[allow(clippy::too_many_arguments)]
pub fn decode_logits(
    g: &mut Graph<f32>,
    p: &BoundParams,
    model: &NmtModel,
    dec_inputs: &[u32],
    len_t: usize,
    tgt_pad: &[Vec<bool>],
    enc_out: Var,
    len_s: usize,
    src_pad: &[Vec<bool>],
) -> Result<Var> {
    let table = p.get("dec.embed.tok")?;
    let flat: Vec<usize> = dec_inputs.iter().map(|&i| i as usize).collect();
    let emb = g.embedding_lookup(table, &flat)?;
    let x = embed_pipeline(g, p, &model.dec_cfg, "dec", emb, len_t, tgt_pad.len())?;
    let self_masks: Vec<Array2<f32>> = tgt_pad.iter().map(|f| causal_padding_mask(f)).collect();
    let cross_masks: Vec<Array2<f32>> = src_pad
        .iter()
        .map(|f| cross_padding_mask(len_t, f))
        .collect();
    let hidden = decoder_forward(
        g,
        p,
        &model.dec_cfg,
        "dec",
        x,
        len_t,
        &self_masks,
        enc_out,
        len_s,
        &cross_masks,
    )?;
    let bias = p.get("dec.out.b")?;
    let logits = if model.tie_decoder_embeddings {
        let wt = g.transpose(table);
        g.matmul(hidden, wt)?
    } else {
        let w = p.get("dec.out.w")?;
        g.matmul(hidden, w)?
    };
    g.add(logits, bias)
}

/// Teacher-forcing rows for a batch of target sentences: decoder inputs
/// (BOS + ids, padded), labels (ids + EOS, None at pads), and pad flags.
pub struct TargetBatch {
    pub inputs: Vec<u32>,
    pub labels: Vec<Option<usize>>,
    pub len: usize,
    pub pad: Vec<Vec<bool>>,
}

pub fn target_batch(model: &NmtModel, targets: &[&str]) -> Result<TargetBatch> {
    if targets.is_empty() {
        return Err(Error::Train("empty target batch".into()));
    }
    let encoded: Vec<Vec<u32>> = targets
        .iter()
        .map(|t| model.decoder_vocab.encode(t))
        .collect();
    if let Some(i) = encoded.iter().position(Vec::is_empty) {
        return Err(Error::Data(format!("target sentence {i} encodes to no tokens")));
    }
    // teacher forcing: inputs = BOS + ids, labels = ids + EOS, both n+1 long
    let len = encoded.iter().map(|ids| ids.len() + 1).max().expect("nonempty");
    let mut inputs = Vec::with_capacity(targets.len() * len);
    let mut labels = Vec::with_capacity(targets.len() * len);
    let mut pad = Vec::with_capacity(targets.len());
    for ids in &encoded {
        let n = ids.len();
        let mut flags = vec![true; len];
        for f in flags.iter_mut().take(n + 1) {
            *f = false;
        }
        inputs.push(BOS_ID);
        inputs.extend(ids.iter().copied());
        inputs.extend(std::iter::repeat_n(PAD_ID, len - n - 1));
        labels.extend(ids.iter().map(|&id| Some(id as usize)));
        labels.push(Some(EOS_ID as usize));
        labels.extend(std::iter::repeat_n(None, len - n - 1));
        pad.push(flags);
    }
    Ok(TargetBatch {
        inputs,
        labels,
        len,
        pad,
    })
}

/// One teacher-forced forward: loss over non-PAD target positions.
pub fn forward_loss(
    g: &mut Graph<f32>,
    p: &BoundParams,
    model: &NmtModel,
    pairs: &[&SentencePair],
    stacks: Option<&[&crate::transformer::ContextStack<f32>]>,
    choice: &LayerChoice,
    label_smoothing: f64,
) -> Result<Var> {
    if pairs.is_empty() {
        return Err(Error::Train("empty batch".into()));
    }
    let src_texts: Vec<&str> = pairs.iter().map(|q| q.source.as_str()).collect();
    let tgt_texts: Vec<&str> = pairs.iter().map(|q| q.target.as_str()).collect();
    let src = source_batch(model, stacks, &src_texts, choice)?;
    let tgt = target_batch(model, &tgt_texts)?;
    let enc_out = encode_source_batch(g, p, model, &src)?;
    let logits = decode_logits(
        g, p, model, &tgt.inputs, tgt.len, &tgt.pad, enc_out, src.len, &src.pad,
    )?;
    g.cross_entropy(logits, &tgt.labels, label_smoothing)
}

const META_ARCH_KEYS: [&str; 7] = [
    "hidden_dim",
    "enc_layers",
    "dec_layers",
    "ffn_dim",
    "heads",
    "dropout",
    "max_positions",
];

/// Bundle the model into a checkpoint that records its architecture, both
/// vocab hashes, and the bridge settings.
pub fn nmt_checkpoint(model: &NmtModel, steps: u64, final_loss: f64) -> Checkpoint {
    let mut meta = BTreeMap::new();
    meta.insert("kind".into(), "nmt".into());
    meta.insert("hidden_dim".into(), model.enc_cfg.hidden_dim.to_string());
    meta.insert("enc_layers".into(), model.enc_cfg.num_layers.to_string());
    meta.insert("dec_layers".into(), model.dec_cfg.num_layers.to_string());
    meta.insert("ffn_dim".into(), model.enc_cfg.ffn_dim.to_string());
    meta.insert("heads".into(), model.enc_cfg.num_heads.to_string());
    meta.insert("dropout".into(), model.enc_cfg.dropout_p.to_string());
    meta.insert("max_positions".into(), model.enc_cfg.max_positions.to_string());
    meta.insert("decoder_vocab_hash".into(), model.decoder_vocab.content_hash());
    meta.insert("source_vocab_hash".into(), model.source_vocab().content_hash());
    meta.insert("source_mode".into(), model.source.mode_str().into());
    meta.insert(
        "tie_decoder_embeddings".into(),
        model.tie_decoder_embeddings.to_string(),
    );
    meta.insert("finetune_stages".into(), model.finetune_stages.to_string());
    meta.insert("steps".into(), steps.to_string());
    meta.insert("final_loss".into(), format!("{final_loss:.6}"));
    let (k, per_sentence) = match &model.source {
        SourceMode::Bridge {
            selection,
            p_per_sentence,
            ..
        } => (selection.k(), *p_per_sentence),
        SourceMode::Trainable { .. } => (1, false),
    };
    meta.insert("k".into(), k.to_string());
    meta.insert("p_per_sentence".into(), per_sentence.to_string());
    Checkpoint::from_store(&model.store, meta)
}

/// Rebuild a model from a checkpoint. Bridge-mode checkpoints need the
/// provider; random-mode checkpoints need the source vocabulary. Vocab
/// hashes are enforced on both sides.
pub fn model_from_checkpoint(
    ckpt: &Checkpoint,
    provider: Option<EmbeddingProvider>,
    src_vocab: Option<SubwordVocab>,
    decoder_vocab: SubwordVocab,
) -> Result<NmtModel> {
    if ckpt.meta("kind")? != "nmt" {
        return Err(Error::Checkpoint(format!(
            "expected an nmt checkpoint, found kind {}",
            ckpt.meta("kind")?
        )));
    }
    ckpt.require_vocab_hash("decoder_vocab_hash", &decoder_vocab.content_hash())?;
    for key in META_ARCH_KEYS {
        ckpt.meta(key)?;
    }
    let d: usize = ckpt.meta_parse("hidden_dim")?;
    let base = TransformerConfig {
        num_layers: 1,
        hidden_dim: d,
        ffn_dim: ckpt.meta_parse("ffn_dim")?,
        num_heads: ckpt.meta_parse("heads")?,
        dropout_p: ckpt.meta_parse("dropout")?,
        max_positions: ckpt.meta_parse("max_positions")?,
        position_mode: crate::transformer::PositionMode::Sinusoidal,
        prenorm: false,
        activation: crate::transformer::Activation::Relu,
    };
    let enc_cfg = TransformerConfig {
        num_layers: ckpt.meta_parse("enc_layers")?,
        ..base.clone()
    };
    let dec_cfg = TransformerConfig {
        num_layers: ckpt.meta_parse("dec_layers")?,
        ..base
    };
    let mode: String = ckpt.meta_parse("source_mode")?;
    let k: usize = ckpt.meta_parse("k")?;
    let p_per_sentence: bool = ckpt.meta_parse("p_per_sentence")?;
    let source = match mode.as_str() {
        "pretrained" => {
            let provider = provider.ok_or_else(|| {
                Error::Checkpoint("checkpoint uses the bridge; an LM checkpoint is required".into())
            })?;
            ckpt.require_vocab_hash("source_vocab_hash", &provider.vocab().content_hash())?;
            SourceMode::Bridge {
                provider,
                selection: LayerSelection::Stochastic { k },
                p_per_sentence,
            }
        }
        "random" => {
            let vocab = src_vocab.ok_or_else(|| {
                Error::Checkpoint(
                    "checkpoint uses a trainable source embedding; the source vocab is required"
                        .into(),
                )
            })?;
            ckpt.require_vocab_hash("source_vocab_hash", &vocab.content_hash())?;
            SourceMode::Trainable { vocab }
        }
        other => {
            return Err(Error::Checkpoint(format!("unknown source_mode {other:?}")));
        }
    };
    let tie: bool = ckpt.meta_parse("tie_decoder_embeddings")?;
    let mut model = NmtModel::new(enc_cfg, dec_cfg, decoder_vocab, source, tie, 0)?;
    model.store = ckpt.to_store(false);
    model.finetune_stages = ckpt.meta_parse("finetune_stages")?;
    Ok(model)
}

/// Encoder output for decoding (eval mode, inference-time layer mean).
pub(crate) fn encode_for_decoding(
    model: &NmtModel,
    source_text: &str,
) -> Result<(Array2<f32>, Vec<bool>)> {
    let stack_storage;
    let stacks: Option<Vec<&crate::transformer::ContextStack<f32>>> = match &model.source {
        SourceMode::Bridge { provider, .. } => {
            stack_storage = provider.embed_stack(source_text)?;
            Some(vec![&stack_storage])
        }
        SourceMode::Trainable { .. } => None,
    };
    let src = source_batch(
        model,
        stacks.as_deref(),
        &[source_text],
        &LayerChoice::Infer,
    )?;
    let mut g: Graph<f32> = Graph::new();
    let p = crate::transformer::bind_params(&mut g, &model.store);
    let enc_out = encode_source_batch(&mut g, &p, model, &src)?;
    Ok((g.value(enc_out).clone(), src.pad[0].clone()))
}

/// Decoding-time hyperparameters, matching the config keys.
#[derive(Debug, Clone, Copy)]
pub struct DecodeSettings {
    pub beam: usize,
    pub alpha: f64,
    pub penalty: LengthPenaltyKind,
    pub max_len: usize,
}

impl DecodeSettings {
    pub fn from_config(cfg: &crate::config::RunConfig) -> Self {
        DecodeSettings {
            beam: cfg.beam,
            alpha: cfg.length_penalty_alpha,
            penalty: cfg.length_penalty,
            max_len: cfg.max_decode_len,
        }
    }
}

/// Map a config source-embedding choice plus bridge inputs onto a
/// [`SourceMode`].
pub fn source_mode_from_config(
    which: SourceEmbedding,
    provider: Option<EmbeddingProvider>,
    vocab: Option<SubwordVocab>,
    k: usize,
    p_per_sentence: bool,
) -> Result<SourceMode> {
    match which {
        SourceEmbedding::Pretrained => {
            let provider =
                provider.ok_or_else(|| Error::Config("pretrained mode needs an LM".into()))?;
            Ok(SourceMode::Bridge {
                provider,
                selection: LayerSelection::Stochastic { k },
                p_per_sentence,
            })
        }
        SourceEmbedding::Random => {
            let vocab =
                vocab.ok_or_else(|| Error::Config("random mode needs the source vocab".into()))?;
            Ok(SourceMode::Trainable { vocab })
        }
    }
}
