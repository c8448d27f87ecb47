//! Flat key=value run configuration.
//!
//! One setting per line, `#` starts a comment, unknown keys are rejected.
//! Every run writes its resolved configuration next to its outputs, so a run
//! directory is self-describing.

use crate::error::{Error, Result};
use crate::transformer::{Activation, PositionMode, TransformerConfig};
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceEmbedding {
    /// Frozen contextualized embeddings from the pretrained LM.
    Pretrained,
    /// Randomly initialized trainable table of the same dimension.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LengthPenaltyKind {
    /// score / len^alpha
    Simple,
    /// score / (((5 + len) / 6)^alpha)
    Gnmt,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,

    // vocabularies
    pub lm_vocab_size: usize,
    pub decoder_vocab_size: usize,

    // language model architecture
    pub lm_layers: usize,
    pub lm_hidden_dim: usize,
    pub lm_ffn_dim: usize,
    pub lm_heads: usize,
    pub lm_dropout: f64,
    pub lm_max_positions: usize,

    // masked-LM pretraining
    pub mlm_mask_prob: f64,
    pub mlm_steps: u64,
    pub mlm_peak_lr: f64,
    pub mlm_warmup_steps: u64,
    pub mlm_decay_power: f64,
    pub mlm_weight_decay: f64,
    pub mlm_batch_tokens: usize,
    pub mlm_log_interval: u64,

    // translation model architecture
    pub nmt_enc_layers: usize,
    pub nmt_dec_layers: usize,
    pub nmt_ffn_dim: usize,
    pub nmt_heads: usize,
    pub nmt_dropout: f64,
    pub nmt_max_positions: usize,

    // translation training
    pub nmt_steps: u64,
    pub nmt_peak_lr: f64,
    pub nmt_warmup_steps: u64,
    pub nmt_label_smoothing: f64,
    pub nmt_weight_decay: f64,
    pub nmt_batch_tokens: usize,
    pub nmt_log_interval: u64,
    /// 0 means "10% of nmt_steps".
    pub finetune_steps: u64,

    // bridge
    pub k: usize,
    pub p_per_sentence: bool,
    pub source_embedding: SourceEmbedding,
    pub tie_decoder_embeddings: bool,

    // decoding
    pub beam: usize,
    pub length_penalty_alpha: f64,
    pub length_penalty: LengthPenaltyKind,
    pub max_decode_len: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            lm_vocab_size: 200,
            decoder_vocab_size: 120,
            lm_layers: 4,
            lm_hidden_dim: 64,
            lm_ffn_dim: 128,
            lm_heads: 4,
            lm_dropout: 0.1,
            lm_max_positions: 64,
            mlm_mask_prob: 0.15,
            mlm_steps: 2000,
            mlm_peak_lr: 4e-4,
            mlm_warmup_steps: 200,
            mlm_decay_power: 1.0,
            mlm_weight_decay: 0.01,
            mlm_batch_tokens: 2048,
            mlm_log_interval: 100,
            nmt_enc_layers: 2,
            nmt_dec_layers: 2,
            nmt_ffn_dim: 128,
            nmt_heads: 4,
            nmt_dropout: 0.1,
            nmt_max_positions: 64,
            nmt_steps: 2000,
            nmt_peak_lr: 4e-4,
            nmt_warmup_steps: 400,
            nmt_label_smoothing: 0.1,
            nmt_weight_decay: 0.0,
            nmt_batch_tokens: 1024,
            nmt_log_interval: 100,
            finetune_steps: 0,
            k: 1,
            p_per_sentence: false,
            source_embedding: SourceEmbedding::Pretrained,
            tie_decoder_embeddings: false,
            beam: 4,
            length_penalty_alpha: 0.6,
            length_penalty: LengthPenaltyKind::Simple,
            max_decode_len: 64,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_str_contents(&text)
    }

    pub fn from_str_contents(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected key = value, got {raw:?}",
                    i + 1
                )));
            };
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("key {key}: cannot parse value {value:?}")))
        }
        match key {
            "seed" => self.seed = parse(key, value)?,
            "lm_vocab_size" => self.lm_vocab_size = parse(key, value)?,
            "decoder_vocab_size" => self.decoder_vocab_size = parse(key, value)?,
            "lm_layers" => self.lm_layers = parse(key, value)?,
            "lm_hidden_dim" => self.lm_hidden_dim = parse(key, value)?,
            "lm_ffn_dim" => self.lm_ffn_dim = parse(key, value)?,
            "lm_heads" => self.lm_heads = parse(key, value)?,
            "lm_dropout" => self.lm_dropout = parse(key, value)?,
            "lm_max_positions" => self.lm_max_positions = parse(key, value)?,
            "mlm_mask_prob" => self.mlm_mask_prob = parse(key, value)?,
            "mlm_steps" => self.mlm_steps = parse(key, value)?,
            "mlm_peak_lr" => self.mlm_peak_lr = parse(key, value)?,
            "mlm_warmup_steps" => self.mlm_warmup_steps = parse(key, value)?,
            "mlm_decay_power" => self.mlm_decay_power = parse(key, value)?,
            "mlm_weight_decay" => self.mlm_weight_decay = parse(key, value)?,
            "mlm_batch_tokens" => self.mlm_batch_tokens = parse(key, value)?,
            "mlm_log_interval" => self.mlm_log_interval = parse(key, value)?,
            "nmt_enc_layers" => self.nmt_enc_layers = parse(key, value)?,
            "nmt_dec_layers" => self.nmt_dec_layers = parse(key, value)?,
            "nmt_ffn_dim" => self.nmt_ffn_dim = parse(key, value)?,
            "nmt_heads" => self.nmt_heads = parse(key, value)?,
            "nmt_dropout" => self.nmt_dropout = parse(key, value)?,
            "nmt_max_positions" => self.nmt_max_positions = parse(key, value)?,
            "nmt_steps" => self.nmt_steps = parse(key, value)?,
            "nmt_peak_lr" => self.nmt_peak_lr = parse(key, value)?,
            "nmt_warmup_steps" => self.nmt_warmup_steps = parse(key, value)?,
            "nmt_label_smoothing" => self.nmt_label_smoothing = parse(key, value)?,
            "nmt_weight_decay" => self.nmt_weight_decay = parse(key, value)?,
            "nmt_batch_tokens" => self.nmt_batch_tokens = parse(key, value)?,
            "nmt_log_interval" => self.nmt_log_interval = parse(key, value)?,
            "finetune_steps" => self.finetune_steps = parse(key, value)?,
            "k" => self.k = parse(key, value)?,
            "p_per_sentence" => self.p_per_sentence = parse(key, value)?,
            "source_embedding" => {
                self.source_embedding = match value {
                    "pretrained" => SourceEmbedding::Pretrained,
                    "random" => SourceEmbedding::Random,
                    _ => {
                        return Err(Error::Config(format!(
                            "key {key}: expected pretrained|random, got {value:?}"
                        )))
                    }
                }
            }
            "tie_decoder_embeddings" => self.tie_decoder_embeddings = parse(key, value)?,
            "beam" => self.beam = parse(key, value)?,
            "length_penalty_alpha" => self.length_penalty_alpha = parse(key, value)?,
            "length_penalty" => {
                self.length_penalty = match value {
                    "simple" => LengthPenaltyKind::Simple,
                    "gnmt" => LengthPenaltyKind::Gnmt,
                    _ => {
                        return Err(Error::Config(format!(
                            "key {key}: expected simple|gnmt, got {value:?}"
                        )))
                    }
                }
            }
            "max_decode_len" => self.max_decode_len = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.lm_config().validate()?;
        self.nmt_encoder_config().validate()?;
        self.nmt_decoder_config().validate()?;
        if self.k < 1 || self.k > self.lm_layers {
            return Err(Error::Config(format!(
                "k = {} must be in 1..={} (the LM layer count)",
                self.k, self.lm_layers
            )));
        }
        if self.beam < 1 {
            return Err(Error::Config("beam must be >= 1".into()));
        }
        if self.max_decode_len < 1 {
            return Err(Error::Config("max_decode_len must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.mlm_mask_prob) {
            return Err(Error::Config("mlm_mask_prob outside [0, 1]".into()));
        }
        if self.mlm_warmup_steps >= self.mlm_steps {
            return Err(Error::Config(
                "mlm_warmup_steps must be below mlm_steps".into(),
            ));
        }
        Ok(())
    }

    /// Fine-tuning steps: explicit value, or 10% of the main run.
    pub fn effective_finetune_steps(&self) -> u64 {
        if self.finetune_steps > 0 {
            self.finetune_steps
        } else {
            (self.nmt_steps / 10).max(1)
        }
    }

    pub fn lm_config(&self) -> TransformerConfig {
        TransformerConfig {
            num_layers: self.lm_layers,
            hidden_dim: self.lm_hidden_dim,
            ffn_dim: self.lm_ffn_dim,
            num_heads: self.lm_heads,
            dropout_p: self.lm_dropout,
            max_positions: self.lm_max_positions,
            position_mode: PositionMode::Learned,
            prenorm: false,
            activation: Activation::Gelu,
        }
    }

    pub fn nmt_encoder_config(&self) -> TransformerConfig {
        TransformerConfig {
            num_layers: self.nmt_enc_layers,
            hidden_dim: self.lm_hidden_dim,
            ffn_dim: self.nmt_ffn_dim,
            num_heads: self.nmt_heads,
            dropout_p: self.nmt_dropout,
            max_positions: self.nmt_max_positions,
            position_mode: PositionMode::Sinusoidal,
            prenorm: false,
            activation: Activation::Relu,
        }
    }

    pub fn nmt_decoder_config(&self) -> TransformerConfig {
        TransformerConfig {
            num_layers: self.nmt_dec_layers,
            hidden_dim: self.lm_hidden_dim,
            ffn_dim: self.nmt_ffn_dim,
            num_heads: self.nmt_heads,
            dropout_p: self.nmt_dropout,
            max_positions: self.nmt_max_positions,
            position_mode: PositionMode::Sinusoidal,
            prenorm: false,
            activation: Activation::Relu,
        }
    }

    /// Canonical file form listing every key.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("lm_vocab_size", self.lm_vocab_size.to_string());
        kv("decoder_vocab_size", self.decoder_vocab_size.to_string());
        kv("lm_layers", self.lm_layers.to_string());
        kv("lm_hidden_dim", self.lm_hidden_dim.to_string());
        kv("lm_ffn_dim", self.lm_ffn_dim.to_string());
        kv("lm_heads", self.lm_heads.to_string());
        kv("lm_dropout", self.lm_dropout.to_string());
        kv("lm_max_positions", self.lm_max_positions.to_string());
        kv("mlm_mask_prob", self.mlm_mask_prob.to_string());
        kv("mlm_steps", self.mlm_steps.to_string());
        kv("mlm_peak_lr", self.mlm_peak_lr.to_string());
        kv("mlm_warmup_steps", self.mlm_warmup_steps.to_string());
        kv("mlm_decay_power", self.mlm_decay_power.to_string());
        kv("mlm_weight_decay", self.mlm_weight_decay.to_string());
        kv("mlm_batch_tokens", self.mlm_batch_tokens.to_string());
        kv("mlm_log_interval", self.mlm_log_interval.to_string());
        kv("nmt_enc_layers", self.nmt_enc_layers.to_string());
        kv("nmt_dec_layers", self.nmt_dec_layers.to_string());
        kv("nmt_ffn_dim", self.nmt_ffn_dim.to_string());
        kv("nmt_heads", self.nmt_heads.to_string());
        kv("nmt_dropout", self.nmt_dropout.to_string());
        kv("nmt_max_positions", self.nmt_max_positions.to_string());
        kv("nmt_steps", self.nmt_steps.to_string());
        kv("nmt_peak_lr", self.nmt_peak_lr.to_string());
        kv("nmt_warmup_steps", self.nmt_warmup_steps.to_string());
        kv("nmt_label_smoothing", self.nmt_label_smoothing.to_string());
        kv("nmt_weight_decay", self.nmt_weight_decay.to_string());
        kv("nmt_batch_tokens", self.nmt_batch_tokens.to_string());
        kv("nmt_log_interval", self.nmt_log_interval.to_string());
        kv("finetune_steps", self.finetune_steps.to_string());
        kv("k", self.k.to_string());
        kv("p_per_sentence", self.p_per_sentence.to_string());
        kv(
            "source_embedding",
            match self.source_embedding {
                SourceEmbedding::Pretrained => "pretrained".to_string(),
                SourceEmbedding::Random => "random".to_string(),
            },
        );
        kv("tie_decoder_embeddings", self.tie_decoder_embeddings.to_string());
        kv("beam", self.beam.to_string());
        kv("length_penalty_alpha", self.length_penalty_alpha.to_string());
        kv(
            "length_penalty",
            match self.length_penalty {
                LengthPenaltyKind::Simple => "simple".to_string(),
                LengthPenaltyKind::Gnmt => "gnmt".to_string(),
            },
        );
        kv("max_decode_len", self.max_decode_len.to_string());
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string())
            .map_err(|e| Error::io(path.display().to_string(), e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn roundtrip_through_file_form() {
        let mut cfg = RunConfig::default();
        cfg.k = 4;
        cfg.source_embedding = SourceEmbedding::Random;
        cfg.length_penalty = LengthPenaltyKind::Gnmt;
        cfg.nmt_steps = 777;
        let text = cfg.to_file_string();
        let back = RunConfig::from_str_contents(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let err = RunConfig::from_str_contents("no_such_key = 3\n").unwrap_err();
        assert!(err.to_string().contains("no_such_key"));
    }

    #[test]
    fn comments_and_blanks_are_ignored() {
        let cfg = RunConfig::from_str_contents("# a comment\n\nseed = 9 # trailing\n").unwrap();
        assert_eq!(cfg.seed, 9);
    }

    #[test]
    fn malformed_value_names_the_key() {
        let err = RunConfig::from_str_contents("mlm_steps = many\n").unwrap_err();
        assert!(err.to_string().contains("mlm_steps"));
    }

    #[test]
    fn k_must_fit_lm_layers() {
        let err = RunConfig::from_str_contents("k = 9\nlm_layers = 4\n").unwrap_err();
        assert!(err.to_string().contains("k = 9"), "{err}");
    }

    #[test]
    fn finetune_steps_default_to_ten_percent() {
        let mut cfg = RunConfig::default();
        cfg.nmt_steps = 500;
        assert_eq!(cfg.effective_finetune_steps(), 50);
        cfg.finetune_steps = 7;
        assert_eq!(cfg.effective_finetune_steps(), 7);
    }
}
