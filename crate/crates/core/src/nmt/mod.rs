//! Encoder-decoder translation on bridge embeddings: training regimes
//! (one-way, dual-directional, fine-tuning) and beam-search decoding.

mod beam;
mod model;
mod train;

pub use beam::{beam_search, translate_lines, Hypothesis};
pub use model::{
    model_from_checkpoint, nmt_checkpoint, LayerSelection, NmtModel, SourceMode,
};
pub use model::{DecodeSettings, source_mode_from_config};
pub use train::{
    batch_loss, finetune, greedy_exact_match, train, NmtLogEntry, TrainOutcome, TrainRegime,
    TrainSettings,
};
