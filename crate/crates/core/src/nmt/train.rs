//! Training regimes: one-way, dual-directional, and one-stage fine-tuning.

use crate::bridge::sample_p;
use crate::data::{pack_by_tokens, Direction, ParallelCorpus, SentencePair};
use crate::error::{Error, Result};
use crate::numcore::{
    adam_step, derive_seed, inverse_sqrt_lr, seeded_rng, AdamHyper, Graph,
};
use crate::transformer::{bind_params, harvest_grads, ContextStack};
use rand::seq::SliceRandom;
use std::collections::HashMap;

use super::model::{forward_loss, LayerChoice, NmtModel, SourceMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainRegime {
    OneWay,
    DualDirectional,
}

#[derive(Debug, Clone, Copy)]
pub struct TrainSettings {
    pub steps: u64,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub label_smoothing: f64,
    pub weight_decay: f64,
    pub batch_tokens: usize,
    pub log_interval: u64,
    pub seed: u64,
    /// Added to the step index fed to the lr schedule; 0 restarts warmup.
    pub schedule_offset: u64,
}

#[derive(Debug, Clone)]
pub struct NmtLogEntry {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub dev_loss: Option<f64>,
}

impl NmtLogEntry {
    pub fn tsv_line(&self) -> String {
        match self.dev_loss {
            Some(d) => format!("{}\t{:.6e}\t{:.6}\t{:.6}", self.step, self.lr, self.loss, d),
            None => format!("{}\t{:.6e}\t{:.6}\t-", self.step, self.lr, self.loss),
        }
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub log: Vec<NmtLogEntry>,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub warnings: Vec<String>,
}

/// Cache of frozen per-sentence stacks; the LM is deterministic, so each
/// distinct source sentence is embedded once.
pub(crate) struct StackCache {
    map: HashMap<String, ContextStack<f32>>,
}

impl StackCache {
    pub(crate) fn build(model: &NmtModel, texts: &[&str]) -> Result<Self> {
        let mut map = HashMap::new();
        if let SourceMode::Bridge { provider, .. } = &model.source {
            for &t in texts {
                if !map.contains_key(t) {
                    map.insert(t.to_string(), provider.embed_stack(t)?);
                }
            }
        }
        Ok(StackCache { map })
    }

    pub(crate) fn get_many(&self, texts: &[&str]) -> Result<Vec<&ContextStack<f32>>> {
        texts
            .iter()
            .map(|&t| {
                self.map
                    .get(t)
                    .ok_or_else(|| Error::Train(format!("no cached stack for {t:?}")))
            })
            .collect()
    }
}

fn pair_cost(model: &NmtModel, pair: &SentencePair) -> usize {
    let s = model.encode_source(&pair.source).len();
    let t = model.decoder_vocab.encode(&pair.target).len() + 1;
    s + t
}

fn validate_regime(corpus: &ParallelCorpus, regime: TrainRegime) -> Result<()> {
    let forward = corpus
        .pairs()
        .iter()
        .filter(|p| p.direction == Direction::Forward)
        .count();
    let swapped = corpus.len() - forward;
    match regime {
        TrainRegime::OneWay => {
            if forward > 0 && swapped > 0 {
                return Err(Error::Data(
                    "one-way training requires a single-direction corpus, got a mixed one".into(),
                ));
            }
        }
        TrainRegime::DualDirectional => {
            if forward == 0 || swapped == 0 {
                return Err(Error::Data(
                    "dual-directional training requires a mixed corpus; \
                     run the dual-directional preprocessing first"
                        .into(),
                ));
            }
        }
    }
    Ok(())
}

/// Train the model in place. Deterministic in `settings.seed`: data order,
/// layer draws, and dropout run on separate derived streams.
pub fn train(
    model: &mut NmtModel,
    corpus: &ParallelCorpus,
    regime: TrainRegime,
    settings: &TrainSettings,
    dev: Option<&ParallelCorpus>,
) -> Result<TrainOutcome> {
    validate_regime(corpus, regime)?;
    run_loop(model, corpus, settings, dev)
}

/// One fine-tuning stage on a single-direction corpus, continuing from the
/// model's current parameters. A second stage is permitted but warned about.
pub fn finetune(
    model: &mut NmtModel,
    corpus: &ParallelCorpus,
    settings: &TrainSettings,
    dev: Option<&ParallelCorpus>,
) -> Result<TrainOutcome> {
    let dirs: Vec<Direction> = corpus.pairs().iter().map(|p| p.direction).collect();
    if dirs.windows(2).any(|w| w[0] != w[1]) {
        return Err(Error::Data(
            "fine-tuning requires a single-direction corpus; filter the mixed set first".into(),
        ));
    }
    model.finetune_stages += 1;
    let mut outcome = run_loop(model, corpus, settings, dev)?;
    if model.finetune_stages > 1 {
        outcome.warnings.push(format!(
            "this is fine-tuning stage {}; the intended recipe uses exactly one stage",
            model.finetune_stages
        ));
    }
    Ok(outcome)
}

fn run_loop(
    model: &mut NmtModel,
    corpus: &ParallelCorpus,
    settings: &TrainSettings,
    dev: Option<&ParallelCorpus>,
) -> Result<TrainOutcome> {
    if corpus.is_empty() {
        return Err(Error::Data("empty training corpus".into()));
    }
    let src_texts: Vec<&str> = corpus.pairs().iter().map(|p| p.source.as_str()).collect();
    let cache = StackCache::build(model, &src_texts)?;
    let dev_cache = match dev {
        Some(d) => {
            let texts: Vec<&str> = d.pairs().iter().map(|p| p.source.as_str()).collect();
            Some(StackCache::build(model, &texts)?)
        }
        None => None,
    };

    let costs: Vec<usize> = corpus
        .pairs()
        .iter()
        .map(|p| pair_cost(model, p))
        .collect();
    let batches = pack_by_tokens(&costs, settings.batch_tokens)?;

    let hyper = AdamHyper {
        weight_decay: settings.weight_decay,
        ..AdamHyper::default()
    };
    let mut order_rng = seeded_rng(derive_seed(settings.seed, "nmt-order"));
    let mut p_rng = seeded_rng(derive_seed(settings.seed, "nmt-p"));
    let dropout_seed = derive_seed(settings.seed, "nmt-dropout");

    let mut order: Vec<usize> = (0..batches.len()).collect();
    order.shuffle(&mut order_rng);
    let mut pos = 0usize;

    let mut log = Vec::new();
    let mut initial_loss = f64::NAN;
    let mut final_loss = f64::NAN;
    for step in 1..=settings.steps {
        if pos == order.len() {
            order.shuffle(&mut order_rng);
            pos = 0;
        }
        let batch_pairs: Vec<&SentencePair> = batches[order[pos]]
            .iter()
            .map(|&i| &corpus.pairs()[i])
            .collect();
        pos += 1;

        let choice = match &model.source {
            SourceMode::Bridge { p_per_sentence, .. } => {
                let draws = if *p_per_sentence {
                    (0..batch_pairs.len()).map(|_| sample_p(&mut p_rng)).collect()
                } else {
                    vec![sample_p(&mut p_rng)]
                };
                LayerChoice::Train(draws)
            }
            SourceMode::Trainable { .. } => LayerChoice::Train(vec![0.0]),
        };
        let batch_src: Vec<&str> = batch_pairs.iter().map(|p| p.source.as_str()).collect();
        let stacks = match &model.source {
            SourceMode::Bridge { .. } => Some(cache.get_many(&batch_src)?),
            SourceMode::Trainable { .. } => None,
        };

        let mut g: Graph<f32> = Graph::with_dropout(dropout_seed ^ step);
        let bound = bind_params(&mut g, &model.store);
        let loss_var = forward_loss(
            &mut g,
            &bound,
            model,
            &batch_pairs,
            stacks.as_deref(),
            &choice,
            settings.label_smoothing,
        )?;
        let loss = f64::from(g.scalar(loss_var)?);
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss at step {step}")));
        }
        g.backward(loss_var)?;
        harvest_grads(&g, &bound, &mut model.store)?;
        let lr = inverse_sqrt_lr(
            settings.schedule_offset + step,
            settings.peak_lr,
            settings.warmup_steps,
            0.0,
        )?;
        adam_step(&mut model.store, lr, &hyper)?;

        if step == 1 {
            initial_loss = loss;
        }
        final_loss = loss;
        if step % settings.log_interval == 0 || step == settings.steps {
            let dev_loss = match (dev, &dev_cache) {
                (Some(d), Some(dc)) => Some(eval_loss(model, d, dc, settings.label_smoothing)?),
                _ => None,
            };
            log.push(NmtLogEntry {
                step,
                lr,
                loss,
                dev_loss,
            });
        }
    }

    Ok(TrainOutcome {
        log,
        initial_loss,
        final_loss,
        warnings: Vec::new(),
    })
}

fn eval_loss(
    model: &NmtModel,
    corpus: &ParallelCorpus,
    cache: &StackCache,
    label_smoothing: f64,
) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for chunk in corpus.pairs().chunks(64) {
        let pairs: Vec<&SentencePair> = chunk.iter().collect();
        let texts: Vec<&str> = pairs.iter().map(|p| p.source.as_str()).collect();
        let stacks = match &model.source {
            SourceMode::Bridge { .. } => Some(cache.get_many(&texts)?),
            SourceMode::Trainable { .. } => None,
        };
        let mut g: Graph<f32> = Graph::new();
        let bound = bind_params(&mut g, &model.store);
        let loss = forward_loss(
            &mut g,
            &bound,
            model,
            &pairs,
            stacks.as_deref(),
            &LayerChoice::Infer,
            label_smoothing,
        )?;
        total += f64::from(g.scalar(loss)?) * pairs.len() as f64;
        n += pairs.len();
    }
    Ok(total / n as f64)
}

/// Teacher-forced loss of one batch at an explicit layer draw; useful for
/// probing a model without touching it.
pub fn batch_loss(
    model: &NmtModel,
    pairs: &[&SentencePair],
    p: f64,
    label_smoothing: f64,
) -> Result<f64> {
    let texts: Vec<&str> = pairs.iter().map(|q| q.source.as_str()).collect();
    let storage: Vec<ContextStack<f32>>;
    let stacks: Option<Vec<&ContextStack<f32>>> = match &model.source {
        SourceMode::Bridge { provider, .. } => {
            storage = texts
                .iter()
                .map(|t| provider.embed_stack(t))
                .collect::<Result<_>>()?;
            Some(storage.iter().collect())
        }
        SourceMode::Trainable { .. } => None,
    };
    let mut g: Graph<f32> = Graph::new();
    let bound = bind_params(&mut g, &model.store);
    let loss = forward_loss(
        &mut g,
        &bound,
        model,
        pairs,
        stacks.as_deref(),
        &LayerChoice::Train(vec![p]),
        label_smoothing,
    )?;
    Ok(f64::from(g.scalar(loss)?))
}

/// Count training pairs whose greedy decode reproduces the target exactly.
pub fn greedy_exact_match(model: &NmtModel, corpus: &ParallelCorpus) -> Result<usize> {
    let mut matched = 0;
    for pair in corpus.pairs() {
        let hyp = super::beam::beam_search(
            model,
            &pair.source,
            1,
            0.0,
            crate::config::LengthPenaltyKind::Simple,
            64,
        )?;
        let text = model.decoder_vocab.decode(&hyp.ids)?;
        if text == pair.target {
            matched += 1;
        }
    }
    Ok(matched)
}
