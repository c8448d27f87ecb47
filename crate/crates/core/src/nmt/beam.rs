//! Beam-search decoding with length-penalty ranking.

use crate::config::LengthPenaltyKind;
use crate::error::{Error, Result};
use crate::numcore::Graph;
use crate::subword::{BOS_ID, EOS_ID};
use crate::transformer::bind_params;
use ndarray::Array2;

use super::model::{decode_logits, encode_for_decoding, DecodeSettings, NmtModel};

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Generated ids, EOS excluded.
    pub ids: Vec<u32>,
    /// Sum of token log-probabilities (EOS included for finished
    /// hypotheses).
    pub logprob: f64,
    /// Length-penalty-adjusted score used for the final ranking.
    pub score: f64,
}

fn adjusted(logprob: f64, generated_len: usize, alpha: f64, penalty: LengthPenaltyKind) -> f64 {
    let len = generated_len.max(1) as f64;
    let denom = match penalty {
        LengthPenaltyKind::Simple => len.powf(alpha),
        LengthPenaltyKind::Gnmt => ((5.0 + len) / 6.0).powf(alpha),
    };
    logprob / denom
}

fn log_softmax_row(logits: &Array2<f32>, row: usize) -> Vec<f64> {
    let r = logits.row(row);
    let max = r.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let lse = max + r.iter().map(|&z| (f64::from(z) - max).exp()).sum::<f64>().ln();
    r.iter().map(|&z| f64::from(z) - lse).collect()
}

/// Standard beam search from BOS. Hypotheses finish at EOS or `max_len`;
/// the final ranking divides the summed log-probability by the length
/// penalty. Greedy decoding is exactly `beam_width = 1`.
pub fn beam_search(
    model: &NmtModel,
    source_text: &str,
    beam_width: usize,
    alpha: f64,
    penalty: LengthPenaltyKind,
    max_len: usize,
) -> Result<Hypothesis> {
    if beam_width < 1 {
        return Err(Error::Config("beam width must be >= 1".into()));
    }
    if max_len < 1 {
        return Err(Error::Config("max_len must be >= 1".into()));
    }
    let (enc_out, src_pad) = encode_for_decoding(model, source_text)?;
    let len_s = src_pad.len();

    struct Active {
        ids: Vec<u32>,
        logprob: f64,
    }
    let mut actives = vec![Active {
        ids: Vec::new(),
        logprob: 0.0,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    for _ in 0..max_len {
        // (cumulative logprob, parent index, token)
        let mut candidates: Vec<(f64, usize, u32)> = Vec::new();
        for (parent, hyp) in actives.iter().enumerate() {
            let mut inputs = Vec::with_capacity(hyp.ids.len() + 1);
            inputs.push(BOS_ID);
            inputs.extend(&hyp.ids);
            let len_t = inputs.len();

            let mut g: Graph<f32> = Graph::new();
            let p = bind_params(&mut g, &model.store);
            let enc = g.constant(enc_out.clone());
            let logits = decode_logits(
                &mut g,
                &p,
                model,
                &inputs,
                len_t,
                &[vec![false; len_t]],
                enc,
                len_s,
                &[src_pad.clone()],
            )?;
            let logp = log_softmax_row(g.value(logits), len_t - 1);
            let mut order: Vec<usize> = (0..logp.len()).collect();
            order.sort_by(|&a, &b| {
                logp[b].partial_cmp(&logp[a]).expect("finite logprobs").then(a.cmp(&b))
            });
            for &tok in order.iter().take(beam_width) {
                candidates.push((hyp.logprob + logp[tok], parent, tok as u32));
            }
        }
        candidates.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .expect("finite scores")
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });

        let mut next = Vec::with_capacity(beam_width);
        for (logprob, parent, tok) in candidates.into_iter().take(beam_width) {
            let ids = actives[parent].ids.clone();
            if tok == EOS_ID {
                let generated = ids.len() + 1; // count the EOS
                finished.push(Hypothesis {
                    score: adjusted(logprob, generated, alpha, penalty),
                    ids,
                    logprob,
                });
            } else {
                let mut ids = ids;
                ids.push(tok);
                next.push(Active { ids, logprob });
            }
        }
        actives = next;
        if actives.is_empty() || finished.len() >= beam_width {
            break;
        }
    }

    let best_finished = finished.into_iter().max_by(|a, b| {
        a.score
            .partial_cmp(&b.score)
            .expect("finite scores")
            .then_with(|| b.ids.cmp(&a.ids))
    });
    if let Some(best) = best_finished {
        return Ok(best);
    }
    // nothing reached EOS within max_len: fall back to the best prefix
    let best = actives
        .into_iter()
        .map(|a| Hypothesis {
            score: adjusted(a.logprob, a.ids.len(), alpha, penalty),
            ids: a.ids,
            logprob: a.logprob,
        })
        .max_by(|a, b| {
            a.score
                .partial_cmp(&b.score)
                .expect("finite scores")
                .then_with(|| b.ids.cmp(&a.ids))
        })
        .ok_or_else(|| Error::Train("beam search produced no hypotheses".into()))?;
    Ok(best)
}

/// Decode UTF-8 lines to detokenized text plus adjusted score.
pub fn translate_lines(
    model: &NmtModel,
    lines: &[String],
    settings: &DecodeSettings,
) -> Result<Vec<(String, f64)>> {
    let mut out = Vec::with_capacity(lines.len());
    for line in lines {
        let hyp = beam_search(
            model,
            line,
            settings.beam,
            settings.alpha,
            settings.penalty,
            settings.max_len,
        )?;
        out.push((model.decoder_vocab.decode(&hyp.ids)?, hyp.score));
    }
    Ok(out)
}
