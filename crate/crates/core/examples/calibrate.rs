// Scratch calibration runs for sizing the training tests. Not part of the
// deliverable; removed before release.

use bmt_core::bridge::EmbeddingProvider;
use bmt_core::data::{make_dual_directional, filter_direction, Direction};
use bmt_core::eval::corpus_bleu;
use bmt_core::mlm::{lm_checkpoint, mix_corpora, pretrain, MlmOptConfig};
use bmt_core::nmt::{
    beam_search, greedy_exact_match, train, LayerSelection, NmtModel, SourceMode, TrainRegime,
    TrainSettings,
};
use bmt_core::config::LengthPenaltyKind;
use bmt_core::subword::SubwordVocab;
use bmt_core::synth::{Side, ToyLanguage};
use bmt_core::transformer::{Activation, PositionMode, TransformerConfig};
use std::time::Instant;

fn lm_cfg(m: usize, d: usize, ffn: usize, maxpos: usize) -> TransformerConfig {
    TransformerConfig {
        num_layers: m,
        hidden_dim: d,
        ffn_dim: ffn,
        num_heads: 4,
        dropout_p: 0.1,
        max_positions: maxpos,
        position_mode: PositionMode::Learned,
        prenorm: false,
        activation: Activation::Gelu,
    }
}

fn nmt_cfg(layers: usize, d: usize, ffn: usize) -> TransformerConfig {
    TransformerConfig {
        num_layers: layers,
        hidden_dim: d,
        ffn_dim: ffn,
        num_heads: 4,
        dropout_p: 0.1,
        max_positions: 48,
        position_mode: PositionMode::Sinusoidal,
        prenorm: false,
        activation: Activation::Relu,
    }
}

fn main() {
    let which = std::env::args().nth(1).unwrap_or_else(|| "all".into());
    let lang = ToyLanguage::new();

    if which == "mlm" {
        // criterion 4 shape: 2k sentences, vocab ~200, acc > 60%
        // args: mlm <steps> <peak_lr> <batch_tokens> <d> <m> <mask_prob>
        let arg = |i: usize, default: f64| -> f64 {
            std::env::args()
                .nth(i)
                .and_then(|s| s.parse().ok())
                .unwrap_or(default)
        };
        let steps = arg(2, 600.0) as u64;
        let peak_lr = arg(3, 1e-3);
        let batch_tokens = arg(4, 1024.0) as usize;
        let d = arg(5, 48.0) as usize;
        let m = arg(6, 3.0) as usize;
        let mask_prob = arg(7, 0.15);
        let dropout = arg(8, 0.1);
        let wd = arg(9, 0.01);

        let t0 = Instant::now();
        let src = lang.gen_monolingual(1000, 100, Side::Source);
        let tgt = lang.gen_monolingual(1000, 100, Side::Target);
        let mixed = mix_corpora(&src, &tgt, 100);
        let vocab = SubwordVocab::train(&mixed, 200).unwrap();
        println!("vocab size {} ({:?})", vocab.size(), t0.elapsed());

        let mut cfg = lm_cfg(m, d, 2 * d, 32);
        cfg.dropout_p = dropout;
        let opt = MlmOptConfig {
            mask_prob,
            steps,
            peak_lr,
            warmup_steps: (steps / 10).max(1),
            decay_power: 1.0,
            weight_decay: wd,
            batch_tokens,
            log_interval: (steps / 12).max(1),
        };
        let t1 = Instant::now();
        let out = pretrain(&mixed, &vocab, &cfg, &opt, 42).unwrap();
        println!("mlm {steps} steps lr {peak_lr} bt {batch_tokens} d{d} m{m} p{mask_prob}: {:?}", t1.elapsed());
        for e in &out.log {
            println!("  step {} lr {:.2e} loss {:.4} acc {:.3}", e.step, e.lr, e.loss, e.masked_acc);
        }
    }

    if which == "fixedmlm" {
        // gradient sanity: can the model drive loss to ~0 on ONE fixed
        // masked batch?
        use bmt_core::data::{batch_by_tokens, mask_batch};
        use bmt_core::mlm::{init_lm_params, mlm_loss, pack_segments};
        use bmt_core::numcore::{adam_step, AdamHyper, Graph, ParamStore};
        use bmt_core::subword::PAD_ID;
        use bmt_core::transformer::{bind_params, harvest_grads};

        let src = lang.gen_monolingual(50, 100, Side::Source);
        let tgt = lang.gen_monolingual(50, 100, Side::Target);
        let mixed = mix_corpora(&src, &tgt, 100);
        let vocab = SubwordVocab::train(&mixed, 200).unwrap();
        let cfg = lm_cfg(3, 48, 96, 32);
        let segs = pack_segments(&mixed, &vocab, 32).unwrap();
        let batches = batch_by_tokens(&segs, 512, PAD_ID).unwrap();
        let mb = mask_batch(&batches[0], &vocab, 0.15, 99).unwrap();

        let mut store: ParamStore<f32> = ParamStore::new();
        init_lm_params(&mut store, &cfg, vocab.size(), 1);
        let hyper = AdamHyper { weight_decay: 0.0, ..AdamHyper::default() };
        for step in 1..=400u64 {
            let mut g: Graph<f32> = Graph::new(); // no dropout
            let bound = bind_params(&mut g, &store);
            let (loss, acc, _) = mlm_loss(&mut g, &bound, &cfg, &mb).unwrap();
            let lv = g.scalar(loss).unwrap();
            g.backward(loss).unwrap();
            harvest_grads(&g, &bound, &mut store).unwrap();
            adam_step(&mut store, 1e-3, &hyper).unwrap();
            if step % 50 == 0 || step == 1 {
                println!("fixed step {step}: loss {lv:.4} acc {acc:.3}");
            }
        }
    }

    if which == "nmt64" || which == "all" {
        // criterion 5 shape: 64 pairs memorized
        let t0 = Instant::now();
        let corpus = lang.gen_parallel(64, 200);
        let src_mono = lang.gen_monolingual(800, 201, Side::Source);
        let tgt_mono = lang.gen_monolingual(800, 201, Side::Target);
        let mixed = mix_corpora(&src_mono, &tgt_mono, 201);
        let vocab = SubwordVocab::train(&mixed, 200).unwrap();
        let cfg = lm_cfg(2, 32, 64, 32);
        let opt = MlmOptConfig {
            mask_prob: 0.15,
            steps: 200,
            peak_lr: 1e-3,
            warmup_steps: 20,
            decay_power: 1.0,
            weight_decay: 0.01,
            batch_tokens: 1024,
            log_interval: 100,
        };
        let lm = pretrain(&mixed, &vocab, &cfg, &opt, 7).unwrap();
        let ckpt = lm_checkpoint(&lm.store, &cfg, &vocab, 200, lm.final_loss);
        let provider = EmbeddingProvider::from_checkpoint(&ckpt, vocab.clone()).unwrap();
        println!("lm ready {:?}", t0.elapsed());

        let tgt_lines: Vec<String> = corpus.pairs().iter().map(|p| p.target.clone()).collect();
        let dec_vocab = SubwordVocab::train(&tgt_lines, 120).unwrap();
        let mut model = NmtModel::new(
            nmt_cfg(2, 32, 64),
            nmt_cfg(2, 32, 64),
            dec_vocab,
            SourceMode::Bridge {
                provider,
                selection: LayerSelection::Stochastic { k: 2 },
                p_per_sentence: false,
            },
            false,
            13,
        )
        .unwrap();
        // chunked training with exact-match checks
        let mut total_steps = 0u64;
        let t1 = Instant::now();
        for chunk in 0..20 {
            let s = TrainSettings {
                steps: 250,
                peak_lr: 1.5e-3,
                warmup_steps: 50,
                label_smoothing: 0.1,
                weight_decay: 0.0,
                batch_tokens: 1024,
                log_interval: 250,
                seed: 1000 + chunk,
                schedule_offset: total_steps,
            };
            let out = train(&mut model, &corpus, TrainRegime::OneWay, &s, None).unwrap();
            total_steps += 250;
            let t2 = Instant::now();
            let matched = greedy_exact_match(&model, &corpus).unwrap();
            println!(
                "steps {total_steps}: loss {:.4}, exact {matched}/64, decode {:?}, total {:?}",
                out.final_loss,
                t2.elapsed(),
                t1.elapsed()
            );
            if matched == 64 {
                break;
            }
        }
        // BLEU on the training set
        let hyps: Vec<String> = corpus
            .pairs()
            .iter()
            .map(|p| {
                let h = beam_search(&model, &p.source, 1, 0.6, LengthPenaltyKind::Simple, 48)
                    .unwrap();
                model.decoder_vocab.decode(&h.ids).unwrap()
            })
            .collect();
        let refs: Vec<String> = corpus.pairs().iter().map(|p| p.target.clone()).collect();
        println!("train BLEU = {:.2}", corpus_bleu(&hyps, &refs).unwrap().bleu);

        // criterion 7 shape: dual + finetune
        let dual = make_dual_directional(&corpus, 5).unwrap();
        println!("dual size {}", dual.len());
        let fwd = filter_direction(&dual, Direction::Forward).unwrap();
        println!("fwd size {}", fwd.len());
    }

    if which == "gap" || which == "all" {
        // criterion 6 shape: pretrained vs random over 3 seeds
        let t0 = Instant::now();
        let src_mono = lang.gen_monolingual(8000, 300, Side::Source);
        let tgt_mono = lang.gen_monolingual(8000, 300, Side::Target);
        let mixed = mix_corpora(&src_mono, &tgt_mono, 300);
        let vocab = SubwordVocab::train(&mixed, 200).unwrap();
        let cfg = lm_cfg(3, 32, 64, 32);
        let opt = MlmOptConfig {
            mask_prob: 0.15,
            steps: 800,
            peak_lr: 1e-3,
            warmup_steps: 80,
            decay_power: 1.0,
            weight_decay: 0.01,
            batch_tokens: 2048,
            log_interval: 200,
        };
        let lm = pretrain(&mixed, &vocab, &cfg, &opt, 17).unwrap();
        println!(
            "lm: loss {:.3} -> {:.3}, acc {:.3}, {:?}",
            lm.initial_loss,
            lm.final_loss,
            lm.final_acc,
            t0.elapsed()
        );
        let ckpt = lm_checkpoint(&lm.store, &cfg, &vocab, 800, lm.final_loss);

        let (train_c, dev) = lang.gen_split(5000, 200, 301);
        let tgt_lines: Vec<String> = train_c.pairs().iter().map(|p| p.target.clone()).collect();
        let dec_vocab = SubwordVocab::train(&tgt_lines, 120).unwrap();
        let dev_src: Vec<String> = dev.pairs().iter().map(|p| p.source.clone()).collect();
        let dev_refs: Vec<String> = dev.pairs().iter().map(|p| p.target.clone()).collect();

        for mode in ["pretrained", "random"] {
            for seed in [1u64, 2, 3] {
                let t1 = Instant::now();
                let source = if mode == "pretrained" {
                    SourceMode::Bridge {
                        provider: EmbeddingProvider::from_checkpoint(&ckpt, vocab.clone())
                            .unwrap(),
                        selection: LayerSelection::Stochastic { k: 1 },
                        p_per_sentence: false,
                    }
                } else {
                    SourceMode::Trainable {
                        vocab: vocab.clone(),
                    }
                };
                let mut model = NmtModel::new(
                    nmt_cfg(2, 32, 64),
                    nmt_cfg(2, 32, 64),
                    dec_vocab.clone(),
                    source,
                    false,
                    seed,
                )
                .unwrap();
                let s = TrainSettings {
                    steps: 600,
                    peak_lr: 1e-3,
                    warmup_steps: 80,
                    label_smoothing: 0.1,
                    weight_decay: 0.0,
                    batch_tokens: 2048,
                    log_interval: 200,
                    seed,
                    schedule_offset: 0,
                };
                let out = train(&mut model, &train_c, TrainRegime::OneWay, &s, None).unwrap();
                let hyps: Vec<String> = dev_src
                    .iter()
                    .map(|line| {
                        let h = beam_search(&model, line, 1, 0.6, LengthPenaltyKind::Simple, 48)
                            .unwrap();
                        model.decoder_vocab.decode(&h.ids).unwrap()
                    })
                    .collect();
                let bleu = corpus_bleu(&hyps, &dev_refs).unwrap().bleu;
                println!(
                    "{mode} seed {seed}: train loss {:.3}, dev BLEU {:.2}, {:?}",
                    out.final_loss,
                    bleu,
                    t1.elapsed()
                );
            }
        }
    }
}
