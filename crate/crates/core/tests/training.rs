use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semitaco::autodiff::{grad_check, load_checkpoint, save_checkpoint, Checkpoint, Graph, ParameterSet};
use semitaco::model::{
    forward_teacher_forced, init_params, ConditioningLocation, ConditioningMethod, ForwardMode, ModelConfig,
};
use semitaco::text::{tokenize, Lexicon, OovPolicy, TokenMode, TokenSequence};
use semitaco::training::{
    batch_plan, evaluate_paired, evaluate_pretrain, finetune, finetune_init, loss, make_paired_batches, model_checkpoint, model_from_checkpoint,
    paired_loss, pretrain_decoder, pretrain_loss, split_validation, FrameBatch, Init, PairedBatch, PairedExample,
    ReportWriter, TrainConfig, TrainReport, UnpairedBatch, UnpairedExample, Validation, PRETRAINED_TAG,
};
use semitaco::Error;

const M: usize = 8;
const FRAMES_PER_TOKEN: usize = 3;

fn lexicon() -> Lexicon {
    let words: BTreeMap<String, Vec<String>> = [
        ("thank", vec!["th", "a", "ng", "k"]),
        ("you", vec!["y", "uu"]),
        ("hi", vec!["h", "i"]),
        ("ok", vec!["o", "k"]),
    ]
    .into_iter()
    .map(|(w, p)| (w.to_string(), p.into_iter().map(String::from).collect()))
    .collect();
    let phonemes: Vec<String> = ["th", "a", "ng", "k", "y", "uu", "h", "i", "o"].iter().map(|s| s.to_string()).collect();
    Lexicon::new(&phonemes, &words).unwrap()
}

fn toy_config(lex: &Lexicon) -> ModelConfig {
    ModelConfig {
        vocab_size: lex.vocab_size(),
        embed_dim: 8,
        encoder_prenet_dim: 8,
        encoder_dim: 8,
        mixtures: 2,
        decoder_prenet_dim: 8,
        attention_rnn_dim: 8,
        decoder_rnn_dim: 8,
        mel_bins: M,
        ..ModelConfig::default()
    }
}

fn conditioned(mut cfg: ModelConfig, method: ConditioningMethod, location: ConditioningLocation) -> ModelConfig {
    cfg.conditioning.enabled = true;
    cfg.conditioning.method = method;
    cfg.conditioning.location = location;
    cfg.conditioning.wordvec_dim = 4;
    cfg.conditioning.attention_dim = 6;
    cfg
}

fn token_frame(id: usize) -> Vec<f64> {
    (0..M).map(|m| if (id * 3 + m) % M < 2 { 0.9 } else { 0.1 + 0.05 * (id % 4) as f64 }).collect()
}

/// Each token renders as a fixed frame repeated a fixed number of times.
fn render(tokens: &TokenSequence) -> Vec<f64> {
    tokens
        .token_ids
        .iter()
        .flat_map(|&id| std::iter::repeat(token_frame(id)).take(FRAMES_PER_TOKEN).flatten())
        .collect()
}

fn paired_set(lex: &Lexicon, n: usize, seed: u64) -> Vec<PairedExample> {
    let vocab = ["thank", "you", "hi", "ok"];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let len = rng.gen_range(1..=2);
            let words: Vec<String> = (0..len).map(|_| vocab[rng.gen_range(0..vocab.len())].to_string()).collect();
            let tokens = tokenize(&words, lex, TokenMode::Phoneme, OovPolicy::Error).unwrap();
            let word_vectors = words
                .iter()
                .map(|w| (0..4).map(|d| ((w.len() * 7 + d) % 5) as f64 / 5.0 - 0.4).collect())
                .collect();
            let mel = render(&tokens);
            PairedExample {
                id: format!("utt{i:03}"),
                frames: mel.len() / M,
                tokens,
                word_vectors,
                mel,
            }
        })
        .collect()
}

fn unpaired_from(paired: &[PairedExample]) -> Vec<UnpairedExample> {
    paired
        .iter()
        .map(|e| UnpairedExample {
            id: e.id.clone(),
            mel: e.mel.clone(),
            frames: e.frames,
        })
        .collect()
}

fn no_report(_: &TrainReport) -> semitaco::Result<()> {
    Ok(())
}

#[test]
fn five_items_in_batches_of_two() {
    let plan = batch_plan(&[5, 9, 2, 7, 4], 2, 3, 0).unwrap();
    assert_eq!(plan.iter().map(Vec::len).collect::<Vec<_>>(), vec![2, 2, 1]);
    assert_eq!(plan, batch_plan(&[5, 9, 2, 7, 4], 2, 3, 0).unwrap());
    assert!(batch_plan(&[1], 0, 0, 0).is_err());
}

proptest! {
    #[test]
    fn batch_plan_partitions_the_items(
        lengths in prop::collection::vec(1usize..50, 1..40),
        bs in 1usize..6,
        seed in any::<u64>(),
        epoch in 0u64..5,
    ) {
        let plan = batch_plan(&lengths, bs, seed, epoch).unwrap();
        let mut all: Vec<usize> = plan.iter().flatten().copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..lengths.len()).collect::<Vec<_>>());
        for (i, b) in plan.iter().enumerate() {
            prop_assert!(!b.is_empty() && b.len() <= bs);
            if i + 1 < plan.len() {
                prop_assert_eq!(b.len(), bs);
            }
        }
    }

    #[test]
    fn masks_are_zero_exactly_on_padding(
        lens in prop::collection::vec(1usize..12, 1..5),
        r in 1usize..4,
    ) {
        let mels: Vec<Vec<f64>> = lens.iter().map(|&n| vec![0.5; n * 2]).collect();
        let items: Vec<(&str, &[f64], usize)> = lens.iter().zip(&mels).map(|(&n, m)| ("x", m.as_slice(), n)).collect();
        let fb = FrameBatch::new(&items, 2, r).unwrap();
        let frames = fb.targets.frames;
        let steps = frames / r;
        prop_assert_eq!(frames % r, 0);
        prop_assert!(frames >= *lens.iter().max().unwrap() && frames < lens.iter().max().unwrap() + r);
        for (b, &n) in lens.iter().enumerate() {
            for t in 0..frames {
                prop_assert_eq!(fb.frame_mask[b * frames + t], if t < n { 1.0 } else { 0.0 });
            }
            let groups = n.div_ceil(r);
            for s in 0..steps {
                prop_assert_eq!(fb.stop_mask[b * steps + s], if s < groups { 1.0 } else { 0.0 });
                prop_assert_eq!(fb.stop_targets[b * steps + s], if s + 1 == groups { 1.0 } else { 0.0 });
            }
        }
    }
}

#[test]
fn length_seven_pads_to_eight() {
    let mel = vec![0.25; 7 * 3];
    let fb = FrameBatch::new(&[("a", &mel, 7)], 3, 2).unwrap();
    assert_eq!(fb.targets.frames, 8);
    assert_eq!(fb.frame_mask.iter().sum::<f64>(), 7.0);
    assert_eq!(fb.stop_targets, vec![0.0, 0.0, 0.0, 1.0]);
    assert_eq!(fb.stop_mask, vec![1.0; 4]);
}

#[test]
fn different_epochs_reshuffle() {
    let lengths: Vec<usize> = (0..30).collect();
    let a = batch_plan(&lengths, 4, 1, 0).unwrap();
    let b = batch_plan(&lengths, 4, 1, 1).unwrap();
    assert_ne!(a, b);
}

fn loss_value(pred: &[f64], stop: &[f64], fb: &FrameBatch) -> (f64, f64, f64) {
    let (b, f, m) = (fb.targets.batch, fb.targets.frames, fb.targets.mel_bins);
    let mut g = Graph::new();
    let p = g.constant(semitaco::autodiff::Tensor::new(vec![b, f, m], pred.to_vec()).unwrap());
    let s = g.constant(semitaco::autodiff::Tensor::new(vec![b, stop.len() / b], stop.to_vec()).unwrap());
    let t = loss(&mut g, p, s, fb, 5.0).unwrap();
    (g.value(t.total).item(), t.mel_l1, t.stop_bce)
}

#[test]
fn perfect_prediction_has_vanishing_loss() {
    let mel: Vec<f64> = (0..5 * 4).map(|i| (i as f64 * 0.37).sin().abs()).collect();
    let fb = FrameBatch::new(&[("a", &mel, 5)], 4, 2).unwrap();
    let stop: Vec<f64> = fb.stop_targets.iter().map(|&y| if y == 1.0 { 60.0 } else { -60.0 }).collect();
    let (total, l1, bce) = loss_value(&fb.targets.data, &stop, &fb);
    assert_eq!(l1, 0.0);
    assert!(bce < 1e-20 && total < 1e-20, "{bce}");
}

#[test]
fn constant_offset_gives_unit_l1() {
    for frames in [1usize, 5, 7, 49] {
        let mel = vec![0.3; frames * 7];
        let fb = FrameBatch::new(&[("a", &mel, frames), ("b", &mel[..7], 1)], 7, 2).unwrap();
        let pred: Vec<f64> = fb.targets.data.iter().map(|v| v + 1.0).collect();
        let stop = vec![0.0; fb.stop_targets.len()];
        assert_eq!(loss_value(&pred, &stop, &fb).1, 1.0, "frames {frames}");
    }
}

#[test]
fn all_zero_mask_is_rejected() {
    let mel = vec![0.3; 4];
    let mut fb = FrameBatch::new(&[("a", &mel, 2)], 2, 2).unwrap();
    fb.frame_mask.fill(0.0);
    fb.stop_mask.fill(0.0);
    let mut g = Graph::new();
    let p = g.constant(semitaco::autodiff::Tensor::zeros(&[1, 2, 2]));
    let s = g.constant(semitaco::autodiff::Tensor::zeros(&[1, 1]));
    assert!(matches!(loss(&mut g, p, s, &fb, 5.0), Err(Error::Empty(_))));
}

#[test]
fn extra_padding_leaves_the_model_loss_bit_identical() {
    let lex = lexicon();
    let cfg = toy_config(&lex);
    let params = init_params(&cfg, 4).unwrap();
    let data = paired_set(&lex, 3, 1);
    let batch = PairedBatch::new(&cfg, &data.iter().collect::<Vec<_>>()).unwrap();
    let mut padded = batch.clone();
    let extra = 10;
    let fb = &mut padded.audio;
    let (b, f) = (fb.targets.batch, fb.targets.frames);
    let steps = f / cfg.reduction;
    let grow = |v: &[f64], width: usize, add: usize, fill: f64| -> Vec<f64> {
        v.chunks(width).flat_map(|row| row.iter().copied().chain(std::iter::repeat(fill).take(add))).collect()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    fb.targets.data = (0..b)
        .flat_map(|i| {
            let row = fb.targets.data[i * f * M..(i + 1) * f * M].to_vec();
            row.into_iter().chain((0..extra * M).map(|_| rng.gen_range(0.0..1.0)).collect::<Vec<_>>())
        })
        .collect();
    fb.targets.frames = f + extra;
    fb.frame_mask = grow(&fb.frame_mask, f, extra, 0.0);
    fb.stop_mask = grow(&fb.stop_mask, steps, extra / cfg.reduction, 0.0);
    fb.stop_targets = grow(&fb.stop_targets, steps, extra / cfg.reduction, 0.0);
    for train in [false, true] {
        let eval = |batch: &PairedBatch| {
            let mut g = Graph::new();
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let t = paired_loss(&mut g, &cfg, &params, batch, 5.0, train.then_some(&mut rng)).unwrap();
            g.value(t.total).item().to_bits()
        };
        assert_eq!(eval(&batch), eval(&padded), "training mode {train}");
    }
}

fn variant_configs(lex: &Lexicon) -> Vec<(&'static str, ModelConfig, bool)> {
    vec![
        ("t-base", toy_config(lex), false),
        (
            "t-enc concat/top",
            conditioned(toy_config(lex), ConditioningMethod::Concat, ConditioningLocation::Top),
            false,
        ),
        (
            "t-enc attention/input",
            conditioned(toy_config(lex), ConditioningMethod::Attention, ConditioningLocation::Input),
            false,
        ),
        ("t-dec pretrain", toy_config(lex), true),
    ]
}

#[test]
fn full_teacher_forced_loss_passes_gradient_check() {
    let lex = lexicon();
    let words: Vec<String> = ["thank", "hi"].iter().map(|s| s.to_string()).collect();
    let tokens = tokenize(&words, &lex, TokenMode::Phoneme, OovPolicy::Error).unwrap();
    assert!(tokens.len() <= 8);
    let mel = render(&tokens)[..6 * M].to_vec();
    let ex = PairedExample {
        id: "g".into(),
        tokens,
        word_vectors: vec![vec![0.3, -0.2, 0.5, 0.1], vec![-0.4, 0.2, 0.0, 0.6]],
        mel: mel.clone(),
        frames: 6,
    };
    for (name, cfg, pretrain) in variant_configs(&lex) {
        let params = init_params(&cfg, 21).unwrap();
        let paired = PairedBatch::new(&cfg, &[&ex]).unwrap();
        let unpaired = UnpairedBatch {
            audio: paired.audio.clone(),
        };
        let err = grad_check(
            |ps: &ParameterSet| {
                let mut g = Graph::new();
                let mut rng = ChaCha8Rng::seed_from_u64(3);
                let t = if pretrain {
                    pretrain_loss(&mut g, &cfg, ps, &unpaired, 5.0, Some(&mut rng))?
                } else {
                    paired_loss(&mut g, &cfg, ps, &paired, 5.0, Some(&mut rng))?
                };
                let v = g.value(t.total).item();
                Ok((v, g.backward(t.total)?))
            },
            &params,
            1e-2,
            12,
        )
        .unwrap();
        assert!(err < 1e-4, "{name}: {err}");
    }
}

fn small_train() -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        learning_rate: 3e-3,
        pretrain_steps: 60,
        finetune_steps: 60,
        validate_every: 20,
        ..TrainConfig::default()
    }
}

#[test]
fn pretraining_freezes_everything_but_the_decoder() {
    let lex = lexicon();
    let cfg = conditioned(toy_config(&lex), ConditioningMethod::Attention, ConditioningLocation::Top);
    let data = unpaired_from(&paired_set(&lex, 8, 2));
    let out = pretrain_decoder(&data, &cfg, &small_train(), 9, no_report).unwrap();
    let init = init_params(&cfg, 9).unwrap();
    let ck = &out.checkpoint;
    assert_eq!(ck.tag, PRETRAINED_TAG);
    let mut changed = 0;
    for (name, t) in init.iter() {
        let after = ck.params.get(name).unwrap();
        if name.starts_with("dec.") {
            changed += usize::from(after != t);
        } else {
            assert_eq!(after.data(), t.data(), "{name} moved");
        }
    }
    assert!(changed > 0);
    let again = pretrain_decoder(&data, &cfg, &small_train(), 9, no_report).unwrap();
    assert_eq!(ck.to_bytes().unwrap(), again.checkpoint.to_bytes().unwrap());
    assert!(matches!(
        pretrain_decoder(&[], &cfg, &small_train(), 9, no_report),
        Err(Error::Empty(_))
    ));
}

#[test]
fn pretraining_learns_constant_audio() {
    let lex = lexicon();
    let cfg = toy_config(&lex);
    let frame: Vec<f64> = (0..M).map(|m| 0.2 + 0.07 * m as f64).collect();
    let data: Vec<UnpairedExample> = (0..6)
        .map(|i| {
            let frames = 6 + 2 * i;
            UnpairedExample {
                id: format!("c{i}"),
                mel: frame.iter().copied().cycle().take(frames * M).collect(),
                frames,
            }
        })
        .collect();
    let train = TrainConfig {
        pretrain_steps: 300,
        learning_rate: 1e-2,
        ..TrainConfig::default()
    };
    let out = pretrain_decoder(&data, &cfg, &train, 1, no_report).unwrap();
    let (cfg2, params) = model_from_checkpoint(&out.checkpoint).unwrap();
    let lengths: Vec<usize> = data.iter().map(|e| e.frames).collect();
    let plan = semitaco::training::eval_plan(&lengths, 8).unwrap();
    let batch = semitaco::training::make_unpaired_batches(&cfg2, &data, &plan).unwrap().remove(0);
    let mut g = Graph::new();
    let t = pretrain_loss(&mut g, &cfg2, &params, &batch, 5.0, None).unwrap();
    assert!(t.mel_l1 < 1e-2, "next-frame L1 {}", t.mel_l1);
}

#[test]
fn reloaded_pretrained_checkpoint_reproduces_its_loss() {
    let lex = lexicon();
    let cfg = toy_config(&lex);
    let data = unpaired_from(&paired_set(&lex, 6, 3));
    let train = small_train();
    let out = pretrain_decoder(&data, &cfg, &train, 2, no_report).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pre.ckpt");
    save_checkpoint(&path, &out.checkpoint).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    let (cfg2, params) = model_from_checkpoint(&loaded).unwrap();
    let v = evaluate_pretrain(&cfg2, &params, &data, &train).unwrap().total;
    assert!((v - out.final_loss).abs() < 1e-10);
}

#[test]
fn checkpoint_roundtrip_gives_identical_forward() {
    let lex = lexicon();
    let cfg = conditioned(toy_config(&lex), ConditioningMethod::Concat, ConditioningLocation::Input);
    let params = init_params(&cfg, 13).unwrap();
    let ck = model_checkpoint("finetuned", &cfg, &params, None, 0, 13).unwrap();
    let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
    let (cfg2, p2) = model_from_checkpoint(&back).unwrap();
    let data = paired_set(&lex, 2, 4);
    let batch = PairedBatch::new(&cfg, &data.iter().collect::<Vec<_>>()).unwrap();
    let run = |c: &ModelConfig, p: &ParameterSet| {
        let mut g = Graph::new();
        let out =
            forward_teacher_forced(&mut g, c, p, ForwardMode::Paired(&batch.text), &batch.audio.targets, None).unwrap();
        g.value(out.frames).clone()
    };
    assert_eq!(run(&cfg, &params), run(&cfg2, &p2));
}

#[test]
fn pretrained_decoder_loads_into_a_conditioned_model() {
    let lex = lexicon();
    let base = toy_config(&lex);
    let data = paired_set(&lex, 6, 5);
    let pre = pretrain_decoder(&unpaired_from(&data), &base, &small_train(), 3, no_report).unwrap();
    // Conditioning at the input leaves the decoder shapes unchanged.
    let cfg = conditioned(toy_config(&lex), ConditioningMethod::Concat, ConditioningLocation::Input);
    let start = finetune_init(&cfg, Init::Pretrained(&pre.checkpoint), 7).unwrap();
    let fresh = init_params(&cfg, 7).unwrap();
    let names: BTreeSet<&String> = start.names().collect();
    assert_eq!(names, fresh.names().collect());
    for (name, t) in start.iter() {
        let want = if name.starts_with("dec.") {
            pre.checkpoint.params.get(name).unwrap()
        } else {
            fresh.get(name).unwrap()
        };
        assert_eq!(t.data(), want.data(), "{name}");
    }
    assert!(start.frozen().is_empty());

    let train = small_train();
    let top = conditioned(toy_config(&lex), ConditioningMethod::Concat, ConditioningLocation::Top);
    assert!(matches!(
        finetune(&data, &top, &train, Init::Pretrained(&pre.checkpoint), 7, no_report),
        Err(Error::Validation(_))
    ));
}

#[test]
fn validation_split_is_disjoint_and_seeded() {
    let (train, val) = split_validation(20, 0.1, 4);
    let Validation::HeldOut(v) = val.clone() else { panic!("expected held-out split") };
    assert_eq!(v.len(), 2);
    assert_eq!(train.len(), 18);
    let all: BTreeSet<usize> = train.iter().chain(&v).copied().collect();
    assert_eq!(all.len(), 20);
    assert_eq!(split_validation(20, 0.1, 4), (train, val));
    assert_eq!(split_validation(1, 0.1, 4).1, Validation::TrainingSet);
    assert_eq!(split_validation(3, 0.1, 4).0.len(), 2);
}

#[test]
fn finetuning_halves_the_training_l1() {
    let lex = lexicon();
    let cfg = toy_config(&lex);
    let data = paired_set(&lex, 20, 6);
    let train = TrainConfig {
        finetune_steps: 2000,
        validate_every: 100,
        patience: 100,
        ..TrainConfig::default()
    };
    let before = evaluate_paired(&cfg, &init_params(&cfg, 1).unwrap(), &data, &train).unwrap().mel_l1;
    let out = finetune(&data, &cfg, &train, Init::Fresh, 1, no_report).unwrap();
    let after = evaluate_paired(&cfg, &out.checkpoint.params, &data, &train).unwrap().mel_l1;
    assert!(after <= 0.5 * before, "L1 {before} -> {after}");
    assert!(out.validations.windows(2).all(|w| w[1].0 > w[0].0));
    assert_eq!(out.best_loss, out.validations.iter().map(|v| v.1).fold(f64::INFINITY, f64::min));
}

#[test]
fn finetuning_is_deterministic() {
    let lex = lexicon();
    let cfg = conditioned(toy_config(&lex), ConditioningMethod::Attention, ConditioningLocation::Top);
    let data = paired_set(&lex, 6, 8);
    let a = finetune(&data, &cfg, &small_train(), Init::Fresh, 2, no_report).unwrap();
    let b = finetune(&data, &cfg, &small_train(), Init::Fresh, 2, no_report).unwrap();
    assert_eq!(a.checkpoint.to_bytes().unwrap(), b.checkpoint.to_bytes().unwrap());
    assert_eq!(a.validations, b.validations);
}

#[test]
fn early_stopping_respects_patience() {
    let lex = lexicon();
    let cfg = toy_config(&lex);
    let data = paired_set(&lex, 6, 9);
    let train = TrainConfig {
        finetune_steps: 400,
        validate_every: 2,
        patience: 1,
        // A huge step size makes validation worse almost immediately.
        learning_rate: 5.0,
        ..TrainConfig::default()
    };
    let out = finetune(&data, &cfg, &train, Init::Fresh, 3, no_report).unwrap();
    assert!(out.steps_run < 400);
    let last = out.validations.last().unwrap();
    assert!(last.1 >= out.best_loss);
}

#[test]
fn report_rows_are_csv_with_header() {
    let mut buf = Vec::new();
    {
        let mut w = ReportWriter::new(&mut buf);
        w.write(&TrainReport {
            step: 1,
            mel_l1: 0.5,
            stop_bce: 0.25,
            grad_norm: 2.0,
            seconds: 0.125,
        })
        .unwrap();
    }
    assert_eq!(
        String::from_utf8(buf).unwrap(),
        "step,mel_l1,stop_bce,grad_norm,seconds\n1,0.5,0.25,2.0,0.125\n"
    );
}

#[test]
fn paired_batches_follow_the_plan() {
    let lex = lexicon();
    let cfg = toy_config(&lex);
    let data = paired_set(&lex, 5, 10);
    let lengths: Vec<usize> = data.iter().map(|e| e.frames).collect();
    let plan = batch_plan(&lengths, 2, 0, 0).unwrap();
    let batches = make_paired_batches(&cfg, &data, &plan).unwrap();
    for (b, idx) in batches.iter().zip(&plan) {
        let ids: Vec<String> = idx.iter().map(|&i| data[i].id.clone()).collect();
        assert_eq!(b.audio.ids, ids);
        assert_eq!(b.text.batch, idx.len());
        assert_eq!(b.audio.targets.frames % cfg.reduction, 0);
    }
}
