mod common;

use cflm::config::Mode;
use cflm::masks::{build_ar_mask, build_prompt_local_nar};
use cflm::model::{Parameters, Role};
use cflm::synth::gen_corpus;
use cflm::training::{ar_example, nar_example, train_ar, train_step_ar, AdamW, ArExample, TrainOptions};
use common::*;

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let spec = small_spec(1);
    let vocab = vocab(&spec);
    let cfg = cf(3, 6, Mode::Cf);
    let corpus = gen_corpus(&spec, 4, 3..=5, 0).unwrap();
    let examples: Vec<ArExample> = corpus.iter().map(|r| ar_example(r, &cfg, &vocab, 0).unwrap()).collect();
    let batch: Vec<&ArExample> = examples.iter().collect();
    let mut params = Parameters::<f32>::init(Role::Ar, model(16, 1, 2, 1), vocab, 1).unwrap();
    let before = params.clone();
    let mut opt = AdamW::new(&params, (0.5, 0.9), 0.01);
    train_step_ar(&mut params, &mut opt, &batch, &cfg, 0.0, 1.0).unwrap();
    assert_eq!(params, before);
}

#[test]
fn overfits_a_single_batch() {
    let spec = small_spec(1);
    let vocab = vocab(&spec);
    for mode in [Mode::Dense, Mode::Window, Mode::Cf] {
        let cfg = cf(3, 6, mode);
        let corpus = gen_corpus(&spec, 10, 3..=6, 1).unwrap();
        let examples: Vec<ArExample> = corpus.iter().map(|r| ar_example(r, &cfg, &vocab, 0).unwrap()).collect();
        let batch: Vec<&ArExample> = examples.iter().collect();
        let mut params = Parameters::<f32>::init(Role::Ar, model(32, 2, 2, 1), vocab, 2).unwrap();
        let mut opt = AdamW::new(&params, (0.5, 0.9), 0.0);
        let mut prev = f64::INFINITY;
        for step in 0..50 {
            let loss = train_step_ar(&mut params, &mut opt, &batch, &cfg, 1e-3, 1.0).unwrap();
            assert!(loss < prev, "{mode}: step {step} loss {loss} >= {prev}");
            prev = loss;
        }
    }
}

#[test]
fn same_seed_same_parameters() {
    let spec = small_spec(1);
    let corpus = gen_corpus(&spec, 12, 3..=6, 2).unwrap();
    let cfg = cf(3, 6, Mode::Cf);
    let opts = TrainOptions { steps: 8, batch_size: 4, seed: 5, ..TrainOptions::default() };
    let run = || train_ar(&corpus, &cfg, model(16, 1, 2, 1), vocab(&spec), &opts, |_| {}).unwrap();
    assert_eq!(run(), run());
}

#[test]
fn nar_loss_drops_on_recoloring_task() {
    let spec = small_spec(2);
    let vocab = vocab(&spec);
    let cfg = cf(3, 6, Mode::Cf);
    let corpus = gen_corpus(&spec, 40, 3..=6, 3).unwrap();
    let opts = TrainOptions { steps: 120, batch_size: 8, lr: 3e-3, prompt_frames: 4, seed: 1, ..TrainOptions::default() };
    let mut losses = Vec::new();
    cflm::training::train_nar(&corpus, &cfg, model(32, 2, 2, 2), vocab, &opts, |row| losses.push(row.loss)).unwrap();
    let head: f64 = losses[..10].iter().sum::<f64>() / 10.0;
    let tail: f64 = losses[losses.len() - 10..].iter().sum::<f64>() / 10.0;
    assert!(tail < 0.7 * head, "{head} -> {tail}");
}

#[test]
fn nar_layer_is_always_two_with_two_layers() {
    let spec = small_spec(2);
    let vocab = vocab(&spec);
    let r = &gen_corpus(&spec, 1, 4..=4, 0).unwrap()[0];
    let ex = nar_example(r, &cf(3, 6, Mode::Cf), &vocab, 2, 2).unwrap();
    assert_eq!(ex.head, 0);
    assert!(nar_example(r, &cf(3, 6, Mode::Cf), &vocab, 2, 3).is_err());
    assert_eq!(ex.layout.w_count(), 0);
    let supervised: Vec<usize> = ex.plan.targets.iter().flatten().copied().collect();
    let expected: Vec<usize> = r.speech[1][2..].iter().map(|&c| c as usize).collect();
    assert_eq!(supervised, expected);
}

#[test]
fn analytic_gradient_matches_finite_differences() {
    let spec = small_spec(2);
    let vocab = vocab(&spec);
    let r = &gen_corpus(&spec, 1, 5..=5, 4).unwrap()[0];
    let cfg = cf(2, 4, Mode::Cf);
    let ar = ar_example(r, &cfg, &vocab, 3).unwrap();
    let params = Parameters::<f64>::init(Role::Ar, model(16, 2, 2, 2), vocab, 7).unwrap();
    let mask = build_ar_mask(&ar.layout, &cfg).unwrap();
    let (worst, n) = gradient_check(&params, &ar.inputs, &mask, &ar.plan, 0, 0.05, 1e-5, 1);
    assert!(worst <= 1e-4, "AR worst relative error {worst} over {n} scalars");

    let nar = nar_example(r, &cfg.with_n_nar(Some(3)).unwrap(), &vocab, 3, 2).unwrap();
    let params = Parameters::<f64>::init(Role::Nar, model(16, 2, 2, 2), vocab, 8).unwrap();
    let mask = build_prompt_local_nar(&nar.layout, Some(3)).unwrap();
    let (worst, n) = gradient_check(&params, &nar.inputs, &mask, &nar.plan, nar.head, 0.05, 1e-5, 2);
    assert!(worst <= 1e-4, "NAR worst relative error {worst} over {n} scalars");
}
