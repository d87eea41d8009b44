mod common;

use cflm::config::{Special, Token, Vocabulary};
use cflm::layout::build_layout;
use cflm::masks::{build_ar_mask, build_dense_causal, AttentionMask};
use cflm::model::{ar_inputs, forward, masked_attention, scores_for_positions, EmbRef, InputSlot, Parameters, Role};
use cflm::tensor::Mat;
use cflm::Mode;
use common::{cf, model};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat<f64> {
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn rotate(x: &[f64], pos: usize) -> Vec<f64> {
    let hd = x.len();
    let mut out = x.to_vec();
    for i in 0..hd / 2 {
        let theta = pos as f64 * 10_000f64.powf(-(2.0 * i as f64) / hd as f64);
        let (c, s) = (theta.cos(), theta.sin());
        out[2 * i] = x[2 * i] * c - x[2 * i + 1] * s;
        out[2 * i + 1] = x[2 * i] * s + x[2 * i + 1] * c;
    }
    out
}

/// Direct summation with explicit rotations and no shared kernels.
fn naive_attention(q: &Mat<f64>, k: &Mat<f64>, v: &Mat<f64>, mask: &AttentionMask, qp: &[usize], kp: &[usize]) -> Mat<f64> {
    let mut out = Mat::zeros(q.rows, v.cols);
    for i in 0..q.rows {
        let qi = rotate(q.row(i), qp[i]);
        let scores: Vec<Option<f64>> = (0..k.rows)
            .map(|j| {
                mask.get(i, j).then(|| {
                    let kj = rotate(k.row(j), kp[j]);
                    qi.iter().zip(&kj).map(|(a, b)| a * b).sum::<f64>() / (q.cols as f64).sqrt()
                })
            })
            .collect();
        let top = scores.iter().flatten().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let weights: Vec<f64> = scores.iter().map(|s| s.map_or(0.0, |s| (s - top).exp())).collect();
        let z: f64 = weights.iter().sum();
        for c in 0..v.cols {
            out.row_mut(i)[c] = (0..k.rows).map(|j| weights[j] * v.at(j, c)).sum::<f64>() / z;
        }
    }
    out
}

fn random_mask(rng: &mut ChaCha8Rng, n_q: usize, n_k: usize) -> AttentionMask {
    let mut mask = AttentionMask::from_fn(n_q, n_k, |_, _| rng.gen_bool(0.5));
    for q in 0..n_q {
        if mask.row_count(q) == 0 {
            mask.set(q, rng.gen_range(0..n_k), true);
        }
    }
    mask
}

proptest! {
    #[test]
    fn masked_attention_matches_direct_summation(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (q, k, v) = (random_mat(&mut rng, 6, 8), random_mat(&mut rng, 6, 8), random_mat(&mut rng, 6, 5));
        let mask = random_mask(&mut rng, 6, 6);
        let qp: Vec<usize> = (0..6).map(|_| rng.gen_range(0..500)).collect();
        let kp: Vec<usize> = (0..6).map(|_| rng.gen_range(0..500)).collect();
        let fast = masked_attention(&q, &k, &v, &mask, &qp, &kp).unwrap();
        let slow = naive_attention(&q, &k, &v, &mask, &qp, &kp);
        for (a, b) in fast.data.iter().zip(&slow.data) {
            prop_assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
        }
    }

    #[test]
    fn scores_depend_on_offsets_only(seed in any::<u64>(), shift in 0usize..5000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (q, k) = (random_mat(&mut rng, 5, 16), random_mat(&mut rng, 7, 16));
        let qp: Vec<usize> = (0..5).map(|_| rng.gen_range(0..3000)).collect();
        let kp: Vec<usize> = (0..7).map(|_| rng.gen_range(0..3000)).collect();
        let moved = |p: &[usize]| p.iter().map(|x| x + shift).collect::<Vec<_>>();
        let a = scores_for_positions(&q, &k, &qp, &kp);
        let b = scores_for_positions(&q, &k, &moved(&qp), &moved(&kp));
        for (x, y) in a.data.iter().zip(&b.data) {
            prop_assert!((x - y).abs() <= 1e-6);
        }
    }

    #[test]
    fn invisible_keys_do_not_matter(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (q, mut k, mut v) = (random_mat(&mut rng, 6, 8), random_mat(&mut rng, 6, 8), random_mat(&mut rng, 6, 5));
        let mut mask = random_mask(&mut rng, 6, 6);
        let hidden = 5;
        for r in 0..6 {
            mask.set(r, hidden, false);
            if mask.row_count(r) == 0 {
                mask.set(r, 0, true);
            }
        }
        let pos: Vec<usize> = (0..6).collect();
        let before = masked_attention(&q, &k, &v, &mask, &pos, &pos).unwrap();
        for c in 0..8 {
            k.row_mut(hidden)[c] += rng.gen_range(-50.0..50.0);
        }
        for c in 0..5 {
            v.row_mut(hidden)[c] = 1e6;
        }
        let after = masked_attention(&q, &k, &v, &mask, &pos, &pos).unwrap();
        for (a, b) in before.data.iter().zip(&after.data) {
            prop_assert!((a - b).abs() <= 1e-7);
        }
    }
}

#[test]
fn zero_queries_average_visible_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let q = Mat::zeros(6, 8);
    let (k, v) = (random_mat(&mut rng, 6, 8), random_mat(&mut rng, 6, 3));
    let mask = random_mask(&mut rng, 6, 6);
    let pos: Vec<usize> = (0..6).collect();
    let out = masked_attention(&q, &k, &v, &mask, &pos, &pos).unwrap();
    for r in 0..6 {
        let seen: Vec<usize> = (0..6).filter(|&j| mask.get(r, j)).collect();
        for c in 0..3 {
            let mean = seen.iter().map(|&j| v.at(j, c)).sum::<f64>() / seen.len() as f64;
            assert!((out.at(r, c) - mean).abs() < 1e-12);
        }
    }
}

#[test]
fn swapping_invisible_keys_leaves_output_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (q, mut k, mut v) = (random_mat(&mut rng, 3, 8), random_mat(&mut rng, 6, 8), random_mat(&mut rng, 6, 4));
    let mask = AttentionMask::from_fn(3, 6, |_, j| j < 4);
    let qp = [10, 11, 12];
    let kp = [0, 1, 2, 3, 4, 5];
    let before = masked_attention(&q, &k, &v, &mask, &qp, &kp).unwrap();
    for c in 0..8 {
        k.data.swap(4 * 8 + c, 5 * 8 + c);
    }
    for c in 0..4 {
        v.data.swap(4 * 4 + c, 5 * 4 + c);
    }
    assert_eq!(before, masked_attention(&q, &k, &v, &mask, &qp, &kp).unwrap());
}

fn ar_model(blocks: usize, seed: u64) -> Parameters<f64> {
    let vocab = Vocabulary::new(6, 10, 1).unwrap();
    Parameters::init(Role::Ar, model(32, blocks, 4, 1), vocab, seed).unwrap()
}

fn cf_inputs(layout: &cflm::SequenceLayout, raw: &[u32]) -> Vec<InputSlot> {
    let mut raws = raw.iter();
    let tokens: Vec<Token> = layout
        .kinds()
        .iter()
        .map(|k| match k {
            cflm::SlotKind::TextPrompt => Token::Text(1),
            cflm::SlotKind::SpeechPrompt => Token::Speech(2),
            cflm::SlotKind::Bos => Token::Special(Special::Bos),
            cflm::SlotKind::Raw => Token::Speech(*raws.next().unwrap()),
            cflm::SlotKind::W => Token::Special(Special::W),
            cflm::SlotKind::Eos => Token::Special(Special::Eos),
        })
        .collect();
    ar_inputs(&tokens)
}

fn max_row_diff(a: &Mat<f64>, b: &Mat<f64>, row: usize) -> f64 {
    a.row(row).iter().zip(b.row(row)).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn future_slots_never_reach_the_past() {
    let params = ar_model(2, 1);
    let cfg = cf(1, 64, Mode::Dense);
    let layout = build_layout(3, 0, 8, &cfg);
    let mask = build_dense_causal(&layout).unwrap();
    let pos: Vec<usize> = (0..layout.len()).collect();
    let raw = [1, 2, 3, 4, 5, 6, 7, 8];
    let mut changed = raw;
    changed[6] = 0;
    let a = forward(&params, &cf_inputs(&layout, &raw), &pos, &mask, false).unwrap();
    let b = forward(&params, &cf_inputs(&layout, &changed), &pos, &mask, false).unwrap();
    for r in 0..layout.raw_position(6) {
        assert_eq!(max_row_diff(&a.hidden, &b.hidden, r), 0.0);
    }
    assert!(max_row_diff(&a.hidden, &b.hidden, layout.raw_position(6)) > 0.0);
}

#[test]
fn evicted_raws_reach_later_queries_only_through_compressed_slots() {
    let cfg = cf(2, 2, Mode::Cf);
    let layout = build_layout(2, 0, 9, &cfg);
    let mask = build_ar_mask(&layout, &cfg).unwrap();
    let pos: Vec<usize> = (0..layout.len()).collect();
    let raw = [1, 2, 3, 4, 5, 6, 7, 8, 9];
    let mut changed = raw;
    changed[0] = 0;
    let late = layout.raw_position(8);
    let diff = |blocks: usize| {
        let params = ar_model(blocks, 2);
        let a = forward(&params, &cf_inputs(&layout, &raw), &pos, &mask, false).unwrap();
        let b = forward(&params, &cf_inputs(&layout, &changed), &pos, &mask, false).unwrap();
        max_row_diff(&a.hidden, &b.hidden, late)
    };
    assert!(!mask.get(late, layout.raw_position(0)));
    assert!(diff(1) <= 1e-7);
    assert!(diff(2) > 1e-6);
}

#[test]
fn layer_embedding_changes_nar_outputs() {
    let vocab = Vocabulary::new(4, 6, 3).unwrap();
    let params: Parameters<f64> = Parameters::init(Role::Nar, model(16, 1, 2, 3), vocab, 5).unwrap();
    let slots = |layer: usize| -> Vec<InputSlot> {
        vec![
            vec![EmbRef::Text(1)],
            vec![EmbRef::Special(Special::Bos), EmbRef::LayerIndex(layer)],
            vec![EmbRef::Speech { layer: 0, id: 3 }, EmbRef::LayerIndex(layer)],
        ]
    };
    let mask = AttentionMask::full(3);
    let a = forward(&params, &slots(0), &[0, 1, 2], &mask, false).unwrap();
    let b = forward(&params, &slots(1), &[0, 1, 2], &mask, false).unwrap();
    assert!(max_row_diff(&a.hidden, &b.hidden, 2) > 1e-6);
}
