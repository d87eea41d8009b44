#![allow(dead_code)]

use cflm::config::{CfConfig, ModelConfig, Vocabulary};
use cflm::layout::SequenceLayout;
use cflm::masks::AttentionMask;
use cflm::model::{backward, forward, output_logits, InputSlot, Parameters};
use cflm::synth::{SynthSpec, SynthTables};
use cflm::training::{cross_entropy_grad, masked_cross_entropy, TargetPlan};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn model(dim: usize, blocks: usize, heads: usize, layers: usize) -> ModelConfig {
    ModelConfig { dim, num_blocks: blocks, num_heads: heads, ffn_mult: 2, max_positions: 8192, num_layers: layers }
}

pub fn small_spec(num_layers: usize) -> SynthSpec {
    SynthSpec {
        alphabet: 8,
        motif_len: [2, 3],
        repeat: [1, 2],
        silence_prob: 0.2,
        silence_run: [1, 2],
        num_speakers: 2,
        num_layers,
        seed: 3,
    }
}

pub fn tables(spec: &SynthSpec) -> SynthTables {
    spec.tables().unwrap()
}

pub fn vocab(spec: &SynthSpec) -> Vocabulary {
    tables(spec).vocabulary()
}

pub fn positions(layout: &SequenceLayout) -> Vec<usize> {
    (0..layout.len()).collect()
}

/// Mean masked cross-entropy of one sequence.
pub fn sequence_loss(
    params: &Parameters<f64>,
    inputs: &[InputSlot],
    mask: &AttentionMask,
    plan: &TargetPlan,
    head: usize,
) -> f64 {
    let pos: Vec<usize> = (0..inputs.len()).collect();
    let pass = forward(params, inputs, &pos, mask, false).unwrap();
    masked_cross_entropy(&output_logits(params, &pass.hidden, head), plan).unwrap()
}

/// Worst relative error between the analytic gradient and central finite
/// differences over a random `fraction` of the scalars.
pub fn gradient_check(
    params: &Parameters<f64>,
    inputs: &[InputSlot],
    mask: &AttentionMask,
    plan: &TargetPlan,
    head: usize,
    fraction: f64,
    step: f64,
    seed: u64,
) -> (f64, usize) {
    let pos: Vec<usize> = (0..inputs.len()).collect();
    let pass = forward(params, inputs, &pos, mask, true).unwrap();
    let logits = output_logits(params, &pass.hidden, head);
    let (_, dlogits) = cross_entropy_grad(&logits, plan, plan.count() as f64).unwrap();
    let mut grads = params.zeros_like();
    backward(params, &pass, mask, head, &dlogits, &mut grads).unwrap();
    let analytic: Vec<f64> = grads.tensors().iter().flat_map(|t| t.data.iter().copied()).collect();

    let total = params.num_scalars();
    let picks = ((total as f64 * fraction).ceil() as usize).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for flat in sample(&mut rng, total, picks) {
        let up = sequence_loss(&perturbed(params, flat, step), inputs, mask, plan, head);
        let down = sequence_loss(&perturbed(params, flat, -step), inputs, mask, plan, head);
        let numeric = (up - down) / (2.0 * step);
        let a = analytic[flat];
        let denom = a.abs().max(numeric.abs());
        let rel = if denom == 0.0 { 0.0 } else { (a - numeric).abs() / denom };
        worst = worst.max(rel);
    }
    (worst, picks)
}

fn perturbed(params: &Parameters<f64>, flat: usize, delta: f64) -> Parameters<f64> {
    let mut probe = params.clone();
    let mut left = flat;
    for t in probe.tensors_mut() {
        if left < t.data.len() {
            t.data[left] += delta;
            break;
        }
        left -= t.data.len();
    }
    probe
}

pub fn cf(g: usize, n_ar: usize, mode: cflm::Mode) -> CfConfig {
    CfConfig::new(g, n_ar, None, 25, mode).unwrap()
}
