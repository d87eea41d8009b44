use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ar_tokens, build_targets, clip_grad_norm, cross_entropy_grad, AdamW, TargetPlan};
use crate::config::{CfConfig, Mode, ModelConfig, Special, Vocabulary};
use crate::error::{config_err, Error, Result};
use crate::layout::{build_layout, build_open_layout, SequenceLayout, SlotKind};
use crate::masks::{build_ar_mask, build_prompt_local_nar};
use crate::model::{ar_inputs, backward, forward, output_logits, EmbRef, InputSlot, Parameters, Role};
use crate::synth::Record;
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    /// Fraction of `steps` spent on linear learning-rate warmup.
    pub warmup_frac: f64,
    pub clip_norm: f64,
    /// Leading frames of each utterance used as its speech prompt.
    pub prompt_frames: usize,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 16,
            lr: 2e-3,
            betas: (0.5, 0.9),
            weight_decay: 0.01,
            warmup_frac: 0.01,
            clip_norm: 1.0,
            prompt_frames: 0,
            seed: 0,
        }
    }
}

impl TrainOptions {
    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(config_err!("batch_size must be positive"));
        }
        if !(self.lr >= 0.0) || !(self.clip_norm > 0.0) {
            return Err(config_err!("lr must be non-negative and clip_norm positive"));
        }
        Ok(())
    }

    /// Learning rate used at 0-based step `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let warmup = ((self.warmup_frac * self.steps as f64).ceil() as usize).max(1);
        self.lr * ((step + 1) as f64 / warmup as f64).min(1.0)
    }
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub wall_ms: u128,
}

/// A tokenized AR training sequence.
#[derive(Clone, Debug)]
pub struct ArExample {
    pub layout: SequenceLayout,
    pub inputs: Vec<InputSlot>,
    pub plan: TargetPlan,
}

/// Splits `record` into text prompt, speech prompt and generated region,
/// then lays it out for `cfg`.
pub fn ar_example(record: &Record, cfg: &CfConfig, vocab: &Vocabulary, prompt_frames: usize) -> Result<ArExample> {
    let layer1 = record
        .speech
        .first()
        .ok_or_else(|| Error::Corpus("record has no speech layers".into()))?;
    let p = prompt_frames.min(layer1.len());
    let (prompt, raw) = layer1.split_at(p);
    let layout = build_layout(record.text.len(), p, raw.len(), cfg);
    let tokens = ar_tokens(&layout, &record.text, prompt, raw)?;
    for &t in &tokens {
        vocab.check(t)?;
    }
    let plan = build_targets(&layout, raw, vocab)?;
    Ok(ArExample { layout, inputs: ar_inputs(&tokens), plan })
}

/// A tokenized NAR training sequence for one target layer.
#[derive(Clone, Debug)]
pub struct NarExample {
    pub layout: SequenceLayout,
    pub inputs: Vec<InputSlot>,
    pub plan: TargetPlan,
    /// Output head, `layer - 2` for 1-based target `layer`.
    pub head: usize,
}

/// NAR inputs for predicting 1-based `layer`.
///
/// Text slots embed text ids, prompt slots sum every layer of the prompt,
/// and generated slots sum layers `1..layer` plus the layer embedding.
pub fn nar_inputs(
    layout: &SequenceLayout,
    text: &[u32],
    prompt: &[Vec<u32>],
    known: &[Vec<u32>],
    layer: usize,
) -> Result<Vec<InputSlot>> {
    if layer < 2 || known.len() < layer - 1 {
        return Err(config_err!("predicting layer {layer} needs layers 1..{layer} as input"));
    }
    if text.len() != layout.text_len()
        || prompt.iter().any(|l| l.len() != layout.speech_prompt_len())
        || known[..layer - 1].iter().any(|l| l.len() != layout.raw_count())
    {
        return Err(Error::Shape("NAR token lists do not match the layout".into()));
    }
    let stage = EmbRef::LayerIndex(layer - 2);
    Ok(layout
        .slots()
        .iter()
        .map(|s| match s.kind {
            SlotKind::TextPrompt => vec![EmbRef::Text(text[s.position])],
            SlotKind::SpeechPrompt => {
                let j = s.position - layout.text_len();
                prompt.iter().enumerate().map(|(l, ids)| EmbRef::Speech { layer: l, id: ids[j] }).collect()
            }
            SlotKind::Bos => vec![EmbRef::Special(Special::Bos), stage],
            SlotKind::Raw => {
                let t = s.raw_index.unwrap();
                let mut slot: InputSlot =
                    known[..layer - 1].iter().enumerate().map(|(l, ids)| EmbRef::Speech { layer: l, id: ids[t] }).collect();
                slot.push(stage);
                slot
            }
            SlotKind::W | SlotKind::Eos => unreachable!("NAR layouts hold neither W nor EOS"),
        })
        .collect())
}

/// NAR layout of `record` with targets on every generated slot.
pub fn nar_example(
    record: &Record,
    cfg: &CfConfig,
    vocab: &Vocabulary,
    prompt_frames: usize,
    layer: usize,
) -> Result<NarExample> {
    if layer < 2 || layer > record.num_layers() || layer > vocab.num_layers {
        return Err(config_err!("target layer {layer} outside 2..={}", record.num_layers().min(vocab.num_layers)));
    }
    let p = prompt_frames.min(record.frames());
    let prompt: Vec<Vec<u32>> = record.speech.iter().map(|l| l[..p].to_vec()).collect();
    let gen: Vec<Vec<u32>> = record.speech.iter().map(|l| l[p..].to_vec()).collect();
    for &c in record.speech.iter().flatten() {
        vocab.check_speech(c)?;
    }
    let layout = build_open_layout(record.text.len(), p, gen[0].len(), &cfg.with_mode(Mode::Window)?);
    let inputs = nar_inputs(&layout, &record.text, &prompt, &gen, layer)?;
    let targets = layout
        .slots()
        .iter()
        .map(|s| s.raw_index.map(|t| gen[layer - 1][t] as usize))
        .collect();
    Ok(NarExample { layout, inputs, plan: TargetPlan { targets }, head: layer - 2 })
}

fn positions(n: usize) -> Vec<usize> {
    (0..n).collect()
}

fn finish_step<T: Real>(
    params: &mut Parameters<T>,
    opt: &mut AdamW<T>,
    mut grads: Parameters<T>,
    total: f64,
    denom: f64,
    lr: f64,
    clip: f64,
) -> Result<f64> {
    let step = opt.steps_taken() as usize;
    let loss = total / denom;
    if !loss.is_finite() {
        return Err(Error::NonFinite { step, detail: format!("loss = {loss}") });
    }
    let norm = clip_grad_norm(&mut grads, clip);
    if !norm.is_finite() {
        return Err(Error::NonFinite { step, detail: format!("loss = {loss}, gradient norm = {norm}") });
    }
    opt.update(params, &grads, lr);
    Ok(loss)
}

/// One AdamW update on the AR decoder; returns the batch loss before the update.
pub fn train_step_ar<T: Real>(
    params: &mut Parameters<T>,
    opt: &mut AdamW<T>,
    batch: &[&ArExample],
    cfg: &CfConfig,
    lr: f64,
    clip: f64,
) -> Result<f64> {
    let denom = batch.iter().map(|e| e.plan.count()).sum::<usize>() as f64;
    if denom == 0.0 {
        return Err(Error::Shape("batch has no supervised slots".into()));
    }
    let mut grads = params.zeros_like();
    let mut total = 0.0;
    for ex in batch {
        let mask = build_ar_mask(&ex.layout, cfg)?;
        let pass = forward(params, &ex.inputs, &positions(ex.inputs.len()), &mask, true)?;
        let logits = output_logits(params, &pass.hidden, 0);
        let (nll, dlogits) = cross_entropy_grad(&logits, &ex.plan, denom)?;
        total += nll;
        backward(params, &pass, &mask, 0, &dlogits, &mut grads)?;
    }
    finish_step(params, opt, grads, total, denom, lr, clip)
}

/// One AdamW update on the NAR decoder; each example carries its own target layer.
pub fn train_step_nar<T: Real>(
    params: &mut Parameters<T>,
    opt: &mut AdamW<T>,
    batch: &[NarExample],
    cfg: &CfConfig,
    lr: f64,
    clip: f64,
) -> Result<f64> {
    let denom = batch.iter().map(|e| e.plan.count()).sum::<usize>() as f64;
    if denom == 0.0 {
        return Err(Error::Shape("batch has no supervised slots".into()));
    }
    let mut grads = params.zeros_like();
    let mut total = 0.0;
    for ex in batch {
        let mask = build_prompt_local_nar(&ex.layout, cfg.n_nar())?;
        let pass = forward(params, &ex.inputs, &positions(ex.inputs.len()), &mask, true)?;
        let logits = output_logits(params, &pass.hidden, ex.head);
        let (nll, dlogits) = cross_entropy_grad(&logits, &ex.plan, denom)?;
        total += nll;
        backward(params, &pass, &mask, ex.head, &dlogits, &mut grads)?;
    }
    finish_step(params, opt, grads, total, denom, lr, clip)
}

fn check_corpus(records: &[Record]) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Corpus("empty corpus".into()));
    }
    Ok(())
}

/// Trains the AR decoder from scratch. `log` sees every step.
pub fn train_ar(
    records: &[Record],
    cfg: &CfConfig,
    model: ModelConfig,
    vocab: Vocabulary,
    opts: &TrainOptions,
    mut log: impl FnMut(&LogRow),
) -> Result<Parameters<f32>> {
    opts.validate()?;
    check_corpus(records)?;
    let examples = records
        .iter()
        .map(|r| ar_example(r, cfg, &vocab, opts.prompt_frames))
        .collect::<Result<Vec<_>>>()?;
    let longest = examples.iter().map(|e| e.layout.len()).max().unwrap_or(0);
    if longest > model.max_positions {
        return Err(config_err!("longest layout ({longest}) exceeds max_positions {}", model.max_positions));
    }
    let mut params = Parameters::<f32>::init(Role::Ar, model, vocab, opts.seed)?;
    let mut opt = AdamW::new(&params, opts.betas, opts.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let start = Instant::now();
    for step in 0..opts.steps {
        let batch: Vec<&ArExample> =
            (0..opts.batch_size).map(|_| &examples[rng.gen_range(0..examples.len())]).collect();
        let loss = train_step_ar(&mut params, &mut opt, &batch, cfg, opts.lr_at(step), opts.clip_norm)?;
        log(&LogRow { step, loss, wall_ms: start.elapsed().as_millis() });
    }
    Ok(params)
}

/// Trains the NAR decoder from scratch, drawing the target layer uniformly
/// from `2..=L` per sequence.
pub fn train_nar(
    records: &[Record],
    cfg: &CfConfig,
    model: ModelConfig,
    vocab: Vocabulary,
    opts: &TrainOptions,
    mut log: impl FnMut(&LogRow),
) -> Result<Parameters<f32>> {
    opts.validate()?;
    check_corpus(records)?;
    let mut params = Parameters::<f32>::init(Role::Nar, model, vocab, opts.seed)?;
    let mut opt = AdamW::new(&params, opts.betas, opts.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let start = Instant::now();
    for step in 0..opts.steps {
        let batch = (0..opts.batch_size)
            .map(|_| {
                let r = &records[rng.gen_range(0..records.len())];
                let layer = rng.gen_range(2..=vocab.num_layers);
                nar_example(r, cfg, &vocab, opts.prompt_frames, layer)
            })
            .collect::<Result<Vec<_>>>()?;
        let loss = train_step_nar(&mut params, &mut opt, &batch, cfg, opts.lr_at(step), opts.clip_norm)?;
        log(&LogRow { step, loss, wall_ms: start.elapsed().as_millis() });
    }
    Ok(params)
}
