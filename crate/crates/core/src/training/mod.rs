//! Supervision for both decoders: target plans with `W` skipping, the masked
//! cross-entropy, AdamW, and the training loops.

mod optim;
mod trainer;

pub use optim::{clip_grad_norm, AdamW};
pub use trainer::{
    ar_example, nar_example, nar_inputs, train_ar, train_nar, train_step_ar, train_step_nar, ArExample,
    LogRow, NarExample, TrainOptions,
};

use crate::config::{Special, Token, Vocabulary};
use crate::error::{Error, Result};
use crate::layout::{SequenceLayout, SlotKind};
use crate::tensor::{Mat, Real};

/// Per-slot output class, or `None` where the slot carries no loss.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TargetPlan {
    pub targets: Vec<Option<usize>>,
}

impl TargetPlan {
    pub fn weight(&self, slot: usize) -> f64 {
        if self.targets[slot].is_some() {
            1.0
        } else {
            0.0
        }
    }

    /// Number of slots that contribute to the loss.
    pub fn count(&self) -> usize {
        self.targets.iter().filter(|t| t.is_some()).count()
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// AR targets over `layout`: BOS and every raw slot predict the next raw
/// token, skipping any `W` in between, and the last one predicts EOS.
/// Prompt, `W` and EOS slots carry no loss.
pub fn build_targets(layout: &SequenceLayout, raw_tokens: &[u32], vocab: &Vocabulary) -> Result<TargetPlan> {
    if raw_tokens.len() != layout.raw_count() {
        return Err(Error::Shape(format!(
            "{} raw tokens for a layout with {} raw slots",
            raw_tokens.len(),
            layout.raw_count()
        )));
    }
    for &c in raw_tokens {
        vocab.check_speech(c)?;
    }
    let next = |t: usize| raw_tokens.get(t).map_or(vocab.eos_class(), |&c| c as usize);
    let targets = layout
        .slots()
        .iter()
        .map(|s| match s.kind {
            SlotKind::Bos => Some(next(0)),
            SlotKind::Raw => Some(next(s.raw_index.unwrap() + 1)),
            SlotKind::TextPrompt | SlotKind::SpeechPrompt | SlotKind::W | SlotKind::Eos => None,
        })
        .collect();
    Ok(TargetPlan { targets })
}

/// AR input token of every slot in `layout`.
pub fn ar_tokens(layout: &SequenceLayout, text: &[u32], speech_prompt: &[u32], raw: &[u32]) -> Result<Vec<Token>> {
    if text.len() != layout.text_len() || speech_prompt.len() != layout.speech_prompt_len() || raw.len() != layout.raw_count() {
        return Err(Error::Shape("token lists do not match the layout".into()));
    }
    let mut prompt = speech_prompt.iter();
    Ok(layout
        .slots()
        .iter()
        .map(|s| match s.kind {
            SlotKind::TextPrompt => Token::Text(text[s.position]),
            SlotKind::SpeechPrompt => Token::Speech(*prompt.next().unwrap()),
            SlotKind::Bos => Token::Special(Special::Bos),
            SlotKind::Raw => Token::Speech(raw[s.raw_index.unwrap()]),
            SlotKind::W => Token::Special(Special::W),
            SlotKind::Eos => Token::Special(Special::Eos),
        })
        .collect())
}

/// Sum of negative log-likelihoods over loss-carrying slots, and the
/// gradient of `sum / denom` with respect to `logits`. Rows without a target
/// get an all-zero gradient row.
pub fn cross_entropy_grad<T: Real>(logits: &Mat<T>, plan: &TargetPlan, denom: f64) -> Result<(f64, Mat<T>)> {
    if logits.rows != plan.len() {
        return Err(Error::Shape(format!("{} logit rows for {} targets", logits.rows, plan.len())));
    }
    let mut grad = Mat::zeros(logits.rows, logits.cols);
    let mut total = 0.0;
    let mut probs = vec![0.0f64; logits.cols];
    for (r, target) in plan.targets.iter().enumerate() {
        let Some(y) = *target else { continue };
        if y >= logits.cols {
            return Err(Error::Shape(format!("target class {y} >= {} classes", logits.cols)));
        }
        let row = logits.row(r);
        let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (p, v) in probs.iter_mut().zip(row) {
            *p = (v.as_f64() - max).exp();
            sum += *p;
        }
        total += sum.ln() + max - row[y].as_f64();
        for (c, (g, p)) in grad.row_mut(r).iter_mut().zip(&probs).enumerate() {
            let onehot = if c == y { 1.0 } else { 0.0 };
            *g = T::from_f64((p / sum - onehot) / denom);
        }
    }
    Ok((total, grad))
}

/// Mean negative log-likelihood over the slots that carry a target.
pub fn masked_cross_entropy<T: Real>(logits: &Mat<T>, plan: &TargetPlan) -> Result<f64> {
    let count = plan.count();
    if count == 0 {
        return Err(Error::Shape("every slot has weight zero".into()));
    }
    let (total, _) = cross_entropy_grad(logits, plan, count as f64)?;
    Ok(total / count as f64)
}
