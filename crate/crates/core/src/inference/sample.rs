use rand::Rng;

use crate::error::{config_err, Error, Result};
use crate::tensor::Real;

/// Decoding controls.
#[derive(Clone, Debug, PartialEq)]
pub struct GenerationParams {
    pub max_raw_tokens: usize,
    /// `0` selects the arg-max.
    pub temperature: f64,
    pub top_k: usize,
    pub seed: u64,
    /// Never sample EOS; decoding then always runs to `max_raw_tokens`.
    pub ignore_eos: bool,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self { max_raw_tokens: 512, temperature: 0.0, top_k: 1, seed: 0, ignore_eos: false }
    }
}

impl GenerationParams {
    pub fn greedy(max_raw_tokens: usize) -> Self {
        Self { max_raw_tokens, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature >= 0.0) || !self.temperature.is_finite() {
            return Err(config_err!("temperature must be a finite value >= 0"));
        }
        if self.top_k == 0 {
            return Err(config_err!("top_k must be at least 1"));
        }
        Ok(())
    }
}

/// Draws a class from `logits`: arg-max when `temperature == 0` or
/// `top_k == 1`, otherwise from the tempered softmax over the `top_k`
/// largest logits. Ties in the arg-max go to the lowest index.
pub fn sample<T: Real>(logits: &[T], gen: &GenerationParams, rng: &mut impl Rng) -> Result<usize> {
    gen.validate()?;
    if logits.is_empty() {
        return Err(Error::Shape("no classes to sample from".into()));
    }
    let vals: Vec<f64> = logits.iter().map(|v| v.as_f64()).collect();
    if let Some(i) = vals.iter().position(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(Error::NonFinite { step: 0, detail: format!("logit {i} is {}", vals[i]) });
    }
    if vals.iter().all(|v| *v == f64::NEG_INFINITY) {
        return Err(Error::NonFinite { step: 0, detail: "every class is excluded".into() });
    }
    let argmax = || {
        let mut best = 0;
        for (i, &v) in vals.iter().enumerate() {
            if v > vals[best] {
                best = i;
            }
        }
        best
    };
    if gen.temperature == 0.0 || gen.top_k == 1 {
        return Ok(argmax());
    }
    let mut order: Vec<usize> = (0..vals.len()).collect();
    order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]).then(a.cmp(&b)));
    order.truncate(gen.top_k);
    let max = vals[order[0]];
    let weights: Vec<f64> = order.iter().map(|&i| ((vals[i] - max) / gen.temperature).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (&i, &w) in order.iter().zip(&weights) {
        if u < w {
            return Ok(i);
        }
        u -= w;
    }
    Ok(*order.iter().zip(&weights).rev().find(|(_, &w)| w > 0.0).unwrap().0)
}
