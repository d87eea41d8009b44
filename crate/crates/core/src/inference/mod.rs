//! Autoregressive decoding with either a full cache and per-slot masks
//! (vanilla) or a cache that evicts out-of-window raw entries (faster), and
//! the layer-by-layer NAR refinement.

mod cache;
mod sample;

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use cache::{DecodeCache, EvictionCache, FullCache};
pub use sample::{sample, GenerationParams};

use crate::config::{CfConfig, Mode, Special, Token};
use crate::error::{config_err, Error, Result};
use crate::layout::{build_open_layout, SequenceLayout, SlotKind};
use crate::masks::{build_prompt_local_nar, Pattern};
use crate::model::{decode_step, forward, output_logits, EmbRef, Parameters, Role};
use crate::tensor::{vec_mat_acc, Real};
use crate::training::nar_inputs;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    Vanilla,
    Faster,
}

impl FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(Strategy::Vanilla),
            "faster" => Ok(Strategy::Faster),
            other => Err(config_err!("unknown inference strategy `{other}` (vanilla|faster)")),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Vanilla => "vanilla",
            Strategy::Faster => "faster",
        })
    }
}

/// Per-step measurements, recorded when tracing is on. Entry 0 is the BOS
/// step; entry `i > 0` is the step feeding the `i`-th sampled raw token.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trace {
    /// AR logits the step produced (codewords then EOS).
    pub logits: Vec<Vec<f64>>,
    /// Cache rows held while the step attended, its own row included.
    pub cache_len: Vec<usize>,
    /// Wall time from feeding the step's token to its logits, including any
    /// `W` slot fed right after it.
    pub step_nanos: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    pub tokens: Vec<u32>,
    pub hit_eos: bool,
    /// Slots of the decoded sequence, prompt and `W` included.
    pub layout: SequenceLayout,
    pub trace: Option<Trace>,
}

fn head_logits<T: Real>(params: &Parameters<T>, hidden: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); params.heads[0].cols];
    vec_mat_acc(hidden, &params.heads[0], &mut out);
    out
}

fn check_ar(params: &Parameters<impl Real>, cfg: &CfConfig, text: &[u32], prompt: &[u32]) -> Result<()> {
    if params.role != Role::Ar {
        return Err(config_err!("autoregressive decoding needs AR parameters"));
    }
    for &t in text {
        params.vocab.check(Token::Text(t))?;
    }
    for &c in prompt {
        params.vocab.check_speech(c)?;
    }
    if cfg.mode() == Mode::Cf && cfg.n_ar() < cfg.g() {
        return Err(config_err!("cf decoding requires n_ar >= g"));
    }
    Ok(())
}

fn decode<T: Real, C: DecodeCache<T>>(
    params: &Parameters<T>,
    cfg: &CfConfig,
    text: &[u32],
    prompt: &[u32],
    gen: &GenerationParams,
    mut cache: C,
    trace: bool,
) -> Result<Generation> {
    gen.validate()?;
    check_ar(params, cfg, text, prompt)?;
    let w_slots = if cfg.mode() == Mode::Cf { gen.max_raw_tokens / cfg.g() } else { 0 };
    let longest = text.len() + prompt.len() + 1 + gen.max_raw_tokens + w_slots;
    if longest > params.model.max_positions {
        return Err(Error::PositionOverflow { position: longest - 1, max: params.model.max_positions });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(gen.seed);
    let mut layout = SequenceLayout::prompt(text.len(), prompt.len(), cfg);
    let mut tr = trace.then(Trace::default);

    let feed = |layout: &SequenceLayout, cache: &mut C, q: usize, token: Token| -> Result<(Vec<T>, u64, usize)> {
        let start = Instant::now();
        cache.begin(layout, q);
        let hidden = decode_step(params, cache, &vec![EmbRef::from(token)], q)?;
        Ok((hidden, start.elapsed().as_nanos() as u64, cache.attended()))
    };

    let mut hidden = Vec::new();
    let mut bos_cost = (0, 0);
    for (q, slot) in layout.slots().to_vec().iter().enumerate() {
        let token = match slot.kind {
            SlotKind::TextPrompt => Token::Text(text[q]),
            SlotKind::SpeechPrompt => Token::Speech(prompt[q - text.len()]),
            _ => Token::Special(Special::Bos),
        };
        let (h, nanos, rows) = feed(&layout, &mut cache, q, token)?;
        hidden = h;
        bos_cost = (nanos, rows);
    }
    let mut logits = head_logits(params, &hidden);
    if let Some(t) = tr.as_mut() {
        t.logits.push(logits.iter().map(|v| v.as_f64()).collect());
        t.step_nanos.push(bos_cost.0);
        t.cache_len.push(bos_cost.1);
    }

    let eos = params.vocab.eos_class();
    let mut tokens = Vec::new();
    let mut hit_eos = false;
    while tokens.len() < gen.max_raw_tokens {
        if gen.ignore_eos {
            logits[eos] = T::neg_infinity();
        }
        let c = sample(&logits, gen, &mut rng).map_err(|e| match e {
            Error::NonFinite { detail, .. } => Error::NonFinite { step: tokens.len(), detail },
            other => other,
        })?;
        if c == eos {
            hit_eos = true;
            break;
        }
        let c = c as u32;
        tokens.push(c);
        let added = layout.push_raw();
        let q = layout.len() - added;
        let start = Instant::now();
        let (h, _, rows) = feed(&layout, &mut cache, q, Token::Speech(c))?;
        logits = head_logits(params, &h);
        if added == 2 {
            feed(&layout, &mut cache, q + 1, Token::Special(Special::W))?;
        }
        let nanos = start.elapsed().as_nanos() as u64;
        if let Some(t) = tr.as_mut() {
            t.logits.push(logits.iter().map(|v| v.as_f64()).collect());
            t.step_nanos.push(nanos);
            t.cache_len.push(rows);
        }
    }
    Ok(Generation { tokens, hit_eos, layout, trace: tr })
}

/// Decodes with the given strategy, optionally recording a [`Trace`].
pub fn generate<T: Real>(
    strategy: Strategy,
    params: &Parameters<T>,
    cfg: &CfConfig,
    text: &[u32],
    prompt: &[u32],
    gen: &GenerationParams,
    trace: bool,
) -> Result<Generation> {
    let m = params.model;
    match strategy {
        Strategy::Vanilla => {
            let cache = FullCache::new(m.dim, m.num_heads, m.num_blocks, Pattern::for_ar(cfg));
            decode(params, cfg, text, prompt, gen, cache, trace)
        }
        Strategy::Faster => {
            if cfg.mode() == Mode::Dense {
                return Err(config_err!("faster decoding needs a window or cf configuration"));
            }
            let cache = EvictionCache::new(m.dim, m.num_heads, m.num_blocks, cfg.n_ar(), cfg.g());
            decode(params, cfg, text, prompt, gen, cache, trace)
        }
    }
}

/// Full-cache decoding; visibility comes from the attention mask alone.
pub fn generate_vanilla<T: Real>(
    params: &Parameters<T>,
    cfg: &CfConfig,
    text: &[u32],
    prompt: &[u32],
    gen: &GenerationParams,
) -> Result<Vec<u32>> {
    Ok(generate(Strategy::Vanilla, params, cfg, text, prompt, gen, false)?.tokens)
}

/// Decoding that keeps only the prompt, the `W` slots and the local window.
pub fn generate_faster<T: Real>(
    params: &Parameters<T>,
    cfg: &CfConfig,
    text: &[u32],
    prompt: &[u32],
    gen: &GenerationParams,
) -> Result<Vec<u32>> {
    Ok(generate(Strategy::Faster, params, cfg, text, prompt, gen, false)?.tokens)
}

/// Predicts layers `2..=L` from layer 1, one layer at a time, each by
/// arg-max over all generated positions at once. `prompt[l]` holds layer
/// `l + 1` of the speech prompt. Without NAR parameters the result is layer 1
/// alone.
pub fn refine_nar<T: Real>(
    layer1: &[u32],
    text: &[u32],
    prompt: &[Vec<u32>],
    nar: Option<&Parameters<T>>,
    cfg: &CfConfig,
) -> Result<Vec<Vec<u32>>> {
    let mut layers = vec![layer1.to_vec()];
    let Some(params) = nar else {
        return Ok(layers);
    };
    if params.role != Role::Nar {
        return Err(config_err!("refinement needs NAR parameters"));
    }
    let num_layers = params.vocab.num_layers;
    if prompt.len() != num_layers {
        return Err(config_err!("speech prompt has {} layers, the NAR decoder expects {num_layers}", prompt.len()));
    }
    let p = prompt[0].len();
    let layout = build_open_layout(text.len(), p, layer1.len(), &cfg.with_mode(Mode::Window)?);
    let mask = build_prompt_local_nar(&layout, cfg.n_nar())?;
    let positions: Vec<usize> = (0..layout.len()).collect();
    let gen_slots: Vec<usize> = layout.slots().iter().filter(|s| s.kind == SlotKind::Raw).map(|s| s.position).collect();
    for layer in 2..=num_layers {
        let inputs = nar_inputs(&layout, text, prompt, &layers, layer)?;
        let pass = forward(params, &inputs, &positions, &mask, false)?;
        let logits = output_logits(params, &pass.hidden, layer - 2);
        let ids = gen_slots
            .iter()
            .map(|&r| {
                let row = logits.row(r);
                let mut best = 0;
                for (i, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = i;
                    }
                }
                best as u32
            })
            .collect();
        layers.push(ids);
    }
    Ok(layers)
}
