//! Attention visibility matrices built from a [`SequenceLayout`].
//!
//! Every builder works row by row through a per-query rule so the
//! incremental decoder can ask for a single row without materializing the
//! whole matrix. [`oracle`] re-derives the same rules per pair from slot
//! kinds alone and exists to check the builders.

use std::fmt::Write as _;

use crate::config::{CfConfig, Mode};
use crate::error::{Error, Result};
use crate::layout::{SequenceLayout, Slot, SlotKind};

/// `n_q × n_k` boolean matrix, `true` = key visible to query.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    n_q: usize,
    n_k: usize,
    bits: Vec<bool>,
}

impl AttentionMask {
    pub fn from_fn(n_q: usize, n_k: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(n_q * n_k);
        for q in 0..n_q {
            for k in 0..n_k {
                bits.push(f(q, k));
            }
        }
        Self { n_q, n_k, bits }
    }

    /// Every key visible to every query.
    pub fn full(n: usize) -> Self {
        Self { n_q: n, n_k: n, bits: vec![true; n * n] }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |q, k| q == k)
    }

    pub fn n_q(&self) -> usize {
        self.n_q
    }

    pub fn n_k(&self) -> usize {
        self.n_k
    }

    #[inline]
    pub fn get(&self, q: usize, k: usize) -> bool {
        self.bits[q * self.n_k + k]
    }

    pub fn set(&mut self, q: usize, k: usize, v: bool) {
        self.bits[q * self.n_k + k] = v;
    }

    #[inline]
    pub fn row(&self, q: usize) -> &[bool] {
        &self.bits[q * self.n_k..(q + 1) * self.n_k]
    }

    pub fn row_count(&self, q: usize) -> usize {
        self.row(q).iter().filter(|&&b| b).count()
    }

    pub fn is_causal(&self) -> bool {
        (0..self.n_q).all(|q| self.row(q).iter().skip(q + 1).all(|&b| !b))
    }

    /// First query row with no visible key, if any.
    pub fn first_empty_row(&self) -> Option<usize> {
        (0..self.n_q).find(|&q| !self.row(q).iter().any(|&b| b))
    }

    pub fn check_rows_nonempty(&self) -> Result<()> {
        match self.first_empty_row() {
            Some(q) => Err(Error::Mask(format!("query row {q} has no visible key"))),
            None => Ok(()),
        }
    }

    /// Text grid: a `"n_q n_k"` header line, then one line of `1`/`0` per query.
    pub fn to_grid(&self) -> String {
        let mut out = String::with_capacity(self.n_q * (self.n_k + 1) + 16);
        writeln!(out, "{} {}", self.n_q, self.n_k).unwrap();
        for q in 0..self.n_q {
            out.extend(self.row(q).iter().map(|&b| if b { '1' } else { '0' }));
            out.push('\n');
        }
        out
    }

    pub fn from_grid(text: &str) -> Result<Self> {
        let bad = |msg: &str| Error::Mask(format!("grid: {msg}"));
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("missing header"))?;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(|s| s.parse().map_err(|_| bad("bad header")))
            .collect::<Result<_>>()?;
        let [n_q, n_k] = dims[..] else { return Err(bad("header needs two numbers")) };
        let mut bits = Vec::with_capacity(n_q * n_k);
        for _ in 0..n_q {
            let line = lines.next().ok_or_else(|| bad("missing row"))?;
            if line.len() != n_k {
                return Err(bad("row width"));
            }
            for c in line.chars() {
                bits.push(match c {
                    '1' => true,
                    '0' => false,
                    _ => return Err(bad("cells must be 0 or 1")),
                });
            }
        }
        Ok(Self { n_q, n_k, bits })
    }
}

/// Which visibility rule set to apply.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pattern {
    DenseCausal,
    /// Prompt plus causal window of `n_ar` raw tokens (self-inclusive).
    PromptLocalAr { n_ar: usize },
    /// Window plus compressed slots.
    Cf { n_ar: usize },
    /// Prompt plus bidirectional band `|t − s| <= n_nar`; `None` = unbounded.
    PromptLocalNar { n_nar: Option<usize> },
}

impl Pattern {
    /// The AR pattern a config trains and decodes with.
    pub fn for_ar(cfg: &CfConfig) -> Self {
        match cfg.mode() {
            Mode::Dense => Pattern::DenseCausal,
            Mode::Window => Pattern::PromptLocalAr { n_ar: cfg.n_ar() },
            Mode::Cf => Pattern::Cf { n_ar: cfg.n_ar() },
        }
    }

    pub fn for_nar(cfg: &CfConfig) -> Self {
        Pattern::PromptLocalNar { n_nar: cfg.n_nar() }
    }

    fn allows_w(self) -> bool {
        matches!(self, Pattern::Cf { .. })
    }
}

/// Fills `row[k]` for keys `0..row.len()` of query slot `q`.
///
/// Only `slots[..row.len()]` are read, so causal rows can be computed from
/// a layout prefix.
pub fn fill_row(slots: &[Slot], q: usize, pattern: Pattern, row: &mut [bool]) {
    let qs = &slots[q];
    match pattern {
        Pattern::DenseCausal => {
            for (k, v) in row.iter_mut().enumerate() {
                *v = k <= q;
            }
        }
        Pattern::PromptLocalAr { n_ar } | Pattern::Cf { n_ar } => {
            fill_ar_row(slots, qs, n_ar, row);
        }
        Pattern::PromptLocalNar { n_nar } => {
            for (k, v) in row.iter_mut().enumerate() {
                let ks = &slots[k];
                *v = if ks.kind.is_prompt() {
                    true
                } else if qs.kind.is_prompt() {
                    false
                } else {
                    let (t, s) = (qs.raw_index.unwrap(), ks.raw_index.unwrap());
                    n_nar.map_or(true, |n| t.abs_diff(s) <= n)
                };
            }
        }
    }
}

fn fill_ar_row(slots: &[Slot], qs: &Slot, n_ar: usize, row: &mut [bool]) {
    let q = qs.position;
    match qs.kind {
        SlotKind::TextPrompt | SlotKind::SpeechPrompt | SlotKind::Bos => {
            for (k, v) in row.iter_mut().enumerate() {
                *v = k <= q;
            }
        }
        SlotKind::W => {
            // exactly the g raw slots of its own span
            let span = qs.span.expect("W slot carries its span");
            let g = span_len(slots, q);
            let lo = span * g;
            for (k, v) in row.iter_mut().enumerate() {
                let ks = &slots[k];
                *v = ks.kind == SlotKind::Raw
                    && ks.raw_index.is_some_and(|s| s >= lo && s < lo + g);
            }
        }
        SlotKind::Raw | SlotKind::Eos => {
            let t = qs.raw_index.expect("raw slot carries its index");
            for (k, v) in row.iter_mut().enumerate() {
                let ks = &slots[k];
                *v = k <= q
                    && match ks.kind {
                        SlotKind::Raw | SlotKind::Eos => {
                            let s = ks.raw_index.unwrap();
                            s + n_ar >= t && s <= t
                        }
                        // prompt and completed spans are always visible
                        _ => true,
                    };
            }
        }
    }
}

/// Span length, read off the layout: the number of raw slots between `W_j`
/// and the previous `W` (or BOS).
fn span_len(slots: &[Slot], w_pos: usize) -> usize {
    slots[..w_pos]
        .iter()
        .rev()
        .take_while(|s| s.kind == SlotKind::Raw)
        .count()
}

fn build(layout: &SequenceLayout, pattern: Pattern) -> Result<AttentionMask> {
    let has_w = layout.w_count() > 0;
    if has_w && !pattern.allows_w() {
        return Err(Error::Mask(format!("{pattern:?} mask cannot be built for a layout with W slots")));
    }
    let n = layout.len();
    let mut bits = vec![false; n * n];
    for q in 0..n {
        fill_row(layout.slots(), q, pattern, &mut bits[q * n..(q + 1) * n]);
    }
    Ok(AttentionMask { n_q: n, n_k: n, bits })
}

/// Full causal attention. Rejects layouts containing `W`.
pub fn build_dense_causal(layout: &SequenceLayout) -> Result<AttentionMask> {
    build(layout, Pattern::DenseCausal)
}

/// Prompt-local causal sliding window. Rejects layouts containing `W`.
pub fn build_prompt_local_ar(layout: &SequenceLayout, n_ar: usize) -> Result<AttentionMask> {
    build(layout, Pattern::PromptLocalAr { n_ar })
}

/// Compressed-to-fine training mask.
pub fn build_cf_training(layout: &SequenceLayout, cfg: &CfConfig) -> Result<AttentionMask> {
    if cfg.n_ar() < cfg.g() {
        return Err(Error::Config(format!(
            "cf mask requires n_ar >= g (n_ar = {}, g = {})",
            cfg.n_ar(),
            cfg.g()
        )));
    }
    build(layout, Pattern::Cf { n_ar: cfg.n_ar() })
}

/// Bidirectional prompt-local window used by the NAR decoder (never causal).
pub fn build_prompt_local_nar(layout: &SequenceLayout, n_nar: Option<usize>) -> Result<AttentionMask> {
    build(layout, Pattern::PromptLocalNar { n_nar })
}

/// The AR mask that matches `cfg.mode()`.
pub fn build_ar_mask(layout: &SequenceLayout, cfg: &CfConfig) -> Result<AttentionMask> {
    match cfg.mode() {
        Mode::Dense => build_dense_causal(layout),
        Mode::Window => build_prompt_local_ar(layout, cfg.n_ar()),
        Mode::Cf => build_cf_training(layout, cfg),
    }
}

pub fn build_pattern(layout: &SequenceLayout, pattern: Pattern) -> Result<AttentionMask> {
    build(layout, pattern)
}

pub mod oracle {
    //! Per-pair visibility re-derived from slot kinds only: raw indices and
    //! span membership are recounted from scratch rather than read from the
    //! slot metadata the builders use.

    use super::Pattern;
    use crate::layout::{SequenceLayout, SlotKind};

    fn raw_ordinal(kinds: &[SlotKind], i: usize) -> usize {
        kinds[..i].iter().filter(|&&k| k == SlotKind::Raw).count()
    }

    /// Raw ordinals covered by the `W` at `i`: the run of raw slots directly before it.
    fn w_members(kinds: &[SlotKind], i: usize) -> std::ops::Range<usize> {
        let mut start = i;
        while start > 0 && kinds[start - 1] == SlotKind::Raw {
            start -= 1;
        }
        raw_ordinal(kinds, start)..raw_ordinal(kinds, i)
    }

    fn is_prompt(k: SlotKind) -> bool {
        matches!(k, SlotKind::TextPrompt | SlotKind::SpeechPrompt | SlotKind::Bos)
    }

    pub fn visibility_oracle(layout: &SequenceLayout, pattern: Pattern, q: usize, k: usize) -> bool {
        let kinds = layout.kinds();
        let (qk, kk) = (kinds[q], kinds[k]);
        let streamish = |x: SlotKind| matches!(x, SlotKind::Raw | SlotKind::Eos);
        match pattern {
            Pattern::DenseCausal => k <= q,
            Pattern::PromptLocalNar { n_nar } => {
                if is_prompt(kk) {
                    return true;
                }
                if is_prompt(qk) {
                    return false;
                }
                let (t, s) = (raw_ordinal(&kinds, q) as i64, raw_ordinal(&kinds, k) as i64);
                n_nar.map_or(true, |n| (t - s).abs() <= n as i64)
            }
            Pattern::PromptLocalAr { n_ar } | Pattern::Cf { n_ar } => {
                if qk == SlotKind::W {
                    return kk == SlotKind::Raw && w_members(&kinds, q).contains(&raw_ordinal(&kinds, k));
                }
                if k > q {
                    return false;
                }
                if is_prompt(qk) {
                    return true;
                }
                if is_prompt(kk) || kk == SlotKind::W {
                    return true;
                }
                debug_assert!(streamish(qk) && streamish(kk));
                let (t, s) = (raw_ordinal(&kinds, q) as i64, raw_ordinal(&kinds, k) as i64);
                t - s <= n_ar as i64
            }
        }
    }
}
