//! One-slot-at-a-time decoding against a key/value cache.

use super::forward::rms_norm;
use super::rope::RopeTable;
use super::{InputSlot, Parameters};
use crate::error::{Error, Result};
use crate::tensor::{dot, vec_mat_acc, Real};

/// Which kind of slot is being decoded; caches use it to pick visible keys.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepKind {
    Prompt,
    Raw,
    /// Compressed slot closing the span that ended at the previous raw slot.
    W,
}

/// A contiguous run of cached rows (`dim` scalars each, all heads side by side).
#[derive(Clone, Copy)]
pub struct KeySegment<'a, T> {
    pub keys: &'a [T],
    pub values: &'a [T],
    /// Per-row visibility; `None` means every row is visible.
    pub visible: Option<&'a [bool]>,
}

/// Storage of past keys/values, one store per transformer block.
pub trait KvCache<T: Real> {
    /// Attend the current slot's rotated query over the cache for `block`,
    /// recording the slot's own key/value as the cache's policy dictates.
    /// Writes the concatenated per-head context (`dim` scalars) to `out`.
    fn attend(&mut self, block: usize, q: &[T], k: &[T], v: &[T], out: &mut [T]);
}

/// Multi-head attention of one query row over several cached segments.
/// Rows whose visibility flag is false receive exactly zero weight.
pub fn attend_segments<T: Real>(q: &[T], segments: &[KeySegment<'_, T>], num_heads: usize, out: &mut [T]) {
    let d = q.len();
    let hd = d / num_heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let total: usize = segments.iter().map(|s| s.keys.len() / d).sum();
    let mut scores = vec![f64::NEG_INFINITY; total];
    let mut acc = vec![0.0f64; hd];
    for h in 0..num_heads {
        let qh = &q[h * hd..(h + 1) * hd];
        let mut max = f64::NEG_INFINITY;
        let mut i = 0;
        for seg in segments {
            for (r, key) in seg.keys.chunks_exact(d).enumerate() {
                // score every row; the mask decides afterwards
                let s = dot(qh, &key[h * hd..(h + 1) * hd]).as_f64() * scale;
                let vis = seg.visible.map_or(true, |v| v[r]);
                scores[i] = if vis { s } else { f64::NEG_INFINITY };
                if vis {
                    max = max.max(s);
                }
                i += 1;
            }
        }
        let mut sum = 0.0;
        for s in scores.iter_mut() {
            *s = if *s == f64::NEG_INFINITY { 0.0 } else { T::from_f64(*s - max).exp().as_f64() };
            sum += *s;
        }
        acc.iter_mut().for_each(|a| *a = 0.0);
        let mut i = 0;
        for seg in segments {
            for val in seg.values.chunks_exact(d) {
                let w = scores[i];
                if w != 0.0 {
                    for (a, &x) in acc.iter_mut().zip(&val[h * hd..(h + 1) * hd]) {
                        *a += w * x.as_f64();
                    }
                }
                i += 1;
            }
        }
        for (o, a) in out[h * hd..(h + 1) * hd].iter_mut().zip(&acc) {
            *o = T::from_f64(a / sum);
        }
    }
}

/// Decodes one slot at `position`, returning the final normalized hidden state.
pub fn decode_step<T: Real>(
    params: &Parameters<T>,
    cache: &mut impl KvCache<T>,
    input: &InputSlot,
    position: usize,
) -> Result<Vec<T>> {
    if position >= params.model.max_positions {
        return Err(Error::PositionOverflow { position, max: params.model.max_positions });
    }
    params.check_input(input)?;
    let cfg = params.model;
    let d = cfg.dim;
    let rope = RopeTable::single(cfg.head_dim(), position);
    let mut x = vec![T::zero(); d];
    params.embed_into(input, &mut x);
    let mut xn = vec![T::zero(); d];
    let mut q = vec![T::zero(); d];
    let mut k = vec![T::zero(); d];
    let mut v = vec![T::zero(); d];
    let mut ctx = vec![T::zero(); d];
    let f = cfg.ffn_dim();
    let mut gate = vec![T::zero(); f];
    let mut up = vec![T::zero(); f];

    for (b, blk) in params.blocks.iter().enumerate() {
        rms_norm(&x, &blk.attn_norm.data, &mut xn);
        for buf in [&mut q, &mut k, &mut v] {
            buf.iter_mut().for_each(|e| *e = T::zero());
        }
        vec_mat_acc(&xn, &blk.wq, &mut q);
        vec_mat_acc(&xn, &blk.wk, &mut k);
        vec_mat_acc(&xn, &blk.wv, &mut v);
        rope.rotate(0, &mut q);
        rope.rotate(0, &mut k);
        cache.attend(b, &q, &k, &v, &mut ctx);
        vec_mat_acc(&ctx, &blk.wo, &mut x);

        rms_norm(&x, &blk.ffn_norm.data, &mut xn);
        gate.iter_mut().for_each(|e| *e = T::zero());
        up.iter_mut().for_each(|e| *e = T::zero());
        vec_mat_acc(&xn, &blk.w_gate, &mut gate);
        vec_mat_acc(&xn, &blk.w_up, &mut up);
        for (g, &u) in gate.iter_mut().zip(&up) {
            let a = *g;
            *g = a / (T::one() + (-a).exp()) * u;
        }
        vec_mat_acc(&gate, &blk.w_down, &mut x);
    }
    let mut hidden = vec![T::zero(); d];
    rms_norm(&x, &params.final_norm.data, &mut hidden);
    Ok(hidden)
}
