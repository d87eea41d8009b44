//! Whole-sequence forward and backward passes.

use super::rope::RopeTable;
use super::{InputSlot, Parameters};
use crate::error::{Error, Result};
use crate::masks::AttentionMask;
use crate::tensor::{gemm_into, Mat, Real};

pub(crate) const RMS_EPS: f64 = 1e-6;

/// Per-block, per-head attention probabilities (`n × n` each).
pub type AttentionProbs<T> = Vec<Vec<Mat<T>>>;

struct BlockTape<T> {
    x_in: Mat<T>,
    inv1: Vec<T>,
    xn1: Mat<T>,
    q: Vec<Mat<T>>,
    k: Vec<Mat<T>>,
    v: Vec<Mat<T>>,
    p: Vec<Mat<T>>,
    ctx: Mat<T>,
    x_mid: Mat<T>,
    inv2: Vec<T>,
    xn2: Mat<T>,
    gate: Mat<T>,
    up: Mat<T>,
    act: Mat<T>,
}

struct Tape<T> {
    inputs: Vec<InputSlot>,
    rope: RopeTable,
    blocks: Vec<BlockTape<T>>,
    x_final: Mat<T>,
    inv_final: Vec<T>,
}

/// Result of [`forward`]: the normalized final hidden states, plus what the
/// backward pass needs when requested.
pub struct ForwardPass<T> {
    pub hidden: Mat<T>,
    tape: Option<Tape<T>>,
}

impl<T: Real> ForwardPass<T> {
    /// Attention probabilities of every block and head; requires `keep_tape`.
    pub fn attention_probs(&self) -> Option<AttentionProbs<T>> {
        self.tape
            .as_ref()
            .map(|t| t.blocks.iter().map(|b| b.p.clone()).collect())
    }
}

pub(crate) fn rms_norm<T: Real>(x: &[T], gain: &[T], out: &mut [T]) -> T {
    let ms = x.iter().map(|&v| v.as_f64() * v.as_f64()).sum::<f64>() / x.len() as f64;
    let inv = T::from_f64(1.0 / (ms + RMS_EPS).sqrt());
    for ((o, &v), &g) in out.iter_mut().zip(x).zip(gain) {
        *o = v * inv * g;
    }
    inv
}

fn rms_norm_rows<T: Real>(x: &Mat<T>, gain: &Mat<T>) -> (Mat<T>, Vec<T>) {
    let mut out = x.zeros_like();
    let inv = (0..x.rows)
        .map(|r| rms_norm(x.row(r), &gain.data, &mut out.data[r * x.cols..(r + 1) * x.cols]))
        .collect();
    (out, inv)
}

/// Accumulates `dx` and `dgain` for `y = x · inv · gain`.
fn rms_norm_backward<T: Real>(
    x: &Mat<T>,
    inv: &[T],
    gain: &Mat<T>,
    dy: &Mat<T>,
    dx: &mut Mat<T>,
    dgain: &mut Mat<T>,
) {
    let d = T::from_f64(x.cols as f64);
    for r in 0..x.rows {
        let (xr, dyr, ir) = (x.row(r), dy.row(r), inv[r]);
        let mut s = T::zero();
        for j in 0..x.cols {
            let u = gain.data[j] * dyr[j];
            s += u * xr[j];
            dgain.data[j] += dyr[j] * xr[j] * ir;
        }
        let coef = ir * ir * ir * s / d;
        let dxr = dx.row_mut(r);
        for j in 0..x.cols {
            dxr[j] += ir * gain.data[j] * dyr[j] - coef * xr[j];
        }
    }
}

#[inline]
fn sigmoid<T: Real>(a: T) -> T {
    T::one() / (T::one() + (-a).exp())
}

fn split_heads<T: Real>(x: &Mat<T>, heads: usize) -> Vec<Mat<T>> {
    let hd = x.cols / heads;
    (0..heads)
        .map(|h| {
            let mut m = Mat::zeros(x.rows, hd);
            for r in 0..x.rows {
                m.row_mut(r).copy_from_slice(&x.row(r)[h * hd..(h + 1) * hd]);
            }
            m
        })
        .collect()
}

fn merge_heads<T: Real>(parts: &[Mat<T>]) -> Mat<T> {
    let hd = parts[0].cols;
    let rows = parts[0].rows;
    let mut out = Mat::zeros(rows, hd * parts.len());
    for (h, p) in parts.iter().enumerate() {
        for r in 0..rows {
            out.row_mut(r)[h * hd..(h + 1) * hd].copy_from_slice(p.row(r));
        }
    }
    out
}

/// Softmax of each row over the visible keys only; hidden keys get exactly
/// zero weight. Accumulated in double precision.
fn masked_softmax_rows<T: Real>(scores: &mut Mat<T>, mask: &AttentionMask) {
    let mut buf = vec![0.0f64; scores.cols];
    for r in 0..scores.rows {
        let vis = mask.row(r);
        let row = scores.row_mut(r);
        let mut max = f64::NEG_INFINITY;
        for (s, &v) in row.iter().zip(vis) {
            if v {
                max = max.max(s.as_f64());
            }
        }
        let mut sum = 0.0;
        for ((b, s), &v) in buf.iter_mut().zip(row.iter()).zip(vis) {
            *b = if v { (s.as_f64() - max).exp() } else { 0.0 };
            sum += *b;
        }
        for (s, b) in row.iter_mut().zip(&buf) {
            *s = T::from_f64(b / sum);
        }
    }
}

/// Pre-softmax scores `q·kᵀ / sqrt(head_dim)` after rotating `q` and `k`
/// to their positions. Single head: `q` is `n_q × hd`, `k` is `n_k × hd`.
pub fn scores_for_positions<T: Real>(
    q: &Mat<T>,
    k: &Mat<T>,
    q_positions: &[usize],
    k_positions: &[usize],
) -> Mat<T> {
    let hd = q.cols;
    let (mut q, mut k) = (q.clone(), k.clone());
    let tq = RopeTable::new(hd, q_positions);
    let tk = RopeTable::new(hd, k_positions);
    for r in 0..q.rows {
        tq.rotate(r, q.row_mut(r));
    }
    for r in 0..k.rows {
        tk.rotate(r, k.row_mut(r));
    }
    let mut s = Mat::zeros(q.rows, k.rows);
    gemm_into(&q, false, &k, true, T::zero(), &mut s);
    let scale = T::from_f64(1.0 / (hd as f64).sqrt());
    s.data.iter_mut().for_each(|x| *x *= scale);
    s
}

/// Single-head attention under `mask` with rotary positions.
pub fn masked_attention<T: Real>(
    q: &Mat<T>,
    k: &Mat<T>,
    v: &Mat<T>,
    mask: &AttentionMask,
    q_positions: &[usize],
    k_positions: &[usize],
) -> Result<Mat<T>> {
    if mask.n_q() != q.rows || mask.n_k() != k.rows || k.rows != v.rows {
        return Err(Error::Shape(format!(
            "mask {}x{} vs q {} rows, k {} rows, v {} rows",
            mask.n_q(),
            mask.n_k(),
            q.rows,
            k.rows,
            v.rows
        )));
    }
    if q_positions.len() != q.rows || k_positions.len() != k.rows || q.cols != k.cols || q.cols % 2 != 0 {
        return Err(Error::Shape("positions or head width do not match q/k".into()));
    }
    mask.check_rows_nonempty()?;
    let mut p = scores_for_positions(q, k, q_positions, k_positions);
    masked_softmax_rows(&mut p, mask);
    let mut out = Mat::zeros(q.rows, v.cols);
    gemm_into(&p, false, v, false, T::zero(), &mut out);
    Ok(out)
}

/// Runs the decoder over a whole sequence.
///
/// `keep_tape` retains the activations needed by [`backward`] and by
/// [`ForwardPass::attention_probs`].
pub fn forward<T: Real>(
    params: &Parameters<T>,
    inputs: &[InputSlot],
    positions: &[usize],
    mask: &AttentionMask,
    keep_tape: bool,
) -> Result<ForwardPass<T>> {
    let n = inputs.len();
    if positions.len() != n || mask.n_q() != n || mask.n_k() != n {
        return Err(Error::Shape(format!(
            "{n} inputs, {} positions, mask {}x{}",
            positions.len(),
            mask.n_q(),
            mask.n_k()
        )));
    }
    mask.check_rows_nonempty()?;
    if let Some(&p) = positions.iter().max() {
        if p >= params.model.max_positions {
            return Err(Error::PositionOverflow { position: p, max: params.model.max_positions });
        }
    }
    for slot in inputs {
        params.check_input(slot)?;
    }

    let cfg = params.model;
    let (d, heads, hd) = (cfg.dim, cfg.num_heads, cfg.head_dim());
    let scale = T::from_f64(1.0 / (hd as f64).sqrt());
    let rope = RopeTable::new(hd, positions);

    let mut x = Mat::zeros(n, d);
    for (r, slot) in inputs.iter().enumerate() {
        params.embed_into(slot, x.row_mut(r));
    }

    let mut tapes = Vec::new();
    for blk in &params.blocks {
        let (xn1, inv1) = rms_norm_rows(&x, &blk.attn_norm);
        let mut qm = Mat::zeros(n, d);
        let mut km = Mat::zeros(n, d);
        let mut vm = Mat::zeros(n, d);
        gemm_into(&xn1, false, &blk.wq, false, T::zero(), &mut qm);
        gemm_into(&xn1, false, &blk.wk, false, T::zero(), &mut km);
        gemm_into(&xn1, false, &blk.wv, false, T::zero(), &mut vm);
        for r in 0..n {
            rope.rotate(r, qm.row_mut(r));
            rope.rotate(r, km.row_mut(r));
        }
        let (q, k, v) = (split_heads(&qm, heads), split_heads(&km, heads), split_heads(&vm, heads));
        let mut probs = Vec::with_capacity(heads);
        let mut ctx_heads = Vec::with_capacity(heads);
        for h in 0..heads {
            let mut s = Mat::zeros(n, n);
            gemm_into(&q[h], false, &k[h], true, T::zero(), &mut s);
            s.data.iter_mut().for_each(|x| *x *= scale);
            masked_softmax_rows(&mut s, mask);
            let mut c = Mat::zeros(n, hd);
            gemm_into(&s, false, &v[h], false, T::zero(), &mut c);
            probs.push(s);
            ctx_heads.push(c);
        }
        let ctx = merge_heads(&ctx_heads);
        let mut x_mid = x.clone();
        gemm_into(&ctx, false, &blk.wo, false, T::one(), &mut x_mid);

        let (xn2, inv2) = rms_norm_rows(&x_mid, &blk.ffn_norm);
        let f = cfg.ffn_dim();
        let mut gate = Mat::zeros(n, f);
        let mut up = Mat::zeros(n, f);
        gemm_into(&xn2, false, &blk.w_gate, false, T::zero(), &mut gate);
        gemm_into(&xn2, false, &blk.w_up, false, T::zero(), &mut up);
        let mut act = gate.zeros_like();
        for ((o, &a), &b) in act.data.iter_mut().zip(&gate.data).zip(&up.data) {
            *o = a * sigmoid(a) * b;
        }
        let mut x_out = x_mid.clone();
        gemm_into(&act, false, &blk.w_down, false, T::one(), &mut x_out);

        if keep_tape {
            tapes.push(BlockTape {
                x_in: std::mem::replace(&mut x, x_out),
                inv1,
                xn1,
                q,
                k,
                v,
                p: probs,
                ctx,
                x_mid,
                inv2,
                xn2,
                gate,
                up,
                act,
            });
        } else {
            x = x_out;
        }
    }

    let (hidden, inv_final) = rms_norm_rows(&x, &params.final_norm);
    let tape = keep_tape.then(|| Tape {
        inputs: inputs.to_vec(),
        rope,
        blocks: tapes,
        x_final: x,
        inv_final,
    });
    Ok(ForwardPass { hidden, tape })
}

/// `hidden · head[head]`: one row of logits per slot.
pub fn output_logits<T: Real>(params: &Parameters<T>, hidden: &Mat<T>, head: usize) -> Mat<T> {
    let w = &params.heads[head];
    let mut out = Mat::zeros(hidden.rows, w.cols);
    gemm_into(hidden, false, w, false, T::zero(), &mut out);
    out
}

/// Accumulates into `grads` the gradient of a loss whose derivative with
/// respect to `output_logits(.., head)` is `dlogits`.
pub fn backward<T: Real>(
    params: &Parameters<T>,
    pass: &ForwardPass<T>,
    mask: &AttentionMask,
    head: usize,
    dlogits: &Mat<T>,
    grads: &mut Parameters<T>,
) -> Result<()> {
    let tape = pass
        .tape
        .as_ref()
        .ok_or_else(|| Error::Shape("backward needs a forward pass run with keep_tape".into()))?;
    let cfg = params.model;
    let (n, d, heads, hd) = (pass.hidden.rows, cfg.dim, cfg.num_heads, cfg.head_dim());
    let scale = T::from_f64(1.0 / (hd as f64).sqrt());

    gemm_into(&pass.hidden, true, dlogits, false, T::one(), &mut grads.heads[head]);
    let mut dh = Mat::zeros(n, d);
    gemm_into(dlogits, false, &params.heads[head], true, T::zero(), &mut dh);

    let mut dx = Mat::zeros(n, d);
    rms_norm_backward(&tape.x_final, &tape.inv_final, &params.final_norm, &dh, &mut dx, &mut grads.final_norm);

    for (b, bt) in tape.blocks.iter().enumerate().rev() {
        let blk = &params.blocks[b];
        let gb = &mut grads.blocks[b];
        let f = cfg.ffn_dim();

        // feed-forward
        gemm_into(&bt.act, true, &dx, false, T::one(), &mut gb.w_down);
        let mut dact = Mat::zeros(n, f);
        gemm_into(&dx, false, &blk.w_down, true, T::zero(), &mut dact);
        let mut dgate = Mat::zeros(n, f);
        let mut dup = Mat::zeros(n, f);
        for i in 0..n * f {
            let (a, u, da) = (bt.gate.data[i], bt.up.data[i], dact.data[i]);
            let sg = sigmoid(a);
            let silu = a * sg;
            dup.data[i] = da * silu;
            dgate.data[i] = da * u * sg * (T::one() + a * (T::one() - sg));
        }
        gemm_into(&bt.xn2, true, &dgate, false, T::one(), &mut gb.w_gate);
        gemm_into(&bt.xn2, true, &dup, false, T::one(), &mut gb.w_up);
        let mut dxn2 = Mat::zeros(n, d);
        gemm_into(&dgate, false, &blk.w_gate, true, T::zero(), &mut dxn2);
        gemm_into(&dup, false, &blk.w_up, true, T::one(), &mut dxn2);
        let mut dx_mid = dx;
        rms_norm_backward(&bt.x_mid, &bt.inv2, &blk.ffn_norm, &dxn2, &mut dx_mid, &mut gb.ffn_norm);

        // attention
        gemm_into(&bt.ctx, true, &dx_mid, false, T::one(), &mut gb.wo);
        let mut dctx = Mat::zeros(n, d);
        gemm_into(&dx_mid, false, &blk.wo, true, T::zero(), &mut dctx);
        let dctx_heads = split_heads(&dctx, heads);
        let mut dq_heads = Vec::with_capacity(heads);
        let mut dk_heads = Vec::with_capacity(heads);
        let mut dv_heads = Vec::with_capacity(heads);
        for h in 0..heads {
            let p = &bt.p[h];
            let mut dp = Mat::zeros(n, n);
            gemm_into(&dctx_heads[h], false, &bt.v[h], true, T::zero(), &mut dp);
            let mut dv = Mat::zeros(n, hd);
            gemm_into(p, true, &dctx_heads[h], false, T::zero(), &mut dv);
            // dS = P ∘ (dP − rowsum(dP ∘ P)), zero wherever the key is hidden
            let mut ds = dp;
            for r in 0..n {
                let pr = p.row(r);
                let dot: f64 = ds.row(r).iter().zip(pr).map(|(&a, &b)| a.as_f64() * b.as_f64()).sum();
                let dot = T::from_f64(dot);
                let vis = mask.row(r);
                for ((x, &pv), &m) in ds.row_mut(r).iter_mut().zip(pr).zip(vis) {
                    *x = if m { pv * (*x - dot) * scale } else { T::zero() };
                }
            }
            let mut dq = Mat::zeros(n, hd);
            gemm_into(&ds, false, &bt.k[h], false, T::zero(), &mut dq);
            let mut dk = Mat::zeros(n, hd);
            gemm_into(&ds, true, &bt.q[h], false, T::zero(), &mut dk);
            dq_heads.push(dq);
            dk_heads.push(dk);
            dv_heads.push(dv);
        }
        let mut dq = merge_heads(&dq_heads);
        let mut dk = merge_heads(&dk_heads);
        let dv = merge_heads(&dv_heads);
        for r in 0..n {
            tape.rope.unrotate(r, dq.row_mut(r));
            tape.rope.unrotate(r, dk.row_mut(r));
        }
        gemm_into(&bt.xn1, true, &dq, false, T::one(), &mut gb.wq);
        gemm_into(&bt.xn1, true, &dk, false, T::one(), &mut gb.wk);
        gemm_into(&bt.xn1, true, &dv, false, T::one(), &mut gb.wv);
        let mut dxn1 = Mat::zeros(n, d);
        gemm_into(&dq, false, &blk.wq, true, T::zero(), &mut dxn1);
        gemm_into(&dk, false, &blk.wk, true, T::one(), &mut dxn1);
        gemm_into(&dv, false, &blk.wv, true, T::one(), &mut dxn1);
        let mut dx_in = dx_mid;
        rms_norm_backward(&bt.x_in, &bt.inv1, &blk.attn_norm, &dxn1, &mut dx_in, &mut gb.attn_norm);
        dx = dx_in;
    }

    for (r, slot) in tape.inputs.iter().enumerate() {
        params.embed_backward(grads, slot, dx.row(r));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masks::AttentionMask;

    fn mat(rows: usize, cols: usize, seed: f64) -> Mat<f64> {
        Mat::from_vec(rows, cols, (0..rows * cols).map(|i| ((i as f64 + seed) * 0.731).sin()).collect())
    }

    #[test]
    fn identity_mask_returns_values() {
        let (q, k, v) = (mat(5, 4, 0.0), mat(5, 4, 1.0), mat(5, 3, 2.0));
        let pos: Vec<usize> = (0..5).collect();
        let out = masked_attention(&q, &k, &v, &AttentionMask::identity(5), &pos, &pos).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn uniform_keys_average_values() {
        let q = mat(3, 4, 0.0);
        let k = Mat::from_vec(4, 4, vec![0.0; 16]);
        let v = mat(4, 2, 3.0);
        let pos = [0, 1, 2, 3];
        let out = masked_attention(&q, &k, &v, &AttentionMask::from_fn(3, 4, |_, _| true), &pos[..3], &pos).unwrap();
        for r in 0..3 {
            for c in 0..2 {
                let mean = (0..4).map(|i| v.at(i, c)).sum::<f64>() / 4.0;
                assert!((out.at(r, c) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_empty_rows_and_bad_shapes() {
        let (q, k, v) = (mat(2, 4, 0.0), mat(2, 4, 1.0), mat(2, 4, 2.0));
        let mut m = AttentionMask::full(2);
        m.set(1, 0, false);
        m.set(1, 1, false);
        assert!(masked_attention(&q, &k, &v, &m, &[0, 1], &[0, 1]).is_err());
        assert!(masked_attention(&q, &k, &v, &AttentionMask::full(3), &[0, 1], &[0, 1]).is_err());
    }
}
