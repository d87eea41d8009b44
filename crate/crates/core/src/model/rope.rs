//! Rotary position encoding over consecutive channel pairs within each head.
//!
//! Angles are computed in double precision so large absolute positions keep
//! the relative-position property to rounding of the stored scalar type.

use crate::tensor::Real;

pub const ROPE_BASE: f64 = 10_000.0;

/// Cosine/sine table for a list of positions, `head_dim / 2` pairs each.
#[derive(Clone, Debug)]
pub struct RopeTable {
    half: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl RopeTable {
    pub fn new(head_dim: usize, positions: &[usize]) -> Self {
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(positions.len() * half);
        let mut sin = Vec::with_capacity(positions.len() * half);
        for &p in positions {
            for i in 0..half {
                let theta = p as f64 * frequency(i, head_dim);
                cos.push(theta.cos());
                sin.push(theta.sin());
            }
        }
        Self { half, cos, sin }
    }

    pub fn single(head_dim: usize, position: usize) -> Self {
        Self::new(head_dim, &[position])
    }

    /// Rotates every head of row `r` in place: `x` has `num_heads * head_dim` entries.
    pub fn rotate<T: Real>(&self, r: usize, x: &mut [T]) {
        self.apply(r, x, 1.0);
    }

    /// Inverse rotation (transpose), used to back-propagate through [`Self::rotate`].
    pub fn unrotate<T: Real>(&self, r: usize, x: &mut [T]) {
        self.apply(r, x, -1.0);
    }

    fn apply<T: Real>(&self, r: usize, x: &mut [T], sign: f64) {
        let hd = self.half * 2;
        let cos = &self.cos[r * self.half..(r + 1) * self.half];
        let sin = &self.sin[r * self.half..(r + 1) * self.half];
        for head in x.chunks_exact_mut(hd) {
            for i in 0..self.half {
                let (c, s) = (T::from_f64(cos[i]), T::from_f64(sign * sin[i]));
                let (a, b) = (head[2 * i], head[2 * i + 1]);
                head[2 * i] = a * c - b * s;
                head[2 * i + 1] = a * s + b * c;
            }
        }
    }
}

fn frequency(pair: usize, head_dim: usize) -> f64 {
    ROPE_BASE.powf(-(2.0 * pair as f64) / head_dim as f64)
}
