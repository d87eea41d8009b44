use crate::model::Parameters;
use crate::tensor::Real;

/// Adam with decoupled weight decay. Norm gains (single-row tensors) are
/// not decayed.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Parameters<T>,
    v: Parameters<T>,
}

impl<T: Real> AdamW<T> {
    pub fn new(params: &Parameters<T>, betas: (f64, f64), weight_decay: f64) -> Self {
        Self {
            beta1: betas.0,
            beta2: betas.1,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, params: &mut Parameters<T>, grads: &Parameters<T>, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        let ps = params.tensors_mut();
        let gs = grads.tensors();
        let ms = self.m.tensors_mut();
        let vs = self.v.tensors_mut();
        for (((p, g), m), v) in ps.into_iter().zip(gs).zip(ms).zip(vs) {
            let decay = if p.rows > 1 { wd } else { 0.0 };
            for i in 0..p.data.len() {
                let gi = g.data[i].as_f64();
                let mi = b1 * m.data[i].as_f64() + (1.0 - b1) * gi;
                let vi = b2 * v.data[i].as_f64() + (1.0 - b2) * gi * gi;
                m.data[i] = T::from_f64(mi);
                v.data[i] = T::from_f64(vi);
                let pi = p.data[i].as_f64();
                let upd = (mi / bc1) / ((vi / bc2).sqrt() + eps) + decay * pi;
                p.data[i] = T::from_f64(pi - lr * upd);
            }
        }
    }
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut Parameters<T>, max_norm: f64) -> f64 {
    let norm = grads
        .tensors()
        .iter()
        .flat_map(|t| t.data.iter())
        .map(|g| g.as_f64() * g.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = T::from_f64(max_norm / norm);
        for t in grads.tensors_mut() {
            t.data.iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}
