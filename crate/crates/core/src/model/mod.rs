//! Minimal pre-norm decoder transformer shared by the AR and NAR decoders:
//! rotary positions, masked multi-head attention, SiLU-gated feed-forward,
//! no bias terms.

mod decode;
mod forward;
pub mod rope;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::{ModelConfig, Special, Token, Vocabulary};
use crate::error::{Error, Result};
use crate::tensor::{Mat, Real};

pub use decode::{attend_segments, decode_step, KeySegment, KvCache, StepKind};
pub use forward::{
    backward, forward, masked_attention, output_logits, scores_for_positions, AttentionProbs,
    ForwardPass,
};

/// Which decoder a parameter set belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    /// Autoregressive first-layer decoder; one head over codewords + EOS.
    Ar,
    /// Non-autoregressive refiner; one head per layer `2..=L`.
    Nar,
}

impl Role {
    pub(crate) fn tag(self) -> &'static str {
        match self {
            Role::Ar => "ar",
            Role::Nar => "nar",
        }
    }
}

/// One embedding lookup contributing to a slot's input vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmbRef {
    Text(u32),
    /// Codeword of codebook `layer` (0-based).
    Speech { layer: usize, id: u32 },
    Special(Special),
    /// NAR target-layer embedding (0-based layer index).
    LayerIndex(usize),
}

/// Sum of embeddings forming one input slot.
pub type InputSlot = Vec<EmbRef>;

impl From<Token> for EmbRef {
    fn from(t: Token) -> Self {
        match t {
            Token::Text(id) => EmbRef::Text(id),
            Token::Speech(id) => EmbRef::Speech { layer: 0, id },
            Token::Special(s) => EmbRef::Special(s),
        }
    }
}

pub fn ar_inputs(tokens: &[Token]) -> Vec<InputSlot> {
    tokens.iter().map(|&t| vec![EmbRef::from(t)]).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<T> {
    pub attn_norm: Mat<T>,
    pub wq: Mat<T>,
    pub wk: Mat<T>,
    pub wv: Mat<T>,
    pub wo: Mat<T>,
    pub ffn_norm: Mat<T>,
    pub w_gate: Mat<T>,
    pub w_up: Mat<T>,
    pub w_down: Mat<T>,
}

/// All trainable tensors of one decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters<T> {
    pub role: Role,
    pub model: ModelConfig,
    pub vocab: Vocabulary,
    pub text_emb: Mat<T>,
    /// One table per codebook layer the decoder reads.
    pub speech_emb: Vec<Mat<T>>,
    /// Rows indexed by [`Special::index`]; the `W` row is trainable like any other.
    pub special_emb: Mat<T>,
    pub layer_emb: Option<Mat<T>>,
    pub blocks: Vec<BlockParams<T>>,
    pub final_norm: Mat<T>,
    pub heads: Vec<Mat<T>>,
}

impl<T: Real> Parameters<T> {
    /// Random initialization; every tensor is a pure function of `seed`.
    pub fn init(role: Role, model: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        model.validate()?;
        if model.num_layers != vocab.num_layers {
            return Err(Error::Config(format!(
                "model num_layers {} != vocabulary num_layers {}",
                model.num_layers, vocab.num_layers
            )));
        }
        if role == Role::Nar && vocab.num_layers < 2 {
            return Err(Error::Config("NAR decoder needs at least two codebook layers".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = model.dim;
        let f = model.ffn_dim();
        let mut normal = |rows: usize, cols: usize, std: f64| -> Mat<T> {
            let dist = Normal::new(0.0, std).unwrap();
            Mat::from_vec(rows, cols, (0..rows * cols).map(|_| T::from_f64(dist.sample(&mut rng))).collect())
        };
        let ones = |n: usize| Mat::from_vec(1, n, vec![T::one(); n]);
        let proj = 1.0 / (d as f64).sqrt();
        let resid = proj / (2.0 * model.num_blocks as f64).sqrt();

        let speech_tables = match role {
            Role::Ar => 1,
            Role::Nar => vocab.num_layers,
        };
        let text_emb = normal(vocab.text_size, d, 1.0);
        let speech_emb = (0..speech_tables).map(|_| normal(vocab.speech_size, d, 1.0)).collect();
        let special_emb = normal(Special::COUNT, d, 1.0);
        let layer_emb = (role == Role::Nar).then(|| normal(vocab.num_layers, d, 1.0));
        let blocks = (0..model.num_blocks)
            .map(|_| BlockParams {
                attn_norm: ones(d),
                wq: normal(d, d, proj),
                wk: normal(d, d, proj),
                wv: normal(d, d, proj),
                wo: normal(d, d, resid),
                ffn_norm: ones(d),
                w_gate: normal(d, f, proj),
                w_up: normal(d, f, proj),
                w_down: normal(f, d, resid / (model.ffn_mult as f64).sqrt()),
            })
            .collect();
        let final_norm = ones(d);
        let heads = match role {
            Role::Ar => vec![normal(d, vocab.ar_classes(), proj)],
            Role::Nar => (1..vocab.num_layers).map(|_| normal(d, vocab.speech_size, proj)).collect(),
        };
        Ok(Self {
            role,
            model,
            vocab,
            text_emb,
            speech_emb,
            special_emb,
            layer_emb,
            blocks,
            final_norm,
            heads,
        })
    }

    /// Same shapes, all zeros. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.for_each_mut(|_, m| m.fill_zero());
        z
    }

    /// Visits every tensor with its stable name, in a fixed order.
    pub fn for_each(&self, mut f: impl FnMut(&str, &Mat<T>)) {
        f("text_emb", &self.text_emb);
        for (l, m) in self.speech_emb.iter().enumerate() {
            f(&format!("speech_emb.{l}"), m);
        }
        f("special_emb", &self.special_emb);
        if let Some(m) = &self.layer_emb {
            f("layer_emb", m);
        }
        for (b, blk) in self.blocks.iter().enumerate() {
            for (name, m) in [
                ("attn_norm", &blk.attn_norm),
                ("wq", &blk.wq),
                ("wk", &blk.wk),
                ("wv", &blk.wv),
                ("wo", &blk.wo),
                ("ffn_norm", &blk.ffn_norm),
                ("w_gate", &blk.w_gate),
                ("w_up", &blk.w_up),
                ("w_down", &blk.w_down),
            ] {
                f(&format!("blocks.{b}.{name}"), m);
            }
        }
        f("final_norm", &self.final_norm);
        for (i, m) in self.heads.iter().enumerate() {
            f(&format!("head.{i}"), m);
        }
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut Mat<T>)) {
        f("text_emb", &mut self.text_emb);
        for (l, m) in self.speech_emb.iter_mut().enumerate() {
            f(&format!("speech_emb.{l}"), m);
        }
        f("special_emb", &mut self.special_emb);
        if let Some(m) = &mut self.layer_emb {
            f("layer_emb", m);
        }
        for (b, blk) in self.blocks.iter_mut().enumerate() {
            for (name, m) in [
                ("attn_norm", &mut blk.attn_norm),
                ("wq", &mut blk.wq),
                ("wk", &mut blk.wk),
                ("wv", &mut blk.wv),
                ("wo", &mut blk.wo),
                ("ffn_norm", &mut blk.ffn_norm),
                ("w_gate", &mut blk.w_gate),
                ("w_up", &mut blk.w_up),
                ("w_down", &mut blk.w_down),
            ] {
                f(&format!("blocks.{b}.{name}"), m);
            }
        }
        f("final_norm", &mut self.final_norm);
        for (i, m) in self.heads.iter_mut().enumerate() {
            f(&format!("head.{i}"), m);
        }
    }

    /// Flat views of all tensors, in visiting order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Mat<T>> {
        let mut out: Vec<&mut Mat<T>> = Vec::new();
        out.push(&mut self.text_emb);
        out.extend(self.speech_emb.iter_mut());
        out.push(&mut self.special_emb);
        if let Some(m) = &mut self.layer_emb {
            out.push(m);
        }
        for blk in &mut self.blocks {
            out.extend([
                &mut blk.attn_norm,
                &mut blk.wq,
                &mut blk.wk,
                &mut blk.wv,
                &mut blk.wo,
                &mut blk.ffn_norm,
                &mut blk.w_gate,
                &mut blk.w_up,
                &mut blk.w_down,
            ]);
        }
        out.push(&mut self.final_norm);
        out.extend(self.heads.iter_mut());
        out
    }

    pub fn tensors(&self) -> Vec<&Mat<T>> {
        let mut out: Vec<&Mat<T>> = Vec::new();
        out.push(&self.text_emb);
        out.extend(self.speech_emb.iter());
        out.push(&self.special_emb);
        if let Some(m) = &self.layer_emb {
            out.push(m);
        }
        for blk in &self.blocks {
            out.extend([
                &blk.attn_norm,
                &blk.wq,
                &blk.wk,
                &blk.wv,
                &blk.wo,
                &blk.ffn_norm,
                &blk.w_gate,
                &blk.w_up,
                &blk.w_down,
            ]);
        }
        out.push(&self.final_norm);
        out.extend(self.heads.iter());
        out
    }

    pub fn num_scalars(&self) -> usize {
        let mut n = 0;
        self.for_each(|_, m| n += m.data.len());
        n
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.for_each(|_, m| ok &= m.is_finite());
        ok
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_assign(b);
        }
    }

    pub fn cast<U: Real>(&self) -> Parameters<U> {
        Parameters {
            role: self.role,
            model: self.model,
            vocab: self.vocab,
            text_emb: self.text_emb.cast(),
            speech_emb: self.speech_emb.iter().map(Mat::cast).collect(),
            special_emb: self.special_emb.cast(),
            layer_emb: self.layer_emb.as_ref().map(Mat::cast),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockParams {
                    attn_norm: b.attn_norm.cast(),
                    wq: b.wq.cast(),
                    wk: b.wk.cast(),
                    wv: b.wv.cast(),
                    wo: b.wo.cast(),
                    ffn_norm: b.ffn_norm.cast(),
                    w_gate: b.w_gate.cast(),
                    w_up: b.w_up.cast(),
                    w_down: b.w_down.cast(),
                })
                .collect(),
            final_norm: self.final_norm.cast(),
            heads: self.heads.iter().map(Mat::cast).collect(),
        }
    }

    pub(crate) fn check_input(&self, slot: &InputSlot) -> Result<()> {
        for r in slot {
            let ok = match *r {
                EmbRef::Text(id) => (id as usize) < self.text_emb.rows,
                EmbRef::Speech { layer, id } => {
                    layer < self.speech_emb.len() && (id as usize) < self.speech_emb[layer].rows
                }
                EmbRef::Special(_) => true,
                EmbRef::LayerIndex(l) => self.layer_emb.as_ref().is_some_and(|m| l < m.rows),
            };
            if !ok {
                return Err(Error::Token(format!("{r:?} is outside the {:?} decoder's tables", self.role)));
            }
        }
        Ok(())
    }

    pub(crate) fn embed_into(&self, slot: &InputSlot, out: &mut [T]) {
        out.iter_mut().for_each(|x| *x = T::zero());
        for r in slot {
            let row = match *r {
                EmbRef::Text(id) => self.text_emb.row(id as usize),
                EmbRef::Speech { layer, id } => self.speech_emb[layer].row(id as usize),
                EmbRef::Special(s) => self.special_emb.row(s.index()),
                EmbRef::LayerIndex(l) => self.layer_emb.as_ref().unwrap().row(l),
            };
            for (o, &x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
    }

    pub(crate) fn embed_backward(&self, grads: &mut Self, slot: &InputSlot, dx: &[T]) {
        for r in slot {
            let row = match *r {
                EmbRef::Text(id) => grads.text_emb.row_mut(id as usize),
                EmbRef::Speech { layer, id } => grads.speech_emb[layer].row_mut(id as usize),
                EmbRef::Special(s) => grads.special_emb.row_mut(s.index()),
                EmbRef::LayerIndex(l) => grads.layer_emb.as_mut().unwrap().row_mut(l),
            };
            for (g, &d) in row.iter_mut().zip(dx) {
                *g += d;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(role: Role, layers: usize) -> Parameters<f32> {
        let model = ModelConfig {
            dim: 16,
            num_blocks: 2,
            num_heads: 2,
            ffn_mult: 2,
            max_positions: 256,
            num_layers: layers,
        };
        Parameters::init(role, model, Vocabulary::new(5, 7, layers).unwrap(), 3).unwrap()
    }

    #[test]
    fn shapes_follow_role() {
        let ar = small(Role::Ar, 2);
        assert_eq!(ar.speech_emb.len(), 1);
        assert_eq!(ar.heads.len(), 1);
        assert_eq!(ar.heads[0].cols, 8);
        assert!(ar.layer_emb.is_none());

        let nar = small(Role::Nar, 3);
        assert_eq!(nar.speech_emb.len(), 3);
        assert_eq!(nar.heads.len(), 2);
        assert_eq!(nar.heads[1].cols, 7);
        assert_eq!(nar.layer_emb.as_ref().unwrap().rows, 3);
    }

    #[test]
    fn nar_needs_two_layers() {
        let model = ModelConfig { dim: 8, num_blocks: 1, num_heads: 2, ffn_mult: 1, max_positions: 8, num_layers: 1 };
        assert!(Parameters::<f32>::init(Role::Nar, model, Vocabulary::new(2, 2, 1).unwrap(), 0).is_err());
    }

    #[test]
    fn init_is_seeded() {
        assert_eq!(small(Role::Ar, 1), small(Role::Ar, 1));
        let a = small(Role::Ar, 1);
        let mut names = Vec::new();
        a.for_each(|n, _| names.push(n.to_string()));
        assert_eq!(names.len(), a.tensors().len());
        assert!(names.contains(&"blocks.1.w_down".to_string()));
        assert!(a.special_emb.row(Special::W.index()).iter().any(|&x| x != 0.0));
    }
}
