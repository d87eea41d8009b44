use crate::layout::{SequenceLayout, SlotKind};
use crate::masks::{fill_row, Pattern};
use crate::model::{attend_segments, KeySegment, KvCache, StepKind};
use crate::tensor::Real;

/// A decoding cache that is told which slot comes next before the blocks run.
pub trait DecodeCache<T: Real>: KvCache<T> {
    /// Prepares for decoding slot `q` of `layout`; only `layout.slots()[..=q]` is read.
    fn begin(&mut self, layout: &SequenceLayout, q: usize);

    /// Number of key/value rows currently retained per block.
    fn len(&self) -> usize;

    /// Rows held while the most recent slot attended, its own row included.
    fn attended(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Keeps every key/value and hides keys purely through the mask row of the
/// current slot.
pub struct FullCache<T> {
    dim: usize,
    num_heads: usize,
    pattern: Pattern,
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    row: Vec<bool>,
}

impl<T: Real> FullCache<T> {
    pub fn new(dim: usize, num_heads: usize, num_blocks: usize, pattern: Pattern) -> Self {
        Self {
            dim,
            num_heads,
            pattern,
            keys: vec![Vec::new(); num_blocks],
            values: vec![Vec::new(); num_blocks],
            row: Vec::new(),
        }
    }
}

impl<T: Real> KvCache<T> for FullCache<T> {
    fn attend(&mut self, block: usize, q: &[T], k: &[T], v: &[T], out: &mut [T]) {
        self.keys[block].extend_from_slice(k);
        self.values[block].extend_from_slice(v);
        let seg = KeySegment { keys: &self.keys[block], values: &self.values[block], visible: Some(&self.row) };
        attend_segments(q, &[seg], self.num_heads, out);
    }
}

impl<T: Real> DecodeCache<T> for FullCache<T> {
    fn begin(&mut self, layout: &SequenceLayout, q: usize) {
        debug_assert_eq!(self.keys[0].len() / self.dim, q);
        self.row.clear();
        self.row.resize(q + 1, false);
        fill_row(&layout.slots()[..=q], q, self.pattern, &mut self.row);
    }

    fn len(&self) -> usize {
        self.keys[0].len() / self.dim
    }

    fn attended(&self) -> usize {
        self.len()
    }
}

/// Fixed-capacity FIFO of rows.
#[derive(Clone, Debug)]
struct Ring<T> {
    dim: usize,
    cap: usize,
    head: usize,
    len: usize,
    data: Vec<T>,
}

impl<T: Real> Ring<T> {
    fn new(dim: usize, cap: usize) -> Self {
        Self { dim, cap, head: 0, len: 0, data: vec![T::zero(); dim * cap] }
    }

    fn push(&mut self, row: &[T]) {
        assert!(self.len < self.cap, "ring overflow");
        let slot = (self.head + self.len) % self.cap;
        self.data[slot * self.dim..(slot + 1) * self.dim].copy_from_slice(row);
        self.len += 1;
    }

    fn pop_front(&mut self) {
        self.head = (self.head + 1) % self.cap;
        self.len -= 1;
    }

    /// The newest `n` rows in chronological order, as at most two slices.
    fn newest(&self, n: usize) -> [&[T]; 2] {
        let n = n.min(self.len);
        let start = (self.head + self.len - n) % self.cap;
        let d = self.dim;
        if start + n <= self.cap {
            [&self.data[start * d..(start + n) * d], &[]]
        } else {
            [&self.data[start * d..], &self.data[..(start + n - self.cap) * d]]
        }
    }
}

struct BlockStore<T> {
    prompt_k: Vec<T>,
    prompt_v: Vec<T>,
    w_k: Vec<T>,
    w_v: Vec<T>,
    ring_k: Ring<T>,
    ring_v: Ring<T>,
}

/// Cache with eviction: the prompt, every `W` slot, and the most recent
/// `n_ar` raw slots. Keys are stored already rotated, so survivors keep the
/// positions they were written at.
pub struct EvictionCache<T> {
    dim: usize,
    num_heads: usize,
    n_ar: usize,
    g: usize,
    blocks: Vec<BlockStore<T>>,
    step: StepKind,
    prompt_pos: Vec<usize>,
    w_pos: Vec<usize>,
    ring_pos: std::collections::VecDeque<usize>,
    current: usize,
    attended: usize,
}

impl<T: Real> EvictionCache<T> {
    pub fn new(dim: usize, num_heads: usize, num_blocks: usize, n_ar: usize, g: usize) -> Self {
        let blocks = (0..num_blocks)
            .map(|_| BlockStore {
                prompt_k: Vec::new(),
                prompt_v: Vec::new(),
                w_k: Vec::new(),
                w_v: Vec::new(),
                ring_k: Ring::new(dim, n_ar + 1),
                ring_v: Ring::new(dim, n_ar + 1),
            })
            .collect();
        Self {
            dim,
            num_heads,
            n_ar,
            g,
            blocks,
            step: StepKind::Prompt,
            prompt_pos: Vec::new(),
            w_pos: Vec::new(),
            ring_pos: Default::default(),
            current: 0,
            attended: 0,
        }
    }

    /// Retained rows per segment: `(prompt, w, raw)`.
    pub fn segment_lens(&self) -> (usize, usize, usize) {
        (self.prompt_pos.len(), self.w_pos.len(), self.ring_pos.len())
    }

    /// Absolute positions of the retained rows, prompt then `W` then raw.
    pub fn positions(&self) -> Vec<usize> {
        self.prompt_pos.iter().chain(&self.w_pos).chain(&self.ring_pos).copied().collect()
    }
}

impl<T: Real> KvCache<T> for EvictionCache<T> {
    fn attend(&mut self, block: usize, q: &[T], k: &[T], v: &[T], out: &mut [T]) {
        let last = block + 1 == self.blocks.len();
        let st = &mut self.blocks[block];
        let held = |st: &BlockStore<T>, dim: usize| (st.prompt_k.len() + st.w_k.len()) / dim + st.ring_k.len;
        let seg = |keys, values| KeySegment { keys, values, visible: None };
        match self.step {
            StepKind::Prompt => {
                st.prompt_k.extend_from_slice(k);
                st.prompt_v.extend_from_slice(v);
                attend_segments(q, &[seg(&st.prompt_k[..], &st.prompt_v[..])], self.num_heads, out);
                if block == 0 {
                    self.attended = held(st, self.dim);
                }
            }
            StepKind::Raw => {
                st.ring_k.push(k);
                st.ring_v.push(v);
                let [k0, k1] = st.ring_k.newest(self.n_ar + 1);
                let [v0, v1] = st.ring_v.newest(self.n_ar + 1);
                let segs = [
                    seg(&st.prompt_k[..], &st.prompt_v[..]),
                    seg(&st.w_k[..], &st.w_v[..]),
                    seg(k0, v0),
                    seg(k1, v1),
                ];
                attend_segments(q, &segs, self.num_heads, out);
                if block == 0 {
                    self.attended = held(st, self.dim);
                }
                if st.ring_k.len > self.n_ar {
                    st.ring_k.pop_front();
                    st.ring_v.pop_front();
                }
            }
            StepKind::W => {
                let [k0, k1] = st.ring_k.newest(self.g);
                let [v0, v1] = st.ring_v.newest(self.g);
                attend_segments(q, &[seg(k0, v0), seg(k1, v1)], self.num_heads, out);
                st.w_k.extend_from_slice(k);
                st.w_v.extend_from_slice(v);
                if block == 0 {
                    self.attended = held(st, self.dim);
                }
            }
        }
        if last {
            match self.step {
                StepKind::Prompt => self.prompt_pos.push(self.current),
                StepKind::Raw => {
                    self.ring_pos.push_back(self.current);
                    if self.ring_pos.len() > self.n_ar {
                        self.ring_pos.pop_front();
                    }
                }
                StepKind::W => self.w_pos.push(self.current),
            }
        }
    }
}

impl<T: Real> DecodeCache<T> for EvictionCache<T> {
    fn begin(&mut self, layout: &SequenceLayout, q: usize) {
        self.current = q;
        self.step = match layout.slots()[q].kind {
            SlotKind::TextPrompt | SlotKind::SpeechPrompt | SlotKind::Bos => StepKind::Prompt,
            SlotKind::Raw => StepKind::Raw,
            SlotKind::W => StepKind::W,
            SlotKind::Eos => panic!("EOS is never fed while decoding"),
        };
    }

    fn len(&self) -> usize {
        let st = &self.blocks[0];
        (st.prompt_k.len() + st.w_k.len()) / self.dim + st.ring_k.len
    }

    fn attended(&self) -> usize {
        self.attended
    }
}
