//! The interleaved position map every mask, target plan and cache is built from:
//!
//! ```text
//! [text prompt | speech prompt | BOS | raw speech tokens with W slots | EOS]
//! ```
//!
//! In cf mode a `W` slot follows every completed span of `g` raw slots. A
//! trailing partial span gets no `W`; with `n_ar >= g` it always lies inside
//! the causal window.

use crate::config::{CfConfig, Mode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SlotKind {
    TextPrompt,
    SpeechPrompt,
    Bos,
    Raw,
    W,
    Eos,
}

impl SlotKind {
    pub fn is_prompt(self) -> bool {
        matches!(self, SlotKind::TextPrompt | SlotKind::SpeechPrompt | SlotKind::Bos)
    }

    /// Single-letter code used in debug dumps.
    pub fn code(self) -> char {
        match self {
            SlotKind::TextPrompt => 'T',
            SlotKind::SpeechPrompt => 'P',
            SlotKind::Bos => 'B',
            SlotKind::Raw => 'c',
            SlotKind::W => 'W',
            SlotKind::Eos => 'E',
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Slot {
    /// 0-based sequence index, also the rotary position.
    pub position: usize,
    pub kind: SlotKind,
    /// Index among raw generated tokens. EOS carries the index it would
    /// have had as the next raw token (`gen_len`).
    pub raw_index: Option<usize>,
    /// Span index `j` for `W` slots.
    pub span: Option<usize>,
}

/// Slot sequence of one training or decoding sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceLayout {
    slots: Vec<Slot>,
    text_len: usize,
    speech_prompt_len: usize,
    raw_count: usize,
    g: usize,
    compress: bool,
    closed: bool,
}

impl SequenceLayout {
    /// Prompt and BOS only; raw slots are appended with [`Self::push_raw`].
    pub fn prompt(text_len: usize, speech_prompt_len: usize, cfg: &CfConfig) -> Self {
        let mut slots = Vec::with_capacity(text_len + speech_prompt_len + 1);
        let kinds = std::iter::repeat(SlotKind::TextPrompt)
            .take(text_len)
            .chain(std::iter::repeat(SlotKind::SpeechPrompt).take(speech_prompt_len))
            .chain(std::iter::once(SlotKind::Bos));
        for (position, kind) in kinds.enumerate() {
            slots.push(Slot { position, kind, raw_index: None, span: None });
        }
        Self {
            slots,
            text_len,
            speech_prompt_len,
            raw_count: 0,
            g: cfg.g(),
            compress: cfg.mode() == Mode::Cf,
            closed: false,
        }
    }

    /// Appends the next raw slot, followed by a `W` slot when it completes
    /// a span. Returns the number of slots added (1 or 2).
    pub fn push_raw(&mut self) -> usize {
        assert!(!self.closed, "layout already has EOS");
        let raw_index = self.raw_count;
        self.push(SlotKind::Raw, Some(raw_index), None);
        self.raw_count += 1;
        if self.compress && self.raw_count % self.g == 0 {
            let span = self.raw_count / self.g - 1;
            self.push(SlotKind::W, None, Some(span));
            2
        } else {
            1
        }
    }

    pub fn push_eos(&mut self) {
        assert!(!self.closed, "layout already has EOS");
        self.push(SlotKind::Eos, Some(self.raw_count), None);
        self.closed = true;
    }

    fn push(&mut self, kind: SlotKind, raw_index: Option<usize>, span: Option<usize>) {
        let position = self.slots.len();
        self.slots.push(Slot { position, kind, raw_index, span });
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn slot(&self, i: usize) -> &Slot {
        &self.slots[i]
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn text_len(&self) -> usize {
        self.text_len
    }

    pub fn speech_prompt_len(&self) -> usize {
        self.speech_prompt_len
    }

    /// Number of prompt slots including BOS (`N_p`).
    pub fn n_prompt(&self) -> usize {
        self.text_len + self.speech_prompt_len + 1
    }

    pub fn raw_count(&self) -> usize {
        self.raw_count
    }

    pub fn w_count(&self) -> usize {
        self.slots.iter().filter(|s| s.kind == SlotKind::W).count()
    }

    pub fn g(&self) -> usize {
        self.g
    }

    pub fn compresses(&self) -> bool {
        self.compress
    }

    pub fn has_eos(&self) -> bool {
        self.closed
    }

    pub fn kinds(&self) -> Vec<SlotKind> {
        self.slots.iter().map(|s| s.kind).collect()
    }

    /// Position of the raw slot with the given raw index.
    pub fn raw_position(&self, raw_index: usize) -> usize {
        assert!(raw_index < self.raw_count);
        let w_before = if self.compress { raw_index / self.g } else { 0 };
        self.n_prompt() + raw_index + w_before
    }

    /// Position of `W_j`.
    pub fn w_position(&self, span: usize) -> usize {
        self.n_prompt() + (span + 1) * self.g + span
    }

    pub fn debug_string(&self) -> String {
        self.slots.iter().map(|s| s.kind.code()).collect()
    }
}

/// Full training layout: prompt, BOS, `gen_len` raw slots with interleaved
/// `W` slots (cf mode only), then EOS.
pub fn build_layout(
    text_len: usize,
    speech_prompt_len: usize,
    gen_len: usize,
    cfg: &CfConfig,
) -> SequenceLayout {
    let mut layout = build_open_layout(text_len, speech_prompt_len, gen_len, cfg);
    layout.push_eos();
    layout
}

/// Same as [`build_layout`] without the trailing EOS, as seen while decoding.
pub fn build_open_layout(
    text_len: usize,
    speech_prompt_len: usize,
    gen_len: usize,
    cfg: &CfConfig,
) -> SequenceLayout {
    let mut layout = SequenceLayout::prompt(text_len, speech_prompt_len, cfg);
    for _ in 0..gen_len {
        layout.push_raw();
    }
    layout
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Mode;
    use proptest::prelude::*;
    use SlotKind::*;

    fn cfg(g: usize, mode: Mode) -> CfConfig {
        CfConfig::new(g, g.max(4), None, 50, mode).unwrap()
    }

    #[test]
    fn cf_example_interleaving() {
        let l = build_layout(2, 0, 5, &cfg(2, Mode::Cf));
        assert_eq!(
            l.kinds(),
            vec![TextPrompt, TextPrompt, Bos, Raw, Raw, W, Raw, Raw, W, Raw, Eos]
        );
        assert_eq!(l.debug_string(), "TTBccWccWcE");
        assert_eq!(l.slot(5).span, Some(0));
        assert_eq!(l.slot(8).span, Some(1));
        assert_eq!(l.slot(10).raw_index, Some(5));
    }

    #[test]
    fn dense_has_no_w() {
        let l = build_layout(2, 0, 5, &cfg(2, Mode::Dense));
        assert_eq!(l.len(), 9);
        assert_eq!(l.w_count(), 0);
    }

    #[test]
    fn empty_generation() {
        let l = build_layout(3, 2, 0, &cfg(2, Mode::Cf));
        assert_eq!(l.debug_string(), "TTTPPBE");
        assert_eq!(l.n_prompt(), 6);
    }

    #[test]
    fn exact_multiple_ends_with_w_then_eos() {
        let l = build_layout(1, 0, 4, &cfg(2, Mode::Cf));
        assert_eq!(l.debug_string(), "TBccWccWE");
    }

    proptest! {
        #[test]
        fn layout_invariants(
            text in 0usize..6, prompt in 0usize..6, gen in 0usize..60, g in 1usize..9,
            cf in any::<bool>(),
        ) {
            let mode = if cf { Mode::Cf } else { Mode::Window };
            let cfg = cfg(g, mode);
            let l = build_layout(text, prompt, gen, &cfg);

            let w_expected = if cf { gen / g } else { 0 };
            prop_assert_eq!(l.w_count(), w_expected);
            prop_assert_eq!(l.len(), text + prompt + 1 + gen + w_expected + 1);

            // closed-form W positions against enumeration
            let w_positions: Vec<usize> =
                l.slots().iter().filter(|s| s.kind == W).map(|s| s.position).collect();
            let closed: Vec<usize> =
                (0..w_expected).map(|j| text + prompt + 1 + (j + 1) * g + j).collect();
            prop_assert_eq!(&w_positions, &closed);
            for (j, &p) in w_positions.iter().enumerate() {
                prop_assert_eq!(l.w_position(j), p);
                prop_assert_eq!(l.slot(p).span, Some(j));
                // W follows the last raw slot of its span
                prop_assert_eq!(l.slot(p - 1).raw_index, Some((j + 1) * g - 1));
            }

            // raw indices strictly increase, positions are dense
            let raws: Vec<&Slot> = l.slots().iter().filter(|s| s.kind == Raw).collect();
            prop_assert_eq!(raws.len(), gen);
            for (i, s) in raws.iter().enumerate() {
                prop_assert_eq!(s.raw_index, Some(i));
                prop_assert_eq!(l.raw_position(i), s.position);
            }
            for (i, s) in l.slots().iter().enumerate() {
                prop_assert_eq!(s.position, i);
                if s.kind.is_prompt() { prop_assert!(i < l.n_prompt()); }
            }

            // stripping W/BOS/EOS and prompt recovers the raw count
            let stripped = l.slots().iter()
                .filter(|s| !matches!(s.kind, W | Bos | Eos | TextPrompt | SpeechPrompt))
                .count();
            prop_assert_eq!(stripped, gen);
        }
    }
}
