//! Compressed-to-fine language modeling for speech-token prediction.

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod inference;
pub mod layout;
pub mod masks;
pub mod model;
pub mod synth;
pub mod tensor;
pub mod training;

pub use config::{span_count, CfConfig, Mode, ModelConfig, RunConfig, Special, Token, Vocabulary};
pub use error::{Error, Result};
pub use layout::{build_layout, build_open_layout, SequenceLayout, Slot, SlotKind};
pub use masks::AttentionMask;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/layout.md")]
    mod layout {}
    #[doc = include_str!("../../../book/src/decoding.md")]
    mod decoding {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/synthetic.md")]
    mod synthetic {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../book/src/formats.md")]
    mod formats {}
}
