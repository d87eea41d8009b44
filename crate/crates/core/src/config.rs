//! Hyperparameters, vocabulary and the flat run-configuration file.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};

/// Which attention pattern the AR decoder is trained and decoded with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Full causal attention over prompt and every speech token.
    Dense,
    /// Prompt plus a causal window of the last `n_ar` speech tokens.
    Window,
    /// Window plus one compressed token per completed span of `g` tokens.
    Cf,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Dense, Mode::Window, Mode::Cf];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Dense => "dense",
            Mode::Window => "window",
            Mode::Cf => "cf",
        }
    }

    pub(crate) fn code(self) -> u32 {
        match self {
            Mode::Dense => 0,
            Mode::Window => 1,
            Mode::Cf => 2,
        }
    }

    pub(crate) fn from_code(code: u32) -> Option<Mode> {
        Mode::ALL.into_iter().find(|m| m.code() == code)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(Mode::Dense),
            "window" => Ok(Mode::Window),
            "cf" => Ok(Mode::Cf),
            other => Err(config_err!("unknown mode {other:?} (expected dense, window or cf)")),
        }
    }
}

/// Compressed tokens per second of speech, `frame_rate / g`, kept as a
/// reduced fraction so non-integer rates stay exact.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CompressionRate {
    pub num: usize,
    pub den: usize,
}

impl CompressionRate {
    fn new(num: usize, den: usize) -> Self {
        let g = gcd(num, den);
        Self { num: num / g, den: den / g }
    }

    pub fn as_integer(self) -> Option<usize> {
        (self.den == 1).then_some(self.num)
    }

    pub fn as_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl fmt::Display for CompressionRate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.as_integer() {
            Some(n) => write!(f, "{n}"),
            None => write!(f, "{}/{}", self.num, self.den),
        }
    }
}

fn gcd(mut a: usize, mut b: usize) -> usize {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Compressed-to-fine hyperparameters. Window sizes count raw speech
/// tokens only; compressed slots consume sequence positions but no window
/// budget.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CfConfig {
    g: usize,
    n_ar: usize,
    n_nar: Option<usize>,
    frame_rate: usize,
    mode: Mode,
}

impl CfConfig {
    pub fn new(
        g: usize,
        n_ar: usize,
        n_nar: Option<usize>,
        frame_rate: usize,
        mode: Mode,
    ) -> Result<Self> {
        if g == 0 {
            return Err(config_err!("span size g must be positive"));
        }
        if n_ar == 0 {
            return Err(config_err!("causal window n_ar must be positive"));
        }
        if n_nar == Some(0) {
            return Err(config_err!("bidirectional window n_nar must be positive when set"));
        }
        if frame_rate == 0 {
            return Err(config_err!("frame_rate must be positive"));
        }
        // Tokens older than the window must sit inside a completed span.
        if mode == Mode::Cf && n_ar < g {
            return Err(config_err!(
                "cf mode requires n_ar >= g (n_ar = {n_ar}, g = {g}): older tokens would be uncovered"
            ));
        }
        Ok(Self { g, n_ar, n_nar, frame_rate, mode })
    }

    pub fn g(&self) -> usize {
        self.g
    }
    pub fn n_ar(&self) -> usize {
        self.n_ar
    }
    pub fn n_nar(&self) -> Option<usize> {
        self.n_nar
    }
    pub fn frame_rate(&self) -> usize {
        self.frame_rate
    }
    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn compression_rate(&self) -> CompressionRate {
        CompressionRate::new(self.frame_rate, self.g)
    }

    /// Same hyperparameters under another mode.
    pub fn with_mode(&self, mode: Mode) -> Result<Self> {
        Self::new(self.g, self.n_ar, self.n_nar, self.frame_rate, mode)
    }

    pub fn with_g(&self, g: usize) -> Result<Self> {
        Self::new(g, self.n_ar, self.n_nar, self.frame_rate, self.mode)
    }

    pub fn with_n_ar(&self, n_ar: usize) -> Result<Self> {
        Self::new(self.g, n_ar, self.n_nar, self.frame_rate, self.mode)
    }

    pub fn with_n_nar(&self, n_nar: Option<usize>) -> Result<Self> {
        Self::new(self.g, self.n_ar, n_nar, self.frame_rate, self.mode)
    }

    /// Whether compressed slots are interleaved into the sequence.
    pub fn compresses(&self) -> bool {
        self.mode == Mode::Cf
    }
}

/// Number of completed long-range spans fully outside the causal window
/// when predicting raw token `t`: `max(0, ⌊(t − n_ar) / g⌋)`.
pub fn span_count(t: usize, cfg: &CfConfig) -> usize {
    t.saturating_sub(cfg.n_ar) / cfg.g
}

/// Reserved non-codeword tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Special {
    Bos,
    Eos,
    Pad,
    /// The compressed span token.
    W,
}

impl Special {
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        match self {
            Special::Bos => 0,
            Special::Eos => 1,
            Special::Pad => 2,
            Special::W => 3,
        }
    }
}

/// An input token of the AR decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Token {
    Text(u32),
    /// First-layer codeword.
    Speech(u32),
    Special(Special),
}

/// Symbol inventory. Codewords and text ids live in separate embedding
/// tables; specials have their own table, so the ranges never collide.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub text_size: usize,
    pub speech_size: usize,
    pub num_layers: usize,
}

impl Vocabulary {
    pub fn new(text_size: usize, speech_size: usize, num_layers: usize) -> Result<Self> {
        if text_size == 0 || speech_size == 0 {
            return Err(config_err!("vocabulary sizes must be positive"));
        }
        if num_layers == 0 {
            return Err(config_err!("num_layers must be at least 1"));
        }
        Ok(Self { text_size, speech_size, num_layers })
    }

    /// Output class of the AR head that stands for end-of-sequence.
    pub fn eos_class(&self) -> usize {
        self.speech_size
    }

    /// Classes of the AR head: every codeword plus EOS.
    pub fn ar_classes(&self) -> usize {
        self.speech_size + 1
    }

    pub fn check(&self, token: Token) -> Result<()> {
        match token {
            Token::Text(id) if id as usize >= self.text_size => {
                Err(Error::Token(format!("text id {id} >= text_size {}", self.text_size)))
            }
            Token::Speech(id) if id as usize >= self.speech_size => {
                Err(Error::Token(format!("speech id {id} >= speech_size {}", self.speech_size)))
            }
            _ => Ok(()),
        }
    }

    pub fn check_speech(&self, id: u32) -> Result<()> {
        self.check(Token::Speech(id))
    }
}

/// Transformer shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub ffn_mult: usize,
    pub max_positions: usize,
    pub num_layers: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.num_blocks == 0 || self.num_heads == 0 || self.ffn_mult == 0 {
            return Err(config_err!("model sizes must be positive: {self:?}"));
        }
        if self.dim % self.num_heads != 0 {
            return Err(config_err!(
                "dim {} is not divisible by num_heads {}",
                self.dim,
                self.num_heads
            ));
        }
        if self.head_dim() % 2 != 0 {
            return Err(config_err!("head dim {} must be even for rotary encoding", self.head_dim()));
        }
        if self.num_layers == 0 {
            return Err(config_err!("num_layers must be at least 1"));
        }
        if self.max_positions == 0 {
            return Err(config_err!("max_positions must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.num_heads
    }

    pub fn ffn_dim(&self) -> usize {
        self.dim * self.ffn_mult
    }
}

pub const DEFAULT_MAX_POSITIONS: usize = 8192;

/// Contents of a run configuration file. Flat `key = value` lines (TOML
/// syntax); unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub g: usize,
    pub n_ar: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_nar: Option<usize>,
    pub frame_rate: usize,
    pub mode: Mode,
    #[serde(default = "defaults::dim")]
    pub dim: usize,
    #[serde(default = "defaults::num_blocks")]
    pub num_blocks: usize,
    #[serde(default = "defaults::num_heads")]
    pub num_heads: usize,
    #[serde(default = "defaults::ffn_mult")]
    pub ffn_mult: usize,
    #[serde(default = "defaults::num_layers")]
    pub num_layers: usize,
    #[serde(default)]
    pub seed: u64,
}

mod defaults {
    pub fn dim() -> usize {
        64
    }
    pub fn num_blocks() -> usize {
        2
    }
    pub fn num_heads() -> usize {
        4
    }
    pub fn ffn_mult() -> usize {
        2
    }
    pub fn num_layers() -> usize {
        1
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let rc: RunConfig = toml::from_str(text)?;
        rc.cf()?;
        rc.model().validate()?;
        Ok(rc)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("flat config always serializes")
    }

    pub fn cf(&self) -> Result<CfConfig> {
        CfConfig::new(self.g, self.n_ar, self.n_nar, self.frame_rate, self.mode)
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            dim: self.dim,
            num_blocks: self.num_blocks,
            num_heads: self.num_heads,
            ffn_mult: self.ffn_mult,
            max_positions: DEFAULT_MAX_POSITIONS,
            num_layers: self.num_layers,
        }
    }
}
