//! Synthetic text-to-speech-token corpora with monotonic alignment and
//! tunable redundancy, plus the symbol error rate used to score generations.
//!
//! Every text symbol owns a motif of codewords that no other symbol uses.
//! A symbol is rendered by repeating each motif codeword a random number of
//! times, optionally followed by a run of silence (codeword 0). Layers
//! `2..=L` recolor layer 1 through a speaker-keyed permutation.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::ops::{Range, RangeInclusive};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::Vocabulary;
use crate::error::{config_err, Error, Result};

pub const SILENCE: u32 = 0;

/// Generator settings, read from a flat `key = value` file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub alphabet: usize,
    /// Inclusive range of codewords per motif.
    pub motif_len: [usize; 2],
    /// Inclusive range of repetitions per motif codeword.
    pub repeat: [usize; 2],
    pub silence_prob: f64,
    pub silence_run: [usize; 2],
    pub num_speakers: usize,
    pub num_layers: usize,
    pub seed: u64,
}

impl SynthSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let spec: SynthSpec = toml::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("flat spec always serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let range_ok = |r: [usize; 2], min: usize| r[0] >= min && r[0] <= r[1];
        if self.alphabet == 0 {
            return Err(config_err!("alphabet must be positive"));
        }
        if !range_ok(self.motif_len, 2) {
            return Err(config_err!("motif_len must be a nonempty range starting at 2 or more"));
        }
        if !range_ok(self.repeat, 1) {
            return Err(config_err!("repeat must be a nonempty range starting at 1 or more"));
        }
        if !range_ok(self.silence_run, 1) {
            return Err(config_err!("silence_run must be a nonempty range starting at 1 or more"));
        }
        if !(0.0..1.0).contains(&self.silence_prob) {
            return Err(config_err!("silence_prob must lie in [0, 1)"));
        }
        if self.num_speakers == 0 || self.num_layers == 0 {
            return Err(config_err!("num_speakers and num_layers must be positive"));
        }
        Ok(())
    }

    /// Derives the motif and recoloring tables from `seed`.
    pub fn tables(&self) -> Result<SynthTables> {
        self.validate()?;
        SynthTables::new(self)
    }

    pub fn expected_frames_per_symbol(&self, tables: &SynthTables) -> f64 {
        let mean_motif =
            tables.motifs.iter().map(Vec::len).sum::<usize>() as f64 / tables.motifs.len() as f64;
        let mean = |r: [usize; 2]| (r[0] + r[1]) as f64 / 2.0;
        mean_motif * mean(self.repeat) + self.silence_prob * mean(self.silence_run)
    }
}

/// Motif table, its inverse, and the per-speaker layer permutations.
#[derive(Clone, Debug)]
pub struct SynthTables {
    pub motifs: Vec<Vec<u32>>,
    /// `codeword -> (symbol, index within motif)`; `None` for silence.
    inverse: Vec<Option<(u32, usize)>>,
    /// `recolor[speaker][layer - 1][codeword]` for layers `2..=L`.
    recolor: Vec<Vec<Vec<u32>>>,
    pub speech_size: usize,
    num_layers: usize,
}

impl SynthTables {
    fn new(spec: &SynthSpec) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let lens: Vec<usize> = (0..spec.alphabet)
            .map(|_| rng.gen_range(spec.motif_len[0]..=spec.motif_len[1]))
            .collect();
        let total: usize = lens.iter().sum();
        let speech_size = total + 1;
        let mut ids: Vec<u32> = (1..speech_size as u32).collect();
        ids.shuffle(&mut rng);
        let mut inverse = vec![None; speech_size];
        let mut motifs = Vec::with_capacity(spec.alphabet);
        let mut next = ids.into_iter();
        for (sym, &len) in lens.iter().enumerate() {
            let motif: Vec<u32> = next.by_ref().take(len).collect();
            for (i, &c) in motif.iter().enumerate() {
                inverse[c as usize] = Some((sym as u32, i));
            }
            motifs.push(motif);
        }
        let recolor = (0..spec.num_speakers)
            .map(|_| {
                (1..spec.num_layers)
                    .map(|_| {
                        let mut p: Vec<u32> = (0..speech_size as u32).collect();
                        p.shuffle(&mut rng);
                        p
                    })
                    .collect()
            })
            .collect();
        Ok(Self { motifs, inverse, recolor, speech_size, num_layers: spec.num_layers })
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::new(self.motifs.len(), self.speech_size, self.num_layers)
            .expect("validated spec yields a valid vocabulary")
    }

    /// Codeword of `layer` (1-based, `>= 2`) that `speaker` uses for layer-1 codeword `c`.
    pub fn recolor(&self, speaker: u32, layer: usize, c: u32) -> u32 {
        self.recolor[speaker as usize][layer - 2][c as usize]
    }

    pub fn num_speakers(&self) -> usize {
        self.recolor.len()
    }

    /// Maps layer-1 codewords back to text symbols.
    ///
    /// Consecutive duplicates are collapsed and silences dropped; a new symbol
    /// starts whenever the motif changes or restarts. Codewords outside the
    /// table decode to [`UNKNOWN_SYMBOL`].
    pub fn decode(&self, layer1: &[u32]) -> Vec<u32> {
        let mut out = Vec::new();
        let mut prev_code = None;
        let mut current: Option<(u32, usize)> = None;
        for &c in layer1 {
            if prev_code == Some(c) {
                continue;
            }
            prev_code = Some(c);
            if c == SILENCE {
                continue;
            }
            match self.inverse.get(c as usize).copied().flatten() {
                Some((sym, idx)) => {
                    let continues = matches!(current, Some((s, i)) if s == sym && idx > i);
                    if !continues {
                        out.push(sym);
                    }
                    current = Some((sym, idx));
                }
                None => {
                    out.push(UNKNOWN_SYMBOL);
                    current = None;
                }
            }
        }
        out
    }
}

/// Decoded placeholder for a codeword no motif contains.
pub const UNKNOWN_SYMBOL: u32 = u32::MAX;

/// One corpus line.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub text: Vec<u32>,
    pub speaker: u32,
    /// `speech[layer][frame]`; every layer has the same length.
    pub speech: Vec<Vec<u32>>,
}

impl Record {
    pub fn frames(&self) -> usize {
        self.speech.first().map_or(0, Vec::len)
    }

    pub fn num_layers(&self) -> usize {
        self.speech.len()
    }

    fn validate(&self) -> Result<()> {
        if self.speech.is_empty() {
            return Err(Error::Corpus("record has no speech layers".into()));
        }
        if self.speech.iter().any(|l| l.len() != self.frames()) {
            return Err(Error::Corpus("speech layers differ in length".into()));
        }
        Ok(())
    }
}

/// Renders `text` for `speaker`, returning the speech layers and the frame
/// range each symbol occupies (silence included).
pub fn synthesize(
    spec: &SynthSpec,
    tables: &SynthTables,
    text: &[u32],
    speaker: u32,
    rng: &mut impl Rng,
) -> (Vec<Vec<u32>>, Vec<Range<usize>>) {
    let mut layer1 = Vec::new();
    let mut spans = Vec::with_capacity(text.len());
    for &sym in text {
        let start = layer1.len();
        for &c in &tables.motifs[sym as usize] {
            let r = rng.gen_range(spec.repeat[0]..=spec.repeat[1]);
            layer1.extend(std::iter::repeat(c).take(r));
        }
        if rng.gen_bool(spec.silence_prob) {
            let r = rng.gen_range(spec.silence_run[0]..=spec.silence_run[1]);
            layer1.extend(std::iter::repeat(SILENCE).take(r));
        }
        spans.push(start..layer1.len());
    }
    let mut speech = vec![layer1];
    for layer in 2..=spec.num_layers {
        let l: Vec<u32> = speech[0].iter().map(|&c| tables.recolor(speaker, layer, c)).collect();
        speech.push(l);
    }
    (speech, spans)
}

/// Samples `n_sequences` records with text lengths drawn from `len_range`.
///
/// Record `i` depends only on `(spec, sample_seed, i)`.
pub fn gen_corpus(
    spec: &SynthSpec,
    n_sequences: usize,
    len_range: RangeInclusive<usize>,
    sample_seed: u64,
) -> Result<Vec<Record>> {
    let tables = spec.tables()?;
    if len_range.is_empty() || *len_range.start() == 0 {
        return Err(config_err!("text length range must be nonempty and positive"));
    }
    let records = (0..n_sequences)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
            rng.set_stream(i as u64);
            let len = rng.gen_range(len_range.clone());
            let text: Vec<u32> = (0..len).map(|_| rng.gen_range(0..spec.alphabet as u32)).collect();
            let speaker = rng.gen_range(0..spec.num_speakers as u32);
            let (speech, _) = synthesize(spec, &tables, &text, speaker, &mut rng);
            Record { text, speaker, speech }
        })
        .collect();
    Ok(records)
}

/// Levenshtein distance of the decoded generation to `reference`, divided by
/// the reference length and capped at 1.
pub fn symbol_error_rate(generated: &[u32], reference: &[u32], tables: &SynthTables) -> f64 {
    let decoded = tables.decode(generated);
    if reference.is_empty() {
        return if decoded.is_empty() { 0.0 } else { 1.0 };
    }
    let dist = strsim::generic_levenshtein(&decoded, &reference.to_vec());
    (dist as f64 / reference.len() as f64).min(1.0)
}

/// Fraction of frames whose layer-2 codeword is `speaker`'s recoloring of
/// the layer-1 codeword at the same frame.
pub fn speaker_match_rate(layer1: &[u32], layer2: &[u32], speaker: u32, tables: &SynthTables) -> Result<f64> {
    if tables.num_layers < 2 {
        return Err(config_err!("speaker match needs at least two codebook layers"));
    }
    if speaker as usize >= tables.num_speakers() {
        return Err(config_err!("speaker {speaker} outside 0..{}", tables.num_speakers()));
    }
    if layer1.len() != layer2.len() {
        return Err(Error::Shape(format!("layer lengths {} and {}", layer1.len(), layer2.len())));
    }
    if layer1.is_empty() {
        return Ok(1.0);
    }
    let hits = layer1
        .iter()
        .zip(layer2)
        .filter(|&(&a, &b)| (a as usize) < tables.speech_size && tables.recolor(speaker, 2, a) == b)
        .count();
    Ok(hits as f64 / layer1.len() as f64)
}

/// Smallest vocabulary covering every id in `records`.
pub fn infer_vocabulary(records: &[Record]) -> Result<Vocabulary> {
    let first = records.first().ok_or_else(|| Error::Corpus("empty corpus".into()))?;
    let layers = first.num_layers();
    let mut text = 0;
    let mut speech = 0;
    for r in records {
        r.validate()?;
        if r.num_layers() != layers {
            return Err(Error::Corpus("records disagree on the number of layers".into()));
        }
        text = text.max(r.text.iter().map(|&t| t as usize + 1).max().unwrap_or(0));
        speech = speech.max(r.speech.iter().flatten().map(|&c| c as usize + 1).max().unwrap_or(0));
    }
    Vocabulary::new(text.max(1), speech.max(1), layers)
}

pub fn write_corpus(path: impl AsRef<Path>, records: &[Record]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_corpus(path: impl AsRef<Path>) -> Result<Vec<Record>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: Record = serde_json::from_str(&line)
            .map_err(|e| Error::Corpus(format!("line {}: {e}", i + 1)))?;
        r.validate().map_err(|e| Error::Corpus(format!("line {}: {e}", i + 1)))?;
        out.push(r);
    }
    Ok(out)
}
