//! Evaluation, latency benchmarking, ablation sweeps and attention export.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::config::{CfConfig, Mode, ModelConfig, Vocabulary};
use crate::error::{config_err, Error, Result};
use crate::inference::{generate, refine_nar, GenerationParams, Strategy};
use crate::layout::{build_layout, SlotKind};
use crate::masks::build_ar_mask;
use crate::model::{ar_inputs, forward, Parameters};
use crate::synth::{speaker_match_rate, symbol_error_rate, Record, SynthTables};
use crate::training::{ar_tokens, train_ar, train_nar, LogRow, TrainOptions};

/// Mean quality over a set of held-out sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub sequences: usize,
    /// Mean symbol error rate.
    pub ser: f64,
    /// Frame-weighted speaker match, when a NAR decoder was given.
    pub speaker_match: Option<f64>,
    /// Mean number of raw tokens generated.
    pub mean_generated: f64,
    /// Fraction of sequences that ended with EOS.
    pub eos_rate: f64,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let sm = self.speaker_match.map_or(String::new(), |v| format!("{v:.6}"));
        format!(
            "sequences,ser,speaker_match,mean_generated,eos_rate\n{},{:.6},{},{:.3},{:.4}\n",
            self.sequences, self.ser, sm, self.mean_generated, self.eos_rate
        )
    }
}

/// Strategy used to decode a model of the given mode: the evicting cache
/// whenever the mode has a window.
pub fn default_strategy(mode: Mode) -> Strategy {
    match mode {
        Mode::Dense => Strategy::Vanilla,
        Mode::Window | Mode::Cf => Strategy::Faster,
    }
}

/// Greedy-decodes every record from its text (plus the first
/// `prompt_frames` frames as speech prompt) and scores the result.
///
/// The prompt frames count as output when computing the error rate, so the
/// reference is always the full text. At most `2 * frames + 8` raw tokens
/// are generated per sequence.
pub fn evaluate(
    ar: &Parameters<f32>,
    nar: Option<&Parameters<f32>>,
    cfg: &CfConfig,
    records: &[Record],
    tables: &SynthTables,
    prompt_frames: usize,
) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::Corpus("nothing to evaluate".into()));
    }
    let strategy = default_strategy(cfg.mode());
    let mut ser = 0.0;
    let (mut hits, mut frames) = (0.0, 0usize);
    let (mut generated, mut eos) = (0usize, 0usize);
    for r in records {
        let p = prompt_frames.min(r.frames());
        let prompt = &r.speech[0][..p];
        let gen = GenerationParams::greedy(2 * r.frames() + 8);
        let out = generate(strategy, ar, cfg, &r.text, prompt, &gen, false)?;
        generated += out.tokens.len();
        eos += usize::from(out.hit_eos);
        let mut full = prompt.to_vec();
        full.extend(&out.tokens);
        ser += symbol_error_rate(&full, &r.text, tables);
        if let Some(nar) = nar {
            let prompt_layers: Vec<Vec<u32>> = r.speech.iter().map(|l| l[..p].to_vec()).collect();
            let layers = refine_nar(&out.tokens, &r.text, &prompt_layers, Some(nar), cfg)?;
            hits += speaker_match_rate(&layers[0], &layers[1], r.speaker, tables)? * out.tokens.len() as f64;
            frames += out.tokens.len();
        }
    }
    let n = records.len() as f64;
    Ok(EvalReport {
        sequences: records.len(),
        ser: ser / n,
        speaker_match: nar.map(|_| if frames == 0 { 0.0 } else { hits / frames as f64 }),
        mean_generated: generated as f64 / n,
        eos_rate: eos as f64 / n,
    })
}

/// Latency summary around one sequence length.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchPoint {
    pub t: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p90_ms: f64,
    pub cache_len: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub mode: Mode,
    pub strategy: Strategy,
    pub points: Vec<BenchPoint>,
    /// Cache rows held at every step (entry 0 is the BOS step).
    pub cache_len: Vec<usize>,
    /// Per-step time in milliseconds, from input token to logits, fastest over the repeats.
    pub step_ms: Vec<f64>,
    pub tokens_per_sec: f64,
    /// Forward time divided by the nominal audio duration `steps / frame_rate`.
    pub rtf: f64,
    /// Whether every repeat produced the same token stream.
    pub deterministic: bool,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("mode,infer,t,mean_ms,p50_ms,p90_ms,cache_len,tokens_per_sec,rtf\n");
        for p in &self.points {
            let _ = writeln!(
                out,
                "{},{},{},{:.6},{:.6},{:.6},{},{:.2},{:.6}",
                self.mode, self.strategy, p.t, p.mean_ms, p.p50_ms, p.p90_ms, p.cache_len, self.tokens_per_sec, self.rtf
            );
        }
        out
    }

    pub fn steps_csv(&self) -> String {
        let mut out = String::from("step,ms,cache_len\n");
        for (i, (ms, c)) in self.step_ms.iter().zip(&self.cache_len).enumerate() {
            let _ = writeln!(out, "{i},{ms:.6},{c}");
        }
        out
    }

    pub fn point(&self, t: usize) -> Option<&BenchPoint> {
        self.points.iter().find(|p| p.t == t)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchOptions {
    pub grid: Vec<usize>,
    pub text_len: usize,
    pub prompt_len: usize,
    pub repeats: usize,
    /// Steps on each side of a grid point that are pooled into its statistics.
    pub half_window: usize,
    /// Leading steps left out of every statistic.
    pub warmup: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self { grid: vec![20, 200, 2000], text_len: 32, prompt_len: 16, repeats: 3, half_window: 25, warmup: 10 }
    }
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let idx = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[idx]
}

/// Times greedy decoding (EOS suppressed) of a fixed prompt for
/// `max(grid) + half_window` raw tokens.
pub fn bench(params: &Parameters<f32>, cfg: &CfConfig, strategy: Strategy, opts: &BenchOptions) -> Result<BenchReport> {
    if opts.grid.is_empty() || opts.repeats == 0 {
        return Err(config_err!("bench needs a nonempty grid and at least one repeat"));
    }
    let max_t = *opts.grid.iter().max().unwrap();
    let vocab = params.vocab;
    let text: Vec<u32> = (0..opts.text_len).map(|i| (i % vocab.text_size) as u32).collect();
    let prompt: Vec<u32> = (0..opts.prompt_len).map(|i| (i * 7 % vocab.speech_size) as u32).collect();
    let gen = GenerationParams { ignore_eos: true, ..GenerationParams::greedy(max_t + opts.half_window) };

    let mut best: Vec<f64> = Vec::new();
    let mut first_tokens = None;
    let mut deterministic = true;
    let mut cache_len = Vec::new();
    for _ in 0..opts.repeats {
        let out = generate(strategy, params, cfg, &text, &prompt, &gen, true)?;
        let trace = out.trace.expect("tracing was requested");
        let ms: Vec<f64> = trace.step_nanos.iter().map(|&n| n as f64 / 1e6).collect();
        if best.is_empty() {
            best = ms;
        } else {
            best.iter_mut().zip(&ms).for_each(|(b, m)| *b = b.min(*m));
        }
        match &first_tokens {
            None => first_tokens = Some(out.tokens),
            Some(t) => deterministic &= *t == out.tokens,
        }
        cache_len = trace.cache_len;
    }

    let points = opts
        .grid
        .iter()
        .map(|&t| {
            let lo = t.saturating_sub(opts.half_window).max(opts.warmup + 1);
            let hi = (t + opts.half_window).min(best.len() - 1);
            let mut window: Vec<f64> = best[lo.min(hi)..=hi].to_vec();
            window.sort_by(f64::total_cmp);
            BenchPoint {
                t,
                mean_ms: window.iter().sum::<f64>() / window.len() as f64,
                p50_ms: percentile(&window, 0.5),
                p90_ms: percentile(&window, 0.9),
                cache_len: cache_len[t.min(cache_len.len() - 1)],
            }
        })
        .collect();
    let timed = &best[opts.warmup.min(best.len() - 1) + 1..];
    let secs: f64 = timed.iter().sum::<f64>() / 1e3;
    let tokens_per_sec = timed.len() as f64 / secs.max(f64::MIN_POSITIVE);
    let rtf = secs / (timed.len() as f64 / cfg.frame_rate() as f64);
    Ok(BenchReport { mode: cfg.mode(), strategy, points, cache_len, step_ms: best, tokens_per_sec, rtf, deterministic })
}

/// The setting a sweep varies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    G,
    NAr,
    NNar,
}

impl FromStr for SweepAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "g" | "G" => Ok(SweepAxis::G),
            "n_ar" | "N_AR" => Ok(SweepAxis::NAr),
            "n_nar" | "N_NAR" => Ok(SweepAxis::NNar),
            other => Err(config_err!("unknown sweep axis `{other}` (g|n_ar|n_nar)")),
        }
    }
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::G => "g",
            SweepAxis::NAr => "n_ar",
            SweepAxis::NNar => "n_nar",
        }
    }

    pub fn apply(self, cfg: &CfConfig, value: usize) -> Result<CfConfig> {
        match self {
            SweepAxis::G => cfg.with_g(value),
            SweepAxis::NAr => cfg.with_n_ar(value),
            SweepAxis::NNar => cfg.with_n_nar(Some(value)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub value: usize,
    pub eval: EvalReport,
    pub final_loss: f64,
}

/// Everything a sweep cell shares with its siblings.
pub struct SweepSetup<'a> {
    pub train: &'a [Record],
    pub eval: &'a [Record],
    pub tables: &'a SynthTables,
    pub model: ModelConfig,
    pub vocab: Vocabulary,
    pub opts: TrainOptions,
    /// Also train and score a NAR decoder per cell.
    pub with_nar: bool,
}

/// Trains and scores one model per value, each from the same seed, corpus
/// and budget.
pub fn sweep(setup: &SweepSetup<'_>, base: &CfConfig, axis: SweepAxis, values: &[usize]) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(config_err!("sweep needs at least one value"));
    }
    let cells = values.iter().map(|&v| axis.apply(base, v)).collect::<Result<Vec<_>>>()?;
    values
        .iter()
        .zip(&cells)
        .map(|(&value, cfg)| {
            let mut last = f64::NAN;
            let ar = train_ar(setup.train, cfg, setup.model, setup.vocab, &setup.opts, |r: &LogRow| last = r.loss)?;
            let nar = if setup.with_nar {
                Some(train_nar(setup.train, cfg, setup.model, setup.vocab, &setup.opts, |_| {})?)
            } else {
                None
            };
            let eval = evaluate(&ar, nar.as_ref(), cfg, setup.eval, setup.tables, setup.opts.prompt_frames)?;
            Ok(SweepRow { value, eval, final_loss: last })
        })
        .collect()
}

pub fn sweep_csv(axis: SweepAxis, rows: &[SweepRow]) -> String {
    let mut out = String::from("axis,value,ser,speaker_match,final_loss\n");
    for r in rows {
        let sm = r.eval.speaker_match.map_or(String::new(), |v| format!("{v:.6}"));
        let _ = writeln!(out, "{},{},{:.6},{},{:.6}", axis.name(), r.value, r.eval.ser, sm, r.final_loss);
    }
    out
}

/// Attention from each generation step to the text prompt.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnExport {
    /// `rows[i][j]`: weight of step `i` (BOS, then every raw slot) on text
    /// token `j`, averaged over heads and blocks.
    pub rows: Vec<Vec<f64>>,
}

impl AttnExport {
    fn argmax(row: &[f64]) -> usize {
        let mut best = 0;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        best
    }

    /// Fraction of steps whose most-attended text token is not before the
    /// previous step's.
    pub fn monotonicity(&self) -> f64 {
        if self.rows.len() < 2 {
            return 1.0;
        }
        let peaks: Vec<usize> = self.rows.iter().map(|r| Self::argmax(r)).collect();
        let ok = peaks.windows(2).filter(|w| w[1] >= w[0]).count();
        ok as f64 / (peaks.len() - 1) as f64
    }

    pub fn to_csv(&self) -> String {
        let cols = self.rows.first().map_or(0, Vec::len);
        let mut out = String::from("step");
        for j in 0..cols {
            let _ = write!(out, ",text_{j}");
        }
        out.push('\n');
        for (i, r) in self.rows.iter().enumerate() {
            let _ = write!(out, "{i}");
            for v in r {
                let _ = write!(out, ",{v:.6}");
            }
            out.push('\n');
        }
        out
    }
}

/// Runs the AR decoder over `text`, `prompt` and the teacher-forced `raw`
/// tokens and exports the text-column attention of every generation step.
pub fn attn_viz(params: &Parameters<f32>, cfg: &CfConfig, text: &[u32], prompt: &[u32], raw: &[u32]) -> Result<AttnExport> {
    let layout = build_layout(text.len(), prompt.len(), raw.len(), cfg);
    let tokens = ar_tokens(&layout, text, prompt, raw)?;
    let mask = build_ar_mask(&layout, cfg)?;
    let positions: Vec<usize> = (0..layout.len()).collect();
    let pass = forward(params, &ar_inputs(&tokens), &positions, &mask, true)?;
    let probs = pass.attention_probs().expect("tape was kept");
    let maps = probs.iter().flatten().count() as f64;
    let rows = layout
        .slots()
        .iter()
        .filter(|s| matches!(s.kind, SlotKind::Bos | SlotKind::Raw))
        .map(|s| {
            (0..text.len())
                .map(|j| probs.iter().flatten().map(|p| p.at(s.position, j) as f64).sum::<f64>() / maps)
                .collect()
        })
        .collect();
    Ok(AttnExport { rows })
}
