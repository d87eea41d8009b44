use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use cflm::bench::{attn_viz, bench, evaluate, sweep, sweep_csv, BenchOptions, SweepAxis, SweepSetup};
use cflm::checkpoint::Checkpoint;
use cflm::inference::{generate, refine_nar, GenerationParams, Strategy};
use cflm::layout::build_layout;
use cflm::masks::{build_ar_mask, build_prompt_local_nar};
use cflm::synth::{gen_corpus, infer_vocabulary, read_corpus, write_corpus, SynthSpec};
use cflm::training::{train_ar, train_nar, TrainOptions};
use cflm::{Error, Mode, RunConfig};

/// Compressed-to-fine speech-token language models.
#[derive(Parser)]
#[command(name = "cflm", version)]
struct Cli {
    /// Run configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configuration's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file; standard output when omitted.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the AR decoder (and the NAR decoder when the corpus has several layers).
    Train(TrainArgs),
    /// Decode speech tokens for a text prompt.
    Generate(GenerateArgs),
    /// Time AR decoding steps at several sequence lengths.
    Bench(BenchArgs),
    /// Train and score one model per value of a setting.
    Sweep(SweepArgs),
    /// Score a checkpoint on held-out sequences.
    Eval(EvalArgs),
    /// Print an attention mask as a 0/1 grid.
    DumpMask(DumpMaskArgs),
    /// Export text-prompt attention of every generation step.
    AttnViz(AttnVizArgs),
    /// Sample a synthetic corpus.
    GenCorpus(GenCorpusArgs),
}

#[derive(Args)]
struct TrainFlags {
    #[arg(long, default_value_t = 1000)]
    steps: usize,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 2e-3)]
    lr: f64,
    /// Leading frames of each utterance used as its speech prompt.
    #[arg(long, default_value_t = 0)]
    prompt_frames: usize,
}

impl TrainFlags {
    fn options(&self, seed: u64) -> TrainOptions {
        TrainOptions {
            steps: self.steps,
            batch_size: self.batch_size,
            lr: self.lr,
            prompt_frames: self.prompt_frames,
            seed,
            ..TrainOptions::default()
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Overrides the configuration's mode.
    #[arg(long)]
    mode: Option<Mode>,
    /// Where the CSV training log goes; standard error when omitted.
    #[arg(long)]
    log: Option<PathBuf>,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value = "faster")]
    infer: Strategy,
    /// Text ids, separated by spaces or commas.
    #[arg(long)]
    text: String,
    /// Speech prompt ids; layers separated by `;`.
    #[arg(long, default_value = "")]
    speech_prompt: String,
    #[arg(long, default_value_t = 512)]
    max_len: usize,
    #[arg(long, default_value_t = 0.0)]
    temperature: f64,
    #[arg(long, default_value_t = 1)]
    top_k: usize,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value = "faster")]
    infer: Strategy,
    /// Sequence lengths to report, comma separated.
    #[arg(long, default_value = "20,200,2000")]
    grid: String,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    /// Also write every step's time and cache length to this CSV.
    #[arg(long)]
    steps_out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    eval_corpus: PathBuf,
    #[arg(long)]
    synth_spec: PathBuf,
    #[arg(long)]
    axis: SweepAxis,
    /// Values to try, comma separated.
    #[arg(long)]
    values: String,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    synth_spec: PathBuf,
    #[arg(long, default_value_t = 0)]
    prompt_frames: usize,
}

#[derive(Args)]
struct DumpMaskArgs {
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long, default_value_t = 0)]
    text_len: usize,
    #[arg(long, default_value_t = 0)]
    prompt_len: usize,
    #[arg(long)]
    gen_len: usize,
    /// Dump the NAR mask instead of the AR mask.
    #[arg(long)]
    nar: bool,
}

#[derive(Args)]
struct AttnVizArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Record to export.
    #[arg(long, default_value_t = 0)]
    index: usize,
}

#[derive(Args)]
struct GenCorpusArgs {
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    min_len: usize,
    #[arg(long)]
    max_len: usize,
}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Error::Config(msg.into()).into()
}

fn parse_ids(s: &str) -> Result<Vec<u32>> {
    s.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<u32>().map_err(|_| invalid(format!("`{t}` is not a token id"))))
        .collect()
}

fn parse_list(s: &str) -> Result<Vec<usize>> {
    Ok(parse_ids(s)?.into_iter().map(|v| v as usize).collect())
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => io::stdout().write_all(text.as_bytes()).map_err(Into::into),
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let path = cli.config.as_ref().ok_or_else(|| invalid("--config is required"))?;
    let mut rc = RunConfig::load(path).with_context(|| format!("reading {}", path.display()))?;
    if let Some(s) = cli.seed {
        rc.seed = s;
    }
    Ok(rc)
}

fn require_out(cli: &Cli) -> Result<&Path> {
    cli.out.as_deref().ok_or_else(|| invalid("--out is required"))
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train(a) => {
            let mut rc = load_config(cli)?;
            if let Some(m) = a.mode {
                rc.mode = m;
            }
            let out = require_out(cli)?;
            let records = read_corpus(&a.corpus).with_context(|| format!("reading {}", a.corpus.display()))?;
            let vocab = infer_vocabulary(&records)?;
            if vocab.num_layers != rc.num_layers {
                return Err(invalid(format!(
                    "corpus has {} layers, configuration says {}",
                    vocab.num_layers, rc.num_layers
                )));
            }
            let cfg = rc.cf()?;
            let opts = a.train.options(rc.seed);
            let mut log = String::from("step,loss,wall_ms,decoder\n");
            let ar = train_ar(&records, &cfg, rc.model(), vocab, &opts, |r| {
                let _ = writeln!(log, "{},{:.6},{},ar", r.step, r.loss, r.wall_ms);
            })?;
            let nar = if vocab.num_layers >= 2 {
                Some(train_nar(&records, &cfg, rc.model(), vocab, &opts, |r| {
                    let _ = writeln!(log, "{},{:.6},{},nar", r.step, r.loss, r.wall_ms);
                })?)
            } else {
                None
            };
            Checkpoint::new(cfg, ar, nar)?.save(out)?;
            match &a.log {
                Some(p) => fs::write(p, &log)?,
                None => io::stderr().write_all(log.as_bytes())?,
            }
        }
        Command::Generate(a) => {
            let ck = Checkpoint::load(&a.ckpt)?;
            let text = parse_ids(&a.text)?;
            let mut prompt: Vec<Vec<u32>> = a.speech_prompt.split(';').map(parse_ids).collect::<Result<_>>()?;
            let gen = GenerationParams {
                max_raw_tokens: a.max_len,
                temperature: a.temperature,
                top_k: a.top_k,
                seed: cli.seed.unwrap_or(0),
                ignore_eos: false,
            };
            let out = generate(a.infer, &ck.ar, &ck.cf, &text, &prompt[0], &gen, false)?;
            let layers = match &ck.nar {
                Some(nar) => {
                    if prompt.len() == 1 && prompt[0].is_empty() {
                        prompt = vec![Vec::new(); ck.vocab.num_layers];
                    }
                    refine_nar(&out.tokens, &text, &prompt, Some(nar), &ck.cf)?
                }
                None => vec![out.tokens],
            };
            let mut s = String::new();
            for l in layers {
                let line: Vec<String> = l.iter().map(u32::to_string).collect();
                let _ = writeln!(s, "{}", line.join(" "));
            }
            emit(cli.out.as_deref(), &s)?;
        }
        Command::Bench(a) => {
            let ck = Checkpoint::load(&a.ckpt)?;
            let opts = BenchOptions { grid: parse_list(&a.grid)?, repeats: a.repeats, ..BenchOptions::default() };
            let report = bench(&ck.ar, &ck.cf, a.infer, &opts)?;
            if let Some(p) = &a.steps_out {
                fs::write(p, report.steps_csv())?;
            }
            emit(cli.out.as_deref(), &report.to_csv())?;
        }
        Command::Sweep(a) => {
            let rc = load_config(cli)?;
            let train = read_corpus(&a.corpus)?;
            let eval = read_corpus(&a.eval_corpus)?;
            let spec = SynthSpec::load(&a.synth_spec)?;
            let tables = spec.tables()?;
            let setup = SweepSetup {
                train: &train,
                eval: &eval,
                tables: &tables,
                model: rc.model(),
                vocab: tables.vocabulary(),
                opts: a.train.options(rc.seed),
                with_nar: rc.num_layers >= 2,
            };
            let rows = sweep(&setup, &rc.cf()?, a.axis, &parse_list(&a.values)?)?;
            emit(cli.out.as_deref(), &sweep_csv(a.axis, &rows))?;
        }
        Command::Eval(a) => {
            let ck = Checkpoint::load(&a.ckpt)?;
            let records = read_corpus(&a.corpus)?;
            let tables = SynthSpec::load(&a.synth_spec)?.tables()?;
            let report = evaluate(&ck.ar, ck.nar.as_ref(), &ck.cf, &records, &tables, a.prompt_frames)?;
            emit(cli.out.as_deref(), &report.to_csv())?;
        }
        Command::DumpMask(a) => {
            let rc = load_config(cli)?;
            let mut cfg = rc.cf()?;
            if let Some(m) = a.mode {
                cfg = cfg.with_mode(m)?;
            }
            let mask = if a.nar {
                let layout = cflm::build_open_layout(a.text_len, a.prompt_len, a.gen_len, &cfg.with_mode(Mode::Window)?);
                build_prompt_local_nar(&layout, cfg.n_nar())?
            } else {
                build_ar_mask(&build_layout(a.text_len, a.prompt_len, a.gen_len, &cfg), &cfg)?
            };
            emit(cli.out.as_deref(), &mask.to_grid())?;
        }
        Command::AttnViz(a) => {
            let ck = Checkpoint::load(&a.ckpt)?;
            let records = read_corpus(&a.corpus)?;
            let r = records
                .get(a.index)
                .ok_or_else(|| invalid(format!("corpus has {} records", records.len())))?;
            let export = attn_viz(&ck.ar, &ck.cf, &r.text, &[], &r.speech[0])?;
            emit(cli.out.as_deref(), &export.to_csv())?;
            eprintln!("monotonicity,{:.6}", export.monotonicity());
        }
        Command::GenCorpus(a) => {
            let spec = SynthSpec::load(&a.spec)?;
            let out = require_out(cli)?;
            if a.min_len == 0 || a.min_len > a.max_len {
                return Err(invalid("need 0 < min_len <= max_len"));
            }
            let sample_seed = cli.seed.unwrap_or(spec.seed);
            let records = gen_corpus(&spec, a.n, a.min_len..=a.max_len, sample_seed)?;
            write_corpus(out, &records)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let validation = e.chain().any(|c| c.downcast_ref::<Error>().is_some_and(Error::is_validation));
            ExitCode::from(if validation { 2 } else { 1 })
        }
    }
}
