//! Trains dense, window and cf AR decoders on a synthetic corpus and scores
//! them on held-out sequences twice as long as the training median.
//!
//! Usage: `cargo run --release --example synthetic_tts [key=value ...]` with
//! keys `steps`, `lr`, `alphabet`, `repeat`, `train`, `short`, `tail`, `held`,
//! `modes`, `dim`.

use std::time::Instant;

use cflm::bench::{attn_viz, evaluate};
use cflm::config::{CfConfig, Mode, ModelConfig};
use cflm::synth::{gen_corpus, SynthSpec};
use cflm::training::{train_ar, TrainOptions};

fn main() -> cflm::Result<()> {
    let args: std::collections::HashMap<String, String> = std::env::args()
        .skip(1)
        .filter_map(|a| a.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())))
        .collect();
    let get = |k: &str, d: &str| args.get(k).cloned().unwrap_or_else(|| d.to_string());
    let steps: usize = get("steps", "1500").parse().unwrap();
    let lr: f64 = get("lr", "2e-3").parse().unwrap();
    let alphabet: usize = get("alphabet", "12").parse().unwrap();
    let repeat: Vec<usize> = get("repeat", "1,3").split(',').map(|x| x.parse().unwrap()).collect();
    let n_train: usize = get("train", "2000").parse().unwrap();
    let dim: usize = get("dim", "64").parse().unwrap();
    let modes: Vec<Mode> = get("modes", "dense,window,cf").split(',').map(|m| m.parse().unwrap()).collect();
    let spec = SynthSpec {
        alphabet,
        motif_len: [2, 3],
        repeat: [repeat[0], repeat[1]],
        silence_prob: 0.25,
        silence_run: [1, 3],
        num_speakers: 4,
        num_layers: 1,
        seed: 1,
    };
    let tables = spec.tables()?;
    let short: Vec<usize> = get("short", "6,14").split(',').map(|x| x.parse().unwrap()).collect();
    let tail: Vec<usize> = get("tail", "0,11,24").split(',').map(|x| x.parse().unwrap()).collect();
    let mut train = gen_corpus(&spec, n_train - tail[0], short[0]..=short[1], 10)?;
    train.extend(gen_corpus(&spec, tail[0], tail[1]..=tail[2], 11)?);
    let mut lens: Vec<usize> = train.iter().map(|r| r.text.len()).collect();
    lens.sort_unstable();
    eprintln!("train median text length {}", lens[lens.len() / 2]);
    let held: Vec<usize> = get("held", "20,24").split(',').map(|x| x.parse().unwrap()).collect();
    let held_out = gen_corpus(&spec, held.get(2).copied().unwrap_or(50), held[0]..=held[1], 20)?;
    let model = ModelConfig { dim, num_blocks: 2, num_heads: 4, ffn_mult: 2, max_positions: 8192, num_layers: 1 };
    let opts = TrainOptions { steps, batch_size: 16, lr, seed: 3, ..TrainOptions::default() };
    for mode in modes {
        let cfg = CfConfig::new(5, 25, None, 25, mode)?;
        let start = Instant::now();
        let mut last = 0.0;
        let ar = train_ar(&train, &cfg, model, tables.vocabulary(), &opts, |r| {
            last = r.loss;
            if r.step % 250 == 0 {
                eprintln!("{mode} step {} loss {:.4} {} ms", r.step, r.loss, r.wall_ms);
            }
        })?;
        let secs = start.elapsed().as_secs_f64();
        let short = evaluate(&ar, None, &cfg, &gen_corpus(&spec, 50, 6..=14, 30)?, &tables, 0)?;
        let long = evaluate(&ar, None, &cfg, &held_out, &tables, 0)?;
        let mono: f64 = held_out
            .iter()
            .map(|r| attn_viz(&ar, &cfg, &r.text, &[], &r.speech[0]).unwrap().monotonicity())
            .sum::<f64>()
            / held_out.len() as f64;
        println!(
            "{mode}: loss {last:.4} train {secs:.0}s in-dist SER {:.4} long SER {:.4} eos {:.2} gen {:.1} mono {mono:.3}",
            short.ser, long.ser, long.eos_rate, long.mean_generated
        );
    }
    Ok(())
}
