use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cflm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cflm")).current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = cflm(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

const SPEC: &str = "alphabet = 6\nmotif_len = [2, 3]\nrepeat = [1, 2]\nsilence_prob = 0.2\nsilence_run = [1, 2]\nnum_speakers = 2\nnum_layers = 2\nseed = 4\n";
const CONFIG: &str = "g = 3\nn_ar = 6\nn_nar = 8\nframe_rate = 15\nmode = \"cf\"\ndim = 16\nnum_blocks = 1\nnum_heads = 2\nnum_layers = 2\nseed = 1\n";

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("spec.toml"), SPEC).unwrap();
    fs::write(dir.path().join("run.toml"), CONFIG).unwrap();
    dir
}

#[test]
fn end_to_end_pipeline() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["gen-corpus", "--spec", "spec.toml", "--n", "20", "--min-len", "3", "--max-len", "5", "--out", "train.jsonl"]);
    ok(d, &["gen-corpus", "--spec", "spec.toml", "--n", "3", "--min-len", "4", "--max-len", "6", "--seed", "9", "--out", "eval.jsonl"]);
    let first = fs::read_to_string(d.join("train.jsonl")).unwrap();
    assert!(first.lines().next().unwrap().starts_with("{\"text\":["));
    ok(d, &["gen-corpus", "--spec", "spec.toml", "--n", "20", "--min-len", "3", "--max-len", "5", "--out", "again.jsonl"]);
    assert_eq!(first, fs::read_to_string(d.join("again.jsonl")).unwrap());

    ok(d, &[
        "train", "--config", "run.toml", "--corpus", "train.jsonl", "--mode", "cf", "--steps", "5", "--batch-size", "2",
        "--prompt-frames", "2", "--log", "log.csv", "--out", "model.ckpt",
    ]);
    let log = fs::read_to_string(d.join("log.csv")).unwrap();
    assert!(log.starts_with("step,loss,wall_ms"));
    assert_eq!(log.lines().count(), 1 + 5 + 5);
    assert_eq!(&fs::read(d.join("model.ckpt")).unwrap()[..4], b"CFLM");

    let gen = |infer: &str, out: &str| {
        ok(d, &[
            "generate", "--ckpt", "model.ckpt", "--infer", infer, "--text", "1 2 3", "--speech-prompt", "1 2;3 4",
            "--seed", "3", "--max-len", "20", "--out", out,
        ]);
        fs::read_to_string(d.join(out)).unwrap()
    };
    let vanilla = gen("vanilla", "v.txt");
    assert_eq!(vanilla, gen("faster", "f.txt"));
    let lines: Vec<&str> = vanilla.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0].split_whitespace().count(), lines[1].split_whitespace().count());

    let eval = ok(d, &["eval", "--ckpt", "model.ckpt", "--corpus", "eval.jsonl", "--synth-spec", "spec.toml", "--prompt-frames", "2"]);
    assert!(eval.starts_with("sequences,ser,speaker_match"));

    let bench = ok(d, &["bench", "--ckpt", "model.ckpt", "--infer", "faster", "--grid", "15,30,60", "--repeats", "1"]);
    let rows: Vec<&str> = bench.lines().collect();
    assert_eq!(rows[0], "mode,infer,t,mean_ms,p50_ms,p90_ms,cache_len,tokens_per_sec,rtf");
    assert_eq!(rows.len(), 4);

    let viz = cflm(d, &["attn-viz", "--ckpt", "model.ckpt", "--corpus", "eval.jsonl", "--index", "1"]);
    assert!(viz.status.success());
    assert!(String::from_utf8_lossy(&viz.stdout).starts_with("step,text_0"));
    assert!(String::from_utf8_lossy(&viz.stderr).starts_with("monotonicity,"));

    let sweep = ok(d, &[
        "sweep", "--config", "run.toml", "--corpus", "train.jsonl", "--eval-corpus", "eval.jsonl", "--synth-spec",
        "spec.toml", "--axis", "g", "--values", "2,3", "--steps", "2", "--batch-size", "2", "--prompt-frames", "2",
    ]);
    assert!(sweep.starts_with("axis,value,ser,speaker_match,final_loss\ng,2,"));
    assert_eq!(sweep.lines().count(), 3);
}

#[test]
fn dump_mask_grid() {
    let dir = setup();
    let grid = ok(dir.path(), &["dump-mask", "--config", "run.toml", "--text-len", "2", "--gen-len", "4"]);
    let mut lines = grid.lines();
    assert_eq!(lines.next().unwrap(), "9 9");
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 9);
    assert!(rows.iter().all(|r| r.len() == 9 && r.chars().all(|c| c == '0' || c == '1')));
    // the W slot after the first span sees exactly its three raw slots
    assert_eq!(rows[6], "000111000");
    let dense = ok(dir.path(), &["dump-mask", "--config", "run.toml", "--mode", "dense", "--gen-len", "2"]);
    assert_eq!(dense, "4 4\n1000\n1100\n1110\n1111\n");
}

#[test]
fn validation_errors_exit_with_two() {
    let dir = setup();
    let d = dir.path();
    fs::write(d.join("bad.toml"), format!("{CONFIG}colour = 3\n")).unwrap();
    let code = |args: &[&str]| cflm(d, args).status.code().unwrap();
    assert_eq!(code(&["dump-mask", "--config", "bad.toml", "--gen-len", "3"]), 2);
    fs::write(d.join("small.toml"), CONFIG.replace("n_ar = 6", "n_ar = 2")).unwrap();
    assert_eq!(code(&["dump-mask", "--config", "small.toml", "--gen-len", "3"]), 2);
    assert_eq!(code(&["dump-mask", "--config", "run.toml", "--mode", "sparse", "--gen-len", "3"]), 2);
    assert_eq!(code(&["gen-corpus", "--spec", "spec.toml", "--n", "2", "--min-len", "5", "--max-len", "3", "--out", "x"]), 2);
    fs::write(d.join("fake.ckpt"), b"CFLM\x07\x00\x00\x00").unwrap();
    assert_eq!(code(&["generate", "--ckpt", "fake.ckpt", "--text", "1"]), 2);
    assert_eq!(code(&["dump-mask", "--config", "run.toml", "--gen-len", "3"]), 0);
}
