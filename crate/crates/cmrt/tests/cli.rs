//! End-to-end tests of the `cmrt` binary: exit codes, artifact layout, and
//! bitwise reproducibility of complete command invocations.

use std::path::Path;
use std::process::{Command, Output};

use cmrt::checkpoint;
use cmrt::tokenizer::TokenHistogram;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_cmrt")
}

/// Run the binary with `dir` as the working directory so relative paths (and
/// therefore the recorded argv) are identical across runs.
fn run_in(dir: &Path, args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .current_dir(dir)
        .env_remove("CMRT_SEED")
        .output()
        .expect("binary spawns")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "expected success, got {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn write(dir: &Path, name: &str, text: &str) {
    std::fs::write(dir.join(name), text).unwrap();
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name)).unwrap()
}

fn culture_toml(id: &str, pitches: &str, timbre_seed: u64) -> String {
    format!(
        "id = \"{id}\"\npitch_set = [{pitches}]\ntimbre_seed = {timbre_seed}\n\
         clips = 4\nduration = 2.0\nsample_rate = 24000\n"
    )
}

/// A desk-scale experiment: five conv layers whose strides multiply to the
/// 320-sample frame stride, one transformer block, tiny codec.
fn experiment_toml() -> &'static str {
    r#"
seed = 3

[model]
conv_channels = [[8, 5, 5], [8, 4, 4], [8, 4, 4], [8, 2, 2], [8, 2, 2]]
d_model = 8
n_layers = 1
n_heads = 2
d_embed = 8

[codec]
codebooks = 2
codewords = 16
dim = 16
seed = 5

[cqt]
n_bins = 12

[run]
crop_seconds = 1.0

[[corpus]]
id = "low"
dir = "corpusA"

[[corpus]]
id = "high"
dir = "corpusB"

[stage1]
steps = 2
warmup_fraction = 0.5
lr_max = 1e-4
lr_min = 1e-5
batch_clips = 2
accum_steps = 1
trainable = ["conv", "codeword_emb"]

[stage1.mix]
sources = { low = 1.0 }

[stage2]
steps = 2
warmup_fraction = 0.5
lr_max = 1e-5
lr_min = 1e-6
batch_clips = 2
accum_steps = 1

[stage2.mix]
sources = { high = 1.0 }
replay_source = "low"
replay_fraction = 0.25

[eval]
dir = "corpusB"
every = 2
"#
}

/// Synthesize the two corpora every pipeline test builds on.
fn synth_corpora(dir: &Path) {
    write(dir, "a.toml", &culture_toml("low", "110.0, 146.83, 196.0", 1));
    write(dir, "b.toml", &culture_toml("high", "523.25, 659.25, 880.0", 2));
    assert_ok(&run_in(dir, &["synth", "--config", "a.toml", "--out-dir", "corpusA", "--seed", "11"]));
    assert_ok(&run_in(dir, &["synth", "--config", "b.toml", "--out-dir", "corpusB", "--seed", "22"]));
}

#[test]
fn no_arguments_prints_usage_and_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run_in(tmp.path(), &[]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("Usage"), "stderr: {stderr}");

    let out = run_in(tmp.path(), &["--definitely-not-a-flag"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_errors_map_to_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    // Missing file: I/O failure.
    let out = run_in(tmp.path(), &["pretrain", "--config", "nope.toml", "--out-dir", "x"]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("io error"));

    // Unknown key: invalid configuration.
    write(tmp.path(), "bad.toml", "bogus = 1\n");
    let out = run_in(tmp.path(), &["pretrain", "--config", "bad.toml", "--out-dir", "x"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("invalid input"));
}

#[test]
fn synth_is_deterministic_and_env_seed_matches_flag() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write(dir, "a.toml", &culture_toml("low", "110.0, 146.83, 196.0", 1));
    let args = ["synth", "--config", "a.toml", "--out-dir", "out", "--seed", "11"];
    assert_ok(&run_in(dir, &args));
    let first_clip = std::fs::read(dir.join("out/clip_0000.wav")).unwrap();
    let first_manifest = read(dir, "out/run_manifest.json");
    std::fs::remove_dir_all(dir.join("out")).unwrap();

    // Same command again: identical bytes, manifest included.
    assert_ok(&run_in(dir, &args));
    assert_eq!(std::fs::read(dir.join("out/clip_0000.wav")).unwrap(), first_clip);
    assert_eq!(read(dir, "out/run_manifest.json"), first_manifest);

    // CMRT_SEED supplies the same seed as the flag did.
    let out = Command::new(bin())
        .args(["synth", "--config", "a.toml", "--out-dir", "env_out"])
        .current_dir(dir)
        .env("CMRT_SEED", "11")
        .output()
        .unwrap();
    assert_ok(&out);
    assert_eq!(std::fs::read(dir.join("env_out/clip_0000.wav")).unwrap(), first_clip);

    let out = Command::new(bin())
        .args(["synth", "--config", "a.toml", "--out-dir", "bad_env"])
        .current_dir(dir)
        .env("CMRT_SEED", "eleven")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn tokenize_emits_parseable_histogram_and_token_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write(dir, "a.toml", &culture_toml("low", "110.0, 146.83, 196.0", 1));
    assert_ok(&run_in(dir, &["synth", "--config", "a.toml", "--out-dir", "corpus", "--seed", "11"]));
    assert_ok(&run_in(
        dir,
        &[
            "tokenize", "--in-dir", "corpus", "--out-dir", "tok", "--codebooks", "2",
            "--codewords", "16", "--dim", "16", "--codec-seed", "5", "--emit-tokens",
        ],
    ));
    let hist = TokenHistogram::from_csv(&read(dir, "tok/histogram.csv")).unwrap();
    assert_eq!(hist.counts.len(), 2);
    assert_eq!(hist.counts[0].len(), 16);
    assert!(hist.totals.iter().all(|&t| t > 0));
    let tokens = read(dir, "tok/tokens_clip_0000.csv");
    assert!(tokens.starts_with("frame,codebook0,codebook1\n"));
}

#[test]
fn pretrain_is_bitwise_reproducible_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth_corpora(dir);
    write(dir, "exp.toml", experiment_toml());
    let args = ["pretrain", "--config", "exp.toml", "--out-dir", "run"];
    assert_ok(&run_in(dir, &args));
    let ckpt = std::fs::read(dir.join("run/stage2.ckpt")).unwrap();
    let log = read(dir, "run/stage2_log.csv");
    let manifest = read(dir, "run/run_manifest.json");
    std::fs::remove_dir_all(dir.join("run")).unwrap();

    assert_ok(&run_in(dir, &args));
    assert_eq!(std::fs::read(dir.join("run/stage2.ckpt")).unwrap(), ckpt);
    assert_eq!(read(dir, "run/stage2_log.csv"), log);
    assert_eq!(read(dir, "run/run_manifest.json"), manifest);

    // The saved container round-trips through the library loader.
    let loaded = checkpoint::load(&dir.join("run/stage2.ckpt")).unwrap();
    assert_eq!(loaded.step, 4);
    assert_eq!(loaded.stage_label, "stage2");
    assert!(dir.join("run/stage1_eval.csv").exists());
}

#[test]
fn pipeline_merge_sweep_similarity_report_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth_corpora(dir);
    write(dir, "exp.toml", experiment_toml());
    assert_ok(&run_in(dir, &["pretrain", "--config", "exp.toml", "--out-dir", "run"]));

    // Merge in both modes.
    assert_ok(&run_in(
        dir,
        &[
            "merge", "--base", "run/stage1.ckpt", "--vector", "run/stage2.ckpt:0.5",
            "--out", "merged/ta.ckpt",
        ],
    ));
    assert_ok(&run_in(
        dir,
        &[
            "merge", "--base", "run/stage1.ckpt", "--average", "run/stage1.ckpt",
            "--average", "run/stage2.ckpt", "--out", "merged/avg.ckpt",
        ],
    ));
    assert!(dir.join("merged/run_manifest.json").exists());
    let out = run_in(dir, &["merge", "--base", "run/stage1.ckpt", "--out", "merged/none.ckpt"]);
    assert_eq!(out.status.code(), Some(3), "either --vector or --average is required");

    // Sweep over three coefficients, two held-out corpora.
    assert_ok(&run_in(
        dir,
        &[
            "sweep", "--config", "exp.toml", "--base", "run/stage1.ckpt", "--adapted",
            "run/stage2.ckpt", "--eval-dir", "low=corpusA", "--eval-dir", "high=corpusB",
            "--lambdas", "0,0.5,1", "--max-clips", "2", "--out-dir", "sweepout",
        ],
    ));
    let sweep_csv = read(dir, "sweepout/sweep.csv");
    assert!(sweep_csv.starts_with("lambda,low,high\n"), "{sweep_csv}");
    assert_eq!(sweep_csv.lines().count(), 4);
    assert!(read(dir, "sweepout/sweep.svg").contains("<svg"));

    // Token histograms feed the similarity matrix.
    for (corpus, out) in [("corpusA", "tokA"), ("corpusB", "tokB")] {
        assert_ok(&run_in(
            dir,
            &[
                "tokenize", "--in-dir", corpus, "--out-dir", out, "--codebooks", "2",
                "--codewords", "16", "--dim", "16", "--codec-seed", "5",
            ],
        ));
    }
    assert_ok(&run_in(
        dir,
        &[
            "similarity", "--histogram", "low=tokA/histogram.csv", "--histogram",
            "high=tokB/histogram.csv", "--out-dir", "simout",
        ],
    ));
    let sim_csv = read(dir, "simout/similarity.csv");
    assert!(sim_csv.starts_with("corpus,high,low\n"), "{sim_csv}");
    assert!(read(dir, "simout/similarity.svg").contains("<svg"));

    // The report command re-renders the CSV artifacts without recomputing.
    write(
        dir,
        "m1.csv",
        "tag,positives,negatives,roc_auc,ap\nhigh,2,2,0.9,0.8\nlow,2,2,0.7,0.6\n\
         slow,1,3,0.5,0.4\nmacro,,,0.7,0.6\n",
    );
    write(
        dir,
        "m2.csv",
        "tag,positives,negatives,roc_auc,ap\nhigh,2,2,0.95,0.9\nlow,2,2,0.8,0.7\n\
         slow,1,3,0.6,0.5\nmacro,,,0.78,0.7\n",
    );
    assert_ok(&run_in(
        dir,
        &[
            "report", "--sweep", "sweepout/sweep.csv", "--similarity", "simout/similarity.csv",
            "--radar", "base=m1.csv", "--radar", "adapted=m2.csv", "--out-dir", "reportout",
        ],
    ));
    for figure in ["sweep.svg", "similarity.svg", "radar.svg"] {
        assert!(read(dir, &format!("reportout/{figure}")).contains("<svg"), "{figure}");
    }
    // Report with no inputs at all is a usage error.
    let out = run_in(dir, &["report", "--out-dir", "reportout2"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn probe_writes_per_seed_metrics_and_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth_corpora(dir);
    write(dir, "exp.toml", experiment_toml());
    assert_ok(&run_in(
        dir,
        &["pretrain", "--config", "exp.toml", "--out-dir", "run", "--stage", "1"],
    ));
    assert_ok(&run_in(
        dir,
        &[
            "probe", "--config", "exp.toml", "--checkpoint", "run/stage1.ckpt", "--data",
            "corpusA", "--data", "corpusB", "--train-frac", "0.5", "--epochs", "4",
            "--hidden", "8", "--num-seeds", "2", "--window-seconds", "2",
            "--out-dir", "probeout",
        ],
    ));
    let summary = read(dir, "probeout/summary.csv");
    assert!(summary.starts_with("seed,roc_auc_macro,ap_macro\n"), "{summary}");
    assert!(summary.lines().any(|l| l.starts_with("mean,")));
    assert!(summary.lines().any(|l| l.starts_with("std,")));
    let metrics = read(dir, "probeout/metrics_seed0.csv");
    assert!(metrics.starts_with("tag,positives,negatives,roc_auc,ap\n"), "{metrics}");
    assert!(metrics.contains("\nmacro,,,"));

    // A checkpoint built for a different architecture is rejected up front.
    let other = experiment_toml().replace("n_heads = 2", "n_heads = 4");
    write(dir, "other.toml", &other);
    let out = run_in(
        dir,
        &[
            "probe", "--config", "other.toml", "--checkpoint", "run/stage1.ckpt", "--data",
            "corpusA", "--out-dir", "probeout2",
        ],
    );
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("digest mismatch"));
}
