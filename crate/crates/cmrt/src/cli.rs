//! Command-line front end: one subcommand per pipeline step, declarative
//! TOML experiment configs with flag overrides, and a JSON run manifest
//! written alongside every command's outputs.
//!
//! Exit codes: 0 success, 2 usage errors (bad flags, missing subcommand),
//! 3 invalid configuration or data, 4 I/O failures.
//!
//! The `CMRT_SEED` environment variable supplies a default base seed for
//! commands with stochastic procedures; explicit config values override it
//! and flags override both. Frozen-teacher identities (the codec seed) are
//! deliberately not affected by the environment: they define the experiment.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::checkpoint::{self, Checkpoint};
use crate::dsp::cqt::CqtConfig;
use crate::dsp::wav::{read_wav, write_wav, WavFormat};
use crate::dsp::{resample, synth_culture_clip, SynthCultureSpec};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::merge::{self, task_vector, MergeSpec, TaskVector, DEFAULT_LAMBDAS};
use crate::model::{init_model, ModelConfig, ParamGroup};
use crate::plot;
use crate::probe::{evaluate_across_seeds, FeatureLayer, ProbeConfig, TaggedClip, TaskDataset};
use crate::rng::derive_seed;
use crate::similarity::{culture_similarity_matrix, SimilarityMetric};
use crate::tokenizer::{frame_features, init_rvq_codec, token_histogram, tokenize, TokenHistogram};
use crate::trainer::{
    heldout_loss, log_to_csv, run_stage, run_two_stage, Corpus, DataMixSpec, RunStageOptions,
    StageResult, Teachers, TrainStageConfig,
};

/// Entry point for the `cmrt` binary; returns the process exit code.
pub fn run_cli() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Io { .. } => 4,
                _ => 3,
            }
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => cmd_synth(a),
        Command::Tokenize(a) => cmd_tokenize(a),
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Merge(a) => cmd_merge(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Probe(a) => cmd_probe(a),
        Command::Similarity(a) => cmd_similarity(a),
        Command::Report(a) => cmd_report(a),
    }
}

#[derive(Parser)]
#[command(
    name = "cmrt",
    version,
    about = "Masked acoustic modeling over RVQ pseudo-tokens: synthesis, \
             tokenization, continual pre-training, checkpoint merging, \
             probing, and token-distribution similarity",
    arg_required_else_help = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic culture corpus as WAV clips plus a tag table
    Synth(SynthArgs),
    /// Tokenize WAV clips with the frozen codec and tabulate token counts
    Tokenize(TokenizeArgs),
    /// Run configured pre-training stages and save checkpoints
    Pretrain(PretrainArgs),
    /// Combine checkpoints by task arithmetic or weight averaging
    Merge(MergeArgs),
    /// Sweep the merge coefficient and tabulate held-out losses
    Sweep(SweepArgs),
    /// Train probes on frozen features and report tagging metrics
    Probe(ProbeArgs),
    /// Compare corpora by their token distributions
    Similarity(SimilarityArgs),
    /// Render CSV artifacts to SVG figures
    Report(ReportArgs),
}

// ---------------------------------------------------------------------------
// Shared plumbing
// ---------------------------------------------------------------------------

/// Run description written next to every command's outputs; identical runs
/// produce identical manifests (no timestamps, no hostnames).
#[derive(Debug, serde::Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config_path: Option<String>,
    pub seed_record: Vec<u64>,
    pub artifact_paths: Vec<String>,
    pub tool_version: String,
    /// Every effective setting after merging config defaults, file values,
    /// the environment, and flags.
    pub effective: serde_json::Value,
}

fn write_manifest(dir: &Path, manifest: &RunManifest) -> Result<()> {
    let json = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    write_text(&dir.join("run_manifest.json"), &(json + "\n"))
}

fn argv() -> Vec<String> {
    std::env::args().collect()
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// The `CMRT_SEED` default, if set and well-formed.
fn env_seed() -> Result<Option<u64>> {
    match std::env::var("CMRT_SEED") {
        Ok(s) => s.trim().parse::<u64>().map(Some).map_err(|_| {
            Error::InvalidInput(format!("CMRT_SEED must be an unsigned integer, got {s:?}"))
        }),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(std::env::VarError::NotUnicode(_)) => {
            Err(Error::InvalidInput("CMRT_SEED is not valid unicode".into()))
        }
    }
}

/// Base-seed precedence: flag, then config file, then `CMRT_SEED`, then 0.
fn resolve_seed(flag: Option<u64>, config: Option<u64>) -> Result<u64> {
    Ok(flag.or(config).or(env_seed()?).unwrap_or(0))
}

/// All `.wav` files directly inside `dir`, sorted by file name.
fn list_wavs(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")) {
            paths.push(path);
        }
    }
    paths.sort();
    if paths.is_empty() {
        return Err(Error::InvalidInput(format!("no .wav files in {}", dir.display())));
    }
    Ok(paths)
}

/// Load every clip in `dir`, resampled to the model rate.
fn load_corpus(id: &str, dir: &Path, sample_rate: u32) -> Result<Corpus> {
    let mut clips = Vec::new();
    for path in list_wavs(dir)? {
        clips.push(resample(&read_wav(&path)?, sample_rate)?);
    }
    Ok(Corpus { id: id.to_string(), clips })
}

fn parse_toml<T: serde::de::DeserializeOwned>(path: &Path, text: &str) -> Result<T> {
    toml::from_str(text)
        .map_err(|e| Error::InvalidInput(format!("config {}: {e}", path.display())))
}

/// Paths inside a config file resolve relative to the file's directory.
fn resolve_rel(config_dir: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        config_dir.join(p)
    }
}

fn parse_key_path(s: &str) -> std::result::Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((k, v)) if !k.is_empty() && !v.is_empty() => Ok((k.to_string(), PathBuf::from(v))),
        _ => Err(format!("expected ID=PATH, got {s:?}")),
    }
}

fn parse_vector_arg(s: &str) -> std::result::Result<(PathBuf, f64), String> {
    let (path, lambda) =
        s.rsplit_once(':').ok_or_else(|| format!("expected PATH:LAMBDA, got {s:?}"))?;
    if path.is_empty() {
        return Err(format!("expected PATH:LAMBDA, got {s:?}"));
    }
    let lambda: f64 =
        lambda.parse().map_err(|_| format!("bad merge coefficient {lambda:?} in {s:?}"))?;
    if !lambda.is_finite() {
        return Err(format!("merge coefficient must be finite, got {lambda}"));
    }
    Ok((PathBuf::from(path), lambda))
}

fn parse_layer(s: &str) -> std::result::Result<FeatureLayer, String> {
    match s {
        "last" => Ok(FeatureLayer::Last),
        "learned" => Ok(FeatureLayer::LearnedWeighted),
        other => other
            .parse::<usize>()
            .map(FeatureLayer::Index)
            .map_err(|_| format!("expected last, learned, or a block index, got {other:?}")),
    }
}

fn parse_wav_format(s: &str) -> std::result::Result<WavFormat, String> {
    match s {
        "float32" => Ok(WavFormat::Float32),
        "pcm16" => Ok(WavFormat::Pcm16),
        other => Err(format!("expected float32 or pcm16, got {other:?}")),
    }
}

fn parse_lambdas(s: &str) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for part in s.split(',') {
        let v: f64 = part
            .trim()
            .parse()
            .map_err(|_| Error::InvalidInput(format!("bad lambda {part:?} in {s:?}")))?;
        if !v.is_finite() {
            return Err(Error::InvalidInput(format!("lambda must be finite, got {v}")));
        }
        out.push(v);
    }
    if out.is_empty() {
        return Err(Error::InvalidInput("empty lambda list".into()));
    }
    Ok(out)
}

/// Checkpoint file stem, used as the task-vector label.
fn stem_of(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| {
        path.display().to_string()
    })
}

// ---------------------------------------------------------------------------
// Experiment config file ([model]/[codec]/[cqt]/[loss]/[run]/[[corpus]]/
// [stage1]/[stage2]/[eval]); shared by pretrain, sweep, and probe.
// ---------------------------------------------------------------------------

fn d_model_default() -> ModelConfig {
    ModelConfig::default()
}

#[derive(Debug, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelSection {
    /// Feature extractor layers as [channels, kernel, stride] triples.
    conv_channels: Vec<(usize, usize, usize)>,
    d_model: usize,
    n_layers: usize,
    n_heads: usize,
    d_embed: usize,
    #[serde(default = "defaults::sample_rate")]
    sample_rate: u32,
    #[serde(default = "defaults::frame_stride")]
    frame_stride: usize,
    #[serde(default = "defaults::tau")]
    tau: f64,
    #[serde(default = "defaults::mask_start_prob")]
    mask_start_prob: f64,
    #[serde(default = "defaults::mask_span")]
    mask_span: usize,
    #[serde(default = "defaults::max_frames")]
    max_frames: usize,
    /// Initialization seed; defaults to the experiment's base seed.
    rng_seed: Option<u64>,
}

mod defaults {
    use super::d_model_default;

    pub fn sample_rate() -> u32 {
        d_model_default().sample_rate
    }
    pub fn frame_stride() -> usize {
        d_model_default().frame_stride
    }
    pub fn tau() -> f64 {
        d_model_default().tau
    }
    pub fn mask_start_prob() -> f64 {
        d_model_default().mask_start_prob
    }
    pub fn mask_span() -> usize {
        d_model_default().mask_span
    }
    pub fn max_frames() -> usize {
        d_model_default().max_frames
    }
}

#[derive(Debug, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct CodecSection {
    codebooks: usize,
    codewords: usize,
    /// Feature and codeword dimension.
    dim: usize,
    #[serde(default)]
    seed: u64,
}

#[derive(Debug, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
struct CqtSection {
    f_min: f64,
    bins_per_octave: usize,
    n_bins: usize,
    frame_rate: u32,
}

impl Default for CqtSection {
    fn default() -> Self {
        let c = CqtConfig::default();
        CqtSection {
            f_min: c.f_min,
            bins_per_octave: c.bins_per_octave,
            n_bins: c.n_bins,
            frame_rate: c.frame_rate,
        }
    }
}

#[derive(Debug, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
struct LossSection {
    alpha: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        LossSection { alpha: LossConfig::default().alpha }
    }
}

#[derive(Debug, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunSection {
    crop_seconds: f64,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection { crop_seconds: 5.0 }
    }
}

#[derive(Debug, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct CorpusSection {
    id: String,
    dir: PathBuf,
}

#[derive(Debug, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalSection {
    /// Directory of held-out clips.
    dir: PathBuf,
    /// Evaluate every N optimizer steps.
    every: usize,
}

/// Stage hyper-parameters; anything omitted falls back to the stage's
/// built-in defaults (stabilization for [stage1], full adaptation for
/// [stage2]).
#[derive(Debug, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct StageSection {
    steps: Option<usize>,
    warmup_fraction: Option<f64>,
    lr_max: Option<f64>,
    lr_min: Option<f64>,
    beta1: Option<f64>,
    beta2: Option<f64>,
    eps: Option<f64>,
    weight_decay: Option<f64>,
    clip_norm: Option<f64>,
    batch_clips: Option<usize>,
    accum_steps: Option<usize>,
    /// Parameter groups to update: conv, codeword_emb, transformer, heads,
    /// mask_emb.
    trainable: Option<Vec<ParamGroup>>,
    mixup_prob: Option<f64>,
    rng_seed: Option<u64>,
    mix: MixSection,
}

#[derive(Debug, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct MixSection {
    /// Weighted non-replay sources, corpus id → weight.
    #[serde(default)]
    sources: BTreeMap<String, f64>,
    replay_source: Option<String>,
    #[serde(default)]
    replay_fraction: f64,
}

#[derive(Debug, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct ExperimentFile {
    seed: Option<u64>,
    model: ModelSection,
    codec: CodecSection,
    #[serde(default)]
    cqt: CqtSection,
    #[serde(default)]
    loss: LossSection,
    #[serde(default)]
    run: RunSection,
    #[serde(default)]
    corpus: Vec<CorpusSection>,
    stage1: Option<StageSection>,
    stage2: Option<StageSection>,
    eval: Option<EvalSection>,
}

/// A fully resolved experiment: every value the pipeline will actually use.
#[derive(Debug)]
struct Experiment {
    base_seed: u64,
    model: ModelConfig,
    teachers: Teachers,
    loss: LossConfig,
    crop_seconds: f64,
    corpora: Vec<(String, PathBuf)>,
    stage1: Option<(TrainStageConfig, DataMixSpec)>,
    stage2: Option<(TrainStageConfig, DataMixSpec)>,
    eval: Option<(PathBuf, usize)>,
    effective: serde_json::Value,
}

fn fold_stage(
    section: &StageSection,
    defaults: TrainStageConfig,
    default_seed: u64,
) -> (TrainStageConfig, DataMixSpec) {
    let mix = DataMixSpec {
        sources: section.mix.sources.iter().map(|(k, v)| (k.clone(), *v)).collect(),
        replay_source: section.mix.replay_source.clone(),
        replay_fraction: section.mix.replay_fraction,
    };
    let cfg = TrainStageConfig {
        steps: section.steps.unwrap_or(defaults.steps),
        warmup_fraction: section.warmup_fraction.unwrap_or(defaults.warmup_fraction),
        lr_max: section.lr_max.unwrap_or(defaults.lr_max),
        lr_min: section.lr_min.unwrap_or(defaults.lr_min),
        beta1: section.beta1.unwrap_or(defaults.beta1),
        beta2: section.beta2.unwrap_or(defaults.beta2),
        eps: section.eps.unwrap_or(defaults.eps),
        weight_decay: section.weight_decay.unwrap_or(defaults.weight_decay),
        clip_norm: section.clip_norm.unwrap_or(defaults.clip_norm),
        batch_clips: section.batch_clips.unwrap_or(defaults.batch_clips),
        accum_steps: section.accum_steps.unwrap_or(defaults.accum_steps),
        trainable_groups: section
            .trainable
            .as_ref()
            .map(|v| v.iter().copied().collect::<BTreeSet<_>>())
            .unwrap_or(defaults.trainable_groups),
        replay_fraction: section.mix.replay_fraction,
        mixup_prob: section.mixup_prob.unwrap_or(defaults.mixup_prob),
        rng_seed: section.rng_seed.unwrap_or(default_seed),
    };
    (cfg, mix)
}

fn load_experiment(path: &Path, seed_flag: Option<u64>) -> Result<Experiment> {
    let text = read_text(path)?;
    let file: ExperimentFile = parse_toml(path, &text)?;
    let config_dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();

    let base_seed = resolve_seed(seed_flag, file.seed)?;
    let m = &file.model;
    let model = ModelConfig {
        sample_rate: m.sample_rate,
        frame_stride: m.frame_stride,
        conv_channels: m.conv_channels.clone(),
        d_model: m.d_model,
        n_layers: m.n_layers,
        n_heads: m.n_heads,
        k: file.codec.codebooks,
        c: file.codec.codewords,
        d_embed: m.d_embed,
        cqt_bins: file.cqt.n_bins,
        tau: m.tau,
        mask_start_prob: m.mask_start_prob,
        mask_span: m.mask_span,
        max_frames: m.max_frames,
        rng_seed: m.rng_seed.unwrap_or(base_seed),
    };
    model.validate()?;
    let codec =
        init_rvq_codec(file.codec.codebooks, file.codec.codewords, file.codec.dim, file.codec.seed)?;
    let cqt = CqtConfig {
        f_min: file.cqt.f_min,
        bins_per_octave: file.cqt.bins_per_octave,
        n_bins: file.cqt.n_bins,
        frame_rate: file.cqt.frame_rate,
    };
    let loss = LossConfig { alpha: file.loss.alpha };

    let mut seen = BTreeSet::new();
    let corpora: Vec<(String, PathBuf)> = file
        .corpus
        .iter()
        .map(|c| (c.id.clone(), resolve_rel(&config_dir, &c.dir)))
        .collect();
    for (id, _) in &corpora {
        if !seen.insert(id.clone()) {
            return Err(Error::InvalidInput(format!("duplicate corpus id {id:?} in config")));
        }
    }

    let stage1 = file
        .stage1
        .as_ref()
        .map(|s| fold_stage(s, TrainStageConfig::stage1_defaults(), derive_seed(base_seed, &[1])));
    let stage2 = file
        .stage2
        .as_ref()
        .map(|s| fold_stage(s, TrainStageConfig::stage2_defaults(), derive_seed(base_seed, &[2])));
    let eval = file
        .eval
        .as_ref()
        .map(|e| (resolve_rel(&config_dir, &e.dir), e.every));
    if let Some((_, every)) = &eval {
        if *every == 0 {
            return Err(Error::InvalidInput("eval.every must be >= 1".into()));
        }
    }

    let stage_json = |s: &Option<(TrainStageConfig, DataMixSpec)>| match s {
        Some((cfg, mix)) => json!({ "config": cfg, "mix": mix }),
        None => serde_json::Value::Null,
    };
    let effective = json!({
        "seed": base_seed,
        "model": model,
        "codec": {
            "codebooks": file.codec.codebooks,
            "codewords": file.codec.codewords,
            "dim": file.codec.dim,
            "seed": file.codec.seed,
            "digest": codec.digest(),
        },
        "cqt": {
            "f_min": cqt.f_min,
            "bins_per_octave": cqt.bins_per_octave,
            "n_bins": cqt.n_bins,
            "frame_rate": cqt.frame_rate,
        },
        "loss": { "alpha": loss.alpha },
        "run": { "crop_seconds": file.run.crop_seconds },
        "corpora": corpora
            .iter()
            .map(|(id, dir)| json!({ "id": id, "dir": dir.display().to_string() }))
            .collect::<Vec<_>>(),
        "stage1": stage_json(&stage1),
        "stage2": stage_json(&stage2),
        "eval": eval.as_ref().map(|(dir, every)| {
            json!({ "dir": dir.display().to_string(), "every": every })
        }),
    });

    Ok(Experiment {
        base_seed,
        model,
        teachers: Teachers { codec, cqt },
        loss,
        crop_seconds: file.run.crop_seconds,
        corpora,
        stage1,
        stage2,
        eval,
        effective,
    })
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

#[derive(Args)]
struct SynthArgs {
    /// Culture description TOML
    #[arg(long)]
    config: PathBuf,
    /// Output directory for clips, tags.csv, and the manifest
    #[arg(long)]
    out_dir: PathBuf,
    /// Base seed (overrides the config file and CMRT_SEED)
    #[arg(long)]
    seed: Option<u64>,
    /// Number of clips (overrides the config file)
    #[arg(long)]
    clips: Option<usize>,
    /// Clip duration in seconds (overrides the config file)
    #[arg(long)]
    duration: Option<f64>,
    /// Sample encoding
    #[arg(long, default_value = "float32", value_parser = parse_wav_format)]
    format: WavFormat,
}

#[derive(Debug, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct CultureFile {
    id: String,
    /// Fundamental frequencies (Hz) events draw from.
    pitch_set: Vec<f64>,
    #[serde(default)]
    timbre_seed: u64,
    #[serde(default = "default_tempo_range")]
    tempo_range: (f64, f64),
    #[serde(default = "defaults::sample_rate")]
    sample_rate: u32,
    #[serde(default = "default_clip_count")]
    clips: usize,
    #[serde(default = "default_clip_duration")]
    duration: f64,
    seed: Option<u64>,
}

fn default_tempo_range() -> (f64, f64) {
    (1.5, 3.0)
}

fn default_clip_count() -> usize {
    8
}

fn default_clip_duration() -> f64 {
    10.0
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let text = read_text(&args.config)?;
    let file: CultureFile = parse_toml(&args.config, &text)?;
    let seed = resolve_seed(args.seed, file.seed)?;
    let clips = args.clips.unwrap_or(file.clips);
    let duration = args.duration.unwrap_or(file.duration);
    if clips == 0 {
        return Err(Error::InvalidInput("clips must be >= 1".into()));
    }
    ensure_dir(&args.out_dir)?;

    let mut artifacts = Vec::new();
    let mut tags = String::from("clip,tags\n");
    for i in 0..clips {
        let spec = SynthCultureSpec {
            pitch_set: file.pitch_set.clone(),
            timbre_seed: file.timbre_seed,
            tempo_range: file.tempo_range,
            rng_seed: derive_seed(seed, &[i as u64]),
            sample_rate: file.sample_rate,
        };
        let buf = synth_culture_clip(&spec, duration)?;
        let name = format!("clip_{i:04}.wav");
        write_wav(&args.out_dir.join(&name), &buf, args.format)?;
        tags.push_str(&format!("{name},{}\n", file.id));
        artifacts.push(name);
    }
    write_text(&args.out_dir.join("tags.csv"), &tags)?;
    artifacts.push("tags.csv".to_string());

    write_manifest(
        &args.out_dir,
        &RunManifest {
            command: "synth".into(),
            argv: argv(),
            config_path: Some(args.config.display().to_string()),
            seed_record: vec![seed],
            artifact_paths: artifacts,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            effective: json!({
                "id": file.id,
                "pitch_set": file.pitch_set,
                "timbre_seed": file.timbre_seed,
                "tempo_range": file.tempo_range,
                "sample_rate": file.sample_rate,
                "clips": clips,
                "duration": duration,
                "seed": seed,
                "format": format!("{:?}", args.format),
            }),
        },
    )?;
    println!("synth: wrote {clips} clips to {}", args.out_dir.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// tokenize
// ---------------------------------------------------------------------------

#[derive(Args)]
struct TokenizeArgs {
    /// Directory of WAV clips
    #[arg(long)]
    in_dir: PathBuf,
    /// Output directory for histogram.csv (and token tables)
    #[arg(long)]
    out_dir: PathBuf,
    /// Codebook count
    #[arg(long, default_value_t = 8)]
    codebooks: usize,
    /// Codewords per codebook
    #[arg(long, default_value_t = 1024)]
    codewords: usize,
    /// Feature and codeword dimension
    #[arg(long, default_value_t = 256)]
    dim: usize,
    /// Frozen codec seed; must match across every corpus being compared
    #[arg(long, default_value_t = 0)]
    codec_seed: u64,
    /// Clips are resampled to this rate before feature extraction
    #[arg(long, default_value_t = 24_000)]
    sample_rate: u32,
    /// Also write one token CSV per clip
    #[arg(long)]
    emit_tokens: bool,
}

fn cmd_tokenize(args: TokenizeArgs) -> Result<()> {
    let codec = init_rvq_codec(args.codebooks, args.codewords, args.dim, args.codec_seed)?;
    ensure_dir(&args.out_dir)?;
    let mut artifacts = Vec::new();
    let mut seqs = Vec::new();
    for path in list_wavs(&args.in_dir)? {
        let buf = resample(&read_wav(&path)?, args.sample_rate)?;
        let feats = frame_features(&buf, codec.d())?;
        let seq = tokenize(&codec, &feats)?;
        if args.emit_tokens {
            let name = format!("tokens_{}.csv", stem_of(&path));
            write_text(&args.out_dir.join(&name), &seq.to_csv())?;
            artifacts.push(name);
        }
        seqs.push(seq);
    }
    let hist = token_histogram(&seqs)?;
    write_text(&args.out_dir.join("histogram.csv"), &hist.to_csv())?;
    artifacts.push("histogram.csv".to_string());

    write_manifest(
        &args.out_dir,
        &RunManifest {
            command: "tokenize".into(),
            argv: argv(),
            config_path: None,
            seed_record: vec![args.codec_seed],
            artifact_paths: artifacts,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            effective: json!({
                "in_dir": args.in_dir.display().to_string(),
                "codebooks": args.codebooks,
                "codewords": args.codewords,
                "dim": args.dim,
                "codec_seed": args.codec_seed,
                "codec_digest": codec.digest(),
                "sample_rate": args.sample_rate,
                "clips": seqs.len(),
            }),
        },
    )?;
    println!("tokenize: {} clips into {}", seqs.len(), args.out_dir.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// pretrain
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StageSel {
    /// Run [stage1] then [stage2]
    Both,
    /// Run only [stage1]
    #[value(name = "1")]
    One,
    /// Run only [stage2]
    #[value(name = "2")]
    Two,
}

#[derive(Args)]
struct PretrainArgs {
    /// Experiment TOML
    #[arg(long)]
    config: PathBuf,
    /// Output directory for checkpoints, logs, and the manifest
    #[arg(long)]
    out_dir: PathBuf,
    /// Which configured stages to run
    #[arg(long, value_enum, default_value_t = StageSel::Both)]
    stage: StageSel,
    /// Base seed (overrides the config file and CMRT_SEED)
    #[arg(long)]
    seed: Option<u64>,
    /// Start from this checkpoint instead of a fresh initialization
    #[arg(long)]
    init: Option<PathBuf>,
    /// Save an intermediate checkpoint every N optimizer steps
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

fn stage_outputs(
    out_dir: &Path,
    label: &str,
    result: &StageResult,
    artifacts: &mut Vec<String>,
) -> Result<()> {
    let ckpt_name = format!("{label}.ckpt");
    checkpoint::save(&result.checkpoint, &out_dir.join(&ckpt_name))?;
    artifacts.push(ckpt_name);
    let log_name = format!("{label}_log.csv");
    write_text(&out_dir.join(&log_name), &log_to_csv(&result.log))?;
    artifacts.push(log_name);
    if !result.eval_history.is_empty() {
        let mut csv = String::from("step,heldout_loss\n");
        for (step, loss) in &result.eval_history {
            csv.push_str(&format!("{step},{loss:.9e}\n"));
        }
        let name = format!("{label}_eval.csv");
        write_text(&out_dir.join(&name), &csv)?;
        artifacts.push(name);
    }
    Ok(())
}

fn cmd_pretrain(args: PretrainArgs) -> Result<()> {
    let exp = load_experiment(&args.config, args.seed)?;
    ensure_dir(&args.out_dir)?;

    let mut corpora = Vec::new();
    for (id, dir) in &exp.corpora {
        corpora.push(load_corpus(id, dir, exp.model.sample_rate)?);
    }
    let eval_clips = match &exp.eval {
        Some((dir, _)) => load_corpus("eval", dir, exp.model.sample_rate)?.clips,
        None => Vec::new(),
    };
    let checkpoint_dir = args.checkpoint_every.map(|_| args.out_dir.join("checkpoints"));
    if let Some(dir) = &checkpoint_dir {
        ensure_dir(dir)?;
    }
    let opts = RunStageOptions {
        loss: exp.loss,
        crop_seconds: exp.crop_seconds,
        checkpoint_every: args.checkpoint_every,
        checkpoint_dir: checkpoint_dir.clone(),
        eval_every: exp.eval.as_ref().map(|(_, every)| *every),
        eval_clips,
    };

    let init = match &args.init {
        Some(path) => checkpoint::load(path)?,
        None => Checkpoint::new(
            init_model(&exp.model)?,
            exp.model.digest(),
            0,
            "init",
            vec![exp.model.rng_seed],
        ),
    };

    let stage_of = |which: &str| -> Result<&(TrainStageConfig, DataMixSpec)> {
        match which {
            "stage1" => exp.stage1.as_ref(),
            _ => exp.stage2.as_ref(),
        }
        .ok_or_else(|| {
            Error::InvalidInput(format!("--stage requires a [{which}] section in the config"))
        })
    };

    let mut artifacts = Vec::new();
    let final_ckpt = match args.stage {
        StageSel::Both => {
            let (cfg1, mix1) = stage_of("stage1")?;
            let (cfg2, mix2) = stage_of("stage2")?;
            let (s1, s2) = run_two_stage(
                &init,
                &exp.model,
                cfg1,
                cfg2,
                mix1,
                mix2,
                &corpora,
                &exp.teachers,
                &opts,
            )?;
            stage_outputs(&args.out_dir, "stage1", &s1, &mut artifacts)?;
            stage_outputs(&args.out_dir, "stage2", &s2, &mut artifacts)?;
            s2.checkpoint
        }
        StageSel::One => {
            let (cfg, mix) = stage_of("stage1")?;
            let s = run_stage(
                &init,
                &exp.model,
                cfg,
                mix,
                &corpora,
                &exp.teachers,
                "stage1",
                &opts,
            )?;
            stage_outputs(&args.out_dir, "stage1", &s, &mut artifacts)?;
            s.checkpoint
        }
        StageSel::Two => {
            let (cfg, mix) = stage_of("stage2")?;
            let s = run_stage(
                &init,
                &exp.model,
                cfg,
                mix,
                &corpora,
                &exp.teachers,
                "stage2",
                &opts,
            )?;
            stage_outputs(&args.out_dir, "stage2", &s, &mut artifacts)?;
            s.checkpoint
        }
    };
    if let Some(dir) = &checkpoint_dir {
        let mut cadence: Vec<String> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok())
            .map(|e| format!("checkpoints/{}", e.file_name().to_string_lossy()))
            .collect();
        cadence.sort();
        artifacts.extend(cadence);
    }

    let mut effective = exp.effective.clone();
    effective["pretrain"] = json!({
        "stage": format!("{:?}", args.stage).to_lowercase(),
        "init": args.init.as_ref().map(|p| p.display().to_string()),
        "checkpoint_every": args.checkpoint_every,
    });
    write_manifest(
        &args.out_dir,
        &RunManifest {
            command: "pretrain".into(),
            argv: argv(),
            config_path: Some(args.config.display().to_string()),
            seed_record: final_ckpt.seed_record.clone(),
            artifact_paths: artifacts,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            effective,
        },
    )?;
    println!(
        "pretrain: finished at step {} ({}) into {}",
        final_ckpt.step,
        final_ckpt.stage_label,
        args.out_dir.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// merge
// ---------------------------------------------------------------------------

#[derive(Args)]
struct MergeArgs {
    /// Base checkpoint the task vectors are measured against
    #[arg(long)]
    base: PathBuf,
    /// Adapted checkpoint and coefficient as PATH:LAMBDA; repeatable
    #[arg(long = "vector", value_parser = parse_vector_arg)]
    vectors: Vec<(PathBuf, f64)>,
    /// Checkpoints to average uniformly (λ = 1/N); repeatable
    #[arg(long = "average")]
    averages: Vec<PathBuf>,
    /// Output checkpoint path
    #[arg(long)]
    out: PathBuf,
}

fn cmd_merge(args: MergeArgs) -> Result<()> {
    if args.vectors.is_empty() == args.averages.is_empty() {
        return Err(Error::InvalidInput(
            "merge needs either --vector PATH:LAMBDA entries or --average PATH entries".into(),
        ));
    }
    let base = checkpoint::load(&args.base)?;
    let mut mode = "task_arithmetic";
    let merged = if !args.vectors.is_empty() {
        let mut vectors = Vec::new();
        for (path, _) in &args.vectors {
            let adapted = checkpoint::load(path)?;
            vectors.push(task_vector(&adapted, &base, &stem_of(path))?);
        }
        let spec = MergeSpec {
            base: &base,
            vectors: vectors.iter().zip(&args.vectors).map(|(v, (_, l))| (v, *l)).collect(),
        };
        merge::merge_task_arithmetic(&spec)?
    } else {
        mode = "weight_average";
        let loaded: Vec<Checkpoint> =
            args.averages.iter().map(|p| checkpoint::load(p)).collect::<Result<_>>()?;
        let refs: Vec<&Checkpoint> = loaded.iter().collect();
        merge::weight_average(&refs, &base)?
    };

    let out_dir = args.out.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = out_dir {
        ensure_dir(dir)?;
    }
    checkpoint::save(&merged, &args.out)?;

    let manifest_dir = out_dir.unwrap_or(Path::new("."));
    write_manifest(
        manifest_dir,
        &RunManifest {
            command: "merge".into(),
            argv: argv(),
            config_path: None,
            seed_record: merged.seed_record.clone(),
            artifact_paths: vec![args.out.display().to_string()],
            tool_version: env!("CARGO_PKG_VERSION").into(),
            effective: json!({
                "mode": mode,
                "base": args.base.display().to_string(),
                "vectors": args.vectors.iter().map(|(p, l)| {
                    json!({ "path": p.display().to_string(), "label": stem_of(p), "lambda": l })
                }).collect::<Vec<_>>(),
                "averages": args.averages.iter().map(|p| p.display().to_string())
                    .collect::<Vec<_>>(),
            }),
        },
    )?;
    println!("merge: wrote {}", args.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

#[derive(Args)]
struct SweepArgs {
    /// Experiment TOML (model, codec, cqt, and loss settings)
    #[arg(long)]
    config: PathBuf,
    /// Base checkpoint
    #[arg(long)]
    base: PathBuf,
    /// Adapted checkpoints whose task vectors are swept; repeatable
    #[arg(long = "adapted", required = true)]
    adapted: Vec<PathBuf>,
    /// Held-out corpus per reported column as ID=DIR; repeatable
    #[arg(long = "eval-dir", value_parser = parse_key_path, required = true)]
    eval_dirs: Vec<(String, PathBuf)>,
    /// Comma-separated merge coefficients (default: the built-in grid)
    #[arg(long)]
    lambdas: Option<String>,
    /// Evaluation seed (overrides the config file and CMRT_SEED)
    #[arg(long)]
    seed: Option<u64>,
    /// Evaluate on at most this many clips per corpus
    #[arg(long)]
    max_clips: Option<usize>,
    /// Output directory for sweep.csv, sweep.svg, and the manifest
    #[arg(long)]
    out_dir: PathBuf,
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let exp = load_experiment(&args.config, args.seed)?;
    let lambdas = match &args.lambdas {
        Some(s) => parse_lambdas(s)?,
        None => DEFAULT_LAMBDAS.to_vec(),
    };
    let base = checkpoint::load(&args.base)?;
    if base.config_digest != exp.model.digest() {
        return Err(Error::DigestMismatch(format!(
            "base checkpoint was built for config {} but the experiment file resolves to {}",
            base.config_digest,
            exp.model.digest()
        )));
    }
    let mut vectors: Vec<TaskVector> = Vec::new();
    for path in &args.adapted {
        let adapted = checkpoint::load(path)?;
        vectors.push(task_vector(&adapted, &base, &stem_of(path))?);
    }
    let mut eval_sets = Vec::new();
    let mut task_names = Vec::new();
    for (id, dir) in &args.eval_dirs {
        let mut clips = load_corpus(id, dir, exp.model.sample_rate)?.clips;
        if let Some(n) = args.max_clips {
            clips.truncate(n.max(1));
        }
        eval_sets.push(clips);
        task_names.push(id.clone());
    }

    let eval_seed = derive_seed(exp.base_seed, &[0xE7A1]);
    let table = merge::lambda_sweep(&base, &vectors, &lambdas, &task_names, |ckpt| {
        eval_sets
            .iter()
            .enumerate()
            .map(|(i, clips)| {
                heldout_loss(
                    &ckpt.params,
                    &exp.model,
                    &exp.teachers,
                    &exp.loss,
                    clips,
                    derive_seed(eval_seed, &[i as u64]),
                )
            })
            .collect()
    })?;

    ensure_dir(&args.out_dir)?;
    write_text(&args.out_dir.join("sweep.csv"), &table.to_csv())?;
    let series: Vec<plot::Series> = task_names
        .iter()
        .enumerate()
        .map(|(t, name)| plot::Series {
            name: name.clone(),
            points: table.rows.iter().map(|(l, m)| (*l, m[t])).collect(),
        })
        .collect();
    let svg = plot::line_chart("Merge coefficient sweep", "lambda", "held-out loss", &series)?;
    write_text(&args.out_dir.join("sweep.svg"), &svg)?;

    write_manifest(
        &args.out_dir,
        &RunManifest {
            command: "sweep".into(),
            argv: argv(),
            config_path: Some(args.config.display().to_string()),
            seed_record: vec![eval_seed],
            artifact_paths: vec!["sweep.csv".into(), "sweep.svg".into()],
            tool_version: env!("CARGO_PKG_VERSION").into(),
            effective: json!({
                "experiment": exp.effective,
                "base": args.base.display().to_string(),
                "adapted": args.adapted.iter().map(|p| p.display().to_string())
                    .collect::<Vec<_>>(),
                "eval_dirs": args.eval_dirs.iter().map(|(id, dir)| {
                    json!({ "id": id, "dir": dir.display().to_string() })
                }).collect::<Vec<_>>(),
                "lambdas": lambdas,
                "max_clips": args.max_clips,
            }),
        },
    )?;
    println!("sweep: {} rows into {}", table.rows.len(), args.out_dir.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// probe
// ---------------------------------------------------------------------------

#[derive(Args)]
struct ProbeArgs {
    /// Experiment TOML (model settings matching the checkpoint)
    #[arg(long)]
    config: PathBuf,
    /// Checkpoint whose frozen features are probed
    #[arg(long)]
    checkpoint: PathBuf,
    /// Corpus directories containing clips and a tags.csv table; repeatable
    #[arg(long = "data", required = true)]
    data: Vec<PathBuf>,
    /// Fraction of each corpus assigned to the probe train split
    #[arg(long, default_value_t = 0.75)]
    train_frac: f64,
    /// Feature source: last, learned, or a block index
    #[arg(long, default_value = "last", value_parser = parse_layer)]
    layer: FeatureLayer,
    /// Probe hidden width
    #[arg(long, default_value_t = 512)]
    hidden: usize,
    #[arg(long, default_value_t = 40)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    /// Scoring window length, seconds
    #[arg(long, default_value_t = 30.0)]
    window_seconds: f64,
    /// Truncate recordings to this many seconds before windowing
    #[arg(long)]
    max_duration: Option<f64>,
    /// Number of probe seeds to summarize over
    #[arg(long, default_value_t = 5)]
    num_seeds: usize,
    /// Base seed (overrides the config file and CMRT_SEED)
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for metrics CSVs and the manifest
    #[arg(long)]
    out_dir: PathBuf,
}

/// Rows of a `tags.csv` table: clip file name plus `;`-joined tags.
fn read_tags(dir: &Path) -> Result<Vec<(String, Vec<String>)>> {
    let path = dir.join("tags.csv");
    let text = read_text(&path)?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?
        .clone();
    if headers.len() < 2 || &headers[0] != "clip" || &headers[1] != "tags" {
        return Err(Error::Format(format!(
            "{}: expected a clip,tags header, got {headers:?}",
            path.display()
        )));
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let clip = record.get(0).unwrap_or("").to_string();
        if clip.is_empty() {
            return Err(Error::Format(format!("{}: row with empty clip name", path.display())));
        }
        let tags: Vec<String> = record
            .get(1)
            .unwrap_or("")
            .split(';')
            .filter(|t| !t.is_empty())
            .map(|t| t.to_string())
            .collect();
        rows.push((clip, tags));
    }
    if rows.is_empty() {
        return Err(Error::Format(format!("{}: no rows", path.display())));
    }
    rows.sort();
    Ok(rows)
}

fn cmd_probe(args: ProbeArgs) -> Result<()> {
    let exp = load_experiment(&args.config, args.seed)?;
    let ckpt = checkpoint::load(&args.checkpoint)?;
    if ckpt.config_digest != exp.model.digest() {
        return Err(Error::DigestMismatch(format!(
            "checkpoint was built for config {} but the experiment file resolves to {}",
            ckpt.config_digest,
            exp.model.digest()
        )));
    }
    if !(args.train_frac > 0.0 && args.train_frac < 1.0) {
        return Err(Error::InvalidInput("train_frac must lie in (0, 1)".into()));
    }
    if args.num_seeds == 0 {
        return Err(Error::InvalidInput("num_seeds must be >= 1".into()));
    }

    // Union of tags across corpora, then a per-corpus deterministic split by
    // sorted file name.
    let mut per_dir = Vec::new();
    let mut tag_set = BTreeSet::new();
    for dir in &args.data {
        let rows = read_tags(dir)?;
        for (_, tags) in &rows {
            tag_set.extend(tags.iter().cloned());
        }
        per_dir.push((dir.clone(), rows));
    }
    let tag_names: Vec<String> = tag_set.into_iter().collect();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (dir, rows) in &per_dir {
        if rows.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "corpus {} needs at least two tagged clips to split",
                dir.display()
            )));
        }
        let n_train =
            ((args.train_frac * rows.len() as f64).round() as usize).clamp(1, rows.len() - 1);
        for (i, (name, tags)) in rows.iter().enumerate() {
            let buf = resample(&read_wav(&dir.join(name))?, exp.model.sample_rate)?;
            let clip = TaggedClip {
                audio_ref: dir.join(name).display().to_string(),
                labels: tag_names.iter().map(|t| tags.contains(t)).collect(),
            };
            if i < n_train {
                train.push((clip, buf));
            } else {
                test.push((clip, buf));
            }
        }
    }
    let dataset = TaskDataset { tag_names: tag_names.clone(), train, test };

    let cfg = ProbeConfig {
        hidden_dim: args.hidden,
        feature_layer: args.layer,
        epochs: args.epochs,
        lr: args.lr,
        batch: args.batch,
        window_seconds: args.window_seconds,
        max_duration_seconds: args.max_duration,
        rng_seed: 0,
    };
    let seeds: Vec<u64> =
        (0..args.num_seeds).map(|i| derive_seed(exp.base_seed, &[0x5EED, i as u64])).collect();
    let (summary, reports) =
        evaluate_across_seeds(&ckpt.params, &exp.model, &dataset, &cfg, &seeds)?;

    ensure_dir(&args.out_dir)?;
    let mut artifacts = Vec::new();
    for (i, report) in reports.iter().enumerate() {
        let name = format!("metrics_seed{i}.csv");
        write_text(&args.out_dir.join(&name), &report.to_csv())?;
        artifacts.push(name);
    }
    let mut summary_csv = String::from("seed,roc_auc_macro,ap_macro\n");
    for (seed, report) in seeds.iter().zip(&reports) {
        summary_csv
            .push_str(&format!("{seed},{:.6},{:.6}\n", report.roc_auc_macro, report.ap_macro));
    }
    summary_csv.push_str(&format!("mean,{:.6},{:.6}\n", summary.roc_auc_mean, summary.ap_mean));
    summary_csv.push_str(&format!("std,{:.6},{:.6}\n", summary.roc_auc_std, summary.ap_std));
    write_text(&args.out_dir.join("summary.csv"), &summary_csv)?;
    artifacts.push("summary.csv".to_string());

    write_manifest(
        &args.out_dir,
        &RunManifest {
            command: "probe".into(),
            argv: argv(),
            config_path: Some(args.config.display().to_string()),
            seed_record: seeds.clone(),
            artifact_paths: artifacts,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            effective: json!({
                "experiment": exp.effective,
                "checkpoint": args.checkpoint.display().to_string(),
                "data": args.data.iter().map(|d| d.display().to_string()).collect::<Vec<_>>(),
                "train_frac": args.train_frac,
                "probe": cfg,
                "tags": tag_names,
            }),
        },
    )?;
    println!(
        "probe: macro ROC-AUC {:.4} ± {:.4} over {} seeds into {}",
        summary.roc_auc_mean,
        summary.roc_auc_std,
        seeds.len(),
        args.out_dir.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// similarity
// ---------------------------------------------------------------------------

#[derive(Args)]
struct SimilarityArgs {
    /// Histogram CSV per corpus as ID=PATH; repeatable
    #[arg(long = "histogram", value_parser = parse_key_path, required = true)]
    histograms: Vec<(String, PathBuf)>,
    /// Distance: jsd or cosine
    #[arg(long, default_value = "jsd")]
    metric: SimilarityMetric,
    /// Output directory for similarity.csv, similarity.svg, and the manifest
    #[arg(long)]
    out_dir: PathBuf,
}

fn cmd_similarity(args: SimilarityArgs) -> Result<()> {
    if args.histograms.len() < 2 {
        return Err(Error::InvalidInput("similarity needs at least two corpora".into()));
    }
    let mut map = BTreeMap::new();
    for (id, path) in &args.histograms {
        let hist = TokenHistogram::from_csv(&read_text(path)?)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if map.insert(id.clone(), hist).is_some() {
            return Err(Error::InvalidInput(format!("duplicate corpus id {id:?}")));
        }
    }
    let matrix = culture_similarity_matrix(&map, args.metric)?;

    ensure_dir(&args.out_dir)?;
    write_text(&args.out_dir.join("similarity.csv"), &matrix.to_csv())?;
    let title = format!("Token-distribution distance ({:?})", args.metric).to_lowercase();
    let svg = plot::heatmap(&title, &matrix.corpus_ids, &matrix.values)?;
    write_text(&args.out_dir.join("similarity.svg"), &svg)?;

    write_manifest(
        &args.out_dir,
        &RunManifest {
            command: "similarity".into(),
            argv: argv(),
            config_path: None,
            seed_record: vec![],
            artifact_paths: vec!["similarity.csv".into(), "similarity.svg".into()],
            tool_version: env!("CARGO_PKG_VERSION").into(),
            effective: json!({
                "metric": format!("{:?}", args.metric).to_lowercase(),
                "histograms": args.histograms.iter().map(|(id, p)| {
                    json!({ "id": id, "path": p.display().to_string() })
                }).collect::<Vec<_>>(),
            }),
        },
    )?;
    println!(
        "similarity: {}x{} matrix into {}",
        matrix.n(),
        matrix.n(),
        args.out_dir.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

#[derive(Args)]
#[command(group = clap::ArgGroup::new("input").required(true).multiple(true)
    .args(["sweep", "similarity", "radar"]))]
struct ReportArgs {
    /// λ-sweep CSV to render as per-task lines
    #[arg(long)]
    sweep: Option<PathBuf>,
    /// Similarity matrix CSV to render as a heatmap
    #[arg(long)]
    similarity: Option<PathBuf>,
    /// Probe metrics CSV per model as LABEL=PATH; rendered as a radar chart
    #[arg(long = "radar", value_parser = parse_key_path)]
    radar: Vec<(String, PathBuf)>,
    /// Output directory for the SVG figures and the manifest
    #[arg(long)]
    out_dir: PathBuf,
}

fn csv_reader(text: &str) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes())
}

fn parse_cell_f64(path: &Path, cell: &str) -> Result<f64> {
    cell.parse()
        .map_err(|_| Error::Format(format!("{}: bad numeric cell {cell:?}", path.display())))
}

/// `lambda,task...` rows → one line-chart series per task column.
fn parse_sweep_csv(path: &Path) -> Result<Vec<plot::Series>> {
    let text = read_text(path)?;
    let mut reader = csv_reader(&text);
    let headers =
        reader.headers().map_err(|e| Error::Format(format!("{}: {e}", path.display())))?.clone();
    if headers.len() < 2 || &headers[0] != "lambda" {
        return Err(Error::Format(format!(
            "{}: expected a lambda,task... header, got {headers:?}",
            path.display()
        )));
    }
    let mut series: Vec<plot::Series> = headers
        .iter()
        .skip(1)
        .map(|name| plot::Series { name: name.to_string(), points: Vec::new() })
        .collect();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let lambda = parse_cell_f64(path, record.get(0).unwrap_or(""))?;
        for (t, s) in series.iter_mut().enumerate() {
            s.points.push((lambda, parse_cell_f64(path, record.get(t + 1).unwrap_or(""))?));
        }
    }
    if series.iter().any(|s| s.points.is_empty()) {
        return Err(Error::Format(format!("{}: no data rows", path.display())));
    }
    Ok(series)
}

/// `corpus,id...` rows → (labels, row-major matrix values).
fn parse_similarity_csv(path: &Path) -> Result<(Vec<String>, Vec<f64>)> {
    let text = read_text(path)?;
    let mut reader = csv_reader(&text);
    let headers =
        reader.headers().map_err(|e| Error::Format(format!("{}: {e}", path.display())))?.clone();
    if headers.len() < 2 || &headers[0] != "corpus" {
        return Err(Error::Format(format!(
            "{}: expected a corpus,id... header, got {headers:?}",
            path.display()
        )));
    }
    let ids: Vec<String> = headers.iter().skip(1).map(|s| s.to_string()).collect();
    let mut values = Vec::with_capacity(ids.len() * ids.len());
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let row_id = record.get(0).unwrap_or("");
        if i >= ids.len() || row_id != ids[i] {
            return Err(Error::Format(format!(
                "{}: row label {row_id:?} does not match header order",
                path.display()
            )));
        }
        for j in 0..ids.len() {
            values.push(parse_cell_f64(path, record.get(j + 1).unwrap_or(""))?);
        }
    }
    if values.len() != ids.len() * ids.len() {
        return Err(Error::Format(format!(
            "{}: expected {} rows, got fewer",
            path.display(),
            ids.len()
        )));
    }
    Ok((ids, values))
}

/// Probe metrics CSV → (tag, roc_auc) rows, skipping the macro summary row
/// and tags whose metric is undefined.
fn parse_metrics_csv(path: &Path) -> Result<BTreeMap<String, f64>> {
    let text = read_text(path)?;
    let mut reader = csv_reader(&text);
    let headers =
        reader.headers().map_err(|e| Error::Format(format!("{}: {e}", path.display())))?.clone();
    let tag_col = headers.iter().position(|h| h == "tag");
    let auc_col = headers.iter().position(|h| h == "roc_auc");
    let (Some(tag_col), Some(auc_col)) = (tag_col, auc_col) else {
        return Err(Error::Format(format!(
            "{}: expected tag and roc_auc columns, got {headers:?}",
            path.display()
        )));
    };
    let mut out = BTreeMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let tag = record.get(tag_col).unwrap_or("");
        let cell = record.get(auc_col).unwrap_or("");
        if tag == "macro" || tag.is_empty() || cell.is_empty() {
            continue;
        }
        out.insert(tag.to_string(), parse_cell_f64(path, cell)?);
    }
    if out.is_empty() {
        return Err(Error::Format(format!("{}: no per-tag metric rows", path.display())));
    }
    Ok(out)
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    ensure_dir(&args.out_dir)?;
    let mut artifacts = Vec::new();

    if let Some(path) = &args.sweep {
        let series = parse_sweep_csv(path)?;
        let svg = plot::line_chart("Merge coefficient sweep", "lambda", "held-out loss", &series)?;
        write_text(&args.out_dir.join("sweep.svg"), &svg)?;
        artifacts.push("sweep.svg".to_string());
    }
    if let Some(path) = &args.similarity {
        let (labels, values) = parse_similarity_csv(path)?;
        let svg = plot::heatmap("Token-distribution distance", &labels, &values)?;
        write_text(&args.out_dir.join("similarity.svg"), &svg)?;
        artifacts.push("similarity.svg".to_string());
    }
    if !args.radar.is_empty() {
        let mut tables = Vec::new();
        for (label, path) in &args.radar {
            tables.push((label.clone(), parse_metrics_csv(path)?));
        }
        // Axes are the tags present in every table, in sorted order.
        let mut axes: Vec<String> = tables[0].1.keys().cloned().collect();
        axes.retain(|tag| tables.iter().all(|(_, t)| t.contains_key(tag)));
        let series: Vec<(String, Vec<f64>)> = tables
            .iter()
            .map(|(label, t)| (label.clone(), axes.iter().map(|a| t[a]).collect()))
            .collect();
        let svg = plot::radar_chart("Per-tag ROC-AUC", &axes, &series)?;
        write_text(&args.out_dir.join("radar.svg"), &svg)?;
        artifacts.push("radar.svg".to_string());
    }

    write_manifest(
        &args.out_dir,
        &RunManifest {
            command: "report".into(),
            argv: argv(),
            config_path: None,
            seed_record: vec![],
            artifact_paths: artifacts,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            effective: json!({
                "sweep": args.sweep.as_ref().map(|p| p.display().to_string()),
                "similarity": args.similarity.as_ref().map(|p| p.display().to_string()),
                "radar": args.radar.iter().map(|(l, p)| {
                    json!({ "label": l, "path": p.display().to_string() })
                }).collect::<Vec<_>>(),
            }),
        },
    )?;
    println!("report: figures written to {}", args.out_dir.display());
    Ok(())
}
