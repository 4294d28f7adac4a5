//! Release acceptance suite: one test per shipping criterion, each ending in
//! a printed `acceptance NN <name>: PASS` line (visible with `--nocapture`).
//! A criterion that does not hold fails its test, so the cargo summary is the
//! authoritative pass/fail report.
//!
//! The numeric criteria pin exact formulas against independent oracles
//! computed in this file; the desk-scale experiments check directional
//! claims (adaptation helps, replay limits forgetting) on synthetic corpora
//! small enough to run on one core in minutes.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use cmrt::checkpoint::{self, Checkpoint};
use cmrt::dsp::cqt::{CqtConfig, CqtMatrix, CqtPlan};
use cmrt::dsp::{synth_culture_clip, synth_sine, AudioBuffer, SynthCultureSpec};
use cmrt::losses::{
    combined_loss, combined_loss_with_grads, cqt_mse_loss, rvq_nce_loss, LossConfig,
};
use cmrt::merge::{
    lambda_sweep, merge_task_arithmetic, task_vector, weight_average, MergeSpec, DEFAULT_LAMBDAS,
};
use cmrt::model::backward::full_backward;
use cmrt::model::forward::full_forward_cached;
use cmrt::model::{init_model, ModelConfig, ModelParams, ParamGroup};
use cmrt::probe::{
    average_precision, evaluate_across_seeds, roc_auc, FeatureLayer, ProbeConfig, TaggedClip,
    TaskDataset,
};
use cmrt::rng::{derive_seed, rng_from_seed};
use cmrt::similarity::{culture_similarity_matrix, jsd, SimilarityMetric};
use cmrt::tensor::Tensor;
use cmrt::tokenizer::{
    frame_features, init_rvq_codec, token_histogram, tokenize, TokenHistogram, TokenSequence,
};
use cmrt::trainer::{
    build_training_mix, heldout_loss, lr_at_step, run_stage, run_two_stage, Corpus, DataMixSpec,
    RunStageOptions, Teachers, TrainStageConfig,
};
use rand::Rng;

fn pass(n: u32, what: &str) {
    println!("acceptance {n:02} {what}: PASS");
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

// ---------------------------------------------------------------------------
// 01: analytic gradients vs central finite differences
// ---------------------------------------------------------------------------

fn gradcheck_config() -> ModelConfig {
    ModelConfig {
        conv_channels: vec![(6, 16, 16), (6, 20, 20)],
        d_model: 6,
        n_layers: 2,
        n_heads: 2,
        k: 2,
        c: 5,
        d_embed: 4,
        cqt_bins: 7,
        max_frames: 8,
        mask_start_prob: 0.5,
        mask_span: 2,
        rng_seed: 12,
        ..ModelConfig::default()
    }
}

#[test]
fn criterion_01_gradient_oracle() {
    let started = Instant::now();
    let cfg = gradcheck_config();
    let params = init_model(&cfg).unwrap();
    assert!(params.param_count() <= 5000, "model has {} params", params.param_count());

    let spec = SynthCultureSpec { rng_seed: 4, ..SynthCultureSpec::default() };
    let buf = synth_culture_clip(&spec, 0.05).unwrap();
    let codec = init_rvq_codec(cfg.k, cfg.c, 16, 7).unwrap();
    let targets = tokenize(&codec, &frame_features(&buf, 16).unwrap()).unwrap();
    let cqt_cfg =
        CqtConfig { f_min: 110.0, bins_per_octave: 4, n_bins: cfg.cqt_bins, frame_rate: 75 };
    let cqt_target = CqtPlan::new(buf.sample_rate, &cqt_cfg).unwrap().compute(&buf).unwrap();
    let loss_cfg = LossConfig::default();

    // A partial mask so both the masked and unmasked paths carry gradient.
    let fwd_seed = (0..64)
        .find(|&s| {
            let (_, mask, _) = full_forward_cached(&params, &cfg, &buf, s).unwrap();
            mask.masked_count() >= 1 && mask.masked_count() < mask.total_frames()
        })
        .expect("some seed yields a partial mask");

    let total_loss = |p: &ModelParams| -> f64 {
        let (out, mask, _) = full_forward_cached(p, &cfg, &buf, fwd_seed).unwrap();
        combined_loss(&out, &targets, &cqt_target, &mask, &loss_cfg).unwrap().total
    };

    let (out, mask, cache) = full_forward_cached(&params, &cfg, &buf, fwd_seed).unwrap();
    let (_, grads) =
        combined_loss_with_grads(&out, &targets, &cqt_target, &mask, &loss_cfg).unwrap();
    let analytic =
        full_backward(&params, &cfg, &cache, &mask, &grads.d_logits, &grads.d_cqt).unwrap();

    let h = 1e-5;
    let (mut total, mut ok) = (0usize, 0usize);
    for (name, tensor) in analytic.iter() {
        let a_vals = tensor.to_f64_vec();
        for (i, &a) in a_vals.iter().enumerate() {
            let mut p_hi = params.clone();
            p_hi.get_mut(name).unwrap().as_f64_mut().unwrap()[i] += h;
            let mut p_lo = params.clone();
            p_lo.get_mut(name).unwrap().as_f64_mut().unwrap()[i] -= h;
            let numeric = (total_loss(&p_hi) - total_loss(&p_lo)) / (2.0 * h);
            total += 1;
            let denom = a.abs().max(numeric.abs());
            // Below the finite-difference noise floor both sides are zero.
            if denom < 1e-10 || (a - numeric).abs() / denom < 1e-4 {
                ok += 1;
            }
        }
    }
    let frac = ok as f64 / total as f64;
    assert!(frac >= 0.99, "only {frac:.4} of {total} coordinates match");
    assert!(started.elapsed().as_secs() < 120, "took {:?}", started.elapsed());
    pass(1, "gradient oracle");
}

// ---------------------------------------------------------------------------
// 02: closed-form loss identities
// ---------------------------------------------------------------------------

#[test]
fn criterion_02_loss_identities() {
    // Uniform logits over C codewords cost exactly ln C per masked frame.
    for c in [2usize, 4, 32] {
        let frames = 3;
        let k = 2;
        let logits = vec![0.37; frames * k * c];
        let targets = TokenSequence {
            tokens: (0..frames * k).map(|i| (i % c) as u32).collect(),
            frames,
            k,
            c,
        };
        let mask = cmrt::model::MaskSpec::from_flags(vec![true; frames]);
        let loss = rvq_nce_loss(&logits, &targets, &mask).unwrap();
        assert!((loss - (c as f64).ln()).abs() < 1e-6, "C={c}: loss {loss}");
    }

    // A perfect regression prediction costs exactly zero.
    let target = CqtMatrix {
        mags: vec![0.25, 1.5, 0.0, 3.0, 0.5, 2.0],
        frames: 2,
        bins: 3,
        bins_per_octave: 12,
        f_min: 32.7,
        frame_rate: 75.0,
    };
    let mask = cmrt::model::MaskSpec::from_flags(vec![true, true]);
    assert_eq!(cqt_mse_loss(&target.mags.clone(), &target, &mask).unwrap(), 0.0);

    // An empty mask is a zero sentinel for both heads.
    let empty = cmrt::model::MaskSpec::empty(2);
    let targets = TokenSequence { tokens: vec![0, 1, 2, 3], frames: 2, k: 2, c: 4 };
    assert_eq!(rvq_nce_loss(&[0.3; 16], &targets, &empty).unwrap(), 0.0);
    assert_eq!(cqt_mse_loss(&[9.0; 6], &target, &empty).unwrap(), 0.0);

    // The combined total is literally α·rvq + cqt on a real forward pass.
    let cfg = gradcheck_config();
    let params = init_model(&cfg).unwrap();
    let buf = synth_sine(220.0, 0.06, 24_000, 0.5).unwrap();
    let codec = init_rvq_codec(cfg.k, cfg.c, 16, 7).unwrap();
    let tok = tokenize(&codec, &frame_features(&buf, 16).unwrap()).unwrap();
    let cqt_cfg =
        CqtConfig { f_min: 110.0, bins_per_octave: 4, n_bins: cfg.cqt_bins, frame_rate: 75 };
    let cqt = CqtPlan::new(buf.sample_rate, &cqt_cfg).unwrap().compute(&buf).unwrap();
    let loss_cfg = LossConfig { alpha: 10.0 };
    let (out, mask, _) = full_forward_cached(&params, &cfg, &buf, 3).unwrap();
    let bd = combined_loss(&out, &tok, &cqt, &mask, &loss_cfg).unwrap();
    assert!(bd.masked_frame_count > 0);
    assert_eq!(bd.total, loss_cfg.alpha * bd.rvq + bd.cqt);
    pass(2, "loss identities");
}

// ---------------------------------------------------------------------------
// 03: learning-rate schedule endpoints
// ---------------------------------------------------------------------------

#[test]
fn criterion_03_schedule_endpoints() {
    for (cfg, lr_max, lr_min) in [
        (TrainStageConfig::stage1_defaults(), 5e-4, 5e-5),
        (TrainStageConfig::stage2_defaults(), 5e-5, 5e-6),
    ] {
        assert_eq!(cfg.lr_max, lr_max);
        assert_eq!(cfg.lr_min, lr_min);
        let warmup = cfg.warmup_steps();
        // End of warmup reaches the peak; the cosine then starts at the peak
        // and lands exactly on the floor at the final step.
        assert!(rel_err(lr_at_step(warmup - 1, &cfg).unwrap(), lr_max) < 1e-9);
        assert!(rel_err(lr_at_step(warmup, &cfg).unwrap(), lr_max) < 1e-9);
        assert!(rel_err(lr_at_step(cfg.steps - 1, &cfg).unwrap(), lr_min) < 1e-9);
        // Halfway through the cosine span sits exactly between the endpoints.
        let span = cfg.steps - warmup - 1;
        assert_eq!(span % 2, 0, "midpoint must be representable");
        let mid = lr_at_step(warmup + span / 2, &cfg).unwrap();
        assert!(rel_err(mid, (lr_max + lr_min) / 2.0) < 1e-9, "midpoint {mid}");
    }
    pass(3, "schedule endpoints");
}

// ---------------------------------------------------------------------------
// Desk-scale fixtures shared by the training criteria
// ---------------------------------------------------------------------------

/// ~11k-parameter model: 16-wide, two blocks, 320-sample frame stride.
fn desk_model() -> ModelConfig {
    ModelConfig {
        conv_channels: vec![(8, 5, 5), (8, 4, 4), (12, 4, 4), (12, 2, 2), (16, 2, 2)],
        d_model: 16,
        n_layers: 2,
        n_heads: 4,
        k: 2,
        c: 16,
        d_embed: 16,
        cqt_bins: 12,
        // Held-out evaluation runs whole 4 s clips (300 frames), not crops.
        max_frames: 320,
        rng_seed: 7,
        ..ModelConfig::default()
    }
}

/// Teachers matched to [`desk_model`]: 16-dim codec, 4-octave CQT that
/// covers both pitch registers below.
fn desk_teachers() -> Teachers {
    Teachers {
        codec: init_rvq_codec(2, 16, 16, 5).unwrap(),
        cqt: CqtConfig { f_min: 82.407, bins_per_octave: 3, n_bins: 12, frame_rate: 75 },
    }
}

const PITCHES_LOW: [f64; 5] = [110.0, 123.47, 146.83, 164.81, 196.0];
const PITCHES_HIGH: [f64; 5] = [523.25, 587.33, 659.25, 739.99, 880.0];

fn culture(pitches: &[f64], timbre_seed: u64, seed: u64, n: usize, duration: f64) -> Vec<AudioBuffer> {
    (0..n)
        .map(|i| {
            let spec = SynthCultureSpec {
                pitch_set: pitches.to_vec(),
                timbre_seed,
                tempo_range: (1.5, 3.0),
                rng_seed: derive_seed(seed, &[i as u64]),
                sample_rate: 24_000,
            };
            synth_culture_clip(&spec, duration).unwrap()
        })
        .collect()
}

fn all_groups() -> BTreeSet<ParamGroup> {
    [
        ParamGroup::Conv,
        ParamGroup::CodewordEmb,
        ParamGroup::Transformer,
        ParamGroup::Heads,
        ParamGroup::MaskEmb,
    ]
    .into_iter()
    .collect()
}

fn desk_stage(
    steps: usize,
    lr_max: f64,
    lr_min: f64,
    groups: BTreeSet<ParamGroup>,
    replay_fraction: f64,
    rng_seed: u64,
) -> TrainStageConfig {
    TrainStageConfig {
        steps,
        warmup_fraction: 0.1,
        lr_max,
        lr_min,
        batch_clips: 4,
        accum_steps: 1,
        trainable_groups: groups,
        replay_fraction,
        mixup_prob: 0.0,
        rng_seed,
        ..TrainStageConfig::stage1_defaults()
    }
}

// ---------------------------------------------------------------------------
// 04: staged freezing
// ---------------------------------------------------------------------------

#[test]
fn criterion_04_freezing_soundness() {
    let cfg = desk_model();
    let teachers = desk_teachers();
    let init_params = init_model(&cfg).unwrap();
    let init = Checkpoint::new(init_params.clone(), cfg.digest(), 0, "init", vec![cfg.rng_seed]);
    let corpora = vec![Corpus { id: "a".into(), clips: culture(&PITCHES_LOW, 1, 10, 4, 2.0) }];
    let opts = RunStageOptions { crop_seconds: 2.0, ..Default::default() };

    let s1_groups: BTreeSet<ParamGroup> =
        [ParamGroup::Conv, ParamGroup::CodewordEmb].into_iter().collect();
    let s1 = run_stage(
        &init,
        &cfg,
        &desk_stage(4, 1e-4, 1e-5, s1_groups.clone(), 0.0, 31),
        &DataMixSpec::single("a"),
        &corpora,
        &teachers,
        "stage1",
        &opts,
    )
    .unwrap();
    for (name, tensor) in s1.checkpoint.params.iter() {
        let group = ParamGroup::of(name);
        let unchanged = tensor == init_params.get(name).unwrap();
        if s1_groups.contains(&group) {
            assert!(!unchanged, "{name} should have moved in stage 1");
        } else {
            assert!(unchanged, "{name} ({group:?}) must stay bitwise frozen in stage 1");
        }
    }

    let s2 = run_stage(
        &s1.checkpoint,
        &cfg,
        &desk_stage(4, 1e-4, 1e-5, all_groups(), 0.0, 32),
        &DataMixSpec::single("a"),
        &corpora,
        &teachers,
        "stage2",
        &opts,
    )
    .unwrap();
    let mut moved: BTreeMap<ParamGroup, bool> = all_groups().into_iter().map(|g| (g, false)).collect();
    for (name, tensor) in s2.checkpoint.params.iter() {
        if tensor != s1.checkpoint.params.get(name).unwrap() {
            *moved.get_mut(&ParamGroup::of(name)).unwrap() = true;
        }
    }
    for (group, did_move) in &moved {
        assert!(did_move, "stage 2 left every {group:?} tensor untouched");
    }
    pass(4, "freezing soundness");
}

// ---------------------------------------------------------------------------
// 05: replay proportion in generated schedules
// ---------------------------------------------------------------------------

#[test]
fn criterion_05_replay_proportion() {
    let spec = DataMixSpec {
        sources: vec![("new".into(), 1.0)],
        replay_source: Some("old".into()),
        replay_fraction: 0.2,
    };
    for (total, seed) in [(1000usize, 9u64), (1000, 10), (997, 11)] {
        let schedule = build_training_mix(&spec, total, seed).unwrap();
        assert_eq!(schedule.len(), total);
        let replay = schedule.iter().filter(|(id, _)| id == "old").count();
        let target = 0.2 * total as f64;
        assert!(
            (replay as f64 - target).abs() <= 1.0,
            "{replay} replay slots of {total} (target {target})"
        );
    }

    // Weighted sources are apportioned within a clip of their quota too.
    let spec = DataMixSpec {
        sources: vec![("a".into(), 0.5), ("b".into(), 0.3), ("c".into(), 0.2)],
        replay_source: Some("old".into()),
        replay_fraction: 0.2,
    };
    let schedule = build_training_mix(&spec, 1000, 3).unwrap();
    for (id, weight) in [("a", 0.5), ("b", 0.3), ("c", 0.2)] {
        let got = schedule.iter().filter(|(s, _)| s == id).count() as f64;
        let quota = 800.0 * weight;
        assert!((got - quota).abs() <= 1.0, "{id}: {got} vs quota {quota}");
    }
    assert_eq!(
        build_training_mix(&spec, 1000, 3).unwrap(),
        schedule,
        "schedules must be reproducible from the seed"
    );
    pass(5, "replay proportion");
}

// ---------------------------------------------------------------------------
// 06: merge algebra
// ---------------------------------------------------------------------------

fn perturbed(base: &Checkpoint, scale: f64, seed: u64, label: &str) -> Checkpoint {
    let mut rng = rng_from_seed(seed);
    let mut params = base.params.clone();
    for name in base.params.names().map(String::from).collect::<Vec<_>>() {
        for v in params.get_mut(&name).unwrap().as_f64_mut().unwrap() {
            *v += scale * (rng.gen::<f64>() - 0.5);
        }
    }
    let mut ckpt = Checkpoint::new(params, base.config_digest.clone(), 50, label, vec![seed]);
    ckpt.meta.insert("source".into(), label.into());
    ckpt
}

#[test]
fn criterion_06_merge_algebra() {
    let cfg = gradcheck_config();
    let base =
        Checkpoint::new(init_model(&cfg).unwrap(), cfg.digest(), 10, "base", vec![1]);
    let a1 = perturbed(&base, 0.02, 101, "a1");
    let a2 = perturbed(&base, 0.02, 102, "a2");
    let a3 = perturbed(&base, 0.02, 103, "a3");
    let v1 = task_vector(&a1, &base, "a1").unwrap();
    let v2 = task_vector(&a2, &base, "a2").unwrap();
    let v3 = task_vector(&a3, &base, "a3").unwrap();

    // λ = 0 reproduces the base bitwise.
    let ident =
        merge_task_arithmetic(&MergeSpec { base: &base, vectors: vec![(&v1, 0.0)] }).unwrap();
    assert_eq!(ident.params, base.params);

    // One vector at λ = 1 recovers the adapted model to one ulp per entry.
    let inverse =
        merge_task_arithmetic(&MergeSpec { base: &base, vectors: vec![(&v1, 1.0)] }).unwrap();
    for (name, merged) in inverse.params.iter() {
        let m = merged.to_f64_vec();
        let a = a1.params.get(name).unwrap().to_f64_vec();
        let b = base.params.get(name).unwrap().to_f64_vec();
        for i in 0..m.len() {
            let tol = 2.0 * f64::EPSILON * a[i].abs().max(b[i].abs());
            assert!((m[i] - a[i]).abs() <= tol, "{name}[{i}]: {} vs {}", m[i], a[i]);
        }
    }

    // A shared λ = 1/N is weight averaging.
    let shared = merge_task_arithmetic(&MergeSpec {
        base: &base,
        vectors: vec![(&v1, 1.0 / 3.0), (&v2, 1.0 / 3.0), (&v3, 1.0 / 3.0)],
    })
    .unwrap();
    let averaged = weight_average(&[&a1, &a2, &a3], &base).unwrap();
    for (name, s) in shared.params.iter() {
        let s = s.to_f64_vec();
        let w = averaged.params.get(name).unwrap().to_f64_vec();
        for i in 0..s.len() {
            assert!(
                (s[i] - w[i]).abs() <= 1e-7 * s[i].abs().max(w[i].abs()).max(1e-12),
                "{name}[{i}]: {} vs {}",
                s[i],
                w[i]
            );
        }
    }

    // Argument order cannot change a bit of the output.
    let forward = merge_task_arithmetic(&MergeSpec {
        base: &base,
        vectors: vec![(&v1, 0.3), (&v2, 0.5), (&v3, 0.2)],
    })
    .unwrap();
    let shuffled = merge_task_arithmetic(&MergeSpec {
        base: &base,
        vectors: vec![(&v3, 0.2), (&v1, 0.3), (&v2, 0.5)],
    })
    .unwrap();
    assert_eq!(forward.params, shuffled.params);

    // Scalar worked example: 1.0 + 0.2·(1.2 − 1.0) = 1.04 exactly in f64.
    let mut one = cmrt::tensor::TensorMap::new();
    one.insert("w", Tensor::from_f64(vec![1], vec![1.0]).unwrap()).unwrap();
    let mut adapted = cmrt::tensor::TensorMap::new();
    adapted.insert("w", Tensor::from_f64(vec![1], vec![1.2]).unwrap()).unwrap();
    let sb = Checkpoint::new(one, "scalar", 0, "base", vec![0]);
    let sa = Checkpoint::new(adapted, "scalar", 1, "adapted", vec![0]);
    let sv = task_vector(&sa, &sb, "adapted").unwrap();
    let merged =
        merge_task_arithmetic(&MergeSpec { base: &sb, vectors: vec![(&sv, 0.2)] }).unwrap();
    assert_eq!(merged.params.get("w").unwrap().to_f64_vec()[0], 1.04);
    pass(6, "merge algebra");
}

// ---------------------------------------------------------------------------
// 07: ranking metrics vs brute-force oracles
// ---------------------------------------------------------------------------

fn oracle_roc_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut num = 0.0;
    let mut pairs = 0.0;
    for i in 0..scores.len() {
        if !labels[i] {
            continue;
        }
        for j in 0..scores.len() {
            if labels[j] {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                num += 1.0;
            } else if scores[i] == scores[j] {
                num += 0.5;
            }
        }
    }
    num / pairs
}

/// Rank every item by pairwise comparison (higher score first, earlier index
/// first on ties) and average precision at each positive's rank — no sort, so
/// a genuinely independent code path from the library's implementation.
fn oracle_average_precision(scores: &[f64], labels: &[bool]) -> f64 {
    let n = scores.len();
    let before = |j: usize, i: usize| scores[j] > scores[i] || (scores[j] == scores[i] && j < i);
    let mut sum = 0.0;
    let mut positives = 0;
    for i in 0..n {
        if !labels[i] {
            continue;
        }
        positives += 1;
        let rank = 1 + (0..n).filter(|&j| before(j, i)).count();
        let hits = (0..n).filter(|&j| labels[j] && (j == i || before(j, i))).count();
        sum += hits as f64 / rank as f64;
    }
    sum / positives as f64
}

#[test]
fn criterion_07_metric_oracles() {
    let mut rng = rng_from_seed(0xAC7);
    for case in 0..1000 {
        let n = rng.gen_range(2..=64usize);
        // Half the scores land on a coarse grid so ties are routine.
        let scores: Vec<f64> = (0..n)
            .map(|_| {
                if rng.gen::<bool>() {
                    f64::from(rng.gen_range(0..6u32)) / 4.0
                } else {
                    rng.gen::<f64>()
                }
            })
            .collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.gen::<bool>()).collect();
        // Force both classes so the metrics are defined.
        labels[0] = true;
        if n > 1 {
            labels[1] = false;
        }

        let auc = roc_auc(&scores, &labels).unwrap();
        let auc_oracle = oracle_roc_auc(&scores, &labels);
        assert!((auc - auc_oracle).abs() <= 1e-12, "case {case}: auc {auc} vs {auc_oracle}");

        let ap = average_precision(&scores, &labels).unwrap();
        let ap_oracle = oracle_average_precision(&scores, &labels);
        assert!((ap - ap_oracle).abs() <= 1e-12, "case {case}: ap {ap} vs {ap_oracle}");
    }
    pass(7, "metric oracles");
}

// ---------------------------------------------------------------------------
// 08: similarity bounds and ordering
// ---------------------------------------------------------------------------

fn histogram_for(clips: &[AudioBuffer], codec: &cmrt::tokenizer::RvqCodec) -> TokenHistogram {
    let seqs: Vec<TokenSequence> = clips
        .iter()
        .map(|c| tokenize(codec, &frame_features(c, codec.d()).unwrap()).unwrap())
        .collect();
    token_histogram(&seqs).unwrap()
}

#[test]
fn criterion_08_similarity_bounds() {
    // Hand case and exact bounds of the base-2 divergence.
    assert_eq!(jsd(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
    assert!((jsd(&[0.5, 0.5], &[1.0, 0.0]).unwrap() - 0.3113).abs() < 1e-4);
    let mut rng = rng_from_seed(88);
    for _ in 0..200 {
        let n = rng.gen_range(2..12usize);
        let mut draw = || -> Vec<f64> {
            let v: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
            let s: f64 = v.iter().sum();
            v.iter().map(|x| x / s).collect()
        };
        let p = draw();
        let q = draw();
        let d = jsd(&p, &q).unwrap();
        assert!((0.0..=1.0).contains(&d), "jsd {d} out of bounds");
        assert_eq!(d, jsd(&q, &p).unwrap(), "jsd must be symmetric");
    }

    // Corpora sharing a generator spec stay strictly closer than corpora
    // with disjoint pitch sets, and the matrix itself is exactly symmetric.
    let codec = init_rvq_codec(2, 16, 16, 5).unwrap();
    let mut hists = BTreeMap::new();
    hists.insert("low_a".to_string(), histogram_for(&culture(&PITCHES_LOW, 1, 100, 6, 3.0), &codec));
    hists.insert("low_b".to_string(), histogram_for(&culture(&PITCHES_LOW, 1, 200, 6, 3.0), &codec));
    hists.insert("high".to_string(), histogram_for(&culture(&PITCHES_HIGH, 2, 300, 6, 3.0), &codec));
    let matrix = culture_similarity_matrix(&hists, SimilarityMetric::Jsd).unwrap();
    assert_eq!(matrix.corpus_ids, vec!["high", "low_a", "low_b"]);
    for i in 0..matrix.n() {
        assert_eq!(matrix.at(i, i), 0.0);
        for j in 0..matrix.n() {
            assert_eq!(matrix.at(i, j), matrix.at(j, i), "matrix must be symmetric");
            assert!((0.0..=1.0).contains(&matrix.at(i, j)));
        }
    }
    let same_spec = matrix.at(1, 2);
    assert!(same_spec < matrix.at(0, 1), "low_a should sit closer to low_b than to high");
    assert!(same_spec < matrix.at(0, 2), "low_b should sit closer to low_a than to high");
    pass(8, "similarity bounds");
}

// ---------------------------------------------------------------------------
// 09: constant-Q correctness
// ---------------------------------------------------------------------------

#[test]
fn criterion_09_cqt_correctness() {
    let cfg = CqtConfig::default();
    let plan = CqtPlan::new(24_000, &cfg).unwrap();
    for k in [2usize, 11, 20, 29, 38, 47, 56, 65, 74, 83] {
        // A tone placed exactly on bin k's center frequency.
        let freq = cfg.f_min * 2f64.powf(k as f64 / cfg.bins_per_octave as f64);
        let buf = synth_sine(freq, 1.2, 24_000, 0.5).unwrap();
        let cqt = plan.compute(&buf).unwrap();
        let frame = cqt.frames / 2;
        let expected = (cfg.bins_per_octave as f64 * (freq / cfg.f_min).log2()).round() as usize;
        assert_eq!(expected, k, "test construction");
        assert_eq!(cqt.argmax_bin(frame), k, "tone at {freq:.1} Hz");
    }

    // Magnitudes are linear in amplitude.
    let buf = synth_culture_clip(
        &SynthCultureSpec { rng_seed: 5, ..SynthCultureSpec::default() },
        0.8,
    )
    .unwrap();
    let scaled = AudioBuffer {
        samples: buf.samples.iter().map(|s| 3.0 * s).collect(),
        sample_rate: buf.sample_rate,
    };
    let base = plan.compute(&buf).unwrap();
    let tripled = plan.compute(&scaled).unwrap();
    for (m, t) in base.mags.iter().zip(&tripled.mags) {
        assert!(
            (3.0 * m - t).abs() <= 1e-6 * t.abs().max(1e-12),
            "linearity violated: 3·{m} vs {t}"
        );
    }
    pass(9, "cqt correctness");
}

// ---------------------------------------------------------------------------
// 10: checkpoint container fidelity
// ---------------------------------------------------------------------------

#[test]
fn criterion_10_checkpoint_fidelity() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mixed.ckpt");

    let mut params = cmrt::tensor::TensorMap::new();
    params
        .insert("single", Tensor::from_f32(vec![2, 3], vec![1.5, -2.25, 0.0, 3.75, -0.5, 9.0]).unwrap())
        .unwrap();
    params
        .insert("double", Tensor::from_f64(vec![4], vec![std::f64::consts::PI, -0.0, 1e-300, 7.0]).unwrap())
        .unwrap();
    let mut ckpt = Checkpoint::new(params, "digest123", 42, "stage2", vec![1, 2, 3]);
    ckpt.meta.insert("note".into(), "fixture".into());

    checkpoint::save(&ckpt, &path).unwrap();
    let loaded = checkpoint::load(&path).unwrap();
    assert_eq!(loaded, ckpt, "roundtrip must preserve every field bitwise");

    // The writer is deterministic: saving the loaded copy reproduces the file.
    let copy = dir.path().join("copy.ckpt");
    checkpoint::save(&loaded, &copy).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&copy).unwrap());

    // Corruptions are rejected with the documented diagnostics.
    let good = std::fs::read(&path).unwrap();
    let mut bad_magic = good.clone();
    bad_magic[0] ^= 0xFF;
    std::fs::write(&path, &bad_magic).unwrap();
    let err = checkpoint::load(&path).unwrap_err().to_string();
    assert!(err.contains("bad magic"), "{err}");

    std::fs::write(&path, &good[..good.len() - 8]).unwrap();
    let err = checkpoint::load(&path).unwrap_err().to_string();
    assert!(err.contains("truncated payload"), "{err}");

    let mut bad_header = good.clone();
    bad_header[20] = b'!';
    std::fs::write(&path, &bad_header).unwrap();
    let err = checkpoint::load(&path).unwrap_err().to_string();
    assert!(err.contains("header decode"), "{err}");
    pass(10, "checkpoint fidelity");
}

// ---------------------------------------------------------------------------
// 11: desk-scale adaptation with replay
// ---------------------------------------------------------------------------

#[test]
fn criterion_11_desk_scale_adaptation() {
    let started = Instant::now();
    let cfg = desk_model();
    let teachers = desk_teachers();
    let loss_cfg = LossConfig::default();
    let opts = RunStageOptions { crop_seconds: 2.0, ..Default::default() };

    let corpora = vec![
        Corpus { id: "a".into(), clips: culture(&PITCHES_LOW, 1, 1000, 8, 4.0) },
        Corpus { id: "b".into(), clips: culture(&PITCHES_HIGH, 2, 2000, 8, 4.0) },
    ];
    let a_held = culture(&PITCHES_LOW, 1, 1100, 4, 4.0);
    let b_held = culture(&PITCHES_HIGH, 2, 2100, 4, 4.0);

    // Base model: generic pre-training on culture A only.
    let init = Checkpoint::new(
        init_model(&cfg).unwrap(),
        cfg.digest(),
        0,
        "init",
        vec![cfg.rng_seed],
    );
    let base = run_stage(
        &init,
        &cfg,
        &desk_stage(150, 5e-4, 5e-5, all_groups(), 0.0, 41),
        &DataMixSpec::single("a"),
        &corpora,
        &teachers,
        "base",
        &opts,
    )
    .unwrap()
    .checkpoint;

    // Continual pre-training on culture B with 20% A-replay: a short
    // stabilization stage for the extractor and codeword embeddings, then
    // full adaptation with the learning rate re-warmed.
    let replay_mix = DataMixSpec {
        sources: vec![("b".into(), 1.0)],
        replay_source: Some("a".into()),
        replay_fraction: 0.2,
    };
    let s1_groups: BTreeSet<ParamGroup> =
        [ParamGroup::Conv, ParamGroup::CodewordEmb].into_iter().collect();
    let (_, s2) = run_two_stage(
        &base,
        &cfg,
        &desk_stage(15, 1e-4, 1e-5, s1_groups, 0.2, 51),
        &desk_stage(100, 1e-4, 1e-5, all_groups(), 0.2, 52),
        &replay_mix,
        &replay_mix,
        &corpora,
        &teachers,
        &opts,
    )
    .unwrap();
    let adapted = s2.checkpoint;

    let eval = |params: &ModelParams, clips: &[AudioBuffer], seed: u64| {
        heldout_loss(params, &cfg, &teachers, &loss_cfg, clips, seed).unwrap()
    };
    let base_on_b = eval(&base.params, &b_held, 900);
    let adapted_on_b = eval(&adapted.params, &b_held, 900);
    let base_on_a = eval(&base.params, &a_held, 901);
    let adapted_on_a = eval(&adapted.params, &a_held, 901);

    // A B-derived tagging task: the low and high ends of culture B's
    // register. Adapted features should rank them better than base features.
    let lo: [f64; 2] = [523.25, 554.37];
    let hi: [f64; 2] = [830.61, 880.0];
    let tag_names = vec!["b_high".to_string(), "b_low".to_string()];
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (tag_idx, (pitches, seed)) in [(&hi, 3000u64), (&lo, 4000)].iter().enumerate() {
        let clips = culture(*pitches, 2, *seed, 16, 4.0);
        for (i, clip) in clips.into_iter().enumerate() {
            let tagged = TaggedClip {
                audio_ref: format!("tag{tag_idx}_{i}"),
                labels: vec![tag_idx == 0, tag_idx == 1],
            };
            if i < 8 {
                train.push((tagged, clip));
            } else {
                test.push((tagged, clip));
            }
        }
    }
    let dataset = TaskDataset { tag_names, train, test };
    let probe_cfg = ProbeConfig {
        hidden_dim: 32,
        feature_layer: FeatureLayer::Last,
        epochs: 40,
        lr: 3e-3,
        batch: 8,
        window_seconds: 1.0,
        max_duration_seconds: None,
        rng_seed: 0,
    };
    let seeds = [7001, 7002, 7003, 7004, 7005];
    let (base_summary, _) =
        evaluate_across_seeds(&base.params, &cfg, &dataset, &probe_cfg, &seeds).unwrap();
    let (adapted_summary, _) =
        evaluate_across_seeds(&adapted.params, &cfg, &dataset, &probe_cfg, &seeds).unwrap();

    println!(
        "acceptance 11 detail: B loss {base_on_b:.4} -> {adapted_on_b:.4}, \
         A loss {base_on_a:.4} -> {adapted_on_a:.4}, \
         probe auc {:.4} -> {:.4}",
        base_summary.roc_auc_mean, adapted_summary.roc_auc_mean
    );
    assert!(
        adapted_on_b < base_on_b,
        "adaptation must lower held-out loss on B: {adapted_on_b} vs {base_on_b}"
    );
    assert!(
        adapted_on_a <= 1.10 * base_on_a,
        "forgetting bound exceeded on A: {adapted_on_a} vs {base_on_a}"
    );
    assert!(
        adapted_summary.roc_auc_mean > base_summary.roc_auc_mean,
        "adapted features should probe better on B: {:.4} vs {:.4}",
        adapted_summary.roc_auc_mean,
        base_summary.roc_auc_mean
    );
    assert!(started.elapsed().as_secs() < 1800, "took {:?}", started.elapsed());
    pass(11, "desk-scale adaptation");
}

// ---------------------------------------------------------------------------
// 12: λ-sweep mechanics
// ---------------------------------------------------------------------------

#[test]
fn criterion_12_lambda_sweep_mechanics() {
    let cfg = desk_model();
    let teachers = desk_teachers();
    let loss_cfg = LossConfig::default();
    let opts = RunStageOptions { crop_seconds: 2.0, ..Default::default() };
    let corpora = vec![
        Corpus { id: "a".into(), clips: culture(&PITCHES_LOW, 1, 1200, 6, 3.0) },
        Corpus { id: "b".into(), clips: culture(&PITCHES_HIGH, 2, 2200, 6, 3.0) },
    ];
    let b_held = culture(&PITCHES_HIGH, 2, 2300, 2, 3.0);

    // Two single-culture desk models sharing a lineage: one trained on A,
    // then adapted onto B.
    let init = Checkpoint::new(
        init_model(&cfg).unwrap(),
        cfg.digest(),
        0,
        "init",
        vec![cfg.rng_seed],
    );
    let on_a = run_stage(
        &init,
        &cfg,
        &desk_stage(6, 2e-4, 2e-5, all_groups(), 0.0, 61),
        &DataMixSpec::single("a"),
        &corpora,
        &teachers,
        "on_a",
        &opts,
    )
    .unwrap()
    .checkpoint;
    let on_b = run_stage(
        &on_a,
        &cfg,
        &desk_stage(6, 2e-4, 2e-5, all_groups(), 0.0, 62),
        &DataMixSpec::single("b"),
        &corpora,
        &teachers,
        "on_b",
        &opts,
    )
    .unwrap()
    .checkpoint;
    let vector = task_vector(&on_b, &on_a, "b_shift").unwrap();

    let mut lambdas = vec![0.0];
    lambdas.extend_from_slice(&DEFAULT_LAMBDAS);
    let eval_seed = 888;
    let table = lambda_sweep(&on_a, &[vector], &lambdas, &["b_held".to_string()], |ckpt| {
        Ok(vec![heldout_loss(&ckpt.params, &cfg, &teachers, &loss_cfg, &b_held, eval_seed)?])
    })
    .unwrap();

    assert_eq!(table.rows.len(), 8, "seven default coefficients plus zero");
    let direct = heldout_loss(&on_a.params, &cfg, &teachers, &loss_cfg, &b_held, eval_seed).unwrap();
    assert_eq!(table.rows[0].0, 0.0);
    assert!(
        (table.rows[0].1[0] - direct).abs() < 1e-9,
        "λ=0 must reproduce the base evaluation: {} vs {direct}",
        table.rows[0].1[0]
    );

    // Full CSV plus a rendered figure.
    let csv = table.to_csv();
    assert!(csv.starts_with("lambda,b_held\n"));
    assert_eq!(csv.lines().count(), 9);
    for (lambda, _) in &table.rows {
        assert!(csv.contains(&format!("\n{lambda}")), "row for λ={lambda} missing");
    }
    let series = vec![cmrt::plot::Series {
        name: "b_held".into(),
        points: table.rows.iter().map(|(l, m)| (*l, m[0])).collect(),
    }];
    let svg = cmrt::plot::line_chart("sweep", "lambda", "loss", &series).unwrap();
    assert!(svg.contains("<svg") && svg.contains("polyline"));

    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("sweep.csv"), &csv).unwrap();
    std::fs::write(dir.path().join("sweep.svg"), &svg).unwrap();
    assert!(dir.path().join("sweep.csv").metadata().unwrap().len() > 0);
    assert!(dir.path().join("sweep.svg").metadata().unwrap().len() > 0);
    pass(12, "lambda sweep mechanics");
}

// ---------------------------------------------------------------------------
// 13: command-line determinism
// ---------------------------------------------------------------------------

fn run_cli(dir: &Path, args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_cmrt"))
        .args(args)
        .current_dir(dir)
        .env_remove("CMRT_SEED")
        .output()
        .expect("binary spawns");
    assert!(
        out.status.success(),
        "cmrt {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn criterion_13_cli_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(
        dir.join("culture.toml"),
        "id = \"low\"\npitch_set = [110.0, 146.83]\nclips = 4\nduration = 2.0\n",
    )
    .unwrap();
    std::fs::write(
        dir.join("exp.toml"),
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

[cqt]
n_bins = 12

[run]
crop_seconds = 1.0

[[corpus]]
id = "low"
dir = "corpus"

[stage1]
steps = 2
warmup_fraction = 0.5
lr_max = 1e-4
lr_min = 1e-5
batch_clips = 2
accum_steps = 1

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
sources = { low = 1.0 }
"#,
    )
    .unwrap();
    run_cli(dir, &["synth", "--config", "culture.toml", "--out-dir", "corpus", "--seed", "11"]);

    // Identical commands (identical manifests) must yield identical bytes:
    // checkpoints, logs, histograms, figures, and the manifests themselves.
    let pipeline = |tag: &str| {
        run_cli(dir, &["pretrain", "--config", "exp.toml", "--out-dir", tag]);
        run_cli(
            dir,
            &[
                "tokenize", "--in-dir", "corpus", "--out-dir", &format!("{tag}_tok"),
                "--codebooks", "2", "--codewords", "16", "--dim", "16",
            ],
        );
        run_cli(
            dir,
            &[
                "sweep", "--config", "exp.toml", "--base", &format!("{tag}/stage1.ckpt"),
                "--adapted", &format!("{tag}/stage2.ckpt"), "--eval-dir", "low=corpus",
                "--lambdas", "0,0.5,1", "--out-dir", &format!("{tag}_sweep"),
            ],
        );
        run_cli(
            dir,
            &[
                "report", "--sweep", &format!("{tag}_sweep/sweep.csv"), "--out-dir",
                &format!("{tag}_report"),
            ],
        );
    };
    pipeline("one");
    // The second run uses the same relative paths from a sibling directory so
    // every recorded argv matches once the tag is fixed; compare one with a
    // literal rerun of one instead.
    let first: Vec<(String, Vec<u8>)> = ["one/stage2.ckpt", "one/stage2_log.csv",
        "one_tok/histogram.csv", "one_sweep/sweep.csv", "one_sweep/sweep.svg",
        "one_report/sweep.svg", "one/run_manifest.json", "one_sweep/run_manifest.json"]
        .iter()
        .map(|p| (p.to_string(), std::fs::read(dir.join(p)).unwrap()))
        .collect();
    for sub in ["one", "one_tok", "one_sweep", "one_report"] {
        std::fs::remove_dir_all(dir.join(sub)).unwrap();
    }
    pipeline("one");
    for (path, bytes) in &first {
        assert_eq!(
            &std::fs::read(dir.join(path)).unwrap(),
            bytes,
            "{path} changed between identical runs"
        );
    }
    pass(13, "cli determinism");
}
