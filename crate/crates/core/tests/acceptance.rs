//! Acceptance suite. Runs every criterion in order and prints one
//! PASS/FAIL line each; exits non-zero if any criterion fails.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;
use rcn::arch::{apply_branch_mask, keypoint_terms, load_checkpoint, save_checkpoint};
use rcn::data::{
    generate_synthetic, load_dataset, occlude, save_dataset, stream_rng, AugmentConfig, Dataset, JitterSpec,
    OcclusionSpec, Pipeline, Sample, SynthSpec,
};
use rcn::denoiser::{build_denoiser, joint_predict, DenoiserConfig};
use rcn::gradcheck::{check_network, check_primitives, GradCheckOptions, Primitive};
use rcn::metrics::{interocular_error, nll_loss, Keypoint, KeypointSet};
use rcn::ops;
use rcn::trainer::{ablation_sweep, denoise_held_out, predict, train_denoiser, train_split, TrainConfig};
use rcn::{Arch, BranchMask, EvalConfig, ModelConfig, Network, NetworkConfig, ParamStore, ProbMaps, Tape, Tensor4};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn split(data: &Dataset, a: usize, b: usize) -> Dataset {
    data.subset(&(a..b).collect::<Vec<_>>())
}

fn gradient_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let opts = GradCheckOptions::default();
    let mut worst = 0.0f64;
    for r in check_primitives(&Primitive::all(), opts, &mut rng).map_err(err)? {
        ensure(r.max_rel_error < 1e-4 && r.passed(), format!("{} max rel {:.2e}", r.name, r.max_rel_error))?;
        worst = worst.max(r.max_rel_error);
    }
    let cfg = NetworkConfig::new(Arch::Rcn, 8, 2, 3).with_channels(3).with_seed(7);
    let net = Network::new(ModelConfig::Keypoint(cfg)).map_err(err)?;
    let x = Tensor4::uniform((2, 1, 8, 8), -1.0, 1.0, &mut rng);
    let truth = vec![KeypointSet::from_pairs(&[(1, 2), (6, 5)]), KeypointSet::from_pairs(&[(7, 0), (3, 3)])];
    let terms = keypoint_terms(&truth, 2, 8).map_err(err)?;
    let opts = GradCheckOptions { tolerance: 1e-3, ..opts };
    let r = check_network(&net, &x, &terms, 1e-3, usize::MAX, opts, &mut rng).map_err(err)?;
    ensure(r.passed(), format!("3-branch rcn: {} mismatches, max rel {:.2e}", r.mismatches.len(), r.max_rel_error))?;
    ensure(r.checked > r.skipped * 4, format!("too many kinks skipped: {} of {}", r.skipped, r.checked + r.skipped))?;
    Ok(format!(
        "primitives max rel {worst:.1e}; rcn {} coords max rel {:.1e}",
        r.checked, r.max_rel_error
    ))
}

fn oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let tol = 1e-10;
    let mut worst = 0.0f64;
    let mut note = |name: &str, d: f64| -> Result<(), String> {
        worst = worst.max(d);
        ensure(d <= tol, format!("{name} differs from oracle by {d:.2e}"))
    };
    for _ in 0..100 {
        let (n, c, h, w) = (rng.random_range(1..3), rng.random_range(1..4), rng.random_range(3..8), rng.random_range(3..8));
        let o = rng.random_range(1..4);
        let kk = [1, 3, 5][rng.random_range(0..3)];
        let x = Tensor4::uniform((n, c, h, w), -1.0, 1.0, &mut rng);
        let k = Tensor4::uniform((o, c, kk, kk), -1.0, 1.0, &mut rng);
        let b: Vec<f64> = (0..o).map(|_| rng.random_range(-1.0..1.0)).collect();
        let got = ops::conv2d_same(&x, &ops::ConvParams::new(k.clone(), b.clone()).map_err(err)?).map_err(err)?;
        note("conv2d", max_diff(&got, &conv_oracle(&x, &k, &b)))?;

        let (size, stride) = if rng.random_bool(0.5) { (2, 2) } else { (3, 2) };
        note("maxpool", max_diff(&ops::maxpool(&x, size, stride).map_err(err)?, &maxpool_oracle(&x, size, stride)))?;

        let f = rng.random_range(1..4);
        note("upsample_tile", max_diff(&ops::upsample_tile(&x, f).map_err(err)?, &tile_oracle(&x, f)))?;
        note("upsample_bilinear", max_diff(&ops::upsample_bilinear(&x, f).map_err(err)?, &bilinear_oracle(&x, f)))?;

        let y = Tensor4::uniform((n, rng.random_range(1..4), h, w), -1.0, 1.0, &mut rng);
        note("concat", max_diff(&ops::concat_channels(&x, &y).map_err(err)?, &concat_oracle(&x, &y)))?;

        let r = rng.random_range(1..5);
        let maps: Vec<Tensor4> = (0..r).map(|_| Tensor4::uniform((n, c, h, w), -1.0, 1.0, &mut rng)).collect();
        let alpha = Tensor4::uniform((r, c, h, w), -1.0, 1.0, &mut rng);
        note(
            "weighted_sum",
            max_diff(&ops::weighted_sum_maps(&maps, &alpha).map_err(err)?, &weighted_sum_oracle(&maps, &alpha)),
        )?;

        let s = rng.random_range(2..7);
        let z = Tensor4::uniform((n, c, s, s), -3.0, 3.0, &mut rng);
        let p = ops::spatial_softmax(&z);
        note("spatial_softmax", max_diff(&p, &softmax_oracle(&z)))?;

        let truth: Vec<KeypointSet> = (0..n)
            .map(|_| KeypointSet::new((0..c).map(|_| Keypoint::new(rng.random_range(0..s), rng.random_range(0..s))).collect()))
            .collect();
        let want = nll_oracle(&softmax_oracle(&z), &truth);
        let probs = ProbMaps::from_logits(&z);
        note("nll", (nll_loss(&probs, &truth, 0.0, &ParamStore::new()).map_err(err)? - want).abs())?;
        let mut tape = Tape::new();
        let zv = tape.leaf(z.clone());
        let terms = keypoint_terms(&truth, c, s).map_err(err)?;
        let lv = tape.nll(zv, &terms).map_err(err)?;
        note("fused softmax nll", (tape.value(lv).data()[0] - want).abs())?;

        let kp = rng.random_range(2..6);
        let eval = EvalConfig { left_eye: 0, right_eye: 1 };
        let mut sets = || -> Vec<KeypointSet> {
            (0..n)
                .map(|_| {
                    let mut pts: Vec<Keypoint> = (0..kp).map(|_| Keypoint::new(rng.random_range(0..20), rng.random_range(0..20))).collect();
                    pts[1] = Keypoint::new(pts[0].row + rng.random_range(1..10), pts[0].col);
                    KeypointSet::new(pts)
                })
                .collect()
        };
        let (pred, truth) = (sets(), sets());
        let got = interocular_error(&pred, &truth, &eval).map_err(err)?;
        note("interocular error", (got - error_oracle(&pred, &truth, &eval)).abs())?;
    }
    Ok(format!("9 ops x 100 instances, max deviation {worst:.1e}"))
}

fn closed_forms() -> Outcome {
    let (k, s) = (5, 80);
    let probs = ProbMaps::from_logits(&Tensor4::full((1, k, s, s), 0.3));
    let truth = vec![KeypointSet::from_pairs(&[(0, 0), (10, 70), (40, 40), (79, 79), (5, 60)])];
    let loss = nll_loss(&probs, &truth, 0.0, &ParamStore::new()).map_err(err)?;
    let want = k as f64 * ((s * s) as f64).ln();
    ensure((loss - want).abs() < 1e-9, format!("uniform nll {loss} vs {want}"))?;

    let truth = vec![KeypointSet::from_pairs(&[(0, 0), (6, 8)])];
    let pred = vec![KeypointSet::from_pairs(&[(3, 4), (9, 12)])];
    let e = interocular_error(&pred, &truth, &EvalConfig { left_eye: 0, right_eye: 1 }).map_err(err)?;
    ensure((e - 0.5).abs() < 1e-12, format!("3-4-5 error {e}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let z = Tensor4::uniform((2, 3, 6, 6), -4.0, 4.0, &mut rng);
    let shifted = z.map(|v| v + 123.25);
    let d = ops::spatial_softmax(&z).max_abs_diff(&ops::spatial_softmax(&shifted));
    ensure(d < 1e-12, format!("softmax shift changed output by {d:.2e}"))?;

    let cfg = NetworkConfig::new(Arch::Rcn, 16, 5, 3).with_channels(4).with_seed(3);
    let net = Network::new(ModelConfig::Keypoint(cfg)).map_err(err)?;
    let mut den = build_denoiser(&DenoiserConfig { channels: 4, layers: 2, kernel: 3, ..DenoiserConfig::new(5, 16) })
        .map_err(err)?;
    let head: Vec<String> = den.params().names().filter(|n| n.starts_with("den.head")).map(str::to_string).collect();
    for name in &head {
        let t = den.params_mut().get_mut(name).expect("head param");
        t.data_mut().fill(0.0);
    }
    let x = Tensor4::uniform((3, 1, 16, 16), -1.0, 1.0, &mut rng);
    let joint = joint_predict(&net, &den, &x).map_err(err)?;
    let plain = net.forward(&x).map_err(err)?;
    let d = joint.tensor().max_abs_diff(plain.tensor());
    ensure(d == 0.0, format!("zero denoiser changed joint maps by {d:.2e}"))?;
    Ok("uniform nll, 3-4-5, shift invariance, additive identity".into())
}

fn convergence() -> Outcome {
    let spec = SynthSpec::new(40, 5);
    let all = generate_synthetic(600, 11, &spec).map_err(err)?;
    let (tr, va) = (split(&all, 0, 500), split(&all, 500, 600));
    let mut means = Vec::new();
    for arch in [Arch::Rcn, Arch::SumNet] {
        let mut epochs = Vec::new();
        for seed in 1..=3u64 {
            let cfg = NetworkConfig::new(arch, 40, 5, 4).with_channels(8).with_seed(seed);
            let mut net = Network::new(ModelConfig::Keypoint(cfg)).map_err(err)?;
            let tc = TrainConfig {
                learning_rate: 0.001,
                seed,
                max_epochs: 300,
                target_error: Some(0.05),
                ..Default::default()
            };
            let report = train_split(&mut net, &tr, &va, &tc).map_err(err)?;
            let e = report
                .epochs_to(0.05)
                .ok_or_else(|| format!("{} seed {seed} never reached 0.05 (best {:.4})", arch.tag(), report.best_val_error))?;
            epochs.push(e as f64);
        }
        means.push(epochs.iter().sum::<f64>() / epochs.len() as f64);
    }
    ensure(means[0] <= means[1], format!("rcn needs {:.2} epochs, sumnet {:.2}", means[0], means[1]))?;
    Ok(format!("mean epochs to 0.05: rcn {:.2}, sumnet {:.2}", means[0], means[1]))
}

fn ablation_ordering() -> Outcome {
    let size = 40;
    let mut spec = SynthSpec::new(size, 5).with_clutter(4).with_pose(0.1, 180.0);
    spec.interocular = (0.42 * size as f64, 0.5 * size as f64);
    let all = generate_synthetic(600, 11, &spec).map_err(err)?;
    let (tr, va) = (split(&all, 0, 500), split(&all, 500, 600));
    let base = NetworkConfig::new(Arch::SumNet, size, 5, 4).with_channels(8).with_seed(1);
    let masks: Vec<BranchMask> = ["1,0,0,0", "0,0,0,1", "1,0,0,1", "1,1,1,1"]
        .iter()
        .map(|m| m.parse().expect("mask"))
        .collect();
    let tc = TrainConfig {
        learning_rate: 0.003,
        seed: 1,
        max_epochs: 25,
        patience: 1000,
        augment: AugmentConfig { jitter: Some(JitterSpec::default()), ..Default::default() },
        ..Default::default()
    };
    let table = ablation_sweep(&base, &masks, &tr, &va, &tc).map_err(err)?;
    let e: Vec<f64> = masks.iter().map(|m| table.error_for(m).expect("row")).collect();
    let summary = format!(
        "1000 {:.2}%, 0001 {:.2}%, 1001 {:.2}%, 1111 {:.2}%",
        e[0] * 100.0,
        e[1] * 100.0,
        e[2] * 100.0,
        e[3] * 100.0
    );
    ensure(e[..3].iter().all(|&v| e[3] <= v), format!("full mask not lowest: {summary}"))?;
    ensure([e[0], e[2], e[3]].iter().all(|&v| e[1] > v), format!("finest-only not worst: {summary}"))?;
    Ok(summary)
}

fn occlusion_robustness() -> Outcome {
    let all = generate_synthetic(700, 11, &SynthSpec::new(40, 5)).map_err(err)?;
    let (tr, va, te) = (split(&all, 0, 500), split(&all, 500, 600), split(&all, 600, 700));
    let occ = OcclusionSpec { min_side: 10, max_side: 25, fill: 0.0 };
    let occluded: Vec<Sample> = te
        .samples()
        .iter()
        .enumerate()
        .map(|(i, s)| occlude(s, &occ, &mut stream_rng(99, &[i as u64])))
        .collect();
    let te = Dataset::new(occluded, te.keypoint_names().to_vec(), te.eval_config()).map_err(err)?;
    let x = Pipeline::default().clean(&te).map_err(err)?;
    let mut lines = Vec::new();
    for seed in 1..=3u64 {
        let mut errs = Vec::new();
        for with in [false, true] {
            let cfg = NetworkConfig::new(Arch::Rcn, 40, 5, 4).with_channels(8).with_seed(seed);
            let mut net = Network::new(ModelConfig::Keypoint(cfg)).map_err(err)?;
            let tc = TrainConfig {
                learning_rate: 0.001,
                seed,
                max_epochs: 10,
                patience: 1000,
                augment: AugmentConfig { occlusion: with.then(|| occ.clone()), ..Default::default() },
                ..Default::default()
            };
            train_split(&mut net, &tr, &va, &tc).map_err(err)?;
            let pred = predict(&net, &x, 32).map_err(err)?;
            errs.push(interocular_error(&pred, &te.truth(), &te.eval_config()).map_err(err)?);
        }
        lines.push(format!("seed {seed} {:.4}->{:.4}", errs[0], errs[1]));
        ensure(errs[1] <= 0.9 * errs[0], format!("seed {seed}: plain {:.4}, occlusion-trained {:.4}", errs[0], errs[1]))?;
    }
    Ok(lines.join(", "))
}

fn denoiser_efficacy() -> Outcome {
    let s = 80;
    let mut spec = SynthSpec::new(s, 5);
    spec.interocular = (12.0, 16.0);
    let all = generate_synthetic(700, 31, &spec).map_err(err)?;
    let (tr, va, te) = (split(&all, 0, 500), split(&all, 500, 600), split(&all, 600, 700));

    let cfg = NetworkConfig::new(Arch::Rcn, s, 5, 4).with_channels(8).with_seed(1);
    let mut net = Network::new(ModelConfig::Keypoint(cfg)).map_err(err)?;
    let tc = TrainConfig { learning_rate: 0.001, seed: 1, max_epochs: 6, patience: 1000, ..Default::default() };
    train_split(&mut net, &tr, &va, &tc).map_err(err)?;

    let mut den = build_denoiser(&DenoiserConfig { channels: 8, ..DenoiserConfig::new(5, s) }).map_err(err)?;
    let tc = TrainConfig {
        learning_rate: 0.01,
        seed: 1,
        max_epochs: 8,
        patience: 1000,
        clip_norm: Some(1.0),
        ..Default::default()
    };
    train_denoiser(&mut den, &tr.truth(), &va.truth(), &tr.eval_config(), &tc).map_err(err)?;

    let fixes = denoise_held_out(&den, &te.truth(), 1, 77).map_err(err)?;
    let ok = fixes.iter().filter(|f| f.error() <= 5.0).count();
    let frac = ok as f64 / fixes.len() as f64;
    ensure(frac >= 0.9, format!("only {ok}/{} corrupted keypoints within 5 px", fixes.len()))?;

    let eval = te.eval_config();
    let truth = te.truth();
    let pipeline = Pipeline::default();
    let score = |x: &Tensor4| -> Result<(f64, f64), String> {
        let plain = interocular_error(&predict(&net, x, 32).map_err(err)?, &truth, &eval).map_err(err)?;
        let joint = interocular_error(&joint_predict(&net, &den, x).map_err(err)?.argmax(), &truth, &eval).map_err(err)?;
        Ok((plain, joint))
    };
    let (c0, c1) = score(&pipeline.clean(&te).map_err(err)?)?;
    ensure(c1 <= c0 * 1.02, format!("joint raised clean error {c0:.4} -> {c1:.4}"))?;

    // blank a 9x9 patch over one keypoint per image
    let blanked: Vec<Sample> = te
        .samples()
        .iter()
        .enumerate()
        .map(|(i, smp)| {
            let mut smp = smp.clone();
            let kp = smp.keypoints.points()[i % 5];
            for r in kp.row.saturating_sub(4)..(kp.row + 5).min(s) {
                for c in kp.col.saturating_sub(4)..(kp.col + 5).min(s) {
                    smp.image.set(0, 0, r, c, 0.0);
                }
            }
            smp
        })
        .collect();
    let blanked = Dataset::new(blanked, te.keypoint_names().to_vec(), eval).map_err(err)?;
    let (o0, o1) = score(&pipeline.clean(&blanked).map_err(err)?)?;
    ensure(o1 < o0, format!("joint did not reduce corrupted-split error {o0:.4} -> {o1:.4}"))?;
    Ok(format!(
        "{ok}/{} within 5 px; clean {c0:.4}->{c1:.4}; blanked {o0:.4}->{o1:.4}",
        fixes.len()
    ))
}

fn determinism_and_round_trips() -> Outcome {
    let data = generate_synthetic(40, 5, &SynthSpec::new(16, 5)).map_err(err)?;
    let run = || -> Result<(String, ParamStore), String> {
        let cfg = NetworkConfig::new(Arch::Rcn, 16, 5, 3).with_channels(4).with_seed(9);
        let mut net = Network::new(ModelConfig::Keypoint(cfg)).map_err(err)?;
        let tc = TrainConfig {
            seed: 4,
            max_epochs: 3,
            learning_rate: 0.001,
            augment: AugmentConfig {
                jitter: Some(JitterSpec::default()),
                occlusion: Some(OcclusionSpec { min_side: 3, max_side: 6, fill: 0.0 }),
                ..Default::default()
            },
            ..Default::default()
        };
        let report = rcn::trainer::train(&mut net, &data, &tc).map_err(err)?;
        Ok((report.without_timing().to_json().map_err(err)?, net.params().clone()))
    };
    let (a, pa) = run()?;
    let (b, pb) = run()?;
    ensure(a == b, "train reports differ between identical runs")?;
    ensure(pa.bit_identical(&pb), "trained parameters differ between identical runs")?;

    let dir = tempfile::tempdir().map_err(err)?;
    let cfg = apply_branch_mask(
        &NetworkConfig::new(Arch::SumNet, 16, 5, 3).with_channels(4).with_seed(2),
        &"1,0,1".parse().expect("mask"),
    )
    .map_err(err)?;
    let net = Network::new(ModelConfig::Keypoint(cfg)).map_err(err)?;
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&net, &path).map_err(err)?;
    let back = load_checkpoint(&path).map_err(err)?;
    ensure(back.config() == net.config(), "checkpoint config changed")?;
    ensure(back.params().bit_identical(net.params()), "checkpoint parameters changed")?;
    let x = data.images().slice_batch(0..4);
    ensure(
        back.forward(&x).map_err(err)? == net.forward(&x).map_err(err)?,
        "reloaded model predicts differently",
    )?;

    let ds_dir = dir.path().join("data");
    save_dataset(&data, &ds_dir).map_err(err)?;
    let loaded = load_dataset(&ds_dir).map_err(err)?;
    ensure(loaded.len() == data.len(), "dataset size changed")?;
    for (p, q) in data.samples().iter().zip(loaded.samples()) {
        ensure(p.id == q.id && p.keypoints == q.keypoints, format!("sample {} labels changed", p.id))?;
        ensure(p.image == q.image, format!("sample {} pixels changed", p.id))?;
    }
    ensure(loaded.eval_config() == data.eval_config(), "eye indices changed")?;
    ensure(loaded.keypoint_names() == data.keypoint_names(), "keypoint names changed")?;
    Ok("reports, parameters, checkpoint and dataset exact".into())
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("gradient correctness", gradient_correctness),
        ("oracle equivalence", oracle_equivalence),
        ("closed-form checks", closed_forms),
        ("comparative convergence", convergence),
        ("ablation ordering", ablation_ordering),
        ("occlusion robustness", occlusion_robustness),
        ("denoiser efficacy", denoiser_efficacy),
        ("determinism and round-trips", determinism_and_round_trips),
    ];
    let only: Vec<usize> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect())
        .unwrap_or_default();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let id = i + 1;
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let started = Instant::now();
        let outcome = run();
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {id}. {name} ({secs:.1}s): {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {id}. {name} ({secs:.1}s): {why}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
