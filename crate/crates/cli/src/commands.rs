use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rcn::arch::{apply_branch_mask, load_checkpoint, ModelConfig, UpsampleMode};
use rcn::data::{
    generate_synthetic, load_dataset, save_dataset, AugmentConfig, Dataset, JitterSpec, OcclusionSpec, Pipeline,
    SynthSpec, MANIFEST_FILE, META_FILE,
};
use rcn::denoiser::{build_denoiser, joint_predict, DenoiserConfig};
use rcn::gradcheck::{check_network, check_primitives, GradCheckOptions, GradCheckReport, Primitive};
use rcn::metrics::{interocular_error, write_eval_csv};
use rcn::trainer::{ablation_sweep, predict, split_indices, train, train_denoiser, write_report, TrainConfig};
use rcn::{Arch, BranchMask, KeypointSet, Network, NetworkConfig, Tensor4};

use crate::manifest::RunManifest;
use crate::render;
use crate::settings::Settings;
use crate::{
    AblateArgs, Cli, Command, DenoiseArgs, EvalArgs, FitArgs, GradcheckArgs, ModelArgs, SynthArgs, TrainArgs,
};

const CHECKPOINT: &str = "model.ckpt";
const DENOISER_CHECKPOINT: &str = "denoiser.ckpt";

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    rcn::Error::Config(msg.into()).into()
}

pub fn run(cli: Cli) -> Result<()> {
    let mut s = Settings::load(cli.config.as_deref())?;
    let seed = s.pick("seed", cli.seed, 0u64)?;
    let out = Output { dir: cli.out, force: cli.force };
    match cli.command {
        Command::Synth(a) => synth(s, a, seed, &out),
        Command::Train(a) => train_cmd(s, a, seed, &out),
        Command::Eval(a) => eval_cmd(s, a, seed, &out),
        Command::Ablate(a) => ablate(s, a, seed, &out),
        Command::Gradcheck(a) => gradcheck(s, a, seed, &out),
        Command::DenoiseTrain(a) => denoise_train(s, a, seed, &out),
    }
}

struct Output {
    dir: Option<PathBuf>,
    force: bool,
}

impl Output {
    /// Checks the directory before any work is done; refuses to mix runs.
    fn check(&self) -> Result<&Path> {
        let Some(dir) = &self.dir else {
            bail!(invalid("`--out <dir>` is required"));
        };
        if dir.is_file() {
            bail!(invalid(format!("output {} is a file", dir.display())));
        }
        let non_empty = dir.is_dir() && std::fs::read_dir(dir)?.next().is_some();
        if non_empty && !self.force {
            bail!(invalid(format!("output directory {} is not empty; pass --force to reuse it", dir.display())));
        }
        Ok(dir)
    }

    fn create(&self) -> Result<&Path> {
        let dir = self.check()?;
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(dir)
    }
}

fn synth(mut s: Settings, a: SynthArgs, seed: u64, out: &Output) -> Result<()> {
    let count = s.pick("count", a.count, 200usize)?;
    let k: usize = s.pick("keypoints", a.keypoints, "5".to_string())?.parse().map_err(|_| invalid("keypoints"))?;
    let size = s.pick("size", a.size, 80usize)?;
    let clutter = s.pick("clutter", a.clutter, 0usize)?;
    let base = SynthSpec::new(size, k);
    let roll = s.pick("max_roll", a.max_roll, base.max_roll)?;
    let shift = s.pick("max_shift", a.max_shift, base.max_shift)?;
    let spec = base.with_pose(shift, roll).with_clutter(clutter);
    spec.validate()?;
    let config = s.finish()?;
    let dir = out.create()?;

    let data = generate_synthetic(count, seed, &spec)?;
    save_dataset(&data, dir)?;
    let mut m = RunManifest::new("synth", config, seed);
    m.add(MANIFEST_FILE);
    m.add(META_FILE);
    m.write(dir)?;
    println!("wrote {count} samples (K={k}, {size}px) to {}", dir.display());
    Ok(())
}

fn load_data(s: &mut Settings, flag: Option<PathBuf>) -> Result<(PathBuf, Dataset)> {
    let path: String = s.require("data", flag.map(|p| p.display().to_string()))?;
    let path = PathBuf::from(path);
    let data = load_dataset(&path)?;
    // the file may pin the expected geometry
    let k = s.pick_opt::<usize>("keypoints", None, None)?;
    let size = s.pick_opt::<usize>("image_size", None, None)?;
    if k.is_some_and(|k| k != data.num_keypoints()) || size.is_some_and(|v| v != data.image_size()) {
        bail!(invalid(format!(
            "config expects K={} on {}px images, dataset {} has K={} on {}px",
            k.map_or("any".into(), |v| v.to_string()),
            size.map_or("any".into(), |v| v.to_string()),
            path.display(),
            data.num_keypoints(),
            data.image_size()
        )));
    }
    Ok((path, data))
}

fn model_config(s: &mut Settings, m: &ModelArgs, data: &Dataset, seed: u64) -> Result<NetworkConfig> {
    let arch: Arch = s.pick("arch", m.arch.clone(), "rcn".to_string())?.parse()?;
    let branches = s.pick("branches", m.branches, 4usize)?;
    let channels = s.pick("channels", m.channels, 48usize)?;
    let skip = s.switch("skip", m.skip)?;
    let upsample: UpsampleMode = s.pick("upsample", m.upsample.clone(), "tile".to_string())?.parse()?;
    let mut cfg = NetworkConfig::new(arch, data.image_size(), data.num_keypoints(), branches)
        .with_channels(channels)
        .with_seed(seed)
        .with_skip(skip);
    cfg.upsample = upsample;
    cfg.validate()?;
    cfg.level_sizes()?;
    Ok(cfg)
}

fn train_config(s: &mut Settings, f: &FitArgs, size: usize, seed: u64, base: TrainConfig) -> Result<TrainConfig> {
    let occlude = s.switch("occlude", f.occlude)?;
    // 20..50 px on 80 px images, scaled with the image
    let min_side = s.pick("occlude_min", f.occlude_min, size / 4)?;
    let max_side = s.pick("occlude_max", f.occlude_max, size * 5 / 8)?;
    let jitter = s.switch("jitter", f.jitter)?;
    let cfg = TrainConfig {
        learning_rate: s.pick("learning_rate", f.lr, base.learning_rate)?,
        momentum: s.pick("momentum", f.momentum, base.momentum)?,
        batch_size: s.pick("batch_size", f.batch_size, base.batch_size)?,
        max_epochs: s.pick("epochs", f.epochs, base.max_epochs)?,
        patience: s.pick("patience", f.patience, base.patience)?,
        lambda: s.pick("lambda", f.lambda, base.lambda)?,
        validation_fraction: s.pick("val_fraction", f.val_fraction, base.validation_fraction)?,
        clip_norm: s.pick_opt("clip_norm", f.clip_norm, base.clip_norm)?,
        target_error: s.pick_opt("target", f.target, base.target_error)?,
        seed,
        augment: AugmentConfig {
            jitter: jitter.then(JitterSpec::default),
            occlusion: occlude.then_some(OcclusionSpec { min_side, max_side, fill: 0.0 }),
            ..Default::default()
        },
        checkpoint: None,
    };
    cfg.validate()?;
    cfg.augment.validate(size)?;
    Ok(cfg)
}

fn train_cmd(mut s: Settings, a: TrainArgs, seed: u64, out: &Output) -> Result<()> {
    let (_, data) = load_data(&mut s, a.fit.data.clone())?;
    let mut net_cfg = model_config(&mut s, &a.model, &data, seed)?;
    let mask = s.pick_opt("mask", a.mask.as_deref().map(str::parse::<BranchMask>).transpose()?, None)?;
    if let Some(mask) = &mask {
        net_cfg = apply_branch_mask(&net_cfg, mask)?;
    }
    let mut cfg = train_config(&mut s, &a.fit, data.image_size(), seed, TrainConfig::default())?;
    let mut net = Network::new(ModelConfig::Keypoint(net_cfg))?;
    let config = s.finish()?;
    let dir = out.create()?;

    cfg.checkpoint = Some(dir.join(CHECKPOINT));
    let report = train(&mut net, &data, &cfg)?;
    write_report(&report, dir)?;
    let mut m = RunManifest::new("train", config, seed);
    for f in [CHECKPOINT, "report.json", "curve.csv"] {
        m.add(f);
    }
    m.write(dir)?;
    println!(
        "{}: best validation error {:.4} at epoch {} ({})",
        report.arch, report.best_val_error, report.best_epoch, report.stop_reason
    );
    Ok(())
}

fn split_of(data: &Dataset, split: &str, val_fraction: f64, seed: u64) -> Dataset {
    if split == "all" {
        return data.clone();
    }
    let (tr, va) = split_indices(data.len(), val_fraction, seed);
    data.subset(if split == "train" { &tr } else { &va })
}

fn eval_cmd(mut s: Settings, a: EvalArgs, seed: u64, out: &Output) -> Result<()> {
    let ckpt: String = s.require("checkpoint", a.checkpoint.map(|p| p.display().to_string()))?;
    let (data_path, data) = load_data(&mut s, a.data)?;
    let split = s.pick("split", a.split, "all".to_string())?;
    let val_fraction = s.pick("val_fraction", a.val_fraction, TrainConfig::default().validation_fraction)?;
    let joint = s.switch("joint", a.joint)?;
    let den_path = s.pick_opt("denoiser", a.denoiser.map(|p| p.display().to_string()), None)?;
    let dump = s.switch("dump_heatmaps", a.dump_heatmaps)?;
    let config = s.finish()?;

    let net = load_checkpoint(Path::new(&ckpt))?;
    let Some(kc) = net.keypoint_config() else {
        bail!(invalid(format!("{ckpt} holds a denoiser, not a keypoint network")));
    };
    if kc.num_keypoints != data.num_keypoints() || kc.input_size != data.image_size() {
        bail!(invalid(format!(
            "checkpoint {ckpt} has K={} on {}px, dataset {} has K={} on {}px",
            kc.num_keypoints,
            kc.input_size,
            data_path.display(),
            data.num_keypoints(),
            data.image_size()
        )));
    }
    let den = match (joint, &den_path) {
        (false, _) => None,
        (true, None) => bail!(invalid("`--joint` needs `--denoiser <checkpoint>`")),
        (true, Some(p)) => Some(load_checkpoint(Path::new(p))?),
    };
    let dir = out.create()?;

    let data = split_of(&data, &split, val_fraction, seed);
    let images = Pipeline::default().clean(&data)?;
    let truth = data.truth();
    let ids: Vec<String> = data.samples().iter().map(|s| s.id.clone()).collect();
    let eval = data.eval_config();
    let pred = predict(&net, &images, 32)?;
    let error = interocular_error(&pred, &truth, &eval)?;
    write_eval_csv(BufWriter::new(File::create(dir.join("eval.csv"))?), &ids, &pred, &truth, &eval)?;
    let mut m = RunManifest::new("eval", config, seed);
    m.add("eval.csv");
    let mut summary = rcn::kv::KvMap::new();
    summary.set("samples", data.len());
    summary.set("error", error);
    println!("interocular error {error:.6} on {} samples", data.len());

    if let Some(den) = &den {
        let mut jpred: Vec<KeypointSet> = Vec::with_capacity(data.len());
        for start in (0..data.len()).step_by(32) {
            let end = (start + 32).min(data.len());
            jpred.extend(joint_predict(&net, den, &images.slice_batch(start..end))?.argmax());
        }
        let jerr = interocular_error(&jpred, &truth, &eval)?;
        write_eval_csv(BufWriter::new(File::create(dir.join("joint_eval.csv"))?), &ids, &jpred, &truth, &eval)?;
        m.add("joint_eval.csv");
        summary.set("joint_error", jerr);
        println!("joint error {jerr:.6}");
    }
    if dump {
        let hdir = dir.join("heatmaps");
        std::fs::create_dir_all(&hdir)?;
        for start in (0..data.len()).step_by(32) {
            let end = (start + 32).min(data.len());
            let probs = net.forward(&images.slice_batch(start..end))?;
            for n in 0..end - start {
                let sample = &data.samples()[start + n];
                for k in 0..data.num_keypoints() {
                    render::write_heatmap(&hdir.join(format!("{}_k{k}.pgm", sample.id)), probs.map(n, k), probs.dims().w)?;
                }
                render::write_overlay(&hdir.join(format!("{}_overlay.ppm", sample.id)), &sample.image, &pred[start + n], &sample.keypoints)?;
            }
        }
        m.add("heatmaps");
    }
    std::fs::write(dir.join("summary.txt"), summary.to_text())?;
    m.add("summary.txt");
    m.write(dir)?;
    Ok(())
}

/// Coarsest only, finest only, both ends, everything.
fn default_masks(branches: usize) -> Vec<BranchMask> {
    let one = |on: &[usize]| BranchMask::new((0..branches).map(|i| on.contains(&i)).collect());
    let mut masks = vec![one(&[0]), one(&[branches - 1]), one(&[0, branches - 1]), BranchMask::all(branches)];
    masks.dedup();
    masks
}

fn ablate(mut s: Settings, a: AblateArgs, seed: u64, out: &Output) -> Result<()> {
    let (_, data) = load_data(&mut s, a.fit.data.clone())?;
    let base = model_config(&mut s, &a.model, &data, seed)?;
    let masks = match s.pick_opt("masks", a.mask, None)? {
        Some(text) => text.split(';').map(str::parse).collect::<rcn::Result<Vec<BranchMask>>>()?,
        None => default_masks(base.num_branches),
    };
    for m in &masks {
        apply_branch_mask(&base, m)?;
    }
    let cfg = train_config(&mut s, &a.fit, data.image_size(), seed, TrainConfig::default())?;
    let config = s.finish()?;
    let dir = out.create()?;

    let (tr, va) = split_indices(data.len(), cfg.validation_fraction, seed);
    let table = ablation_sweep(&base, &masks, &data.subset(&tr), &data.subset(&va), &cfg)?;
    std::fs::write(dir.join("ablation.md"), table.to_string())?;
    let mut m = RunManifest::new("ablate", config, seed);
    m.add("ablation.md");
    m.write(dir)?;
    print!("{table}");
    Ok(())
}

fn select_primitives(ops: Option<&str>) -> Result<Vec<Primitive>> {
    let all = Primitive::all();
    let Some(ops) = ops else {
        return Ok(all);
    };
    let mut chosen = Vec::new();
    for name in ops.split(',').map(str::trim) {
        let found: Vec<Primitive> = all.iter().filter(|p| p.name() == name).cloned().collect();
        if found.is_empty() {
            let names: Vec<&str> = all.iter().map(Primitive::name).collect();
            bail!(invalid(format!("unknown op `{name}`; choose from {}", names.join(", "))));
        }
        chosen.extend(found);
    }
    Ok(chosen)
}

fn network_checks(opts: GradCheckOptions, rng: &mut ChaCha8Rng) -> Result<Vec<GradCheckReport>> {
    let (size, k) = (8, 2);
    let truth: Vec<KeypointSet> =
        (0..2).map(|n| KeypointSet::from_pairs(&[(n + 1, 2), (5, 6 - n)])).collect();
    let x = Tensor4::uniform((2, 1, size, size), -1.0, 1.0, rng);
    let mut reports = Vec::new();
    for arch in [Arch::Rcn, Arch::SumNet] {
        let cfg = NetworkConfig::new(arch, size, k, 3).with_channels(3).with_seed(1);
        let net = Network::new(ModelConfig::Keypoint(cfg))?;
        let terms = net.keypoint_terms(&truth)?;
        let mut r = check_network(&net, &x, &terms, 1e-3, usize::MAX, opts, rng)?;
        r.name = format!("{arch} network");
        reports.push(r);
    }
    let den = build_denoiser(&DenoiserConfig { layers: 2, kernel: 3, channels: 3, ..DenoiserConfig::new(k, size) })?;
    let hot = rcn::denoiser::one_hot_maps(&truth, size)?;
    let records: Vec<_> = truth
        .iter()
        .map(|t| rcn::denoiser::CorruptionRecord { indices: vec![0], original: vec![t.points()[0]] })
        .collect();
    let terms = rcn::denoiser::denoiser_terms(&truth, &records)?;
    let mut r = check_network(&den, &hot, &terms, 1e-3, usize::MAX, opts, rng)?;
    r.name = "denoiser network".into();
    reports.push(r);
    Ok(reports)
}

fn gradcheck(mut s: Settings, a: GradcheckArgs, seed: u64, out: &Output) -> Result<()> {
    let ops = s.pick_opt("ops", a.ops, None)?;
    let prims = select_primitives(ops.as_deref())?;
    let with_network = ops.is_none() && !s.switch("no_network", a.no_network)?;
    let config = s.finish()?;
    let dir = if out.dir.is_some() { Some(out.create()?) } else { None };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = GradCheckOptions { inject_sign_error: a.inject_sign_error, ..Default::default() };
    let mut reports = check_primitives(&prims, opts, &mut rng)?;
    if with_network {
        reports.extend(network_checks(GradCheckOptions { tolerance: 1e-3, ..opts }, &mut rng)?);
    }
    let mut lines = Vec::new();
    for r in &reports {
        let status = if r.passed() { "PASS" } else { "FAIL" };
        lines.push(format!(
            "{status} {}: {} checked, {} skipped, max rel error {:.3e} (tol {:.0e})",
            r.name, r.checked, r.skipped, r.max_rel_error, r.tolerance
        ));
    }
    println!("{}", lines.join("\n"));
    if let Some(dir) = dir {
        std::fs::write(dir.join("gradcheck.txt"), lines.join("\n") + "\n")?;
        let mut m = RunManifest::new("gradcheck", config, seed);
        m.add("gradcheck.txt");
        m.write(dir)?;
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    if !failed.is_empty() {
        bail!(rcn::Error::GradCheck(format!("failed: {}", failed.join(", "))));
    }
    Ok(())
}

fn denoise_train(mut s: Settings, a: DenoiseArgs, seed: u64, out: &Output) -> Result<()> {
    if a.fit.occlude || a.fit.jitter {
        bail!(invalid("image augmentation does not apply to denoiser training"));
    }
    let (_, data) = load_data(&mut s, a.fit.data.clone())?;
    let base = DenoiserConfig::new(data.num_keypoints(), data.image_size());
    let dcfg = DenoiserConfig {
        layers: s.pick("layers", a.layers, base.layers)?,
        kernel: s.pick("kernel", a.kernel, base.kernel)?,
        channels: s.pick("channels", a.channels, base.channels)?,
        corrupt_count: s.pick("corrupt", a.corrupt, base.corrupt_count)?,
        init_seed: seed,
        ..base
    };
    dcfg.validate()?;
    let defaults = TrainConfig { clip_norm: Some(1.0), ..TrainConfig::default() };
    let mut cfg = train_config(&mut s, &a.fit, data.image_size(), seed, defaults)?;
    let config = s.finish()?;
    let dir = out.create()?;

    let mut den = build_denoiser(&dcfg)?;
    let (tr, va) = split_indices(data.len(), cfg.validation_fraction, seed);
    let truth = data.truth();
    let pick = |idx: &[usize]| idx.iter().map(|&i| truth[i].clone()).collect::<Vec<_>>();
    cfg.checkpoint = Some(dir.join(DENOISER_CHECKPOINT));
    let report = train_denoiser(&mut den, &pick(&tr), &pick(&va), &data.eval_config(), &cfg)?;
    write_report(&report, dir)?;
    let mut m = RunManifest::new("denoise-train", config, seed);
    for f in [DENOISER_CHECKPOINT, "report.json", "curve.csv"] {
        m.add(f);
    }
    m.write(dir)?;
    println!(
        "denoiser: best validation error {:.4} at epoch {} (receptive field {} px)",
        report.best_val_error,
        report.best_epoch,
        dcfg.receptive_field()
    );
    Ok(())
}
