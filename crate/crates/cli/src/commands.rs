use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::ValueEnum;
use rayon::prelude::*;
use sst_core::io::{
    generate_mask, generate_scene, meta_path, read_hsc, read_mask, read_measurement, write_channel_pngs, write_hsc,
    write_loss_curve_png, write_mask, write_measurement, Meta, SceneKind, SyntheticSceneSpec,
};
use sst_core::model::{Family, Reconstructor, SstConfig, SstModel, StageTrace, TrainedModel};
use sst_core::train::{
    mean_metrics, score, Dataset, LossConfig, MetricsCsv, Reduction, Schedule, SceneMetrics, TrainConfig,
};
use sst_core::verify::{gradcheck_suite, oracle_suite, GradcheckOptions, Precision, Report};
use sst_core::{forward_project, CodedMask, DispersionConfig, Measurement, NoiseModel, OpKind, SpectralCube};

use crate::args::*;
use crate::checkpoint;
use crate::config::echo;
use crate::Failure;

/// Independent seed streams derived from the user seed.
fn derive(seed: u64, stream: u64) -> u64 {
    seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

const MASK_STREAM: u64 = 1;
const NOISE_STREAM: u64 = 2;
const SCENE_STREAM: u64 = 3;

fn require_file(p: &Path, what: &str) -> Result<(), Failure> {
    if p.is_file() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("{what} {} does not exist", p.display())))
    }
}

fn create_dir(p: &Path) -> Result<(), Failure> {
    fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))?;
    Ok(())
}

fn scene_kind(k: SceneKindArg) -> SceneKind {
    match k {
        SceneKindArg::GaussianBlobs => SceneKind::GaussianBlobs,
        SceneKindArg::GradientRamps => SceneKind::GradientRamps,
        SceneKindArg::CheckerSpectra => SceneKind::CheckerSpectra,
    }
}

fn check_mask(mask: &CodedMask<f32>, h: usize, w: usize, path: &Path) -> Result<(), Failure> {
    if (mask.height(), mask.width()) != (h, w) {
        return Err(Failure::Usage(format!(
            "mask {} is {}×{}, expected {h}×{w}",
            path.display(),
            mask.height(),
            mask.width()
        )));
    }
    Ok(())
}

/// Peak recorded next to a cube, or its maximum.
fn scene_peak(cube: &SpectralCube<f32>, path: &Path) -> Result<f64, Failure> {
    let mp = meta_path(path);
    if mp.is_file() {
        if let Some(p) = Meta::read(&mp)?.get_parsed::<f64>("peak") {
            return Ok(p);
        }
    }
    Ok(cube.max_value() as f64)
}

pub fn simulate(a: &SimulateArgs, threads: usize) -> Result<(), Failure> {
    let mut cfg = Meta::new();
    let (scene, peak) = match &a.scene {
        Some(p) => {
            require_file(p, "scene")?;
            cfg.set("scene", p.display());
            let cube = read_hsc(p)?;
            let peak = scene_peak(&cube, p)?;
            (cube, peak)
        }
        None => {
            let kind = scene_kind(a.synthetic.unwrap_or(SceneKindArg::GaussianBlobs));
            let spec = SyntheticSceneSpec {
                smoothness: a.smoothness,
                ..SyntheticSceneSpec::new(kind, a.height, a.width, a.channels, a.seed)
            };
            cfg.set("synthetic", kind.name()).set("smoothness", a.smoothness);
            (generate_scene(&spec)?, 1.0)
        }
    };
    let (h, w, c) = scene.dims();
    cfg.set("height", h).set("width", w).set("channels", c);
    let mask = match &a.mask {
        Some(p) => {
            require_file(p, "mask")?;
            cfg.set("mask", p.display());
            let m = read_mask(p)?;
            check_mask(&m, h, w, p)?;
            m
        }
        None => generate_mask(h, w, a.mask_density, derive(a.seed, MASK_STREAM))?,
    };
    cfg.set("mask_density", a.mask_density)
        .set("d", a.d)
        .set("noise_sigma", a.noise_sigma)
        .set("seed", a.seed)
        .set("png", a.png)
        .set("out", a.out.display())
        .set("threads", threads);
    echo("simulate", &cfg);

    let noise = if a.noise_sigma > 0.0 {
        NoiseModel::gaussian(a.noise_sigma, derive(a.seed, NOISE_STREAM))?
    } else {
        NoiseModel::None
    };
    let y = forward_project(&scene, &mask, &DispersionConfig::new(a.d), &noise)?;

    create_dir(&a.out)?;
    let mut meta = Meta::new();
    meta.set("height", h)
        .set("width", w)
        .set("channels", c)
        .set("step", a.d)
        .set("noise_sigma", a.noise_sigma)
        .set("seed", a.seed)
        .set("peak", peak);
    write_measurement(&y, &a.out.join("measurement.hsc"))?;
    meta.write(&a.out.join("measurement.meta"))?;
    write_mask(&mask, &a.out.join("mask.hsc"))?;
    write_hsc(&scene, &a.out.join("truth.hsc"))?;
    let mut truth_meta = Meta::new();
    truth_meta.set("peak", peak).set("seed", a.seed);
    if a.png {
        add_scales(&mut truth_meta, &write_channel_pngs(&scene, &a.out, "truth")?);
    }
    truth_meta.write(&a.out.join("truth.meta"))?;
    println!("measurement {}×{}", y.height(), y.width());
    Ok(())
}

fn add_scales(meta: &mut Meta, scales: &[(PathBuf, sst_core::io::ChannelScale)]) {
    for (m, (_, s)) in scales.iter().enumerate() {
        meta.set(format!("png_ch{m:02}_min"), s.min).set(format!("png_ch{m:02}_max"), s.max);
    }
}

fn preset_config(p: Preset) -> SstConfig {
    match p {
        Preset::Toy | Preset::Custom => SstConfig::toy(1),
        Preset::Tiny => SstConfig::tiny(1),
        Preset::SstS => SstConfig::family(Family::Small),
        Preset::SstM => SstConfig::family(Family::Medium),
        Preset::SstL => SstConfig::family(Family::Large),
        Preset::SstLplus => SstConfig::family(Family::LargePlus),
    }
}

fn is_desk_scale(p: Preset) -> bool {
    matches!(p, Preset::Toy | Preset::Tiny | Preset::Custom)
}

/// Learning rate of the desk-scale presets.
pub const TOY_LR: f64 = 3e-3;

fn model_config(a: &TrainArgs) -> SstConfig {
    let b = preset_config(a.preset);
    SstConfig {
        height: a.height.unwrap_or(b.height),
        width: a.width.unwrap_or(b.width),
        channels: a.channels.unwrap_or(b.channels),
        step: a.d.unwrap_or(b.step),
        n_stages: a.stages.unwrap_or(b.n_stages),
        base_channels: a.base_channels.unwrap_or(b.base_channels),
        window: a.window.unwrap_or(b.window),
        heads: a.heads.unwrap_or(b.heads),
        depth: a.depth.unwrap_or(b.depth),
        levels: a.levels.unwrap_or(b.levels),
        ffn_mult: a.ffn_mult.unwrap_or(b.ffn_mult),
        inner_reversible: a.inner_reversible.unwrap_or(b.inner_reversible),
        zero_init_mapping: b.zero_init_mapping,
    }
}

fn hsc_files(dir: &Path) -> Result<Vec<PathBuf>, Failure> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "hsc"))
        .collect();
    files.sort();
    Ok(files)
}

pub fn train(a: &TrainArgs, threads: usize) -> Result<(), Failure> {
    let mc = model_config(a);
    let model = if a.unmix_only { SstModel::unmix_only(mc.clone()) } else { SstModel::new(mc.clone()) }
        .map_err(|e| Failure::Usage(e.to_string()))?;
    let desk = is_desk_scale(a.preset);
    let epochs = a.epochs.unwrap_or(if desk { 150 } else { 300 });
    let iters = a.iters_per_epoch;
    let batch_size = a.batch_size.unwrap_or(if desk { 3 } else { 1 });
    let lr = a.lr.unwrap_or(if desk { TOY_LR } else { 4e-4 });
    let lc = LossConfig {
        reduction: match a.reduction {
            ReductionArg::Mean => Reduction::Mean,
            ReductionArg::Sum => Reduction::Sum,
        },
        ..LossConfig::new(a.xi).map_err(|e| Failure::Usage(e.to_string()))?
    };
    if batch_size == 0 {
        return Err(Failure::Usage("--batch-size must be at least 1".into()));
    }

    let mut cfg = Meta::new();
    cfg.set("height", mc.height)
        .set("width", mc.width)
        .set("channels", mc.channels)
        .set("base_channels", mc.base_channels)
        .set("window", mc.window)
        .set("heads", mc.heads)
        .set("depth", mc.depth)
        .set("levels", mc.levels)
        .set("ffn_mult", mc.ffn_mult)
        .set("inner_reversible", mc.inner_reversible)
        .set("preset", a.preset.to_possible_value().expect("no skipped variants").get_name())
        .set("stages", mc.n_stages)
        .set("d", mc.step)
        .set("unmix_only", a.unmix_only)
        .set("epochs", epochs)
        .set("batch_size", batch_size)
        .set("lr", lr)
        .set("lr_period", a.lr_period)
        .set("xi", a.xi)
        .set("reduction", a.reduction.to_possible_value().expect("no skipped variants").get_name())
        .set("no_augment", a.no_augment)
        .set("noise_sigma", a.noise_sigma)
        .set("seed", a.seed)
        .set("val_scenes", a.val_scenes)
        .set("out_dir", a.out_dir.display())
        .set("threads", threads);
    if let Some(i) = iters {
        cfg.set("iters_per_epoch", i);
    }

    let mut scenes = Vec::new();
    match &a.data {
        Some(dir) => {
            if !dir.is_dir() {
                return Err(Failure::Usage(format!("data directory {} does not exist", dir.display())));
            }
            cfg.set("data", dir.display());
            for p in hsc_files(dir)? {
                scenes.push(read_hsc(&p)?);
            }
        }
        None => {
            cfg.set("scenes", a.scenes);
            for i in 0..a.scenes {
                let kind = SceneKind::ALL[i % SceneKind::ALL.len()];
                let spec = SyntheticSceneSpec::new(
                    kind,
                    mc.height,
                    mc.width,
                    mc.channels,
                    derive(a.seed, SCENE_STREAM).wrapping_add(i as u64),
                );
                scenes.push(generate_scene(&spec)?);
            }
        }
    }
    if scenes.len() <= a.val_scenes {
        return Err(Failure::Usage(format!(
            "{} scenes leave none for training after holding out {}",
            scenes.len(),
            a.val_scenes
        )));
    }
    let mask = match &a.mask {
        Some(p) => {
            require_file(p, "mask")?;
            cfg.set("mask", p.display());
            let m = read_mask(p)?;
            check_mask(&m, mc.height, mc.width, p)?;
            m
        }
        None => generate_mask(mc.height, mc.width, 0.5, derive(a.seed, MASK_STREAM))?,
    };
    let init = match &a.init {
        Some(p) => {
            require_file(p, "initial weights")?;
            cfg.set("init", p.display());
            let t = checkpoint::load(p)?;
            if t.model != model {
                return Err(Failure::Usage(format!("{} was trained for a different model", p.display())));
            }
            Some(t.params)
        }
        None => None,
    };
    echo("train", &cfg);

    let val = scenes.split_off(scenes.len() - a.val_scenes);
    let data = Dataset { train: scenes, val, mask, noise_sigma: a.noise_sigma };
    let tc = TrainConfig {
        schedule: Schedule { initial_lr: lr, period: a.lr_period, epochs },
        batch_size,
        iters_per_epoch: iters,
        loss: lc,
        seed: a.seed,
        augment: !a.no_augment,
    };

    create_dir(&a.out_dir)?;
    write_mask(&data.mask, &a.out_dir.join("mask.hsc"))?;
    let mut csv = MetricsCsv::create(&a.out_dir.join("metrics.csv"))?;
    let mut csv_err = None;
    println!("{}", sst_core::train::METRICS_HEADER);
    let report = sst_core::train::train(&model, &data, &tc, init, |log| {
        println!("{}", sst_core::train::format_epoch_row(log));
        if let Err(e) = csv.append(log) {
            csv_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = csv_err {
        return Err(e.into());
    }

    let losses: Vec<f64> = report.iterations.iter().map(|l| l.loss).collect();
    write_loss_curve_png(&a.out_dir.join("loss_curve.png"), &losses)?;
    let mut extra = Meta::new();
    extra
        .set("seed", a.seed)
        .set("epochs_completed", report.epochs.len())
        .set("iterations", report.iterations.len())
        .set("lr", lr)
        .set("xi", a.xi);
    checkpoint::save(&a.out_dir.join("weights.hscw"), &model, &report.params, &extra)?;
    extra.set("best_psnr", report.best_psnr);
    checkpoint::save(&a.out_dir.join("best.hscw"), &model, &report.best_params, &extra)?;
    if let Some(d) = report.diverged {
        return Err(Failure::Diverged(format!(
            "non-finite loss at epoch {} iteration {}; last good weights in {}",
            d.epoch,
            d.iteration,
            a.out_dir.join("weights.hscw").display()
        )));
    }
    println!("params {}  best psnr {:.3}", model.param_count(), report.best_psnr);
    Ok(())
}

fn check_measurement(y: &Measurement<f32>, cfg: &SstConfig, path: &Path) -> Result<(), Failure> {
    let want = (cfg.height, cfg.measurement_width());
    if (y.height(), y.width()) != want {
        return Err(Failure::Usage(format!(
            "measurement {} is {}×{}, the model expects {}×{}",
            path.display(),
            y.height(),
            y.width(),
            want.0,
            want.1
        )));
    }
    Ok(())
}

fn check_cube(x: &SpectralCube<f32>, cfg: &SstConfig, path: &Path) -> Result<(), Failure> {
    if x.dims() != (cfg.height, cfg.width, cfg.channels) {
        let (h, w, c) = x.dims();
        return Err(Failure::Usage(format!(
            "{} is {h}×{w}×{c}, the model expects {}×{}×{}",
            path.display(),
            cfg.height,
            cfg.width,
            cfg.channels
        )));
    }
    Ok(())
}

fn trace_csv(trace: &StageTrace<f32>) -> String {
    let mut s = String::from("stage,residual_energy\n");
    for (n, e) in trace.residual_energy.iter().enumerate() {
        let _ = writeln!(s, "{},{:e}", n + 1, e);
    }
    s
}

/// Writes a reconstruction, its previews and its stage trace under `dir`.
fn write_reconstruction(
    dir: &Path,
    stem: &str,
    x: &SpectralCube<f32>,
    trace: &StageTrace<f32>,
    png: bool,
) -> Result<(), Failure> {
    create_dir(dir)?;
    write_hsc(x, &dir.join(format!("{stem}.hsc")))?;
    let mut meta = Meta::new();
    meta.set("stages", trace.residual_energy.len());
    if png {
        add_scales(&mut meta, &write_channel_pngs(x, dir, stem)?);
    }
    meta.write(&dir.join(format!("{stem}.meta")))?;
    sst_core::io::write_atomic(&dir.join(format!("{stem}_trace.csv")), trace_csv(trace).as_bytes())?;
    Ok(())
}

pub fn reconstruct(a: &ReconstructArgs, threads: usize) -> Result<(), Failure> {
    require_file(&a.weights, "weights")?;
    require_file(&a.measurement, "measurement")?;
    require_file(&a.mask, "mask")?;
    if let Some(t) = &a.truth {
        require_file(t, "truth")?;
    }
    let mut cfg = Meta::new();
    cfg.set("weights", a.weights.display())
        .set("measurement", a.measurement.display())
        .set("mask", a.mask.display())
        .set("no_png", a.no_png)
        .set("out", a.out.display())
        .set("threads", threads);
    if let Some(t) = &a.truth {
        cfg.set("truth", t.display());
    }
    echo("reconstruct", &cfg);

    let trained = checkpoint::load(&a.weights)?;
    let mc = trained.model.config().clone();
    let y = read_measurement(&a.measurement)?;
    check_measurement(&y, &mc, &a.measurement)?;
    let mask = read_mask(&a.mask)?;
    check_mask(&mask, mc.height, mc.width, &a.mask)?;
    let (x, trace) = trained.reconstruct(&y, &mask)?;
    write_reconstruction(&a.out, "recon", &x, &trace, !a.no_png)?;
    for (n, e) in trace.residual_energy.iter().enumerate() {
        println!("stage {} residual {:e}", n + 1, e);
    }
    if let Some(t) = &a.truth {
        let truth = read_hsc(t)?;
        check_cube(&truth, &mc, t)?;
        let m = score(&x, &truth)?;
        print!("{}", eval_table(&[EvalRow { name: t.display().to_string(), metrics: m }]));
    }
    Ok(())
}

/// One scored scene.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub name: String,
    pub metrics: SceneMetrics,
}

/// Per-scene PSNR/SSIM table followed by the mean row.
pub fn eval_table(rows: &[EvalRow]) -> String {
    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(0).max(5);
    let mut s = format!("{:<width$}  {:>9}  {:>7}\n", "scene", "PSNR(dB)", "SSIM");
    for r in rows {
        let _ = writeln!(s, "{:<width$}  {:>9.3}  {:>7.4}", r.name, r.metrics.psnr, r.metrics.ssim);
    }
    let m = mean_metrics(&rows.iter().map(|r| r.metrics).collect::<Vec<_>>());
    let _ = writeln!(s, "{:<width$}  {:>9.3}  {:>7.4}", "mean", m.psnr, m.ssim);
    s
}

/// Simulates noiseless measurements of `scenes`, reconstructs and scores them.
pub fn eval_scenes<R: Reconstructor<f32> + ?Sized>(
    recon: &R,
    scenes: &[SpectralCube<f32>],
    mask: &CodedMask<f32>,
    disp: &DispersionConfig,
) -> Result<Vec<(SceneMetrics, SpectralCube<f32>, StageTrace<f32>)>, Failure> {
    let out: sst_core::Result<Vec<_>> = scenes
        .par_iter()
        .map(|truth| {
            let y = forward_project(truth, mask, disp, &NoiseModel::None)?;
            let (x, trace) = recon.reconstruct(&y, mask)?;
            Ok((score(&x, truth)?, x, trace))
        })
        .collect();
    Ok(out?)
}

pub fn eval(a: &EvalArgs, threads: usize) -> Result<(), Failure> {
    require_file(&a.weights, "weights")?;
    require_file(&a.mask, "mask")?;
    let mut files = Vec::new();
    for t in &a.truth {
        if t.is_dir() {
            files.extend(hsc_files(t)?);
        } else {
            require_file(t, "truth")?;
            files.push(t.clone());
        }
    }
    if files.is_empty() {
        return Err(Failure::Usage("no ground-truth scenes found".into()));
    }
    let mut cfg = Meta::new();
    let joined: Vec<String> = a.truth.iter().map(|p| p.display().to_string()).collect();
    cfg.set("weights", a.weights.display())
        .set("mask", a.mask.display())
        .set("truth", joined.join(","))
        .set("threads", threads);
    if let Some(o) = &a.out {
        cfg.set("out", o.display());
    }
    echo("eval", &cfg);

    let trained: TrainedModel<f32> = checkpoint::load(&a.weights)?;
    let mc = trained.model.config().clone();
    let mask = read_mask(&a.mask)?;
    check_mask(&mask, mc.height, mc.width, &a.mask)?;
    let mut scenes = Vec::with_capacity(files.len());
    for f in &files {
        let x = read_hsc(f)?;
        check_cube(&x, &mc, f)?;
        scenes.push(x);
    }
    let results = eval_scenes(&trained, &scenes, &mask, &DispersionConfig::new(mc.step))?;
    let mut rows = Vec::with_capacity(files.len());
    for (f, (m, x, trace)) in files.iter().zip(&results) {
        let stem = f.file_stem().map_or_else(|| "scene".into(), |s| s.to_string_lossy().into_owned());
        if let Some(o) = &a.out {
            write_reconstruction(o, &format!("{stem}_recon"), x, trace, true)?;
        }
        rows.push(EvalRow { name: stem, metrics: *m });
    }
    print!("{}", eval_table(&rows));
    Ok(())
}

fn verdict(report: &Report) -> Result<(), Failure> {
    println!("{report}");
    if report.all_passed() {
        return Ok(());
    }
    let names: Vec<String> = report.failures().map(|r| format!("{} ({})", r.name, r.precision)).collect();
    Err(Failure::Verification(names.join(", ")))
}

pub fn gradcheck(a: &GradcheckArgs, threads: usize) -> Result<(), Failure> {
    let precisions = match a.precision {
        PrecisionArg::F64 => vec![Precision::F64],
        PrecisionArg::F32 => vec![Precision::F32],
        PrecisionArg::Both => vec![Precision::F64, Precision::F32],
    };
    let fault = match &a.inject_fault {
        Some(name) => Some(
            OpKind::ALL
                .into_iter()
                .find(|k| k.name() == name)
                .ok_or_else(|| Failure::Usage(format!("unknown op `{name}`")))?,
        ),
        None => None,
    };
    let mut cfg = Meta::new();
    cfg.set("seed", a.seed)
        .set("precision", a.precision.to_possible_value().expect("no skipped variants").get_name())
        .set("primitive_seeds", a.primitive_seeds)
        .set("no_blocks", a.no_blocks)
        .set("threads", threads);
    if let Some(t) = a.tol {
        cfg.set("tol", t);
    }
    echo("gradcheck", &cfg);

    sst_core::autodiff::inject_vjp_fault(fault);
    let opts = GradcheckOptions {
        seed: a.seed,
        primitive_seeds: a.primitive_seeds,
        precisions,
        tol: a.tol,
        blocks: !a.no_blocks,
    };
    let report = gradcheck_suite(&opts);
    sst_core::autodiff::inject_vjp_fault(None);
    verdict(&report?)
}

pub fn oracle_check(a: &OracleArgs, threads: usize) -> Result<(), Failure> {
    let mut cfg = Meta::new();
    cfg.set("seed", a.seed).set("threads", threads);
    if let Some(t) = a.tol {
        cfg.set("tol", t);
    }
    echo("oracle-check", &cfg);
    verdict(&oracle_suite(a.seed, a.tol)?)
}
