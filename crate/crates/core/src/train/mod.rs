//! Loss, optimiser, learning-rate schedule and the training loop.

mod adam;
mod loss;
mod schedule;

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::metrics::{cube_psnr, cube_ssim};
use crate::model::{ParamStore, Reconstructor, SstModel, TrainedModel};
use crate::optics::{forward_project, CodedMask, DispersionConfig, NoiseModel, SpectralCube};
use crate::tensor::{lit, Real};

pub use adam::{adam_step, AdamState};
pub use loss::{loss, loss_graph, LossConfig, LossTerms, LossVars, Reduction};
pub use schedule::Schedule;

/// Scenes used for training and validation plus the shared mask.
///
/// Training scenes may be larger than the model extent; each batch entry is
/// then a random crop. Validation scenes must match the model extent.
#[derive(Clone, Debug)]
pub struct Dataset<T> {
    pub train: Vec<SpectralCube<T>>,
    /// Held-out scenes for per-epoch metrics; the training scenes are used
    /// when empty.
    pub val: Vec<SpectralCube<T>>,
    pub mask: CodedMask<T>,
    /// Standard deviation of additive sensor noise during training.
    pub noise_sigma: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub schedule: Schedule,
    pub batch_size: usize,
    /// Iterations per epoch; defaults to one pass over the training scenes.
    pub iters_per_epoch: Option<usize>,
    pub loss: LossConfig,
    pub seed: u64,
    /// Random horizontal and vertical flips of training crops.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            schedule: Schedule::default(),
            batch_size: 1,
            iters_per_epoch: None,
            loss: LossConfig::default(),
            seed: 0,
            augment: true,
        }
    }
}

/// One row of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub lr: f64,
    pub wall_ms: u128,
}

/// Loss terms of one optimisation step, averaged over the batch.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct IterLog {
    pub loss: f64,
    pub output: f64,
    pub reversible: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Divergence {
    pub epoch: usize,
    pub iteration: usize,
}

#[derive(Clone, Debug)]
pub struct TrainReport<T> {
    /// Weights after the last completed step (the last good weights if
    /// training diverged).
    pub params: ParamStore<T>,
    /// Weights of the epoch with the best validation PSNR.
    pub best_params: ParamStore<T>,
    pub best_psnr: f64,
    pub epochs: Vec<EpochLog>,
    pub iterations: Vec<IterLog>,
    pub diverged: Option<Divergence>,
}

/// PSNR and SSIM of one reconstructed scene.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneMetrics {
    pub psnr: f64,
    pub ssim: f64,
}

/// Simulates noiseless measurements of `scenes`, reconstructs them and
/// scores each against its ground truth (peak = the scene maximum).
pub fn evaluate<T: Real, R: Reconstructor<T> + ?Sized>(
    recon: &R,
    scenes: &[SpectralCube<T>],
    mask: &CodedMask<T>,
    disp: &DispersionConfig,
) -> Result<Vec<SceneMetrics>> {
    scenes
        .par_iter()
        .map(|truth| {
            let y = forward_project(truth, mask, disp, &NoiseModel::None)?;
            let (x, _) = recon.reconstruct(&y, mask)?;
            score(&x, truth)
        })
        .collect()
}

pub fn score<T: Real>(x: &SpectralCube<T>, truth: &SpectralCube<T>) -> Result<SceneMetrics> {
    let peak = truth.max_value().as_f64();
    Ok(SceneMetrics {
        psnr: cube_psnr(x, truth, peak)?,
        ssim: cube_ssim(x, truth, peak)?,
    })
}

pub fn mean_metrics(m: &[SceneMetrics]) -> SceneMetrics {
    let n = m.len().max(1) as f64;
    SceneMetrics {
        psnr: m.iter().map(|s| s.psnr).sum::<f64>() / n,
        ssim: m.iter().map(|s| s.ssim).sum::<f64>() / n,
    }
}

/// Flips a cube along rows and/or columns.
pub fn flip<T: Real>(x: &SpectralCube<T>, rows: bool, cols: bool) -> SpectralCube<T> {
    let (h, w, c) = x.dims();
    SpectralCube::from_fn(h, w, c, |r, col, m| {
        let rr = if rows { h - 1 - r } else { r };
        let cc = if cols { w - 1 - col } else { col };
        x.at(rr, cc, m)
    })
}

/// Copies the `h`×`w` window of `x` whose top-left corner is `(r0, c0)`.
pub fn crop<T: Real>(x: &SpectralCube<T>, r0: usize, c0: usize, h: usize, w: usize) -> Result<SpectralCube<T>> {
    let (xh, xw, c) = x.dims();
    if r0 + h > xh || c0 + w > xw {
        return Err(Error::shape("crop", &[xh, xw], &[r0 + h, c0 + w]));
    }
    Ok(SpectralCube::from_fn(h, w, c, |r, col, m| x.at(r0 + r, c0 + col, m)))
}

/// One gradient step on a batch; returns the batch-averaged loss terms.
pub fn train_step<T: Real>(
    model: &SstModel,
    params: &mut ParamStore<T>,
    state: &mut AdamState<T>,
    batch: &[SpectralCube<T>],
    mask: &CodedMask<T>,
    noise: &[NoiseModel],
    lc: &LossConfig,
    lr: f64,
) -> Result<IterLog> {
    let disp = DispersionConfig::new(model.config().step);
    let mut g = Graph::new();
    let p = params.bind(&mut g);
    let mut totals = Vec::with_capacity(batch.len());
    let mut log = IterLog::default();
    for (truth, nm) in batch.iter().zip(noise) {
        let y = forward_project(truth, mask, &disp, nm)?;
        let scene = model.scene_vars(&mut g, &y, mask)?;
        let fwd = model.forward(&mut g, &p, scene)?;
        let t = g.constant(truth.to_tensor());
        let z = model.project(&mut g, fwd.output, scene.mask)?;
        let lv = loss_graph(&mut g, fwd.output, t, z, scene.y, lc)?;
        log.output += g.value(lv.output).data()[0].as_f64();
        log.reversible += g.value(lv.reversible).data()[0].as_f64();
        totals.push(lv.total);
    }
    let mut total = totals[0];
    for &t in &totals[1..] {
        total = g.add(total, t)?;
    }
    let total = g.scale(total, T::one() / lit::<T>(batch.len() as f64));
    let n = batch.len() as f64;
    log.output /= n;
    log.reversible /= n;
    log.loss = g.value(total).data()[0].as_f64();
    if !log.loss.is_finite() {
        return Err(Error::Diverged { epoch: 0, loss: log.loss });
    }
    g.backward(total)?;
    let grads = p.grads(&g);
    drop(p);
    adam_step(params, &grads, state, lr)?;
    Ok(log)
}

/// Trains `model` from `init` (or a fresh seeded initialisation).
///
/// Everything random (initialisation, scene order, crops, flips, noise) derives
/// from `cfg.seed`, so two runs with the same inputs produce identical
/// weights and logs apart from `wall_ms`.
pub fn train<T: Real>(
    model: &SstModel,
    data: &Dataset<T>,
    cfg: &TrainConfig,
    init: Option<ParamStore<T>>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainReport<T>> {
    if data.train.is_empty() {
        return Err(Error::invalid("train", "dataset has no training scenes"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid("train", "batch size must be positive"));
    }
    let mut params = match init {
        Some(p) => p,
        None => model.init_params(cfg.seed)?,
    };
    let mut state = AdamState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_da7a);
    let iters_per_epoch = cfg
        .iters_per_epoch
        .unwrap_or_else(|| data.train.len().div_ceil(cfg.batch_size))
        .max(1);
    let mc = model.config();
    let disp = DispersionConfig::new(mc.step);
    for s in &data.train {
        let (h, w, c) = s.dims();
        if h < mc.height || w < mc.width || c != mc.channels {
            return Err(Error::shape("train", &[mc.height, mc.width, mc.channels], &[h, w, c]));
        }
    }
    let val = if data.val.is_empty() { &data.train } else { &data.val };

    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut report = TrainReport {
        best_params: params.clone(),
        params: params.clone(),
        best_psnr: f64::NEG_INFINITY,
        epochs: Vec::new(),
        iterations: Vec::new(),
        diverged: None,
    };
    let started = Instant::now();
    let mut iteration = 0;
    for epoch in 0..cfg.schedule.epochs {
        let lr = cfg.schedule.lr(epoch);
        let mut epoch_loss = 0.0;
        for _ in 0..iters_per_epoch {
            let mut batch = Vec::with_capacity(cfg.batch_size);
            let mut noise = Vec::with_capacity(cfg.batch_size);
            for _ in 0..cfg.batch_size {
                if cursor == order.len() {
                    order = (0..data.train.len()).collect();
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                let scene = &data.train[order[cursor]];
                cursor += 1;
                let (h, w, _) = scene.dims();
                let r0 = rng.random_range(0..=h - mc.height);
                let c0 = rng.random_range(0..=w - mc.width);
                let patch = crop(scene, r0, c0, mc.height, mc.width)?;
                let (fr, fc) = if cfg.augment { (rng.random::<bool>(), rng.random::<bool>()) } else { (false, false) };
                batch.push(flip(&patch, fr, fc));
                let noise_seed: u64 = rng.random();
                noise.push(if data.noise_sigma > 0.0 {
                    NoiseModel::gaussian(data.noise_sigma, noise_seed)?
                } else {
                    NoiseModel::None
                });
            }
            let step = train_step(model, &mut params, &mut state, &batch, &data.mask, &noise, &cfg.loss, lr);
            match step {
                Ok(log) => {
                    epoch_loss += log.loss;
                    report.iterations.push(log);
                }
                Err(Error::Diverged { .. }) | Err(Error::NonFiniteGradient { .. }) => {
                    report.diverged = Some(Divergence { epoch, iteration });
                    report.params = params;
                    return Ok(report);
                }
                Err(e) => return Err(e),
            }
            iteration += 1;
        }
        let trained = TrainedModel { model: model.clone(), params: params.clone() };
        let m = mean_metrics(&evaluate(&trained, val, &data.mask, &disp)?);
        let log = EpochLog {
            epoch,
            loss: epoch_loss / iters_per_epoch as f64,
            psnr: m.psnr,
            ssim: m.ssim,
            lr,
            wall_ms: started.elapsed().as_millis(),
        };
        on_epoch(&log);
        report.epochs.push(log);
        if m.psnr > report.best_psnr {
            report.best_psnr = m.psnr;
            report.best_params = params.clone();
        }
    }
    report.params = params;
    Ok(report)
}

pub const METRICS_HEADER: &str = "epoch,loss,psnr,ssim,lr,wall_ms";

/// Append-only CSV metrics log.
pub struct MetricsCsv {
    path: PathBuf,
    file: File,
}

impl MetricsCsv {
    /// Creates (truncating) the log and writes the header.
    pub fn create(path: &Path) -> Result<Self> {
        let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
        writeln!(file, "{METRICS_HEADER}").map_err(|e| Error::io(path, e))?;
        Ok(MetricsCsv { path: path.to_path_buf(), file })
    }

    /// Opens an existing log for appending, creating it with a header if absent.
    pub fn open_append(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Self::create(path);
        }
        let file = OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))?;
        Ok(MetricsCsv { path: path.to_path_buf(), file })
    }

    pub fn append(&mut self, log: &EpochLog) -> Result<()> {
        writeln!(self.file, "{}", format_epoch_row(log)).map_err(|e| Error::io(&self.path, e))?;
        self.file.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn format_epoch_row(log: &EpochLog) -> String {
    format!(
        "{},{:e},{},{},{:e},{}",
        log.epoch, log.loss, log.psnr, log.ssim, log.lr, log.wall_ms
    )
}
