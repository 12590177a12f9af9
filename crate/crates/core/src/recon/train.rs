//! Fitting a neural attenuation field to one projection bundle.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{
    load_checkpoint, render_backward_mlp, render_into, scatter_ray, visible_levels, FieldConfig, FieldEvaluator,
    FieldGradients, FieldParams, MaskSchedule, RayWorkspace,
};
use crate::geometry::{default_samples, sample_ray, sample_ray_jittered, ConeBeamGeometry, RaySamples};
use crate::metrics::{psnr3d, ssim3d};
use crate::optim::{AdamHyper, AdamState, OptimizerKind};
use crate::projector::{ProjectionBundle, VoxelVolume};
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", deny_unknown_fields)]
pub enum FieldInit {
    Random { seed: u64 },
    Checkpoint { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Rays per optimization step.
    pub batch_rays: usize,
    /// Epochs to run; `0` extracts the initial field untouched.
    pub max_epochs: usize,
    pub lr: f64,
    /// Samples per ray; defaults to three quarters of the largest volume axis.
    pub samples_per_ray: Option<usize>,
    /// Coarse-to-fine mask; `None` leaves every level visible.
    pub schedule: Option<MaskSchedule>,
    pub init: FieldInit,
    /// Epoch interval between metric evaluations; `0` evaluates only at the end.
    pub eval_every: usize,
    /// Stratified random sample positions instead of bin centers.
    pub jitter: bool,
    /// Seed of the ray and sample-position draws.
    pub seed: u64,
    /// Optimizer steps per epoch.
    pub steps_per_epoch: usize,
    pub optimizer: OptimizerKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_rays: 256,
            max_epochs: 1500,
            lr: 1e-3,
            samples_per_ray: None,
            schedule: None,
            init: FieldInit::Random { seed: 0 },
            eval_every: 0,
            jitter: false,
            seed: 0,
            steps_per_epoch: 1,
            optimizer: OptimizerKind::Adam,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_rays == 0 {
            return Err(Error::config("batch_rays must be at least 1"));
        }
        if self.steps_per_epoch == 0 {
            return Err(Error::config("steps_per_epoch must be at least 1"));
        }
        if self.samples_per_ray == Some(0) {
            return Err(Error::config("samples_per_ray must be at least 1"));
        }
        if let Some(s) = &self.schedule {
            s.validate()?;
        }
        AdamHyper::with_lr(self.lr).validate()
    }

    pub fn samples_for(&self, geom: &ConeBeamGeometry) -> usize {
        self.samples_per_ray.unwrap_or_else(|| default_samples(geom.vol_shape))
    }
}

/// Rays of one step, with sample points already mapped to the unit cube.
/// Rays that miss the volume carry no samples.
#[derive(Debug, Clone, Default)]
pub struct RayBatch {
    pub pixels: Vec<usize>,
    pub samples: Vec<RaySamples>,
}

pub fn build_batch(geom: &ConeBeamGeometry, pixels: Vec<usize>, m: usize, mut jitter: Option<&mut ChaCha8Rng>) -> Result<RayBatch> {
    let mut samples = Vec::with_capacity(pixels.len());
    for &p in &pixels {
        let ray = geom.ray_for_index(p)?;
        if ray.span.is_none() {
            samples.push(RaySamples::default());
            continue;
        }
        let mut s = match jitter.as_deref_mut() {
            Some(rng) => sample_ray_jittered(&ray, m, rng)?,
            None => sample_ray(&ray, m)?,
        };
        for pt in s.points.iter_mut() {
            *pt = geom.normalize_point(*pt)?;
        }
        samples.push(s);
    }
    Ok(RayBatch { pixels, samples })
}

/// Rays per gradient partial. Fixed so the reduction order does not depend
/// on the thread count.
const RAY_CHUNK: usize = 8;

#[derive(Debug, Clone, Default)]
struct Chunk<T> {
    rays: Vec<RayWorkspace<T>>,
    mlp_grad: Vec<T>,
    sq_err: Vec<f64>,
}

/// Scratch reused across steps.
#[derive(Debug, Clone, Default)]
pub struct BatchWork<T> {
    chunks: Vec<Chunk<T>>,
}

impl<T: Real> BatchWork<T> {
    /// Sign of every hidden pre-activation of the last batch, in ray and
    /// sample order.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for chunk in &self.chunks {
            for ws in &chunk.rays {
                out.extend(ws.tape.batch.hidden.iter().map(|a| *a > T::zero()));
            }
        }
        out
    }
}

/// Accumulate `∂L/∂θ` of `L = mean_b (Ĩ_b - I_b)²` into `grads` and
/// return `L`. `measured[b]` is the observed intensity of `batch.pixels[b]`.
pub fn batch_loss_and_grad<T: Real>(
    params: &FieldParams<T>,
    visible: usize,
    batch: &RayBatch,
    measured: &[f64],
    i0: f64,
    grads: &mut FieldGradients<T>,
    work: &mut BatchWork<T>,
) -> f64 {
    let b = batch.samples.len();
    let mlp_len = params.len() - params.layout.table_len();
    let n_chunks = b.div_ceil(RAY_CHUNK);
    work.chunks.resize_with(n_chunks, Chunk::default);
    let scale = 2.0 / b as f64;
    work.chunks
        .par_iter_mut()
        .zip(batch.samples.par_chunks(RAY_CHUNK))
        .zip(measured.par_chunks(RAY_CHUNK))
        .for_each(|((chunk, samples), target)| {
            chunk.rays.resize_with(samples.len(), RayWorkspace::default);
            chunk.mlp_grad.clear();
            chunk.mlp_grad.resize(mlp_len, T::zero());
            chunk.sq_err.clear();
            for ((ws, s), &y) in chunk.rays.iter_mut().zip(samples).zip(target) {
                render_into(params, visible, &s.points, &s.deltas, i0, ws);
                let diff = ws.tape.intensity.to_f64() - y;
                chunk.sq_err.push(diff * diff);
                render_backward_mlp(params, ws, T::of(scale * diff), &mut chunk.mlp_grad);
            }
        });
    let mut sse = 0.0;
    for chunk in &work.chunks {
        sse += chunk.sq_err.iter().sum::<f64>();
        for (g, c) in grads.mlp_mut().iter_mut().zip(&chunk.mlp_grad) {
            *g += *c;
        }
        for ws in &chunk.rays {
            scatter_ray(params, ws, grads);
        }
    }
    sse / b as f64
}

/// Optimization state for one reconstruction: parameters, optimizer
/// moments, and the seeded ray sampler.
pub struct Trainer<'b, T> {
    bundle: &'b ProjectionBundle,
    params: FieldParams<T>,
    optimizer: AdamState<T>,
    grads: FieldGradients<T>,
    rng: ChaCha8Rng,
    work: BatchWork<T>,
    measured: Vec<f64>,
    batch_rays: usize,
    samples: usize,
    schedule: Option<MaskSchedule>,
    jitter: bool,
    steps_per_epoch: usize,
}

impl<'b, T: Real> Trainer<'b, T> {
    pub fn new(bundle: &'b ProjectionBundle, params: FieldParams<T>, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        bundle.validate()?;
        let n_rays = bundle.geom.n_rays();
        if config.batch_rays > n_rays {
            return Err(Error::config(format!(
                "batch of {} rays exceeds the {} rays in the bundle",
                config.batch_rays, n_rays
            )));
        }
        let optimizer = AdamState::new(&params, AdamHyper::with_lr(config.lr), config.optimizer)?;
        Ok(Trainer {
            bundle,
            grads: FieldGradients::for_params(&params),
            params,
            optimizer,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            work: BatchWork::default(),
            measured: Vec::with_capacity(config.batch_rays),
            batch_rays: config.batch_rays,
            samples: config.samples_for(&bundle.geom),
            schedule: config.schedule,
            jitter: config.jitter,
            steps_per_epoch: config.steps_per_epoch,
        })
    }

    pub fn params(&self) -> &FieldParams<T> {
        &self.params
    }

    pub fn into_params(self) -> FieldParams<T> {
        self.params
    }

    /// Draw a batch without replacement across all views, render it under
    /// the mask for `epoch`, and take one optimizer step. Returns the loss.
    fn single_step(&mut self, epoch: usize) -> Result<f64> {
        let geom = &self.bundle.geom;
        let pixels = index::sample(&mut self.rng, geom.n_rays(), self.batch_rays).into_vec();
        let batch = build_batch(geom, pixels, self.samples, self.jitter.then_some(&mut self.rng))?;
        self.measured.clear();
        self.measured.extend(batch.pixels.iter().map(|&p| self.bundle.images[p] as f64));
        let visible = visible_levels(self.schedule.as_ref(), self.params.layout.levels, epoch);
        self.grads.reset();
        let loss = batch_loss_and_grad(
            &self.params,
            visible,
            &batch,
            &self.measured,
            self.bundle.i0,
            &mut self.grads,
            &mut self.work,
        );
        if !loss.is_finite() {
            return Err(Error::Divergence { stage: "training", step: epoch });
        }
        self.optimizer.step(&mut self.params, &self.grads)?;
        if !self.params.is_finite() {
            return Err(Error::Divergence { stage: "training", step: epoch });
        }
        Ok(loss)
    }

    /// All optimizer steps of one epoch; returns their mean loss.
    pub fn step(&mut self, epoch: usize) -> Result<f64> {
        let mut total = 0.0;
        for _ in 0..self.steps_per_epoch {
            total += self.single_step(epoch)?;
        }
        Ok(total / self.steps_per_epoch as f64)
    }
}

/// Evaluate `μ` at every voxel center with all levels visible.
pub fn extract_volume<T: Real>(params: &FieldParams<T>, shape: [usize; 3], spacing: [f64; 3]) -> VoxelVolume {
    let mut vol = VoxelVolume::zeros(shape, spacing);
    let [nx, ny, nz] = shape;
    vol.data.par_chunks_mut(nx * ny).enumerate().for_each(|(z, slice)| {
        let mut eval = FieldEvaluator::new(params);
        let pz = (z as f64 + 0.5) / nz as f64;
        let mut points = vec![[0.0; 3]; nx];
        let mut row = vec![T::zero(); nx];
        for y in 0..ny {
            let py = (y as f64 + 0.5) / ny as f64;
            for (x, p) in points.iter_mut().enumerate() {
                *p = [(x as f64 + 0.5) / nx as f64, py, pz];
            }
            eval.mu_batch(&points, &mut row);
            for (v, mu) in slice[nx * y..nx * (y + 1)].iter_mut().zip(&row) {
                *v = Real::to_f64(*mu) as f32;
            }
        }
    });
    vol
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    /// Optimizer epochs completed when the record was taken.
    pub epoch: usize,
    /// Loss of the last completed epoch.
    pub loss: Option<f64>,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl TrainLog {
    pub fn push(&mut self, record: LogRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if record.epoch <= last.epoch {
                return Err(Error::config(format!("log epoch {} does not follow {}", record.epoch, last.epoch)));
            }
        }
        self.records.push(record);
        Ok(())
    }

    pub fn last(&self) -> Option<&LogRecord> {
        self.records.last()
    }

    pub fn final_psnr(&self) -> Option<f64> {
        self.records.iter().rev().find_map(|r| r.psnr)
    }

    pub fn psnr_series(&self) -> Vec<(usize, f64)> {
        self.records.iter().filter_map(|r| r.psnr.map(|p| (r.epoch, p))).collect()
    }

    pub fn loss_series(&self) -> Vec<(usize, f64)> {
        self.records.iter().filter_map(|r| r.loss.map(|p| (r.epoch, p))).collect()
    }

    /// First logged epoch whose PSNR is at least `target`.
    pub fn first_epoch_reaching(&self, target: f64) -> Option<usize> {
        self.records.iter().find(|r| r.psnr.is_some_and(|p| p >= target)).map(|r| r.epoch)
    }

    /// CSV with header `epoch,loss,psnr,ssim,wall_ms`; absent values are empty.
    pub fn to_csv(&self, with_timing: bool) -> String {
        let mut out = String::from("epoch,loss,psnr,ssim,wall_ms\n");
        for r in &self.records {
            let wall = if with_timing { r.wall_ms.to_string() } else { String::new() };
            out.push_str(&format!("{},{},{},{},{}\n", r.epoch, opt(r.loss), opt(r.psnr), opt(r.ssim), wall));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv(true).as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Initial parameters for a run: seeded random or a stored checkpoint.
pub fn initial_params(field: &FieldConfig, init: &FieldInit) -> Result<FieldParams<f32>> {
    match init {
        FieldInit::Random { seed } => FieldParams::random(field, *seed),
        FieldInit::Checkpoint { path } => load_checkpoint(path),
    }
}

/// Train for `max_epochs` from the configured initialization and extract
/// the volume. With a ground truth, the log also tracks PSNR and SSIM.
pub fn reconstruct_field(
    bundle: &ProjectionBundle,
    field: &FieldConfig,
    config: &TrainConfig,
    truth: Option<&VoxelVolume>,
) -> Result<(VoxelVolume, TrainLog)> {
    let params = initial_params(field, &config.init)?;
    reconstruct_from(bundle, params, config, truth)
}

/// [`reconstruct_field`] from explicit initial parameters.
pub fn reconstruct_from<T: Real>(
    bundle: &ProjectionBundle,
    params: FieldParams<T>,
    config: &TrainConfig,
    truth: Option<&VoxelVolume>,
) -> Result<(VoxelVolume, TrainLog)> {
    let geom = &bundle.geom;
    if let Some(t) = truth {
        t.check_geometry(geom)?;
    }
    let start = Instant::now();
    let mut trainer = Trainer::new(bundle, params, config)?;
    let mut log = TrainLog::default();
    let mut last_loss = None;
    let record = |trainer: &Trainer<T>, epoch, loss, log: &mut TrainLog| -> Result<()> {
        let (psnr, ssim) = match truth {
            Some(t) => {
                let vol = extract_volume(trainer.params(), geom.vol_shape, geom.vol_spacing);
                (Some(psnr3d(&vol, t, None)?.db()), Some(ssim3d(&vol, t, None)?))
            }
            None => (None, None),
        };
        let wall_ms = start.elapsed().as_millis() as u64;
        log.push(LogRecord { epoch, loss, psnr, ssim, wall_ms })
    };
    for epoch in 0..config.max_epochs {
        if config.eval_every > 0 && epoch % config.eval_every == 0 {
            record(&trainer, epoch, last_loss, &mut log)?;
        }
        last_loss = Some(trainer.step(epoch)?);
    }
    record(&trainer, config.max_epochs, last_loss, &mut log)?;
    let vol = extract_volume(trainer.params(), geom.vol_shape, geom.vol_spacing);
    Ok((vol, log))
}

/// Outcome of comparing analytic loss gradients with central differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientCheck {
    pub max_rel_error: f64,
    pub n_params: usize,
    /// Parameters whose `±h` probes landed on different sides of a ReLU
    /// kink and were re-probed with `h / 100`.
    pub kink_reprobes: usize,
}

/// Check every parameter's gradient of [`batch_loss_and_grad`] against
/// central differences with step `h`. Relative error is taken against
/// `max(|fd|, |analytic|, floor)`.
pub fn finite_difference_check(
    params: &FieldParams<f64>,
    visible: usize,
    batch: &RayBatch,
    measured: &[f64],
    i0: f64,
    h: f64,
    floor: f64,
) -> GradientCheck {
    let mut work = BatchWork::default();
    let mut g = FieldGradients::for_params(params);
    batch_loss_and_grad(params, visible, batch, measured, i0, &mut g, &mut work);
    let mut scratch = FieldGradients::for_params(params);
    let mut q = params.clone();
    let mut probe = |q: &mut FieldParams<f64>, i: usize, h: f64| {
        let orig = q.data[i];
        q.data[i] = orig + h;
        let up = batch_loss_and_grad(q, visible, batch, measured, i0, &mut scratch, &mut work);
        let pat_up = work.relu_pattern();
        q.data[i] = orig - h;
        let dn = batch_loss_and_grad(q, visible, batch, measured, i0, &mut scratch, &mut work);
        let same_side = pat_up == work.relu_pattern();
        q.data[i] = orig;
        ((up - dn) / (2.0 * h), same_side)
    };
    let mut report = GradientCheck { max_rel_error: 0.0, n_params: params.len(), kink_reprobes: 0 };
    for i in 0..params.len() {
        let (mut fd, same_side) = probe(&mut q, i, h);
        if !same_side {
            report.kink_reprobes += 1;
            fd = probe(&mut q, i, h / 100.0).0;
        }
        let a = g.data[i];
        let err = (fd - a).abs() / fd.abs().max(a.abs()).max(floor);
        report.max_rel_error = report.max_rel_error.max(err);
    }
    report
}

/// Draw `n` distinct pixel indices with a seeded generator.
pub fn sample_pixels<R: Rng>(rng: &mut R, n_rays: usize, n: usize) -> Vec<usize> {
    index::sample(rng, n_rays, n).into_vec()
}
