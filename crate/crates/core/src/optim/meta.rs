//! Reptile-style meta-initialization over a corpus of projection bundles.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::OptimizerKind;
use crate::error::{Error, Result};
use crate::field::{FieldConfig, FieldParams, MaskSchedule};
use crate::projector::{load_bundle, ProjectionBundle};
use crate::recon::{FieldInit, TrainConfig, Trainer};
use crate::scalar::Real;

/// Direction of the outer update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OuterSign {
    /// `θ₀ + ε(θ' − θ₀)`: move toward the adapted weights.
    #[default]
    Reptile,
    /// `θ₀ − ε(θ' − θ₀)`: move away from them.
    Printed,
}

/// Interpolate `init` toward (or away from) `adapted` by `eps`.
pub fn reptile_outer_step<T: Real>(
    init: &mut FieldParams<T>,
    adapted: &FieldParams<T>,
    eps: f64,
    sign: OuterSign,
) -> Result<()> {
    init.check_compatible(adapted)?;
    if !(0.0..=1.0).contains(&eps) {
        return Err(Error::config(format!("outer learning rate must lie in [0, 1], got {eps}")));
    }
    let e = T::of(match sign {
        OuterSign::Reptile => eps,
        OuterSign::Printed => -eps,
    });
    for (a, b) in init.data.iter_mut().zip(&adapted.data) {
        *a += e * (*b - *a);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaConfig {
    /// Inner epochs `K` per task.
    pub inner_epochs: usize,
    /// Inner learning rate `γ`.
    pub inner_lr: f64,
    /// Outer learning rate `ε`.
    pub outer_lr: f64,
    pub n_iterations: usize,
    #[serde(default)]
    pub corpus: Vec<PathBuf>,
    pub batch_rays: usize,
    pub samples_per_ray: Option<usize>,
    pub jitter: bool,
    pub optimizer: OptimizerKind,
    pub outer_sign: OuterSign,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            inner_epochs: 200,
            inner_lr: 1e-3,
            outer_lr: 1e-3,
            n_iterations: 300,
            corpus: Vec::new(),
            batch_rays: 256,
            samples_per_ray: None,
            jitter: false,
            optimizer: OptimizerKind::Adam,
            outer_sign: OuterSign::Reptile,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.inner_epochs == 0 {
            return Err(Error::config("inner_epochs must be at least 1"));
        }
        if !(self.outer_lr > 0.0 && self.outer_lr <= 1.0) {
            return Err(Error::config(format!("outer_lr must lie in (0, 1], got {}", self.outer_lr)));
        }
        self.inner_config(None, 0).validate()
    }

    /// Training settings of one inner task.
    pub fn inner_config(&self, schedule: Option<MaskSchedule>, seed: u64) -> TrainConfig {
        TrainConfig {
            batch_rays: self.batch_rays,
            max_epochs: self.inner_epochs,
            lr: self.inner_lr,
            samples_per_ray: self.samples_per_ray,
            schedule,
            init: FieldInit::Random { seed: 0 },
            eval_every: 0,
            jitter: self.jitter,
            seed,
            steps_per_epoch: 1,
            optimizer: self.optimizer,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaRecord {
    pub iteration: usize,
    pub bundle_id: usize,
    pub inner_final_loss: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetaLog {
    pub records: Vec<MetaRecord>,
}

impl MetaLog {
    pub fn to_csv(&self, with_timing: bool) -> String {
        let mut out = String::from("iteration,bundle_id,inner_final_loss,wall_ms\n");
        for r in &self.records {
            let wall = if with_timing { r.wall_ms.to_string() } else { String::new() };
            out.push_str(&format!("{},{},{},{}\n", r.iteration, r.bundle_id, r.inner_final_loss, wall));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv(true)).map_err(|e| Error::io(path, e))
    }
}

pub fn load_corpus(paths: &[PathBuf]) -> Result<Vec<ProjectionBundle>> {
    paths.iter().map(|p| load_bundle(p)).collect()
}

fn check_corpus(bundles: &[ProjectionBundle]) -> Result<()> {
    let first = bundles.first().ok_or_else(|| Error::config("meta-training corpus is empty"))?;
    for (i, b) in bundles.iter().enumerate() {
        b.validate()?;
        if !b.geom.same_scale(&first.geom) {
            return Err(Error::config(format!(
                "corpus bundle {i} has volume {:?} @ {:?} mm (dso {}, dsd {}), bundle 0 has {:?} @ {:?} mm (dso {}, dsd {})",
                b.geom.vol_shape,
                b.geom.vol_spacing,
                b.geom.dso,
                b.geom.dsd,
                first.geom.vol_shape,
                first.geom.vol_spacing,
                first.geom.dso,
                first.geom.dsd
            )));
        }
    }
    Ok(())
}

/// Seed of the ray sampler for one inner task.
fn task_seed(seed: u64, iteration: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    rng.set_stream(iteration as u64 + 1);
    rng.random()
}

/// Load the corpus listed in `config` and run [`meta_train_bundles`].
pub fn meta_train(
    config: &MetaConfig,
    field: &FieldConfig,
    schedule: Option<&MaskSchedule>,
    seed: u64,
) -> Result<(FieldParams<f32>, MetaLog)> {
    config.validate()?;
    let bundles = load_corpus(&config.corpus)?;
    meta_train_bundles(&bundles, config, field, schedule, seed)
}

/// Starting from the seeded random init, repeatedly pick a bundle, adapt a
/// copy of the init for `K` epochs (mask restarted at epoch 0), and move the
/// init toward the adapted weights.
pub fn meta_train_bundles(
    bundles: &[ProjectionBundle],
    config: &MetaConfig,
    field: &FieldConfig,
    schedule: Option<&MaskSchedule>,
    seed: u64,
) -> Result<(FieldParams<f32>, MetaLog)> {
    config.validate()?;
    check_corpus(bundles)?;
    let mut init = FieldParams::<f32>::random(field, seed)?;
    let mut pick = ChaCha8Rng::seed_from_u64(seed);
    let mut log = MetaLog::default();
    let start = Instant::now();
    for iteration in 0..config.n_iterations {
        let bundle_id = pick.random_range(0..bundles.len());
        let inner = config.inner_config(schedule.copied(), task_seed(seed, iteration));
        let mut trainer = Trainer::new(&bundles[bundle_id], init.clone(), &inner)?;
        let mut loss = f64::NAN;
        for epoch in 0..config.inner_epochs {
            loss = trainer.step(epoch).map_err(|e| match e {
                Error::Divergence { .. } => Error::Divergence { stage: "meta-training", step: iteration },
                other => other,
            })?;
        }
        let adapted = trainer.into_params();
        reptile_outer_step(&mut init, &adapted, config.outer_lr, config.outer_sign)?;
        if !init.is_finite() {
            return Err(Error::Divergence { stage: "meta-training", step: iteration });
        }
        log.records.push(MetaRecord {
            iteration,
            bundle_id,
            inner_final_loss: loss,
            wall_ms: start.elapsed().as_millis() as u64,
        });
    }
    Ok((init, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ConeBeamGeometry;
    use crate::projector::{forward_project, make_phantom, PhantomKind, PhantomSpec};
    use proptest::prelude::*;

    fn corpus(n: usize) -> Vec<ProjectionBundle> {
        let geom = ConeBeamGeometry::desk(8, 3).unwrap();
        (0..n)
            .map(|s| {
                let spec = PhantomSpec { kind: PhantomKind::RandomEllipsoids, seed: s as u64, n_ellipsoids: 3, ..Default::default() };
                let vol = make_phantom(&spec, geom.vol_shape, geom.vol_spacing).unwrap();
                forward_project(&vol, &geom, 1.0, 6).unwrap()
            })
            .collect()
    }

    fn small_config(iterations: usize) -> MetaConfig {
        MetaConfig {
            inner_epochs: 3,
            inner_lr: 1e-2,
            outer_lr: 0.5,
            n_iterations: iterations,
            batch_rays: 16,
            samples_per_ray: Some(6),
            ..Default::default()
        }
    }

    #[test]
    fn interpolation_examples() {
        let c = FieldConfig::tiny();
        let zeros = FieldParams::<f64>::zeros(&c).unwrap();
        let mut ones = zeros.clone();
        ones.data.iter_mut().for_each(|v| *v = 1.0);
        let mut p = zeros.clone();
        reptile_outer_step(&mut p, &ones, 0.5, OuterSign::Reptile).unwrap();
        assert!(p.data.iter().all(|v| *v == 0.5));
        let mut p = zeros.clone();
        reptile_outer_step(&mut p, &ones, 1.0, OuterSign::Reptile).unwrap();
        assert_eq!(p, ones);
        let mut p = zeros.clone();
        reptile_outer_step(&mut p, &ones, 0.0, OuterSign::Reptile).unwrap();
        assert_eq!(p, zeros);
        let mut p = zeros.clone();
        reptile_outer_step(&mut p, &ones, 0.25, OuterSign::Printed).unwrap();
        assert!(p.data.iter().all(|v| *v == -0.25));
        assert!(reptile_outer_step(&mut p, &ones, 1.5, OuterSign::Reptile).is_err());
    }

    proptest! {
        #[test]
        fn outer_step_is_affine(seed in 0u64..1000, eps in 0.0f64..=1.0) {
            let c = FieldConfig::tiny();
            let a = FieldParams::<f64>::random(&c, seed).unwrap();
            let b = FieldParams::<f64>::random(&c, seed + 1).unwrap();
            let mut n = a.clone();
            reptile_outer_step(&mut n, &b, eps, OuterSign::Reptile).unwrap();
            let dist = |x: &FieldParams<f64>, y: &FieldParams<f64>| x.data.iter().zip(&y.data).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
            let lhs = dist(&n, &b);
            let rhs = (1.0 - eps) * dist(&a, &b);
            prop_assert!((lhs - rhs).abs() <= 1e-12 * dist(&a, &b).max(1e-300));
        }
    }

    #[test]
    fn zero_iterations_return_the_random_init() {
        let (p, log) = meta_train_bundles(&corpus(2), &small_config(0), &FieldConfig::tiny(), None, 7).unwrap();
        assert_eq!(p, FieldParams::<f32>::random(&FieldConfig::tiny(), 7).unwrap());
        assert!(log.records.is_empty());
    }

    #[test]
    fn single_task_collapses_to_plain_training() {
        let bundles = corpus(1);
        let mut cfg = small_config(1);
        cfg.inner_epochs = 1;
        cfg.outer_lr = 1.0;
        let (meta, log) = meta_train_bundles(&bundles, &cfg, &FieldConfig::tiny(), None, 3).unwrap();
        let init = FieldParams::<f32>::random(&FieldConfig::tiny(), 3).unwrap();
        let mut t = Trainer::new(&bundles[0], init, &cfg.inner_config(None, task_seed(3, 0))).unwrap();
        let loss = t.step(0).unwrap();
        assert_eq!(meta, t.into_params());
        assert_eq!(log.records[0].inner_final_loss, loss);
    }

    #[test]
    fn runs_are_bit_identical() {
        let bundles = corpus(3);
        let sched = MaskSchedule::new(2, 1, 2, 2).unwrap();
        let run = || meta_train_bundles(&bundles, &small_config(4), &FieldConfig::tiny(), Some(&sched), 11).unwrap();
        let (a, la) = run();
        let (b, lb) = run();
        assert_eq!(a, b);
        assert_eq!(la.to_csv(false), lb.to_csv(false));
        assert_eq!(la.records.len(), 4);
        assert!(la.to_csv(false).starts_with("iteration,bundle_id,inner_final_loss,wall_ms\n0,"));
    }

    #[test]
    fn mismatched_corpus_is_rejected() {
        let mut bundles = corpus(2);
        let geom = ConeBeamGeometry::desk(10, 3).unwrap();
        bundles.push(ProjectionBundle { images: vec![1.0; geom.n_rays()], geom, i0: 1.0, seed: None });
        let err = meta_train_bundles(&bundles, &small_config(1), &FieldConfig::tiny(), None, 0).unwrap_err();
        assert!(matches!(err, Error::InvalidConfig(_)));
        assert!(matches!(meta_train_bundles(&[], &small_config(1), &FieldConfig::tiny(), None, 0), Err(Error::InvalidConfig(_))));
    }
}
