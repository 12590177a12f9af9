//! Run configuration: built-in profiles plus an optional JSON overlay.

use std::path::Path;

use anyhow::{bail, Context, Result};
use clap::ValueEnum;
use fact_core::field::{FieldConfig, MaskSchedule};
use fact_core::optim::{MetaConfig, OptimizerKind, OuterSign};
use fact_core::projector::{PhantomKind, PhantomSpec};
use fact_core::recon::{AsdPocsConfig, FieldInit, SartConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const DEFAULTS: &str = include_str!("../defaults.json");
pub const DEFAULTS_VERSION: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Profile {
    /// Published settings: 256³ volumes, 50 views, 1500 epochs.
    Paper,
    /// Scaled-down settings for a single CPU core: 64³ volumes, 30 views.
    Desk,
}

impl Profile {
    fn key(self) -> &'static str {
        match self {
            Profile::Paper => "paper",
            Profile::Desk => "desk",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSection {
    pub kind: PhantomKind,
    /// Voxels per axis.
    pub shape: usize,
    /// Edge length of the cubic volume, mm.
    pub extent_mm: f64,
    pub seed: u64,
    pub n_ellipsoids: usize,
    pub mu_range: (f64, f64),
}

impl PhantomSection {
    pub fn spec(&self) -> PhantomSpec {
        PhantomSpec { kind: self.kind, seed: self.seed, n_ellipsoids: self.n_ellipsoids, mu_range: self.mu_range }
    }

    pub fn spacing(&self) -> [f64; 3] {
        [self.extent_mm / self.shape as f64; 3]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometrySection {
    pub dso: f64,
    pub dsd: f64,
    pub det_rows: usize,
    pub det_cols: usize,
    pub det_pixel: [f64; 2],
    pub n_views: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectionSection {
    pub i0: f64,
    pub samples_per_ray: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskSection {
    pub t_epochs: usize,
    pub initial_levels: usize,
}

impl MaskSection {
    pub fn schedule(&self, field: &FieldConfig) -> fact_core::Result<MaskSchedule> {
        let levels = field.grid.levels;
        MaskSchedule::new(self.t_epochs, self.initial_levels.min(levels), levels, field.grid.features_per_level)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub batch_rays: usize,
    pub max_epochs: usize,
    pub lr: f64,
    pub samples_per_ray: Option<usize>,
    pub eval_every: usize,
    pub jitter: bool,
    /// Seed of the ray draws.
    pub seed: u64,
    /// Seed of the random field init used without a checkpoint.
    pub init_seed: u64,
    pub steps_per_epoch: usize,
    pub optimizer: OptimizerKind,
}

impl TrainSection {
    pub fn train_config(&self, init: FieldInit, schedule: Option<MaskSchedule>) -> TrainConfig {
        TrainConfig {
            batch_rays: self.batch_rays,
            max_epochs: self.max_epochs,
            lr: self.lr,
            samples_per_ray: self.samples_per_ray,
            schedule,
            init,
            eval_every: self.eval_every,
            jitter: self.jitter,
            seed: self.seed,
            steps_per_epoch: self.steps_per_epoch,
            optimizer: self.optimizer,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaSection {
    pub inner_epochs: usize,
    pub inner_lr: f64,
    pub outer_lr: f64,
    pub n_iterations: usize,
    pub batch_rays: usize,
    pub samples_per_ray: Option<usize>,
    pub jitter: bool,
    pub optimizer: OptimizerKind,
    pub outer_sign: OuterSign,
    /// Seed of the initial weights and of the task draws.
    pub seed: u64,
}

impl MetaSection {
    pub fn meta_config(&self, corpus: Vec<std::path::PathBuf>) -> MetaConfig {
        MetaConfig {
            inner_epochs: self.inner_epochs,
            inner_lr: self.inner_lr,
            outer_lr: self.outer_lr,
            n_iterations: self.n_iterations,
            corpus,
            batch_rays: self.batch_rays,
            samples_per_ray: self.samples_per_ray,
            jitter: self.jitter,
            optimizer: self.optimizer,
            outer_sign: self.outer_sign,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub phantom: PhantomSection,
    pub geometry: GeometrySection,
    pub projection: ProjectionSection,
    pub field: FieldConfig,
    pub mask: MaskSection,
    pub train: TrainSection,
    pub meta: MetaSection,
    pub sart: SartConfig,
    pub asd_pocs: AsdPocsConfig,
}

impl RunConfig {
    /// The named profile with `overlay` merged on top.
    pub fn load(profile: Profile, overlay: Option<&Path>) -> Result<Self> {
        let mut value = profile_value(profile)?;
        if let Some(path) = overlay {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            let patch: Value =
                serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
            if !patch.is_object() {
                bail!("config {} must hold a JSON object", path.display());
            }
            merge(&mut value, patch);
        }
        let config: RunConfig = serde_json::from_value(value).context("invalid run configuration")?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.field.validate()?;
        self.mask.schedule(&self.field)?;
        self.train.train_config(FieldInit::Random { seed: 0 }, None).validate()?;
        self.meta.meta_config(Vec::new()).validate()?;
        if !(self.projection.i0.is_finite() && self.projection.i0 > 0.0) {
            bail!("projection.i0 must be positive, got {}", self.projection.i0);
        }
        if self.projection.samples_per_ray == Some(0) {
            bail!("projection.samples_per_ray must be at least 1");
        }
        if self.phantom.shape == 0 || !(self.phantom.extent_mm > 0.0) {
            bail!("phantom shape and extent must be positive");
        }
        Ok(())
    }
}

fn profile_value(profile: Profile) -> Result<Value> {
    let mut all: Value = serde_json::from_str(DEFAULTS).context("built-in defaults are malformed")?;
    let version = all.get("version").and_then(Value::as_u64);
    if version != Some(DEFAULTS_VERSION) {
        bail!("built-in defaults have version {version:?}, expected {DEFAULTS_VERSION}");
    }
    all.get_mut("profiles")
        .and_then(|p| p.get_mut(profile.key()))
        .map(Value::take)
        .with_context(|| format!("built-in defaults lack the `{}` profile", profile.key()))
}

/// Recursive object merge; anything other than an object replaces the target.
fn merge(target: &mut Value, patch: Value) {
    match (target, patch) {
        (Value::Object(t), Value::Object(p)) => {
            for (k, v) in p {
                match t.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        t.insert(k, v);
                    }
                }
            }
        }
        (t, p) => *t = p,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn both_profiles_parse_and_validate() {
        let paper = RunConfig::load(Profile::Paper, None).unwrap();
        let desk = RunConfig::load(Profile::Desk, None).unwrap();
        assert_eq!(paper.phantom.shape, 256);
        assert_eq!(paper.geometry.n_views, 50);
        assert_eq!(paper.train.max_epochs, 1500);
        assert_eq!(paper.field.grid.table_size, 1 << 19);
        assert_eq!(paper.meta.inner_epochs, 200);
        assert_eq!(paper.meta.n_iterations, 300);
        assert_eq!(desk.phantom.shape, 64);
        assert_eq!(desk.field, FieldConfig::desk());
        assert_eq!(desk.geometry.n_views, 30);
        assert_eq!(desk.train.max_epochs, 500);
        assert_eq!((desk.meta.n_iterations, desk.meta.inner_epochs), (60, 50));
    }

    #[test]
    fn paper_profile_matches_library_defaults() {
        let paper = RunConfig::load(Profile::Paper, None).unwrap();
        assert_eq!(paper.field, FieldConfig::paper());
        let m = paper.meta.meta_config(Vec::new());
        assert_eq!(m, MetaConfig::default());
        let s = paper.mask.schedule(&paper.field).unwrap();
        assert_eq!(s, MaskSchedule::paper(8, 2).unwrap());
    }

    #[test]
    fn merge_replaces_leaves_and_keeps_siblings() {
        let mut a = json!({"x": {"y": 1, "z": [1, 2]}, "w": 3});
        merge(&mut a, json!({"x": {"z": [5]}}));
        assert_eq!(a, json!({"x": {"y": 1, "z": [5]}, "w": 3}));
    }

    #[test]
    fn overlay_changes_one_value() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"train": {"lr": 0.01}}"#).unwrap();
        let c = RunConfig::load(Profile::Desk, Some(&path)).unwrap();
        assert_eq!(c.train.lr, 0.01);
        assert_eq!(c.train.batch_rays, 256);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        for bad in [r#"{"trian": {}}"#, r#"{"train": {"learning_rate": 1}}"#, r#"{"field": {"grid": {"lvls": 2}}}"#] {
            let path = dir.path().join("c.json");
            std::fs::write(&path, bad).unwrap();
            let err = RunConfig::load(Profile::Desk, Some(&path)).unwrap_err();
            assert!(format!("{err:#}").contains("unknown field"), "{bad}: {err:#}");
        }
    }

    #[test]
    fn invalid_values_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"meta": {"outer_lr": 2.0}}"#).unwrap();
        assert!(RunConfig::load(Profile::Desk, Some(&path)).is_err());
        std::fs::write(&path, "[1]").unwrap();
        assert!(RunConfig::load(Profile::Desk, Some(&path)).is_err());
    }
}
