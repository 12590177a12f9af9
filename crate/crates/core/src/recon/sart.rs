//! Classical iterative baselines: SART and ASD-POCS.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{default_samples, ConeBeamGeometry};
use crate::projector::{back_project_view, line_integrals, line_integrals_view, ProjectionBundle, VoxelVolume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SartConfig {
    pub n_iters: usize,
    /// Relaxation λ in `[0, 2)`.
    pub relax: f64,
    pub samples_per_ray: Option<usize>,
}

impl Default for SartConfig {
    fn default() -> Self {
        SartConfig { n_iters: 50, relax: 1.0, samples_per_ray: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AsdPocsConfig {
    pub n_iters: usize,
    /// TV steepest-descent steps after each SART pass.
    pub n_tv: usize,
    /// TV step length as a fraction of the preceding SART update's norm.
    pub tv_step: f64,
    pub relax: f64,
    pub samples_per_ray: Option<usize>,
}

impl Default for AsdPocsConfig {
    fn default() -> Self {
        AsdPocsConfig { n_iters: 20, n_tv: 25, tv_step: 0.02, relax: 1.0, samples_per_ray: None }
    }
}

impl From<&SartConfig> for AsdPocsConfig {
    fn from(c: &SartConfig) -> Self {
        AsdPocsConfig { n_iters: c.n_iters, n_tv: 0, tv_step: 0.0, relax: c.relax, samples_per_ray: c.samples_per_ray }
    }
}

/// Smoothing inside the TV square root.
pub const TV_EPS: f64 = 1e-8;

/// Below this a ray or voxel footprint sum is treated as empty.
const FOOTPRINT_FLOOR: f64 = 1e-12;

/// Per-ray lengths `A 1` and per-view voxel coverage `Aᵥᵀ 1`.
#[derive(Debug, Clone)]
pub struct SartNormalization {
    pub row: Vec<f64>,
    pub col: Vec<f32>,
}

impl SartNormalization {
    pub fn new(geom: &ConeBeamGeometry, m: usize) -> Result<Self> {
        let mut ones = VoxelVolume::for_geometry(geom);
        ones.data.iter_mut().for_each(|v| *v = 1.0);
        let row = line_integrals(&ones, geom, m)?;
        let n_vox = geom.n_voxels();
        let per_view = geom.pixels_per_view();
        let mut col = vec![0.0f32; n_vox * geom.n_views];
        let unit = vec![1.0; per_view];
        let mut acc = vec![0.0; n_vox];
        for v in 0..geom.n_views {
            acc.iter_mut().for_each(|a| *a = 0.0);
            back_project_view(&unit, geom, v, m, &mut acc);
            for (c, a) in col[v * n_vox..(v + 1) * n_vox].iter_mut().zip(&acc) {
                *c = *a as f32;
            }
        }
        Ok(SartNormalization { row, col })
    }
}

fn check_relax(relax: f64) -> Result<()> {
    if !(0.0..2.0).contains(&relax) {
        return Err(Error::config(format!("relaxation must lie in [0, 2), got {relax}")));
    }
    Ok(())
}

/// One sweep over every view: `x += λ Aᵥᵀ(r / Aᵥ1) / Aᵥᵀ1`, clamped at 0.
pub fn sart_pass(
    vol: &mut VoxelVolume,
    measured: &[f64],
    geom: &ConeBeamGeometry,
    norm: &SartNormalization,
    relax: f64,
    m: usize,
) {
    let per_view = geom.pixels_per_view();
    let n_vox = geom.n_voxels();
    let mut proj = vec![0.0; per_view];
    let mut acc = vec![0.0; n_vox];
    for v in 0..geom.n_views {
        line_integrals_view(vol, geom, v, m, &mut proj);
        let rows = &norm.row[v * per_view..(v + 1) * per_view];
        let meas = &measured[v * per_view..(v + 1) * per_view];
        for i in 0..per_view {
            proj[i] = if rows[i] > FOOTPRINT_FLOOR { (meas[i] - proj[i]) / rows[i] } else { 0.0 };
        }
        acc.iter_mut().for_each(|a| *a = 0.0);
        back_project_view(&proj, geom, v, m, &mut acc);
        let cols = &norm.col[v * n_vox..(v + 1) * n_vox];
        for ((x, a), c) in vol.data.iter_mut().zip(&acc).zip(cols) {
            let c = *c as f64;
            if c > FOOTPRINT_FLOOR {
                *x = (*x as f64 + relax * a / c).max(0.0) as f32;
            }
        }
    }
}

/// `Σ sqrt(|∇x|² + ε)` with forward differences and zero flux at the far faces.
pub fn total_variation(vol: &VoxelVolume) -> f64 {
    let [nx, ny, nz] = vol.shape;
    let d = &vol.data;
    let mut tv = 0.0;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = vol.index(x, y, z);
                let c = d[i] as f64;
                let dx = if x + 1 < nx { d[i + 1] as f64 - c } else { 0.0 };
                let dy = if y + 1 < ny { d[i + nx] as f64 - c } else { 0.0 };
                let dz = if z + 1 < nz { d[i + nx * ny] as f64 - c } else { 0.0 };
                tv += (dx * dx + dy * dy + dz * dz + TV_EPS).sqrt();
            }
        }
    }
    tv
}

/// Gradient of [`total_variation`] with respect to every voxel.
pub fn tv_gradient(vol: &VoxelVolume) -> Vec<f64> {
    let [nx, ny, nz] = vol.shape;
    let d = &vol.data;
    let mut g = vec![0.0; d.len()];
    let strides = [1, nx, nx * ny];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = vol.index(x, y, z);
                let c = d[i] as f64;
                let inside = [x + 1 < nx, y + 1 < ny, z + 1 < nz];
                let mut diff = [0.0; 3];
                for a in 0..3 {
                    if inside[a] {
                        diff[a] = d[i + strides[a]] as f64 - c;
                    }
                }
                let s = (diff[0] * diff[0] + diff[1] * diff[1] + diff[2] * diff[2] + TV_EPS).sqrt();
                for a in 0..3 {
                    if inside[a] {
                        let w = diff[a] / s;
                        g[i] -= w;
                        g[i + strides[a]] += w;
                    }
                }
            }
        }
    }
    g
}

/// `n_tv` normalized steepest-descent steps of length `step` on the TV,
/// clamping at zero after each. Steps with a vanishing gradient are skipped.
pub fn tv_descent(vol: &mut VoxelVolume, n_tv: usize, step: f64) {
    for _ in 0..n_tv {
        let g = tv_gradient(vol);
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || step == 0.0 {
            continue;
        }
        let scale = step / norm;
        for (x, gi) in vol.data.iter_mut().zip(&g) {
            *x = (*x as f64 - scale * gi).max(0.0) as f32;
        }
    }
}

/// RMS of `A x - ℓ` over every detector pixel.
pub fn projection_residual_rms(vol: &VoxelVolume, measured: &[f64], geom: &ConeBeamGeometry, m: usize) -> Result<f64> {
    let proj = line_integrals(vol, geom, m)?;
    if proj.len() != measured.len() {
        return Err(Error::shape("measured line integrals", proj.len(), measured.len()));
    }
    let sse: f64 = proj.iter().zip(measured).map(|(p, q)| (p - q) * (p - q)).sum();
    Ok((sse / proj.len() as f64).sqrt())
}

/// ASD-POCS, calling `observe(iteration, volume)` after each outer
/// iteration. With `n_tv = 0` this is exactly SART.
pub fn asd_pocs_observed(
    bundle: &ProjectionBundle,
    config: &AsdPocsConfig,
    mut observe: impl FnMut(usize, &VoxelVolume),
) -> Result<VoxelVolume> {
    bundle.validate()?;
    check_relax(config.relax)?;
    if !(config.tv_step.is_finite() && config.tv_step >= 0.0) {
        return Err(Error::config(format!("tv_step must be non-negative, got {}", config.tv_step)));
    }
    let geom = &bundle.geom;
    let m = config.samples_per_ray.unwrap_or_else(|| default_samples(geom.vol_shape));
    if m == 0 {
        return Err(Error::config("samples_per_ray must be at least 1"));
    }
    let measured = bundle.line_integrals()?;
    let norm = SartNormalization::new(geom, m)?;
    let mut vol = VoxelVolume::for_geometry(geom);
    let mut before = vol.data.clone();
    for it in 0..config.n_iters {
        if config.n_tv > 0 {
            before.copy_from_slice(&vol.data);
        }
        sart_pass(&mut vol, &measured, geom, &norm, config.relax, m);
        if config.n_tv > 0 {
            let dp = vol
                .data
                .iter()
                .zip(&before)
                .map(|(a, b)| {
                    let d = *a as f64 - *b as f64;
                    d * d
                })
                .sum::<f64>()
                .sqrt();
            tv_descent(&mut vol, config.n_tv, config.tv_step * dp);
        }
        observe(it, &vol);
    }
    Ok(vol)
}

pub fn sart(bundle: &ProjectionBundle, config: &SartConfig) -> Result<VoxelVolume> {
    asd_pocs_observed(bundle, &config.into(), |_, _| {})
}

pub fn asd_pocs(bundle: &ProjectionBundle, config: &AsdPocsConfig) -> Result<VoxelVolume> {
    asd_pocs_observed(bundle, config, |_, _| {})
}
