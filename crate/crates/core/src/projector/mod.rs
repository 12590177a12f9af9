//! Cone-beam simulator: phantoms, the sampled line-integral operator `A`,
//! its exact adjoint, and the on-disk bundle/volume formats.
//!
//! Every ray is sampled at `M` bin centers (see [`sample_ray`]) and the volume
//! is trilinearly interpolated between voxel centers, with voxels outside the
//! grid reading as zero. `back_project` scatters with the very same weights,
//! so `<A x, y> = <x, Aᵀ y>` holds up to rounding.

mod io;
mod phantom;

pub use io::{load_bundle, load_volume, save_bundle, save_volume, FORMAT_VERSION};
pub use phantom::{make_phantom, rasterize, Ellipsoid, PhantomKind, PhantomSpec};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{sample_ray, ConeBeamGeometry, Point};

/// Dense attenuation grid in 1/mm, x fastest, then y, then z.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelVolume {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub data: Vec<f32>,
}

/// Detector intensities for every view plus the geometry that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionBundle {
    pub geom: ConeBeamGeometry,
    pub i0: f64,
    /// `n_views × det_rows × det_cols`, view-major then row-major.
    pub images: Vec<f32>,
    /// Seed of the phantom the bundle was simulated from, if any.
    pub seed: Option<u64>,
}

impl VoxelVolume {
    pub fn zeros(shape: [usize; 3], spacing: [f64; 3]) -> Self {
        VoxelVolume { shape, spacing, data: vec![0.0; shape.iter().product()] }
    }

    pub fn for_geometry(geom: &ConeBeamGeometry) -> Self {
        Self::zeros(geom.vol_shape, geom.vol_spacing)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.shape[0] * (y + self.shape[1] * z)
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(x, y, z)]
    }

    /// Physical position of a voxel center, mm.
    pub fn voxel_center(&self, x: usize, y: usize, z: usize) -> Point {
        let idx = [x, y, z];
        std::array::from_fn(|a| (idx[a] as f64 + 0.5 - 0.5 * self.shape[a] as f64) * self.spacing[a])
    }

    pub fn check_geometry(&self, geom: &ConeBeamGeometry) -> Result<()> {
        if self.shape != geom.vol_shape || self.spacing != geom.vol_spacing {
            return Err(Error::shape(
                "volume vs geometry",
                format!("{:?} @ {:?} mm", geom.vol_shape, geom.vol_spacing),
                format!("{:?} @ {:?} mm", self.shape, self.spacing),
            ));
        }
        if self.data.len() != self.shape.iter().product::<usize>() {
            return Err(Error::shape("volume data length", self.shape.iter().product::<usize>(), self.data.len()));
        }
        Ok(())
    }

    /// Trilinear corners and weights of `p` (mm). Out-of-grid corners get weight 0.
    #[inline]
    pub fn footprint(&self, p: Point) -> Footprint {
        let mut base = [0isize; 3];
        let mut frac = [0.0f64; 3];
        for a in 0..3 {
            let c = p[a] / self.spacing[a] + 0.5 * self.shape[a] as f64 - 0.5;
            let f = c.floor();
            base[a] = f as isize;
            frac[a] = c - f;
        }
        let mut fp = Footprint { index: [0; 8], weight: [0.0; 8] };
        for k in 0..8 {
            let off = [k & 1, (k >> 1) & 1, (k >> 2) & 1];
            let mut w = 1.0;
            let mut inside = true;
            let mut idx = [0usize; 3];
            for a in 0..3 {
                let i = base[a] + off[a] as isize;
                if i < 0 || i >= self.shape[a] as isize {
                    inside = false;
                    break;
                }
                idx[a] = i as usize;
                w *= if off[a] == 1 { frac[a] } else { 1.0 - frac[a] };
            }
            if inside {
                fp.index[k] = self.index(idx[0], idx[1], idx[2]);
                fp.weight[k] = w;
            }
        }
        fp
    }

    #[inline]
    pub fn interpolate(&self, p: Point) -> f64 {
        let fp = self.footprint(p);
        (0..8).map(|k| fp.weight[k] * self.data[fp.index[k]] as f64).sum()
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Footprint {
    pub index: [usize; 8],
    pub weight: [f64; 8],
}

fn check_samples(m: usize) -> Result<()> {
    if m == 0 {
        return Err(Error::config("samples per ray must be at least 1"));
    }
    Ok(())
}

fn ray_integral(volume: &VoxelVolume, geom: &ConeBeamGeometry, view: usize, row: usize, col: usize, m: usize) -> f64 {
    let ray = geom.ray_unchecked(view, row, col);
    match sample_ray(&ray, m) {
        Ok(s) => s.points.iter().zip(&s.deltas).map(|(p, d)| volume.interpolate(*p) * d).sum(),
        Err(_) => 0.0,
    }
}

/// `A x` restricted to one view, written into `out` (`H × W`).
pub fn line_integrals_view(volume: &VoxelVolume, geom: &ConeBeamGeometry, view: usize, m: usize, out: &mut [f64]) {
    let w = geom.det_cols;
    out.par_iter_mut()
        .enumerate()
        .for_each(|(i, o)| *o = ray_integral(volume, geom, view, i / w, i % w, m));
}

/// `ℓ = Σ μ(p_i) δ_i` for every (view, row, col), view-major.
pub fn line_integrals(volume: &VoxelVolume, geom: &ConeBeamGeometry, m: usize) -> Result<Vec<f64>> {
    volume.check_geometry(geom)?;
    check_samples(m)?;
    let mut out = vec![0.0; geom.n_rays()];
    for (view, chunk) in out.chunks_mut(geom.pixels_per_view()).enumerate() {
        line_integrals_view(volume, geom, view, m, chunk);
    }
    Ok(out)
}

/// Beer's law applied to [`line_integrals`].
pub fn forward_project(volume: &VoxelVolume, geom: &ConeBeamGeometry, i0: f64, m: usize) -> Result<ProjectionBundle> {
    if !(i0.is_finite() && i0 > 0.0) {
        return Err(Error::config(format!("i0 must be positive, got {i0}")));
    }
    let ell = line_integrals(volume, geom, m)?;
    let images = ell.iter().map(|&l| (i0 * (-l).exp()) as f32).collect();
    Ok(ProjectionBundle { geom: geom.clone(), i0, images, seed: None })
}

/// Scatter one view's residuals into an f64 accumulator shaped like the volume.
pub fn back_project_view(residual: &[f64], geom: &ConeBeamGeometry, view: usize, m: usize, acc: &mut [f64]) {
    let probe = VoxelVolume { shape: geom.vol_shape, spacing: geom.vol_spacing, data: Vec::new() };
    let w = geom.det_cols;
    for (i, &r) in residual.iter().enumerate() {
        if r == 0.0 {
            continue;
        }
        let ray = geom.ray_unchecked(view, i / w, i % w);
        let Ok(s) = sample_ray(&ray, m) else { continue };
        for (p, d) in s.points.iter().zip(&s.deltas) {
            let fp = probe.footprint(*p);
            let rd = r * d;
            for k in 0..8 {
                acc[fp.index[k]] += fp.weight[k] * rd;
            }
        }
    }
}

/// Views per private accumulator. Fixed so results do not depend on the thread count.
const VIEW_CHUNK: usize = 4;

/// `Aᵀ y`: exact adjoint of [`line_integrals`] under the same sampling.
pub fn back_project(residuals: &[f64], geom: &ConeBeamGeometry, m: usize) -> Result<VoxelVolume> {
    check_samples(m)?;
    if residuals.len() != geom.n_rays() {
        return Err(Error::shape("residuals", geom.n_rays(), residuals.len()));
    }
    let per_view = geom.pixels_per_view();
    let n_vox = geom.n_voxels();
    let partials: Vec<Vec<f64>> = residuals
        .par_chunks(per_view * VIEW_CHUNK)
        .enumerate()
        .map(|(chunk, block)| {
            let mut acc = vec![0.0; n_vox];
            for (j, view_res) in block.chunks(per_view).enumerate() {
                back_project_view(view_res, geom, chunk * VIEW_CHUNK + j, m, &mut acc);
            }
            acc
        })
        .collect();
    let mut total = vec![0.0f64; n_vox];
    for part in &partials {
        for (t, p) in total.iter_mut().zip(part) {
            *t += p;
        }
    }
    let mut vol = VoxelVolume::for_geometry(geom);
    for (d, t) in vol.data.iter_mut().zip(&total) {
        *d = *t as f32;
    }
    Ok(vol)
}

impl ProjectionBundle {
    pub fn validate(&self) -> Result<()> {
        self.geom.validate()?;
        if self.images.len() != self.geom.n_rays() {
            return Err(Error::shape(
                "projection images",
                format!("{} ({} views × {}×{})", self.geom.n_rays(), self.geom.n_views, self.geom.det_rows, self.geom.det_cols),
                self.images.len(),
            ));
        }
        if !(self.i0.is_finite() && self.i0 > 0.0) {
            return Err(Error::config(format!("i0 must be positive, got {}", self.i0)));
        }
        Ok(())
    }

    /// `-ln(I / i0)` per pixel; fails on non-positive intensities.
    pub fn line_integrals(&self) -> Result<Vec<f64>> {
        self.images
            .iter()
            .enumerate()
            .map(|(index, &v)| {
                let v = v as f64;
                if v > 0.0 && v.is_finite() {
                    Ok(-(v / self.i0).ln())
                } else {
                    Err(Error::Domain { index, value: v })
                }
            })
            .collect()
    }

    pub fn view(&self, k: usize) -> &[f32] {
        let n = self.geom.pixels_per_view();
        &self.images[k * n..(k + 1) * n]
    }
}
