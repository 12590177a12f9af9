//! Analytic ellipsoid phantoms.
//!
//! Voxels straddling an ellipsoid surface are supersampled so the rasterized
//! volume carries partial-volume fractions rather than a staircase.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::VoxelVolume;
use crate::error::{Error, Result};
use crate::geometry::Point;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhantomKind {
    #[serde(rename = "shepp-logan-3d")]
    SheppLogan3d,
    RandomEllipsoids,
}

impl std::str::FromStr for PhantomKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shepp-logan-3d" => Ok(PhantomKind::SheppLogan3d),
            "random-ellipsoids" => Ok(PhantomKind::RandomEllipsoids),
            other => Err(Error::config(format!(
                "unknown phantom kind `{other}` (expected shepp-logan-3d or random-ellipsoids)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub kind: PhantomKind,
    pub seed: u64,
    /// Ellipsoid count for the random kind; ignored otherwise.
    pub n_ellipsoids: usize,
    /// Attenuation bounds `(min, max)` in 1/mm. Intensity 1 maps to `max`.
    pub mu_range: (f64, f64),
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            kind: PhantomKind::SheppLogan3d,
            seed: 0,
            n_ellipsoids: 8,
            mu_range: (0.0, 0.02),
        }
    }
}

/// Solid ellipsoid in physical coordinates (mm).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipsoid {
    pub center: Point,
    pub semi_axes: Point,
    /// Row-major rotation taking local axes to world axes.
    pub rotation: [[f64; 3]; 3],
    /// Additive attenuation, 1/mm.
    pub value: f64,
}

impl Ellipsoid {
    pub fn sphere(center: Point, radius: f64, value: f64) -> Self {
        Ellipsoid { center, semi_axes: [radius; 3], rotation: IDENTITY, value }
    }

    /// Z-X-Z Euler angles in degrees.
    pub fn with_euler(center: Point, semi_axes: Point, phi: f64, theta: f64, psi: f64, value: f64) -> Self {
        let rz = |a: f64| {
            let (s, c) = a.to_radians().sin_cos();
            [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
        };
        let (s, c) = theta.to_radians().sin_cos();
        let rx = [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]];
        let rotation = matmul(matmul(rz(phi), rx), rz(psi));
        Ellipsoid { center, semi_axes, rotation, value }
    }

    /// Squared normalized radius of `p`; `<= 1` inside.
    #[inline]
    pub fn level(&self, p: Point) -> f64 {
        let d = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        (0..3)
            .map(|i| {
                // local = Rᵀ d
                let l = self.rotation[0][i] * d[0] + self.rotation[1][i] * d[1] + self.rotation[2][i] * d[2];
                let q = l / self.semi_axes[i];
                q * q
            })
            .sum()
    }

    pub fn contains(&self, p: Point) -> bool {
        self.level(p) <= 1.0
    }
}

const IDENTITY: [[f64; 3]; 3] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

fn matmul(a: [[f64; 3]; 3], b: [[f64; 3]; 3]) -> [[f64; 3]; 3] {
    std::array::from_fn(|i| std::array::from_fn(|j| (0..3).map(|k| a[i][k] * b[k][j]).sum()))
}

/// Ten-ellipsoid 3D Shepp–Logan table in units of the half extent:
/// intensity, semi-axes (a, b, c), center (x, y, z), Euler angles (φ, θ, ψ) in degrees.
const SHEPP_LOGAN: [[f64; 10]; 10] = [
    [1.00, 0.6900, 0.920, 0.810, 0.00, 0.0000, 0.00, 0.0, 0.0, 0.0],
    [-0.98, 0.6624, 0.874, 0.780, 0.00, -0.0184, 0.00, 0.0, 0.0, 0.0],
    [-0.02, 0.1100, 0.310, 0.220, 0.22, 0.0000, 0.00, -18.0, 0.0, 10.0],
    [-0.02, 0.1600, 0.410, 0.280, -0.22, 0.0000, 0.00, 18.0, 0.0, 10.0],
    [0.01, 0.2100, 0.250, 0.410, 0.00, 0.3500, -0.15, 0.0, 0.0, 0.0],
    [0.01, 0.0460, 0.046, 0.050, 0.00, 0.1000, 0.25, 0.0, 0.0, 0.0],
    [0.01, 0.0460, 0.046, 0.050, 0.00, -0.1000, 0.25, 0.0, 0.0, 0.0],
    [0.01, 0.0460, 0.023, 0.050, -0.08, -0.6050, 0.00, 0.0, 0.0, 0.0],
    [0.01, 0.0230, 0.023, 0.020, 0.00, -0.6060, 0.00, 0.0, 0.0, 0.0],
    [0.01, 0.0230, 0.046, 0.020, 0.06, -0.6050, 0.00, 0.0, 0.0, 0.0],
];

pub fn shepp_logan(half_extent: Point, scale: f64) -> Vec<Ellipsoid> {
    SHEPP_LOGAN
        .iter()
        .map(|r| {
            let axes = [r[1] * half_extent[0], r[2] * half_extent[1], r[3] * half_extent[2]];
            let center = [r[4] * half_extent[0], r[5] * half_extent[1], r[6] * half_extent[2]];
            Ellipsoid::with_euler(center, axes, r[7], r[8], r[9], r[0] * scale)
        })
        .collect()
}

/// One body-sized ellipsoid followed by `n - 1` random inclusions, all
/// additive, with seeded placement, size, orientation and density.
pub fn random_ellipsoids(n: usize, seed: u64, half_extent: Point, scale: f64) -> Vec<Ellipsoid> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let (center, axes, value) = if k == 0 {
            let center: Point = std::array::from_fn(|_| rng.random_range(-0.05..0.05));
            let axes: Point = std::array::from_fn(|_| rng.random_range(0.6..0.8));
            (center, axes, rng.random_range(0.35..0.55))
        } else {
            let center: Point = std::array::from_fn(|_| rng.random_range(-0.45..0.45));
            let axes: Point = std::array::from_fn(|_| rng.random_range(0.08..0.3));
            (center, axes, rng.random_range(0.15..0.5))
        };
        let phi = rng.random_range(0.0..180.0);
        let theta = rng.random_range(-30.0..30.0);
        let psi = rng.random_range(0.0..180.0);
        let center = std::array::from_fn(|a| center[a] * half_extent[a]);
        let axes = std::array::from_fn(|a| axes[a] * half_extent[a]);
        out.push(Ellipsoid::with_euler(center, axes, phi, theta, psi, value * scale));
    }
    out
}

/// Supersampling factor per axis for voxels crossing a surface.
const SUPERSAMPLE: usize = 4;

/// Additively rasterize ellipsoids, optionally clamping to `(min, max)`.
pub fn rasterize(ellipsoids: &[Ellipsoid], shape: [usize; 3], spacing: [f64; 3], clamp: Option<(f64, f64)>) -> VoxelVolume {
    let mut acc = vec![0.0f64; shape.iter().product()];
    let half_diag = 0.5 * (spacing.iter().map(|s| s * s).sum::<f64>()).sqrt();
    let vol = VoxelVolume::zeros(shape, spacing);
    for e in ellipsoids {
        let a_min = e.semi_axes.iter().copied().fold(f64::INFINITY, f64::min);
        let a_max = e.semi_axes.iter().copied().fold(0.0, f64::max);
        // Index range whose centers can be within a_max of the ellipsoid center.
        let range = |a: usize| {
            let lo = ((e.center[a] - a_max) / spacing[a] + 0.5 * shape[a] as f64 - 1.0).floor().max(0.0) as usize;
            let hi = ((e.center[a] + a_max) / spacing[a] + 0.5 * shape[a] as f64 + 1.0).ceil().max(0.0) as usize;
            lo..hi.min(shape[a])
        };
        let (rx, ry, rz) = (range(0), range(1), range(2));
        for z in rz.clone() {
            for y in ry.clone() {
                for x in rx.clone() {
                    let c = vol.voxel_center(x, y, z);
                    let s = e.level(c).sqrt();
                    let slack = half_diag / a_min;
                    let frac = if s + slack < 1.0 {
                        1.0
                    } else if s - slack > 1.0 {
                        0.0
                    } else {
                        let n = SUPERSAMPLE;
                        let mut hits = 0usize;
                        for k in 0..n {
                            for j in 0..n {
                                for i in 0..n {
                                    let sub = [i, j, k];
                                    let p: Point = std::array::from_fn(|a| {
                                        c[a] + ((sub[a] as f64 + 0.5) / n as f64 - 0.5) * spacing[a]
                                    });
                                    hits += e.contains(p) as usize;
                                }
                            }
                        }
                        hits as f64 / (n * n * n) as f64
                    };
                    if frac > 0.0 {
                        acc[vol.index(x, y, z)] += frac * e.value;
                    }
                }
            }
        }
    }
    let data = acc
        .into_iter()
        .map(|v| match clamp {
            Some((lo, hi)) => v.clamp(lo, hi) as f32,
            None => v as f32,
        })
        .collect();
    VoxelVolume { shape, spacing, data }
}

pub fn make_phantom(spec: &PhantomSpec, shape: [usize; 3], spacing: [f64; 3]) -> Result<VoxelVolume> {
    let (lo, hi) = spec.mu_range;
    if !(lo.is_finite() && hi.is_finite() && lo <= hi && hi > 0.0) {
        return Err(Error::config(format!("invalid attenuation range ({lo}, {hi})")));
    }
    if shape.contains(&0) || !spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
        return Err(Error::config(format!("invalid volume shape {shape:?} / spacing {spacing:?}")));
    }
    let half: Point = std::array::from_fn(|a| 0.5 * shape[a] as f64 * spacing[a]);
    let ellipsoids = match spec.kind {
        PhantomKind::SheppLogan3d => shepp_logan(half, hi),
        PhantomKind::RandomEllipsoids => random_ellipsoids(spec.n_ellipsoids, spec.seed, half, hi),
    };
    Ok(rasterize(&ellipsoids, shape, spacing, Some((lo, hi))))
}
