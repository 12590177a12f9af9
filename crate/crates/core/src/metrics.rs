//! Volumetric image quality: 3D PSNR and Gaussian-window 3D SSIM.

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::projector::VoxelVolume;

/// PSNR in decibels, or the marker for a zero-error pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Psnr {
    Db(f64),
    Identical,
}

impl Psnr {
    /// Decibels, with identical volumes mapped to `+∞`.
    pub fn db(self) -> f64 {
        match self {
            Psnr::Db(v) => v,
            Psnr::Identical => f64::INFINITY,
        }
    }
}

impl std::fmt::Display for Psnr {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Psnr::Db(v) => write!(f, "{v:.4} dB"),
            Psnr::Identical => f.write_str("identical"),
        }
    }
}

impl Serialize for Psnr {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Psnr::Db(v) => s.serialize_f64(*v),
            Psnr::Identical => s.serialize_str("identical"),
        }
    }
}

impl<'de> Deserialize<'de> for Psnr {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Psnr::Db(v)),
            Raw::Str(s) if s == "identical" => Ok(Psnr::Identical),
            Raw::Str(s) => Err(serde::de::Error::custom(format!("expected a number or \"identical\", got \"{s}\""))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr_db: Psnr,
    pub ssim: f64,
    pub data_range: f64,
    pub shape: [usize; 3],
}

fn check_pair(x: &VoxelVolume, reference: &VoxelVolume) -> Result<()> {
    if x.shape != reference.shape || x.data.len() != reference.data.len() {
        return Err(Error::shape("volume shapes", format!("{:?}", reference.shape), format!("{:?}", x.shape)));
    }
    Ok(())
}

/// `max(ref) - min(ref)` unless given; must be positive.
fn resolve_range(reference: &VoxelVolume, data_range: Option<f64>) -> Result<f64> {
    let r = data_range.unwrap_or_else(|| {
        let (lo, hi) = reference.min_max();
        hi as f64 - lo as f64
    });
    if !(r.is_finite() && r > 0.0) {
        return Err(Error::config(format!(
            "data range must be positive, got {r} (a constant reference needs an explicit range)"
        )));
    }
    Ok(r)
}

pub fn psnr3d(x: &VoxelVolume, reference: &VoxelVolume, data_range: Option<f64>) -> Result<Psnr> {
    check_pair(x, reference)?;
    let r = resolve_range(reference, data_range)?;
    let sse: f64 = x
        .data
        .iter()
        .zip(&reference.data)
        .map(|(a, b)| {
            let d = *a as f64 - *b as f64;
            d * d
        })
        .sum();
    if sse == 0.0 {
        return Ok(Psnr::Identical);
    }
    let mse = sse / x.data.len() as f64;
    Ok(Psnr::Db(10.0 * (r * r / mse).log10()))
}

pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_WINDOW: usize = 11;

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut k = [0.0; SSIM_WINDOW];
    for (i, w) in k.iter_mut().enumerate() {
        let d = i as f64 - half;
        *w = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|w| *w /= s);
    k
}

/// Valid-mode separable filtering along x, then y, then z.
fn blur_valid(data: &[f64], shape: [usize; 3], k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let n = SSIM_WINDOW;
    let mut cur = data.to_vec();
    let mut dims = shape;
    for axis in 0..3 {
        let mut out_dims = dims;
        out_dims[axis] = dims[axis] + 1 - n;
        let stride = match axis {
            0 => 1,
            1 => dims[0],
            _ => dims[0] * dims[1],
        };
        let mut out = vec![0.0; out_dims.iter().product()];
        for z in 0..out_dims[2] {
            for y in 0..out_dims[1] {
                for x in 0..out_dims[0] {
                    let src = x + dims[0] * (y + dims[1] * z);
                    let mut acc = 0.0;
                    for (t, w) in k.iter().enumerate() {
                        acc += w * cur[src + t * stride];
                    }
                    out[x + out_dims[0] * (y + out_dims[1] * z)] = acc;
                }
            }
        }
        cur = out;
        dims = out_dims;
    }
    cur
}

/// Mean SSIM over every position where the 11³ window fits entirely.
pub fn ssim3d(x: &VoxelVolume, reference: &VoxelVolume, data_range: Option<f64>) -> Result<f64> {
    check_pair(x, reference)?;
    if reference.shape.iter().any(|&s| s < SSIM_WINDOW) {
        return Err(Error::config(format!(
            "volume {:?} is smaller than the {SSIM_WINDOW}³ SSIM window",
            reference.shape
        )));
    }
    let r = resolve_range(reference, data_range)?;
    let c1 = (0.01 * r) * (0.01 * r);
    let c2 = (0.03 * r) * (0.03 * r);
    let a: Vec<f64> = x.data.iter().map(|v| *v as f64).collect();
    let b: Vec<f64> = reference.data.iter().map(|v| *v as f64).collect();
    let k = gaussian_kernel();
    let inputs: Vec<Vec<f64>> = vec![
        a.clone(),
        b.clone(),
        a.iter().map(|v| v * v).collect(),
        b.iter().map(|v| v * v).collect(),
        a.iter().zip(&b).map(|(p, q)| p * q).collect(),
    ];
    let maps: Vec<Vec<f64>> = inputs.par_iter().map(|m| blur_valid(m, x.shape, &k)).collect();
    let (mx, my, mxx, myy, mxy) = (&maps[0], &maps[1], &maps[2], &maps[3], &maps[4]);
    let mut total = 0.0;
    for i in 0..mx.len() {
        let (ux, uy) = (mx[i], my[i]);
        let vx = mxx[i] - ux * ux;
        let vy = myy[i] - uy * uy;
        let cxy = mxy[i] - ux * uy;
        total += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
    }
    Ok(total / mx.len() as f64)
}

pub fn evaluate(x: &VoxelVolume, reference: &VoxelVolume, data_range: Option<f64>) -> Result<MetricReport> {
    let r = resolve_range(reference, data_range)?;
    Ok(MetricReport {
        psnr_db: psnr3d(x, reference, Some(r))?,
        ssim: ssim3d(x, reference, Some(r))?,
        data_range: r,
        shape: reference.shape,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_volume(shape: [usize; 3], seed: u64) -> VoxelVolume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = VoxelVolume::zeros(shape, [1.0; 3]);
        v.data.iter_mut().for_each(|d| *d = rng.random_range(0.0..1.0));
        v
    }

    #[test]
    fn psnr_of_known_mse_is_twenty_db() {
        // 16 of 25 voxels off by 0.125: MSE = 16 / 64 / 25 = 0.01.
        let reference = VoxelVolume::zeros([5, 5, 1], [1.0; 3]);
        let mut x = reference.clone();
        x.data[..16].iter_mut().for_each(|v| *v = 0.125);
        assert_eq!(psnr3d(&x, &reference, Some(1.0)).unwrap(), Psnr::Db(20.0));
    }

    #[test]
    fn psnr_identical_and_scale_invariant() {
        let a = random_volume([6, 5, 4], 1);
        assert_eq!(psnr3d(&a, &a, None).unwrap(), Psnr::Identical);
        let b = random_volume([6, 5, 4], 2);
        let p = psnr3d(&b, &a, None).unwrap().db();
        let scale = |v: &VoxelVolume| VoxelVolume { data: v.data.iter().map(|d| d * 4.0).collect(), ..v.clone() };
        let q = psnr3d(&scale(&b), &scale(&a), None).unwrap().db();
        assert!((p - q).abs() < 1e-9);
    }

    #[test]
    fn psnr_falls_as_noise_grows() {
        let a = random_volume([8, 8, 8], 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let noise: Vec<f32> = (0..a.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let noisy = |amp: f32| VoxelVolume { data: a.data.iter().zip(&noise).map(|(v, n)| v + amp * n).collect(), ..a.clone() };
        let p: Vec<f64> = [0.01, 0.05, 0.2].iter().map(|&s| psnr3d(&noisy(s), &a, None).unwrap().db()).collect();
        assert!(p[0] > p[1] && p[1] > p[2]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let a = random_volume([4, 4, 4], 0);
        let b = random_volume([4, 4, 5], 0);
        let msg = psnr3d(&a, &b, None).unwrap_err().to_string();
        assert!(msg.contains("[4, 4, 5]") && msg.contains("[4, 4, 4]"), "{msg}");
    }

    #[test]
    fn ssim_of_self_is_exactly_one() {
        let a = random_volume([13, 12, 11], 5);
        assert_eq!(ssim3d(&a, &a, None).unwrap(), 1.0);
    }

    #[test]
    fn ssim_constant_patches_match_scalar_formula() {
        let c = 0.4f32;
        let d = 0.1f32;
        let reference = VoxelVolume { data: vec![c; 12 * 12 * 12], ..VoxelVolume::zeros([12; 3], [1.0; 3]) };
        let x = VoxelVolume { data: vec![c + d; 12 * 12 * 12], ..reference.clone() };
        let r = 1.0;
        let (c1, c2) = (1e-4, 9e-4);
        let (ux, uy) = ((c + d) as f64, c as f64);
        let want = ((2.0 * ux * uy + c1) * c2) / ((ux * ux + uy * uy + c1) * c2);
        let got = ssim3d(&x, &reference, Some(r)).unwrap();
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }

    #[test]
    fn ssim_of_negated_zero_mean_is_negative() {
        // Checkerboard: every Gaussian window has mean ~0, so structure dominates.
        let mut a = VoxelVolume::zeros([12; 3], [1.0; 3]);
        for z in 0..12 {
            for y in 0..12 {
                for x in 0..12 {
                    let i = a.index(x, y, z);
                    a.data[i] = if (x + y + z) % 2 == 0 { 0.5 } else { -0.5 };
                }
            }
        }
        let neg = VoxelVolume { data: a.data.iter().map(|v| -v).collect(), ..a.clone() };
        let s = ssim3d(&neg, &a, Some(1.0)).unwrap();
        assert!(s < -0.99, "{s}");
    }

    #[test]
    fn ssim_symmetric_and_permutation_invariant() {
        let a = random_volume([12, 13, 14], 7);
        let b = random_volume([12, 13, 14], 8);
        let s_ab = ssim3d(&a, &b, Some(1.0)).unwrap();
        let s_ba = ssim3d(&b, &a, Some(1.0)).unwrap();
        assert!((s_ab - s_ba).abs() < 1e-12);
        assert!((-1.0..=1.0).contains(&s_ab));
        // Swap x and z.
        let perm = |v: &VoxelVolume| {
            let [nx, ny, nz] = v.shape;
            let mut out = VoxelVolume::zeros([nz, ny, nx], [1.0; 3]);
            for z in 0..nz {
                for y in 0..ny {
                    for x in 0..nx {
                        let i = out.index(z, y, x);
                        out.data[i] = v.get(x, y, z);
                    }
                }
            }
            out
        };
        let s_perm = ssim3d(&perm(&a), &perm(&b), Some(1.0)).unwrap();
        assert!((s_ab - s_perm).abs() < 1e-12);
        let p = psnr3d(&a, &b, None).unwrap().db();
        assert!((p - psnr3d(&perm(&a), &perm(&b), None).unwrap().db()).abs() < 1e-12);
    }

    #[test]
    fn ssim_rejects_small_volumes() {
        let a = random_volume([10, 12, 12], 0);
        assert!(matches!(ssim3d(&a, &a, None), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn report_json_shape() {
        let a = random_volume([11; 3], 9);
        let r = evaluate(&a, &a, None).unwrap();
        let json = serde_json::to_value(&r).unwrap();
        assert_eq!(json["psnr_db"], "identical");
        assert_eq!(json["ssim"], 1.0);
        let back: MetricReport = serde_json::from_value(json).unwrap();
        assert_eq!(back, r);
    }
}
