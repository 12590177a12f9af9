//! Directory formats: `meta.json` plus one raw little-endian f32 payload.
//!
//! Bundle: `meta.json` + `projections.bin` (view-major, then row-major).
//! Volume: `meta.json` + `volume.bin` (x fastest).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ProjectionBundle, VoxelVolume};
use crate::error::{Error, Result};
use crate::geometry::ConeBeamGeometry;

pub const FORMAT_VERSION: u32 = 1;
const DTYPE: &str = "f32le";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BundleMeta {
    version: u32,
    dtype: String,
    i0: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    geometry: ConeBeamGeometry,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VolumeMeta {
    version: u32,
    dtype: String,
    shape: [usize; 3],
    spacing: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

fn write_f32(path: &Path, data: &[f32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_f32(path: &Path, expected_len: usize) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let expected = expected_len as u64 * 4;
    if bytes.len() as u64 != expected {
        return Err(Error::SizeMismatch { path: path.to_owned(), expected, actual: bytes.len() as u64 });
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Json { path: path.to_owned(), source: e })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_meta<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    // Check the version first so a bumped version reports as such rather than
    // as whatever schema change came with it.
    let raw: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::Json { path: path.to_owned(), source: e })?;
    match raw.get("version").and_then(|v| v.as_u64()) {
        Some(v) if v == FORMAT_VERSION as u64 => {}
        Some(v) => {
            return Err(Error::Unsupported {
                path: path.to_owned(),
                field: "version",
                found: v.to_string(),
                supported: FORMAT_VERSION.to_string(),
            })
        }
        None => {
            return Err(Error::Format { path: path.to_owned(), field: "version", reason: "missing or not an integer".into() })
        }
    }
    match raw.get("dtype").and_then(|v| v.as_str()) {
        Some(DTYPE) => {}
        other => {
            return Err(Error::Unsupported {
                path: path.to_owned(),
                field: "dtype",
                found: format!("{other:?}"),
                supported: DTYPE.into(),
            })
        }
    }
    serde_json::from_value(raw).map_err(|e| Error::Json { path: path.to_owned(), source: e })
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn meta_path(dir: &Path) -> PathBuf {
    dir.join("meta.json")
}

pub fn save_bundle(bundle: &ProjectionBundle, dir: &Path) -> Result<()> {
    bundle.validate()?;
    ensure_dir(dir)?;
    let meta = BundleMeta {
        version: FORMAT_VERSION,
        dtype: DTYPE.into(),
        i0: bundle.i0,
        seed: bundle.seed,
        geometry: bundle.geom.clone(),
    };
    write_json(&meta_path(dir), &meta)?;
    write_f32(&dir.join("projections.bin"), &bundle.images)
}

pub fn load_bundle(dir: &Path) -> Result<ProjectionBundle> {
    let meta_file = meta_path(dir);
    let meta: BundleMeta = read_meta(&meta_file)?;
    meta.geometry.validate().map_err(|e| Error::Format {
        path: meta_file.clone(),
        field: "geometry",
        reason: e.to_string(),
    })?;
    if !(meta.i0.is_finite() && meta.i0 > 0.0) {
        return Err(Error::Format { path: meta_file, field: "i0", reason: format!("must be positive, got {}", meta.i0) });
    }
    let images = read_f32(&dir.join("projections.bin"), meta.geometry.n_rays())?;
    Ok(ProjectionBundle { geom: meta.geometry, i0: meta.i0, images, seed: meta.seed })
}

pub fn save_volume(volume: &VoxelVolume, seed: Option<u64>, dir: &Path) -> Result<()> {
    if volume.data.len() != volume.shape.iter().product::<usize>() {
        return Err(Error::shape("volume data length", volume.shape.iter().product::<usize>(), volume.data.len()));
    }
    ensure_dir(dir)?;
    let meta = VolumeMeta {
        version: FORMAT_VERSION,
        dtype: DTYPE.into(),
        shape: volume.shape,
        spacing: volume.spacing,
        seed,
    };
    write_json(&meta_path(dir), &meta)?;
    write_f32(&dir.join("volume.bin"), &volume.data)
}

/// Returns the volume and the seed recorded alongside it.
pub fn load_volume(dir: &Path) -> Result<(VoxelVolume, Option<u64>)> {
    let meta_file = meta_path(dir);
    let meta: VolumeMeta = read_meta(&meta_file)?;
    if meta.shape.contains(&0) {
        return Err(Error::Format { path: meta_file, field: "shape", reason: format!("{:?} has a zero axis", meta.shape) });
    }
    if !meta.spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
        return Err(Error::Format { path: meta_file, field: "spacing", reason: format!("{:?} must be positive", meta.spacing) });
    }
    let data = read_f32(&dir.join("volume.bin"), meta.shape.iter().product())?;
    Ok((VoxelVolume { shape: meta.shape, spacing: meta.spacing, data }, meta.seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::projector::forward_project;

    fn sample_bundle() -> ProjectionBundle {
        let g = ConeBeamGeometry::desk(8, 3).unwrap();
        let mut vol = VoxelVolume::for_geometry(&g);
        for (i, v) in vol.data.iter_mut().enumerate() {
            *v = (i % 7) as f32 * 1e-3;
        }
        let mut b = forward_project(&vol, &g, 1.0, 10).unwrap();
        b.seed = Some(99);
        b
    }

    #[test]
    fn bundle_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let b = sample_bundle();
        save_bundle(&b, dir.path()).unwrap();
        let back = load_bundle(dir.path()).unwrap();
        assert_eq!(back, b);
        assert!(back.images.iter().zip(&b.images).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn truncated_payload_reports_sizes() {
        let dir = tempfile::tempdir().unwrap();
        let b = sample_bundle();
        save_bundle(&b, dir.path()).unwrap();
        let bin = dir.path().join("projections.bin");
        let bytes = fs::read(&bin).unwrap();
        fs::write(&bin, &bytes[..bytes.len() - 6]).unwrap();
        match load_bundle(dir.path()) {
            Err(Error::SizeMismatch { expected, actual, .. }) => {
                assert_eq!(expected, bytes.len() as u64);
                assert_eq!(actual, bytes.len() as u64 - 6);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bumped_version_is_unsupported() {
        let dir = tempfile::tempdir().unwrap();
        let vol = VoxelVolume::zeros([3, 4, 5], [1.0, 2.0, 3.0]);
        save_volume(&vol, Some(1), dir.path()).unwrap();
        let meta = dir.path().join("meta.json");
        let text = fs::read_to_string(&meta).unwrap().replace("\"version\": 1", "\"version\": 2");
        fs::write(&meta, text).unwrap();
        assert!(matches!(load_volume(dir.path()), Err(Error::Unsupported { field: "version", .. })));
    }

    #[test]
    fn volume_round_trip_and_missing_dir() {
        let dir = tempfile::tempdir().unwrap();
        let mut vol = VoxelVolume::zeros([3, 4, 5], [1.0, 0.1, 3.0]);
        vol.data[7] = std::f32::consts::PI;
        save_volume(&vol, Some(5), dir.path()).unwrap();
        assert_eq!(load_volume(dir.path()).unwrap(), (vol, Some(5)));
        assert!(matches!(load_volume(&dir.path().join("nope")), Err(Error::Io { .. })));
    }
}
