//! Circular cone-beam acquisition geometry and ray sampling.
//!
//! Conventions: at angle 0 the source sits at `(-dso, 0, 0)` and the detector
//! center at `(dsd - dso, 0, 0)`; the detector u axis is `+y`, the v axis is
//! `+z`; the gantry rotates about `+z`. Detector columns run along u, rows
//! along v. The volume's axis-aligned box is centered on the rotation origin.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = [f64; 3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConeBeamGeometry {
    /// Source to rotation origin, mm.
    pub dso: f64,
    /// Source to detector, mm.
    pub dsd: f64,
    pub det_rows: usize,
    pub det_cols: usize,
    /// Detector pitch `(du, dv)` in mm.
    pub det_pixel: [f64; 2],
    pub n_views: usize,
    /// Gantry angle per view, radians.
    pub angles: Vec<f64>,
    pub vol_shape: [usize; 3],
    /// Voxel size in mm.
    pub vol_spacing: [f64; 3],
}

/// Parametric entry/exit distances of a ray against the volume box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Span {
    pub t_near: f64,
    pub t_far: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Point,
    /// Unit length.
    pub direction: Point,
    /// `None` when the ray misses the volume.
    pub span: Option<Span>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RaySamples {
    pub points: Vec<Point>,
    pub deltas: Vec<f64>,
}

impl RaySamples {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Samples per ray when none is configured: `3 * max(shape) / 4`, i.e. 192 for 256³.
pub fn default_samples(vol_shape: [usize; 3]) -> usize {
    (3 * vol_shape.iter().copied().max().unwrap_or(1) / 4).max(1)
}

impl ConeBeamGeometry {
    /// Equally spaced views over the half circle `[0, π)`.
    #[allow(clippy::too_many_arguments)]
    pub fn make_equiangular(
        dso: f64,
        dsd: f64,
        det_rows: usize,
        det_cols: usize,
        det_pixel: [f64; 2],
        n_views: usize,
        vol_shape: [usize; 3],
        vol_spacing: [f64; 3],
    ) -> Result<Self> {
        let angles = (0..n_views)
            .map(|k| k as f64 * std::f64::consts::PI / n_views as f64)
            .collect();
        let geom = ConeBeamGeometry {
            dso,
            dsd,
            det_rows,
            det_cols,
            det_pixel,
            n_views,
            angles,
            vol_shape,
            vol_spacing,
        };
        geom.validate()?;
        Ok(geom)
    }

    /// Scaled-down setup used throughout the tests: an `n³` volume spanning
    /// 128 mm and an `n×n` detector spanning 256 mm, with the standard
    /// 1000/2000 mm source distances.
    pub fn desk(n: usize, n_views: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::config("desk geometry size must be positive"));
        }
        let pitch = 256.0 / n as f64;
        let spacing = 128.0 / n as f64;
        Self::make_equiangular(
            1000.0,
            2000.0,
            n,
            n,
            [pitch, pitch],
            n_views,
            [n, n, n],
            [spacing; 3],
        )
    }

    pub fn validate(&self) -> Result<()> {
        let finite_pos = |x: f64| x.is_finite() && x > 0.0;
        if !(finite_pos(self.dso) && finite_pos(self.dsd) && self.dsd > self.dso) {
            return Err(Error::config(format!(
                "need dsd > dso > 0, got dso={} dsd={}",
                self.dso, self.dsd
            )));
        }
        if self.det_rows == 0 || self.det_cols == 0 || self.n_views == 0 {
            return Err(Error::config("detector size and view count must be at least 1"));
        }
        if self.vol_shape.contains(&0) {
            return Err(Error::config(format!("volume shape {:?} has a zero axis", self.vol_shape)));
        }
        if !self.det_pixel.iter().all(|&p| finite_pos(p)) {
            return Err(Error::config(format!("detector pitch {:?} must be positive", self.det_pixel)));
        }
        if !self.vol_spacing.iter().all(|&s| finite_pos(s)) {
            return Err(Error::config(format!("voxel spacing {:?} must be positive", self.vol_spacing)));
        }
        if self.angles.len() != self.n_views {
            return Err(Error::config(format!(
                "{} angles listed for {} views",
                self.angles.len(),
                self.n_views
            )));
        }
        if !self.angles.iter().all(|a| a.is_finite()) {
            return Err(Error::config("angles must be finite"));
        }
        Ok(())
    }

    pub fn pixels_per_view(&self) -> usize {
        self.det_rows * self.det_cols
    }

    pub fn n_rays(&self) -> usize {
        self.n_views * self.pixels_per_view()
    }

    pub fn n_voxels(&self) -> usize {
        self.vol_shape.iter().product()
    }

    /// Half extent of the volume box per axis, mm.
    pub fn half_extent(&self) -> Point {
        std::array::from_fn(|a| 0.5 * self.vol_shape[a] as f64 * self.vol_spacing[a])
    }

    pub fn aabb(&self) -> (Point, Point) {
        let h = self.half_extent();
        ([-h[0], -h[1], -h[2]], h)
    }

    /// Whether two geometries describe the same acquisition up to the view set.
    pub fn same_scale(&self, other: &Self) -> bool {
        self.dso == other.dso
            && self.dsd == other.dsd
            && self.vol_shape == other.vol_shape
            && self.vol_spacing == other.vol_spacing
    }

    pub fn ray_for_pixel(&self, view: usize, row: usize, col: usize) -> Result<Ray> {
        if view >= self.n_views {
            return Err(Error::Index { what: "view", index: view, limit: self.n_views });
        }
        if row >= self.det_rows {
            return Err(Error::Index { what: "detector row", index: row, limit: self.det_rows });
        }
        if col >= self.det_cols {
            return Err(Error::Index { what: "detector column", index: col, limit: self.det_cols });
        }
        Ok(self.ray_unchecked(view, row, col))
    }

    /// Ray for a flat index `view * H * W + row * W + col`.
    pub fn ray_for_index(&self, index: usize) -> Result<Ray> {
        let per_view = self.pixels_per_view();
        if index >= self.n_rays() {
            return Err(Error::Index { what: "ray", index, limit: self.n_rays() });
        }
        let view = index / per_view;
        let rem = index % per_view;
        Ok(self.ray_unchecked(view, rem / self.det_cols, rem % self.det_cols))
    }

    pub(crate) fn ray_unchecked(&self, view: usize, row: usize, col: usize) -> Ray {
        let (sin, cos) = self.angles[view].sin_cos();
        let rot = |p: Point| [cos * p[0] - sin * p[1], sin * p[0] + cos * p[1], p[2]];

        let u = (col as f64 + 0.5 - 0.5 * self.det_cols as f64) * self.det_pixel[0];
        let v = (row as f64 + 0.5 - 0.5 * self.det_rows as f64) * self.det_pixel[1];
        let source = [-self.dso, 0.0, 0.0];
        let pixel = [self.dsd - self.dso, u, v];
        let d = sub(pixel, source);
        let n = norm(d);
        let direction = rot([d[0] / n, d[1] / n, d[2] / n]);
        let origin = rot(source);

        let (lo, hi) = self.aabb();
        Ray { origin, direction, span: intersect_aabb(origin, direction, lo, hi) }
    }

    /// Affine map of a point in the volume box onto the unit cube.
    pub fn normalize_point(&self, p: Point) -> Result<Point> {
        let (lo, hi) = self.aabb();
        let mut out = [0.0; 3];
        for a in 0..3 {
            let extent = hi[a] - lo[a];
            let x = (p[a] - lo[a]) / extent;
            // Points computed as origin + t·dir can land a rounding error outside.
            const SLACK: f64 = 1e-9;
            if !(-SLACK..=1.0 + SLACK).contains(&x) {
                return Err(Error::OutOfDomain { point: p, domain: "the volume bounding box" });
            }
            out[a] = x.clamp(0.0, 1.0);
        }
        Ok(out)
    }
}

/// Slab-method intersection, clipped to `t >= 0`.
pub fn intersect_aabb(origin: Point, dir: Point, lo: Point, hi: Point) -> Option<Span> {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    for a in 0..3 {
        if dir[a] == 0.0 {
            if origin[a] < lo[a] || origin[a] > hi[a] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / dir[a];
        let (t0, t1) = {
            let t0 = (lo[a] - origin[a]) * inv;
            let t1 = (hi[a] - origin[a]) * inv;
            if t0 <= t1 { (t0, t1) } else { (t1, t0) }
        };
        t_near = t_near.max(t0);
        t_far = t_far.min(t1);
    }
    let t_near = t_near.max(0.0);
    (t_far > t_near).then_some(Span { t_near, t_far })
}

/// `m` samples at bin centers of a uniform partition of the ray's span.
pub fn sample_ray(ray: &Ray, m: usize) -> Result<RaySamples> {
    sample_with(ray, m, |_| 0.5)
}

/// Stratified samples: one uniform draw inside each of the `m` bins.
pub fn sample_ray_jittered<R: Rng + ?Sized>(ray: &Ray, m: usize, rng: &mut R) -> Result<RaySamples> {
    sample_with(ray, m, |_| rng.random::<f64>())
}

fn sample_with(ray: &Ray, m: usize, mut offset: impl FnMut(usize) -> f64) -> Result<RaySamples> {
    let span = ray.span.ok_or(Error::EmptySamples)?;
    if m == 0 {
        return Err(Error::config("samples per ray must be at least 1"));
    }
    let width = (span.t_far - span.t_near) / m as f64;
    let points = (0..m)
        .map(|i| {
            let t = span.t_near + (i as f64 + offset(i)) * width;
            let t = t.min(span.t_far);
            std::array::from_fn(|a| ray.origin[a] + t * ray.direction[a])
        })
        .collect();
    Ok(RaySamples { points, deltas: vec![width; m] })
}

#[inline]
pub(crate) fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub(crate) fn dot(a: Point, b: Point) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub(crate) fn norm(a: Point) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn paper_setup() -> ConeBeamGeometry {
        ConeBeamGeometry::make_equiangular(1000.0, 2000.0, 256, 256, [2.0, 2.0], 50, [256; 3], [1.0; 3])
            .unwrap()
    }

    #[test]
    fn paper_geometry_is_valid() {
        let g = paper_setup();
        assert_eq!(g.angles.len(), 50);
        assert_eq!(g.angles[0], 0.0);
        assert!(g.angles.windows(2).all(|w| w[0] < w[1]));
        assert!(*g.angles.last().unwrap() < PI);
    }

    #[test]
    fn view_count_edge_cases() {
        let one = ConeBeamGeometry::desk(8, 1).unwrap();
        assert_eq!(one.angles, vec![0.0]);
        let two = ConeBeamGeometry::desk(8, 2).unwrap();
        assert_eq!(two.angles, vec![0.0, PI / 2.0]);
    }

    #[test]
    fn rejects_bad_config() {
        let bad = |r: Result<ConeBeamGeometry>| assert!(matches!(r, Err(Error::InvalidConfig(_))));
        bad(ConeBeamGeometry::make_equiangular(2000.0, 1000.0, 4, 4, [1.0; 2], 4, [4; 3], [1.0; 3]));
        bad(ConeBeamGeometry::make_equiangular(1000.0, 2000.0, 0, 4, [1.0; 2], 4, [4; 3], [1.0; 3]));
        bad(ConeBeamGeometry::make_equiangular(1000.0, 2000.0, 4, 4, [1.0; 2], 0, [4; 3], [1.0; 3]));
        bad(ConeBeamGeometry::make_equiangular(1000.0, 2000.0, 4, 4, [1.0; 2], 4, [4; 3], [1.0, 0.0, 1.0]));
        bad(ConeBeamGeometry::make_equiangular(1000.0, 2000.0, 4, 4, [-1.0, 1.0], 4, [4; 3], [1.0; 3]));
    }

    #[test]
    fn single_pixel_ray_is_axial() {
        let g = ConeBeamGeometry::make_equiangular(1000.0, 2000.0, 1, 1, [2.0; 2], 1, [256; 3], [1.0; 3])
            .unwrap();
        let ray = g.ray_for_pixel(0, 0, 0).unwrap();
        assert_eq!(ray.origin, [-1000.0, 0.0, 0.0]);
        assert_eq!(ray.direction, [1.0, 0.0, 0.0]);
        let span = ray.span.unwrap();
        assert_eq!((span.t_near, span.t_far), (872.0, 1128.0));
    }

    #[test]
    fn out_of_range_indices() {
        let g = ConeBeamGeometry::desk(8, 3).unwrap();
        assert!(matches!(g.ray_for_pixel(3, 0, 0), Err(Error::Index { what: "view", .. })));
        assert!(matches!(g.ray_for_pixel(0, 8, 0), Err(Error::Index { .. })));
        assert!(matches!(g.ray_for_pixel(0, 0, 8), Err(Error::Index { .. })));
    }

    #[test]
    fn ray_outside_box_misses() {
        let mut g = ConeBeamGeometry::desk(8, 1).unwrap();
        // Make the detector much wider than the cone through the volume.
        g.det_cols = 64;
        let ray = g.ray_for_pixel(0, 4, 0).unwrap();
        assert!(ray.span.is_none());
        assert!(matches!(sample_ray(&ray, 8), Err(Error::EmptySamples)));
    }

    #[test]
    fn bin_center_sampling() {
        let ray = Ray {
            origin: [0.0; 3],
            direction: [1.0, 0.0, 0.0],
            span: Some(Span { t_near: 0.0, t_far: 10.0 }),
        };
        let s = sample_ray(&ray, 5).unwrap();
        let ts: Vec<f64> = s.points.iter().map(|p| p[0]).collect();
        assert_eq!(ts, vec![1.0, 3.0, 5.0, 7.0, 9.0]);
        assert_eq!(s.deltas, vec![2.0; 5]);

        let one = sample_ray(&ray, 1).unwrap();
        assert_eq!(one.points, vec![[5.0, 0.0, 0.0]]);
        assert_eq!(one.deltas, vec![10.0]);
    }

    #[test]
    fn jitter_is_seeded() {
        let g = ConeBeamGeometry::desk(16, 4).unwrap();
        let ray = g.ray_for_pixel(1, 7, 9).unwrap();
        let a = sample_ray_jittered(&ray, 32, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = sample_ray_jittered(&ray, 32, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, sample_ray(&ray, 32).unwrap());
    }

    #[test]
    fn normalize_point_affine() {
        let g = paper_setup();
        assert_eq!(g.normalize_point([-128.0; 3]).unwrap(), [0.0; 3]);
        assert_eq!(g.normalize_point([0.0; 3]).unwrap(), [0.5; 3]);
        assert_eq!(g.normalize_point([64.0, 0.0, -64.0]).unwrap(), [0.75, 0.5, 0.25]);
        assert!(matches!(g.normalize_point([0.0, 129.0, 0.0]), Err(Error::OutOfDomain { .. })));
    }

    #[test]
    fn rotation_consistency() {
        let g = ConeBeamGeometry::desk(16, 7).unwrap();
        for view in 0..g.n_views {
            let (s, c) = g.angles[view].sin_cos();
            let rot = |p: Point| [c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]];
            for &(row, col) in &[(0, 0), (3, 11), (15, 15), (8, 2)] {
                let r0 = g.ray_for_pixel(0, row, col).unwrap();
                let ra = g.ray_for_pixel(view, row, col).unwrap();
                let (o, d) = (rot(r0.origin), rot(r0.direction));
                for a in 0..3 {
                    assert!((o[a] - ra.origin[a]).abs() < 1e-9);
                    assert!((d[a] - ra.direction[a]).abs() < 1e-9);
                }
                assert!((norm(ra.direction) - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn odd_detector_center_passes_through_origin() {
        let g = ConeBeamGeometry::make_equiangular(1000.0, 2000.0, 9, 9, [3.0; 2], 13, [32; 3], [2.0; 3])
            .unwrap();
        for view in 0..g.n_views {
            let r = g.ray_for_pixel(view, 4, 4).unwrap();
            // distance from the origin to the ray line
            let t = -dot(r.origin, r.direction);
            let closest: Point = std::array::from_fn(|a| r.origin[a] + t * r.direction[a]);
            assert!(norm(closest) < 1e-9, "view {view}: {closest:?}");
        }
    }

    #[test]
    fn deltas_sum_to_chord_for_random_rays() {
        let g = ConeBeamGeometry::desk(32, 40).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (lo, hi) = g.aabb();
        let mut checked = 0;
        while checked < 1000 {
            let idx = rng.random_range(0..g.n_rays());
            let ray = g.ray_for_index(idx).unwrap();
            let Some(span) = ray.span else { continue };
            let m = rng.random_range(1..200);
            let s = if checked % 2 == 0 {
                sample_ray(&ray, m).unwrap()
            } else {
                sample_ray_jittered(&ray, m, &mut rng).unwrap()
            };
            let total: f64 = s.deltas.iter().sum();
            let chord = span.t_far - span.t_near;
            assert!((total - chord).abs() <= 1e-6 * chord);
            for p in &s.points {
                for a in 0..3 {
                    assert!(p[a] >= lo[a] - 1e-9 && p[a] <= hi[a] + 1e-9);
                }
                g.normalize_point(*p).unwrap();
            }
            checked += 1;
        }
    }
}
