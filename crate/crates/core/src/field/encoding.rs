//! Multiresolution hash encoding.
//!
//! Level `l` covers the unit cube with an `N_l³` cell lattice. A point's
//! feature at that level is the trilinear blend of its cell's 8 corner
//! entries. Corners index the table densely (x fastest) when the level's
//! `(N_l + 1)³` vertices fit, and through the XOR-of-primes spatial hash
//! otherwise.

use super::config::Layout;
use super::params::FieldParams;
use crate::error::{Error, Result};
use crate::scalar::Real;

pub const HASH_PRIMES: [u32; 3] = [1, 2_654_435_761, 805_459_861];

#[inline]
pub fn spatial_hash(c: [u32; 3], table_size: usize) -> usize {
    let h = c[0].wrapping_mul(HASH_PRIMES[0]) ^ c[1].wrapping_mul(HASH_PRIMES[1]) ^ c[2].wrapping_mul(HASH_PRIMES[2]);
    h as usize & (table_size - 1)
}

/// Table entry (within its level) of lattice vertex `c`.
#[inline]
pub fn vertex_entry(layout: &Layout, level: usize, c: [u32; 3]) -> usize {
    if layout.dense[level] {
        let n = layout.resolutions[level] + 1;
        c[0] as usize + n * (c[1] as usize + n * c[2] as usize)
    } else {
        spatial_hash(c, layout.table_size)
    }
}

/// Lower cell corner and in-cell fraction of `x ∈ [0, 1]` on an `n`-cell axis.
#[inline]
pub(crate) fn cell_coord<T: Real>(x: T, n: usize) -> (u32, T) {
    let pos = x * T::of(n as f64);
    // Truncation is the floor for the non-negative coordinates seen here.
    let cell = (Real::to_f64(pos).max(0.0) as u32).min(n as u32 - 1);
    (cell, pos - T::of(cell as f64))
}

/// Blend one level given an explicit cell; writes `F` features plus the 8
/// global entry indices and weights.
#[inline]
pub(crate) fn encode_level_in_cell<T: Real>(
    params: &FieldParams<T>,
    level: usize,
    cell: [u32; 3],
    frac: [T; 3],
    out: &mut [T],
    corners: &mut [u32],
    weights: &mut [T],
) {
    let layout = &params.layout;
    let f = layout.features;
    let base = layout.entry_offsets[level];
    let one = T::one();
    let wx = [one - frac[0], frac[0]];
    let wy = [one - frac[1], frac[1]];
    let wz = [one - frac[2], frac[2]];
    let [cx, cy, cz] = cell;
    // Per-axis terms of the entry index for offsets 0 and 1, combined by
    // addition (dense) or XOR (hashed).
    let dense = layout.dense[level];
    let (ix, iy, iz) = if dense {
        let n = layout.resolutions[level] + 1;
        let (x, y, z) = (cx as usize, cy as usize * n, cz as usize * n * n);
        ([x, x + 1], [y, y + n], [z, z + n * n])
    } else {
        let h = |c: u32, a: usize| [c.wrapping_mul(HASH_PRIMES[a]) as usize, (c + 1).wrapping_mul(HASH_PRIMES[a]) as usize];
        (h(cx, 0), h(cy, 1), h(cz, 2))
    };
    let mask = layout.table_size - 1;
    out[..f].iter_mut().for_each(|v| *v = T::zero());
    for k in 0..8 {
        let (ox, oy, oz) = (k & 1, (k >> 1) & 1, (k >> 2) & 1);
        let local = if dense { ix[ox] + iy[oy] + iz[oz] } else { (ix[ox] ^ iy[oy] ^ iz[oz]) & mask };
        let entry = base + local;
        let w = wx[ox] * wy[oy] * wz[oz];
        corners[k] = entry as u32;
        weights[k] = w;
        let feat = &params.data[entry * f..(entry + 1) * f];
        for (o, v) in out[..f].iter_mut().zip(feat) {
            *o += w * *v;
        }
    }
}

/// Encode `p` (unit cube) over the first `visible` levels. Masked levels
/// read as zero features and leave their corner slots untouched.
#[inline]
pub(crate) fn encode_into<T: Real>(
    params: &FieldParams<T>,
    p: [T; 3],
    visible: usize,
    out: &mut [T],
    corners: &mut [u32],
    weights: &mut [T],
) {
    let layout = &params.layout;
    let f = layout.features;
    for l in 0..layout.levels {
        if l >= visible {
            out[l * f..(l + 1) * f].iter_mut().for_each(|v| *v = T::zero());
            continue;
        }
        let n = layout.resolutions[l];
        let mut cell = [0u32; 3];
        let mut frac = [T::zero(); 3];
        for a in 0..3 {
            (cell[a], frac[a]) = cell_coord(p[a], n);
        }
        encode_level_in_cell(
            params,
            l,
            cell,
            frac,
            &mut out[l * f..(l + 1) * f],
            &mut corners[l * 8..(l + 1) * 8],
            &mut weights[l * 8..(l + 1) * 8],
        );
    }
}

pub(crate) fn check_unit(p: [f64; 3]) -> Result<()> {
    if p.iter().all(|x| (0.0..=1.0).contains(x)) {
        Ok(())
    } else {
        Err(Error::OutOfDomain { point: p, domain: "the unit cube" })
    }
}

/// Unmasked encoding of one point with its interpolation footprint.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoding<T> {
    /// `L·F` features, level-major.
    pub features: Vec<T>,
    /// `8·L` global table entries, level-major.
    pub corners: Vec<u32>,
    /// Trilinear weight of each corner.
    pub weights: Vec<T>,
}

pub fn encode<T: Real>(params: &FieldParams<T>, p: [f64; 3]) -> Result<Encoding<T>> {
    check_unit(p)?;
    let layout = &params.layout;
    let mut enc = Encoding {
        features: vec![T::zero(); layout.levels * layout.features],
        corners: vec![0; layout.levels * 8],
        weights: vec![T::zero(); layout.levels * 8],
    };
    let pt = [T::of(p[0]), T::of(p[1]), T::of(p[2])];
    encode_into(params, pt, layout.levels, &mut enc.features, &mut enc.corners, &mut enc.weights);
    Ok(enc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::config::FieldConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_params(seed: u64) -> FieldParams<f64> {
        let mut p = FieldParams::<f64>::random(&FieldConfig::tiny(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let n = p.layout.table_len();
        p.data[..n].iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        p
    }

    /// Table value at a lattice vertex, looked up from first principles.
    fn vertex_value(p: &FieldParams<f64>, level: usize, v: [u32; 3], f: usize) -> f64 {
        let n = p.config.grid.resolution(level) as u64 + 1;
        let local = if n * n * n <= p.config.grid.table_size as u64 {
            (v[0] as u64 + n * v[1] as u64 + n * n * v[2] as u64) as usize
        } else {
            let h = (v[0] as u64) ^ (v[1] as u64 * 2_654_435_761) ^ (v[2] as u64 * 805_459_861);
            (h % (1u64 << 32)) as usize % p.config.grid.table_size
        };
        p.level_table(level)[local * 2 + f]
    }

    /// Eight-term weighted sum written without the footprint machinery.
    fn oracle(p: &FieldParams<f64>, x: [f64; 3]) -> Vec<f64> {
        let mut out = Vec::new();
        for level in 0..p.config.grid.levels {
            let n = p.config.grid.resolution(level);
            let s: Vec<f64> = x.iter().map(|c| c * n as f64).collect();
            let lo: Vec<u32> = s.iter().map(|c| (c.floor() as u32).min(n as u32 - 1)).collect();
            let t: Vec<f64> = (0..3).map(|a| s[a] - lo[a] as f64).collect();
            for f in 0..2 {
                let mut acc = 0.0;
                for dz in 0..2u32 {
                    for dy in 0..2u32 {
                        for dx in 0..2u32 {
                            let w = (if dx == 1 { t[0] } else { 1.0 - t[0] })
                                * (if dy == 1 { t[1] } else { 1.0 - t[1] })
                                * (if dz == 1 { t[2] } else { 1.0 - t[2] });
                            acc += w * vertex_value(p, level, [lo[0] + dx, lo[1] + dy, lo[2] + dz], f);
                        }
                    }
                }
                out.push(acc);
            }
        }
        out
    }

    #[test]
    fn matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for seed in 0..10 {
            let p = random_params(seed);
            for _ in 0..50 {
                let x = [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
                let got = encode(&p, x).unwrap().features;
                let want = oracle(&p, x);
                for (g, w) in got.iter().zip(&want) {
                    assert!((g - w).abs() <= 1e-6 * w.abs().max(1e-12) + 1e-15, "{g} vs {w}");
                }
            }
        }
    }

    #[test]
    fn lattice_node_returns_node_feature() {
        let p = random_params(3);
        // (0.25, 0.5, 1.0) is a vertex of both levels (resolutions 2 and 4).
        let x = [0.25, 0.5, 1.0];
        let e = encode(&p, x).unwrap();
        assert_eq!(e.features[2], vertex_value(&p, 1, [1, 2, 4], 0));
        assert_eq!(e.features[3], vertex_value(&p, 1, [1, 2, 4], 1));
        let e0 = encode(&p, [0.5, 0.5, 1.0]).unwrap();
        assert_eq!(e0.features[0], vertex_value(&p, 0, [1, 1, 2], 0));
    }

    #[test]
    fn cell_center_is_corner_mean() {
        let p = random_params(4);
        // Center of level-0 cell (0,1,0): (0.25, 0.75, 0.25).
        let e = encode(&p, [0.25, 0.75, 0.25]).unwrap();
        for f in 0..2 {
            let mut mean = 0.0;
            for k in 0..8u32 {
                mean += vertex_value(&p, 0, [k & 1, 1 + ((k >> 1) & 1), (k >> 2) & 1], f);
            }
            mean /= 8.0;
            assert!((e.features[f] - mean).abs() < 1e-15);
        }
    }

    #[test]
    fn shared_faces_agree_exactly() {
        let p = random_params(5);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let f = p.layout.features;
        for level in 0..p.layout.levels {
            let n = p.layout.resolutions[level] as u32;
            for _ in 0..50 {
                let face = rng.random_range(1..n);
                let axis = rng.random_range(0..3);
                let mut cell = [rng.random_range(0..n), rng.random_range(0..n), rng.random_range(0..n)];
                let mut frac = [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
                let (mut a, mut b) = (vec![0.0; f], vec![0.0; f]);
                let (mut ci, mut w) = ([0u32; 8], [0.0; 8]);
                cell[axis] = face - 1;
                frac[axis] = 1.0;
                encode_level_in_cell(&p, level, cell, frac, &mut a, &mut ci, &mut w);
                cell[axis] = face;
                frac[axis] = 0.0;
                encode_level_in_cell(&p, level, cell, frac, &mut b, &mut ci, &mut w);
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn outside_unit_cube_is_an_error() {
        let p = random_params(0);
        assert!(matches!(encode(&p, [0.5, 1.0001, 0.5]), Err(Error::OutOfDomain { .. })));
        assert!(matches!(encode(&p, [-1e-9, 0.5, 0.5]), Err(Error::OutOfDomain { .. })));
    }
}
