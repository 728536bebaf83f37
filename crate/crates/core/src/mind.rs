//! Modality-independent neighbourhood descriptor (reference forward).
//!
//! For every voxel `p` and offset `r`:
//!
//! ```text
//! D_r(p) = mean_{s in box(radius)} (I(q) - I(q + r))²,  q = clamp(p + s)
//! V(p)   = max(mean_r D_r(p), eps)
//! m_r(p) = exp(-D_r(p) / V(p)) / max_r' exp(-D_r'(p) / V(p))
//! ```
//!
//! with `eps = 1e-6 · (max - min)²` (and an absolute floor for constant
//! images). The training graph has its own differentiable implementation in
//! `nn::ops::mind`; this module is the straightforward per-voxel version.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{index, voxel_count, Volume};

/// Relative variance floor, scaled by the squared dynamic range.
pub const VARIANCE_FLOOR: f64 = 1e-6;
/// Absolute floor so constant images stay finite.
pub const VARIANCE_FLOOR_ABS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MindConfig {
    pub patch_radius: usize,
    pub offsets: Vec<[i32; 3]>,
}

impl Default for MindConfig {
    fn default() -> Self {
        Self {
            patch_radius: 1,
            offsets: six_neighbourhood(),
        }
    }
}

pub fn six_neighbourhood() -> Vec<[i32; 3]> {
    vec![
        [1, 0, 0],
        [-1, 0, 0],
        [0, 1, 0],
        [0, -1, 0],
        [0, 0, 1],
        [0, 0, -1],
    ]
}

impl MindConfig {
    pub fn validate(&self, dims: [usize; 3]) -> Result<()> {
        if self.patch_radius < 1 {
            return Err(Error::InvalidArgument("MIND patch radius must be ≥ 1".into()));
        }
        if self.offsets.is_empty() {
            return Err(Error::InvalidArgument("MIND neighbourhood is empty".into()));
        }
        for r in &self.offsets {
            for a in 0..3 {
                if r[a].unsigned_abs() as usize >= dims[a] {
                    return Err(Error::InvalidArgument(format!(
                        "MIND offset {r:?} exceeds volume dims {dims:?}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn max_offset(&self) -> usize {
        self.offsets
            .iter()
            .flat_map(|r| r.iter().map(|v| v.unsigned_abs() as usize))
            .max()
            .unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MindDescriptor {
    pub dims: [usize; 3],
    pub offsets: Vec<[i32; 3]>,
    /// Channel-major values, one channel per offset.
    pub data: Vec<f32>,
}

impl MindDescriptor {
    pub fn channels(&self) -> usize {
        self.offsets.len()
    }

    pub fn channel(&self, k: usize) -> &[f32] {
        let n = voxel_count(self.dims);
        &self.data[k * n..(k + 1) * n]
    }
}

#[inline]
pub(crate) fn clamp_shift(i: usize, d: i64, n: usize) -> usize {
    (i as i64 + d).clamp(0, n as i64 - 1) as usize
}

pub(crate) fn variance_floor(data: &[f32]) -> f64 {
    let (lo, hi) = data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v as f64), hi.max(v as f64))
        });
    (VARIANCE_FLOOR * (hi - lo).powi(2)).max(VARIANCE_FLOOR_ABS)
}

pub fn mind(vol: &Volume, cfg: &MindConfig) -> Result<MindDescriptor> {
    let dims = vol.dims();
    cfg.validate(dims)?;
    let n = voxel_count(dims);
    let k = cfg.offsets.len();
    let img = vol.voxels();
    let rad = cfg.patch_radius as i64;
    let eps = variance_floor(img);

    // squared difference maps d_r(q) = (I(q) - I(clamp(q + r)))²
    let mut diff = vec![0.0f64; k * n];
    for (c, r) in cfg.offsets.iter().enumerate() {
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let i = index(dims, x, y, z);
                    let j = index(
                        dims,
                        clamp_shift(x, r[0] as i64, dims[0]),
                        clamp_shift(y, r[1] as i64, dims[1]),
                        clamp_shift(z, r[2] as i64, dims[2]),
                    );
                    let d = img[i] as f64 - img[j] as f64;
                    diff[c * n + i] = d * d;
                }
            }
        }
    }

    let box_len = ((2 * rad + 1) as f64).powi(3);
    let mut dist = vec![0.0f64; k];
    let mut out = vec![0.0f32; k * n];
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let p = index(dims, x, y, z);
                for (c, dc) in dist.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for sz in -rad..=rad {
                        for sy in -rad..=rad {
                            for sx in -rad..=rad {
                                let q = index(
                                    dims,
                                    clamp_shift(x, sx, dims[0]),
                                    clamp_shift(y, sy, dims[1]),
                                    clamp_shift(z, sz, dims[2]),
                                );
                                acc += diff[c * n + q];
                            }
                        }
                    }
                    *dc = acc / box_len;
                }
                let v = (dist.iter().sum::<f64>() / k as f64).max(eps);
                let dmin = dist.iter().cloned().fold(f64::INFINITY, f64::min);
                for c in 0..k {
                    out[c * n + p] = (-(dist[c] - dmin) / v).exp() as f32;
                }
            }
        }
    }

    Ok(MindDescriptor {
        dims,
        offsets: cfg.offsets.clone(),
        data: out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn constant_volume_gives_ones() {
        let v = Volume::filled([5, 5, 5], [1.0; 3], -1000.0).unwrap();
        let m = mind(&v, &MindConfig::default()).unwrap();
        assert_eq!(m.channels(), 6);
        assert!(m.data.iter().all(|&x| x == 1.0));
    }

    #[test]
    fn global_offset_is_invisible() {
        let v = Volume::from_fn([6, 5, 4], [1.0; 3], |x, y, z| {
            ((x * 31 + y * 17 + z * 7) % 23) as f32 * 10.0 - 400.0
        })
        .unwrap();
        let shifted =
            Volume::new(v.dims(), v.spacing(), v.voxels().iter().map(|x| x + 100.0).collect())
                .unwrap();
        let cfg = MindConfig::default();
        assert_eq!(mind(&v, &cfg).unwrap(), mind(&shifted, &cfg).unwrap());
    }

    #[test]
    fn impulse_matches_brute_force() {
        let v = Volume::from_fn([7, 7, 7], [1.0; 3], |x, y, z| {
            if (x, y, z) == (3, 3, 3) {
                1.0
            } else {
                0.0
            }
        })
        .unwrap();
        let cfg = MindConfig::default();
        let m = mind(&v, &cfg).unwrap();

        let at = |x: i64, y: i64, z: i64| {
            let c = |a: i64| a.clamp(0, 6) as usize;
            v.get(c(x), c(y), c(z)) as f64
        };
        let eps = 1e-6f64;
        for z in 0..7i64 {
            for y in 0..7i64 {
                for x in 0..7i64 {
                    let mut d = [0.0f64; 6];
                    for (c, r) in cfg.offsets.iter().enumerate() {
                        for sz in -1..=1i64 {
                            for sy in -1..=1i64 {
                                for sx in -1..=1i64 {
                                    let q = [
                                        (x + sx).clamp(0, 6),
                                        (y + sy).clamp(0, 6),
                                        (z + sz).clamp(0, 6),
                                    ];
                                    let a = at(q[0], q[1], q[2]);
                                    let b = at(q[0] + r[0] as i64, q[1] + r[1] as i64, q[2] + r[2] as i64);
                                    d[c] += (a - b).powi(2) / 27.0;
                                }
                            }
                        }
                    }
                    let var = (d.iter().sum::<f64>() / 6.0).max(eps);
                    let raw: Vec<f64> = d.iter().map(|&dc| (-dc / var).exp()).collect();
                    let mx = raw.iter().cloned().fold(0.0, f64::max);
                    for c in 0..6 {
                        let got = m.channel(c)[index([7, 7, 7], x as usize, y as usize, z as usize)];
                        assert!((got as f64 - raw[c] / mx).abs() < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn rejects_oversized_offsets() {
        let v = Volume::filled([4, 4, 2], [1.0; 3], 0.0).unwrap();
        let cfg = MindConfig {
            patch_radius: 1,
            offsets: vec![[0, 0, 2]],
        };
        assert!(mind(&v, &cfg).is_err());
        let cfg = MindConfig {
            patch_radius: 0,
            offsets: six_neighbourhood(),
        };
        assert!(mind(&v, &cfg).is_err());
    }

    #[test]
    fn change_is_local() {
        let base = Volume::from_fn([12, 12, 12], [1.0; 3], |x, y, z| {
            ((x * 7 + y * 3 + z * 5) % 11) as f32
        })
        .unwrap();
        let mut vals = base.voxels().to_vec();
        // stays inside the original range so the variance floor is unchanged
        vals[index([12, 12, 12], 6, 6, 6)] = 5.0 + if vals[index([12, 12, 12], 6, 6, 6)] == 5.0 { 1.0 } else { 0.0 };
        let changed = Volume::new(base.dims(), base.spacing(), vals).unwrap();
        let cfg = MindConfig::default();
        let a = mind(&base, &cfg).unwrap();
        let b = mind(&changed, &cfg).unwrap();
        let reach = cfg.patch_radius + cfg.max_offset();
        for z in 0..12 {
            for y in 0..12 {
                for x in 0..12 {
                    let far = [x, y, z].iter().any(|&c| (c as i64 - 6).unsigned_abs() as usize > reach);
                    if far {
                        let i = index([12, 12, 12], x, y, z);
                        for c in 0..6 {
                            assert_eq!(a.channel(c)[i], b.channel(c)[i]);
                        }
                    }
                }
            }
        }
    }

    proptest! {
        #[test]
        fn channels_in_unit_interval_with_unit_max(vals in proptest::collection::vec(-1000i32..1000, 64)) {
            let v = Volume::new([4, 4, 4], [1.0; 3], vals.iter().map(|&x| x as f32).collect()).unwrap();
            let m = mind(&v, &MindConfig::default()).unwrap();
            for i in 0..64 {
                let mut mx = 0.0f32;
                for c in 0..6 {
                    let val = m.channel(c)[i];
                    prop_assert!(val > 0.0 && val <= 1.0);
                    mx = mx.max(val);
                }
                prop_assert_eq!(mx, 1.0);
            }
        }

        #[test]
        fn integer_shift_invariance(vals in proptest::collection::vec(-1000i32..1000, 64), c in -500i32..500) {
            let v = Volume::new([4, 4, 4], [1.0; 3], vals.iter().map(|&x| x as f32).collect()).unwrap();
            let s = Volume::new([4, 4, 4], [1.0; 3], vals.iter().map(|&x| (x + c) as f32).collect()).unwrap();
            let cfg = MindConfig::default();
            prop_assert_eq!(mind(&v, &cfg).unwrap(), mind(&s, &cfg).unwrap());
        }
    }
}
