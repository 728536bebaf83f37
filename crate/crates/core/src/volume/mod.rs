//! Scalar HU volumes, binary masks and their on-disk containers.

mod phantom;

pub use phantom::{make_phantom, Deformation, Phantom, PhantomSpec};

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{self, Container, ContainerHeader};

/// Default CBCT voxel spacing (mm).
pub const DEFAULT_SPACING: [f64; 3] = [0.9, 0.9, 2.0];
/// Body threshold (HU) used for the MAE/NCC mask.
pub const BODY_HU: f32 = -300.0;
/// Bone threshold (HU) used for the DSC masks.
pub const BONE_HU: f32 = 300.0;

/// Linear offset of voxel `(x, y, z)` in an x-fastest grid.
#[inline]
pub fn index(dims: [usize; 3], x: usize, y: usize, z: usize) -> usize {
    x + dims[0] * (y + dims[1] * z)
}

pub fn voxel_count(dims: [usize; 3]) -> usize {
    dims[0] * dims[1] * dims[2]
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: [f64; 3],
    voxels: Vec<f32>,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], voxels: Vec<f32>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!("zero dimension in {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidArgument(format!(
                "spacing must be positive, got {spacing:?}"
            )));
        }
        if voxels.len() != voxel_count(dims) {
            return Err(Error::Shape(format!(
                "{} voxels for dims {:?}",
                voxels.len(),
                dims
            )));
        }
        if let Some(i) = voxels.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self {
            dims,
            spacing,
            voxels,
        })
    }

    pub fn filled(dims: [usize; 3], spacing: [f64; 3], value: f32) -> Result<Self> {
        Self::new(dims, spacing, vec![value; voxel_count(dims)])
    }

    pub fn from_fn(
        dims: [usize; 3],
        spacing: [f64; 3],
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut voxels = Vec::with_capacity(voxel_count(dims));
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    voxels.push(f(x, y, z));
                }
            }
        }
        Self::new(dims, spacing, voxels)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    pub fn into_voxels(self) -> Vec<f32> {
        self.voxels
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.voxels[index(self.dims, x, y, z)]
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.voxels
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Copy out the box starting at `origin` with extent `size`.
    pub fn crop(&self, origin: [usize; 3], size: [usize; 3]) -> Result<Volume> {
        for a in 0..3 {
            if origin[a] + size[a] > self.dims[a] {
                return Err(Error::DimMismatch(format!(
                    "crop {origin:?}+{size:?} exceeds {:?}",
                    self.dims
                )));
            }
        }
        Volume::from_fn(size, self.spacing, |x, y, z| {
            self.get(origin[0] + x, origin[1] + y, origin[2] + z)
        })
    }

    /// Area-weighted resampling onto a coarser grid; with integer ratios this
    /// is plain mean pooling.
    pub fn downsample_area(&self, new_dims: [usize; 3]) -> Result<Volume> {
        for a in 0..3 {
            if new_dims[a] == 0 || new_dims[a] > self.dims[a] {
                return Err(Error::InvalidArgument(format!(
                    "cannot area-resample {:?} to {new_dims:?}",
                    self.dims
                )));
            }
        }
        if new_dims == self.dims {
            return Ok(self.clone());
        }
        let weights: Vec<Vec<Vec<(usize, f64)>>> = (0..3)
            .map(|a| area_weights(self.dims[a], new_dims[a]))
            .collect();
        let spacing = [
            self.spacing[0] * self.dims[0] as f64 / new_dims[0] as f64,
            self.spacing[1] * self.dims[1] as f64 / new_dims[1] as f64,
            self.spacing[2] * self.dims[2] as f64 / new_dims[2] as f64,
        ];
        Volume::from_fn(new_dims, spacing, |x, y, z| {
            let mut acc = 0.0f64;
            for &(iz, wz) in &weights[2][z] {
                for &(iy, wy) in &weights[1][y] {
                    for &(ix, wx) in &weights[0][x] {
                        acc += wx * wy * wz * self.get(ix, iy, iz) as f64;
                    }
                }
            }
            acc as f32
        })
    }

    pub fn load(path: &Path) -> Result<Volume> {
        let c = io::read_container(path)?;
        if c.header.channels != 1 {
            return Err(Error::Header {
                path: path.to_path_buf(),
                message: format!("expected 1 channel, found {}", c.header.channels),
            });
        }
        Volume::new(c.header.dims, c.header.spacing_mm, c.data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_container(
            path,
            &Container {
                header: ContainerHeader {
                    dims: self.dims,
                    spacing_mm: self.spacing,
                    dtype: "f32".into(),
                    channels: 1,
                },
                data: self.voxels.clone(),
            },
        )
    }
}

/// For each output cell, the source cells it overlaps and their fractional
/// share of the output cell.
fn area_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let ratio = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let lo = o as f64 * ratio;
            let hi = lo + ratio;
            let mut cells = Vec::new();
            let mut i = lo.floor() as usize;
            while (i as f64) < hi && i < src {
                let overlap = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
                if overlap > 0.0 {
                    cells.push((i, overlap / ratio));
                }
                i += 1;
            }
            cells
        })
        .collect()
}

pub fn load_volume(path: &Path) -> Result<Volume> {
    Volume::load(path)
}

pub fn save_volume(path: &Path, vol: &Volume) -> Result<()> {
    vol.save(path)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    dims: [usize; 3],
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(dims: [usize; 3], bits: Vec<bool>) -> Result<Self> {
        if bits.len() != voxel_count(dims) {
            return Err(Error::Shape(format!(
                "{} mask bits for dims {dims:?}",
                bits.len()
            )));
        }
        Ok(Self { dims, bits })
    }

    pub fn full(dims: [usize; 3]) -> Self {
        Self {
            dims,
            bits: vec![true; voxel_count(dims)],
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.dims == other.dims && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    pub fn load(path: &Path) -> Result<Mask> {
        let c = io::read_container(path)?;
        if c.header.channels != 1 {
            return Err(Error::Header {
                path: path.to_path_buf(),
                message: format!("expected 1 channel, found {}", c.header.channels),
            });
        }
        let bits = c
            .data
            .iter()
            .map(|&v| match v {
                v if v == 0.0 => Ok(false),
                v if v == 1.0 => Ok(true),
                v => Err(Error::InvalidArgument(format!("mask value {v} is not 0 or 1"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Mask::new(c.header.dims, bits)
    }

    pub fn save(&self, path: &Path, spacing: [f64; 3]) -> Result<()> {
        io::write_container(
            path,
            &Container {
                header: ContainerHeader {
                    dims: self.dims,
                    spacing_mm: spacing,
                    dtype: "f32".into(),
                    channels: 1,
                },
                data: self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
            },
        )
    }
}

/// Voxels strictly brighter than `hu_min`.
pub fn threshold_mask(vol: &Volume, hu_min: f32) -> Mask {
    Mask {
        dims: vol.dims,
        bits: vol.voxels.iter().map(|&v| v > hu_min).collect(),
    }
}
