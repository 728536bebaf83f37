//! Spatial transformer: trilinear warping, DVF resampling and composition,
//! and the overlapping patch grid used for local inference.
//!
//! Displacements are held in voxel units; the pull-back convention is used
//! throughout, i.e. `warp(v, u)(p) = v(p + u(p))`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{self, Container, ContainerHeader};
use crate::volume::{index, voxel_count, Volume};

/// Lower bound of the per-axis taper used when fusing patches.
pub const TAPER_FLOOR: f64 = 0.05;

/// Corner indices and fractional offset along one axis, clamped to the grid.
#[inline]
pub(crate) fn axis_cell(n: usize, c: f64) -> (usize, usize, f64, bool) {
    let hi = (n - 1) as f64;
    if n == 1 {
        return (0, 0, 0.0, true);
    }
    let clamped = !(c >= 0.0 && c <= hi);
    let c = c.clamp(0.0, hi);
    let i0 = (c.floor() as usize).min(n - 2);
    (i0, i0 + 1, c - i0 as f64, clamped)
}

/// Returns an endpoint unchanged at `t` of 0 or 1, so that sampling on grid
/// points reproduces stored values bit for bit (signed zeros included).
#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    if t == 0.0 {
        a
    } else if t == 1.0 {
        b
    } else {
        a + t * (b - a)
    }
}

/// Trilinear sample of an x-fastest scalar grid at voxel coordinate `pos`,
/// with edge clamping.
pub fn trilinear(data: &[f32], dims: [usize; 3], pos: [f64; 3]) -> f64 {
    let (x0, x1, tx, _) = axis_cell(dims[0], pos[0]);
    let (y0, y1, ty, _) = axis_cell(dims[1], pos[1]);
    let (z0, z1, tz, _) = axis_cell(dims[2], pos[2]);
    let v = |x, y, z| data[index(dims, x, y, z)] as f64;
    let c00 = lerp(v(x0, y0, z0), v(x1, y0, z0), tx);
    let c10 = lerp(v(x0, y1, z0), v(x1, y1, z0), tx);
    let c01 = lerp(v(x0, y0, z1), v(x1, y0, z1), tx);
    let c11 = lerp(v(x0, y1, z1), v(x1, y1, z1), tx);
    lerp(lerp(c00, c10, ty), lerp(c01, c11, ty), tz)
}

/// Trilinear sample together with its spatial gradient. Along a clamped axis
/// the derivative is zero.
pub(crate) fn trilinear_with_grad(data: &[f32], dims: [usize; 3], pos: [f64; 3]) -> (f64, [f64; 3]) {
    let (x0, x1, tx, cx) = axis_cell(dims[0], pos[0]);
    let (y0, y1, ty, cy) = axis_cell(dims[1], pos[1]);
    let (z0, z1, tz, cz) = axis_cell(dims[2], pos[2]);
    let v = |x, y, z| data[index(dims, x, y, z)] as f64;
    let c = [
        [
            [v(x0, y0, z0), v(x1, y0, z0)],
            [v(x0, y1, z0), v(x1, y1, z0)],
        ],
        [
            [v(x0, y0, z1), v(x1, y0, z1)],
            [v(x0, y1, z1), v(x1, y1, z1)],
        ],
    ];
    let c00 = lerp(c[0][0][0], c[0][0][1], tx);
    let c10 = lerp(c[0][1][0], c[0][1][1], tx);
    let c01 = lerp(c[1][0][0], c[1][0][1], tx);
    let c11 = lerp(c[1][1][0], c[1][1][1], tx);
    let e0 = lerp(c00, c10, ty);
    let e1 = lerp(c01, c11, ty);
    let val = lerp(e0, e1, tz);

    let dz = if cz { 0.0 } else { e1 - e0 };
    let dy = if cy {
        0.0
    } else {
        lerp(c10 - c00, c11 - c01, tz)
    };
    let dx = if cx {
        0.0
    } else {
        let d00 = c[0][0][1] - c[0][0][0];
        let d10 = c[0][1][1] - c[0][1][0];
        let d01 = c[1][0][1] - c[1][0][0];
        let d11 = c[1][1][1] - c[1][1][0];
        lerp(lerp(d00, d10, ty), lerp(d01, d11, ty), tz)
    };
    (val, [dx, dy, dz])
}

/// Scatter `g` into the eight corners that `trilinear` reads at `pos`.
pub(crate) fn trilinear_adjoint(grad: &mut [f64], dims: [usize; 3], pos: [f64; 3], g: f64) {
    let (x0, x1, tx, _) = axis_cell(dims[0], pos[0]);
    let (y0, y1, ty, _) = axis_cell(dims[1], pos[1]);
    let (z0, z1, tz, _) = axis_cell(dims[2], pos[2]);
    let wx = [1.0 - tx, tx];
    let wy = [1.0 - ty, ty];
    let wz = [1.0 - tz, tz];
    for (k, &z) in [z0, z1].iter().enumerate() {
        for (j, &y) in [y0, y1].iter().enumerate() {
            for (i, &x) in [x0, x1].iter().enumerate() {
                grad[index(dims, x, y, z)] += g * wx[i] * wy[j] * wz[k];
            }
        }
    }
}

/// A displacement field with three channel-major components in voxel units.
#[derive(Debug, Clone, PartialEq)]
pub struct Dvf {
    dims: [usize; 3],
    data: Vec<f32>,
}

impl Dvf {
    pub fn zeros(dims: [usize; 3]) -> Self {
        Self {
            dims,
            data: vec![0.0; 3 * voxel_count(dims)],
        }
    }

    pub fn uniform(dims: [usize; 3], u: [f32; 3]) -> Self {
        let n = voxel_count(dims);
        let mut data = Vec::with_capacity(3 * n);
        for c in u {
            data.extend(std::iter::repeat(c).take(n));
        }
        Self { dims, data }
    }

    pub fn from_data(dims: [usize; 3], data: Vec<f32>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!("zero dimension in {dims:?}")));
        }
        if data.len() != 3 * voxel_count(dims) {
            return Err(Error::Shape(format!(
                "DVF with dims {dims:?} needs {} samples, got {}",
                3 * voxel_count(dims),
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self { dims, data })
    }

    pub fn from_fn(dims: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> [f32; 3]) -> Self {
        let mut dvf = Self::zeros(dims);
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let u = f(x, y, z);
                    dvf.set(x, y, z, u);
                }
            }
        }
        dvf
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn voxel_count(&self) -> usize {
        voxel_count(self.dims)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn component(&self, c: usize) -> &[f32] {
        let n = self.voxel_count();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn vector(&self, i: usize) -> [f32; 3] {
        let n = self.voxel_count();
        [self.data[i], self.data[n + i], self.data[2 * n + i]]
    }

    pub fn at(&self, x: usize, y: usize, z: usize) -> [f32; 3] {
        self.vector(index(self.dims, x, y, z))
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, u: [f32; 3]) {
        let n = self.voxel_count();
        let i = index(self.dims, x, y, z);
        self.data[i] = u[0];
        self.data[n + i] = u[1];
        self.data[2 * n + i] = u[2];
    }

    /// Trilinear sample of all three components at a voxel coordinate.
    pub fn sample(&self, pos: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|c| trilinear(self.component(c), self.dims, pos))
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    pub fn mean_component(&self, c: usize) -> f64 {
        let s = self.component(c);
        s.iter().map(|&v| v as f64).sum::<f64>() / s.len() as f64
    }

    pub fn crop(&self, origin: [usize; 3], size: [usize; 3]) -> Dvf {
        Dvf::from_fn(size, |x, y, z| {
            self.at(origin[0] + x, origin[1] + y, origin[2] + z)
        })
    }

    /// Load a DVF container (mm on disk) and convert to voxel units.
    pub fn load(path: &Path) -> Result<(Dvf, [f64; 3])> {
        let c = io::read_container(path)?;
        if c.header.channels != 3 {
            return Err(Error::Header {
                path: path.to_path_buf(),
                message: format!("DVF needs 3 channels, found {}", c.header.channels),
            });
        }
        let sp = c.header.spacing_mm;
        let n = c.header.voxel_count();
        let data = c
            .data
            .iter()
            .enumerate()
            .map(|(i, &v)| (v as f64 / sp[i / n]) as f32)
            .collect();
        Ok((Dvf::from_data(c.header.dims, data)?, sp))
    }

    pub fn save(&self, path: &Path, spacing: [f64; 3]) -> Result<()> {
        let n = self.voxel_count();
        let data = self
            .data
            .iter()
            .enumerate()
            .map(|(i, &v)| (v as f64 * spacing[i / n]) as f32)
            .collect();
        io::write_container(
            path,
            &Container {
                header: ContainerHeader {
                    dims: self.dims,
                    spacing_mm: spacing,
                    dtype: "f32".into(),
                    channels: 3,
                },
                data,
            },
        )
    }
}

/// Resample `vol` through `dvf`: output(p) = vol(p + dvf(p)), edge-clamped.
pub fn warp(vol: &Volume, dvf: &Dvf) -> Result<Volume> {
    if vol.dims() != dvf.dims() {
        return Err(Error::DimMismatch(format!(
            "volume {:?} vs DVF {:?}",
            vol.dims(),
            dvf.dims()
        )));
    }
    let data = warp_scalar(vol.voxels(), dvf.dims(), dvf.data());
    Volume::new(vol.dims(), vol.spacing(), data)
}

/// Warp of a raw scalar grid by a channel-major voxel-unit field.
pub(crate) fn warp_scalar(src: &[f32], dims: [usize; 3], field: &[f32]) -> Vec<f32> {
    let n = voxel_count(dims);
    let mut out = Vec::with_capacity(n);
    let mut i = 0;
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let pos = [
                    x as f64 + field[i] as f64,
                    y as f64 + field[n + i] as f64,
                    z as f64 + field[2 * n + i] as f64,
                ];
                out.push(trilinear(src, dims, pos) as f32);
                i += 1;
            }
        }
    }
    out
}

/// Per-axis interpolation table for half-pixel aligned resampling from `src`
/// to `dst` samples.
pub(crate) fn resample_table(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let ratio = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let c = (d as f64 + 0.5) * ratio - 0.5;
            let (i0, i1, t, _) = axis_cell(src, c);
            (i0, i1, t)
        })
        .collect()
}

/// Separable trilinear resampling of one scalar channel.
pub(crate) fn resample_channel(src: &[f32], src_dims: [usize; 3], dst_dims: [usize; 3]) -> Vec<f64> {
    let tx = resample_table(src_dims[0], dst_dims[0]);
    let ty = resample_table(src_dims[1], dst_dims[1]);
    let tz = resample_table(src_dims[2], dst_dims[2]);
    let [sx, sy, sz] = src_dims;
    let [dx, dy, dz] = dst_dims;

    let mut a = vec![0.0f64; dx * sy * sz];
    for z in 0..sz {
        for y in 0..sy {
            let row = &src[sx * (y + sy * z)..];
            let out = &mut a[dx * (y + sy * z)..];
            for (x, &(i0, i1, t)) in tx.iter().enumerate() {
                out[x] = lerp(row[i0] as f64, row[i1] as f64, t);
            }
        }
    }
    let mut b = vec![0.0f64; dx * dy * sz];
    for z in 0..sz {
        for (y, &(j0, j1, t)) in ty.iter().enumerate() {
            for x in 0..dx {
                b[x + dx * (y + dy * z)] =
                    lerp(a[x + dx * (j0 + sy * z)], a[x + dx * (j1 + sy * z)], t);
            }
        }
    }
    let mut c = vec![0.0f64; dx * dy * dz];
    for (z, &(k0, k1, t)) in tz.iter().enumerate() {
        for y in 0..dy {
            for x in 0..dx {
                c[x + dx * (y + dy * z)] =
                    lerp(b[x + dx * (y + dy * k0)], b[x + dx * (y + dy * k1)], t);
            }
        }
    }
    c
}

/// Adjoint of [`resample_channel`]: scatters a gradient on the fine grid back
/// onto the coarse grid.
pub(crate) fn resample_channel_adjoint(
    grad: &[f32],
    src_dims: [usize; 3],
    dst_dims: [usize; 3],
) -> Vec<f64> {
    let tx = resample_table(src_dims[0], dst_dims[0]);
    let ty = resample_table(src_dims[1], dst_dims[1]);
    let tz = resample_table(src_dims[2], dst_dims[2]);
    let [sx, sy, sz] = src_dims;
    let [dx, dy, _] = dst_dims;

    let mut b = vec![0.0f64; dx * dy * sz];
    for (z, &(k0, k1, t)) in tz.iter().enumerate() {
        for y in 0..dy {
            for x in 0..dx {
                let g = grad[x + dx * (y + dy * z)] as f64;
                b[x + dx * (y + dy * k0)] += (1.0 - t) * g;
                b[x + dx * (y + dy * k1)] += t * g;
            }
        }
    }
    let mut a = vec![0.0f64; dx * sy * sz];
    for z in 0..sz {
        for (y, &(j0, j1, t)) in ty.iter().enumerate() {
            for x in 0..dx {
                let g = b[x + dx * (y + dy * z)];
                a[x + dx * (j0 + sy * z)] += (1.0 - t) * g;
                a[x + dx * (j1 + sy * z)] += t * g;
            }
        }
    }
    let mut out = vec![0.0f64; sx * sy * sz];
    for z in 0..sz {
        for y in 0..sy {
            for (x, &(i0, i1, t)) in tx.iter().enumerate() {
                let g = a[x + dx * (y + sy * z)];
                out[i0 + sx * (y + sy * z)] += (1.0 - t) * g;
                out[i1 + sx * (y + sy * z)] += t * g;
            }
        }
    }
    out
}

/// Trilinearly upsample a DVF and rescale each component by the per-axis
/// dimension ratio so it stays in voxel units of the finer grid.
pub fn upsample_dvf(dvf: &Dvf, target_dims: [usize; 3]) -> Result<Dvf> {
    for a in 0..3 {
        if target_dims[a] < dvf.dims[a] {
            return Err(Error::InvalidArgument(format!(
                "upsample_dvf cannot downsample {:?} to {target_dims:?}",
                dvf.dims
            )));
        }
    }
    let mut data = Vec::with_capacity(3 * voxel_count(target_dims));
    for c in 0..3 {
        let ratio = target_dims[c] as f64 / dvf.dims[c] as f64;
        let up = resample_channel(dvf.component(c), dvf.dims, target_dims);
        data.extend(up.into_iter().map(|v| (v * ratio) as f32));
    }
    Dvf::from_data(target_dims, data)
}

/// Functional composition: warping by the result equals warping by `global`
/// and then by `local`. result(p) = global(p + local(p)) + local(p).
pub fn compose(global: &Dvf, local: &Dvf) -> Result<Dvf> {
    if global.dims != local.dims {
        return Err(Error::DimMismatch(format!(
            "global {:?} vs local {:?}",
            global.dims, local.dims
        )));
    }
    let dims = global.dims;
    let n = voxel_count(dims);
    let mut out = Dvf::zeros(dims);
    let mut i = 0;
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let l = local.vector(i);
                let pos = [
                    x as f64 + l[0] as f64,
                    y as f64 + l[1] as f64,
                    z as f64 + l[2] as f64,
                ];
                let g = global.sample(pos);
                for c in 0..3 {
                    out.data[c * n + i] = (g[c] + l[c] as f64) as f32;
                }
                i += 1;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchGrid {
    pub patch_size: [usize; 3],
    pub stride: [usize; 3],
    pub volume_dims: [usize; 3],
    /// Patch origins in grid order (x fastest).
    pub starts: Vec<[usize; 3]>,
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    pub fn axis_starts(&self, axis: usize) -> Vec<usize> {
        axis_starts(self.volume_dims[axis], self.patch_size[axis], self.stride[axis])
    }
}

fn axis_starts(dim: usize, patch: usize, stride: usize) -> Vec<usize> {
    let mut starts: Vec<usize> = (0..)
        .map(|k| k * stride)
        .take_while(|&s| s + patch <= dim)
        .collect();
    if *starts.last().unwrap() + patch < dim {
        starts.push(dim - patch);
    }
    starts
}

pub fn build_patch_grid(
    volume_dims: [usize; 3],
    patch_size: [usize; 3],
    overlap: [usize; 3],
) -> Result<PatchGrid> {
    for a in 0..3 {
        if patch_size[a] == 0 || patch_size[a] > volume_dims[a] {
            return Err(Error::InvalidArgument(format!(
                "patch {patch_size:?} larger than volume {volume_dims:?}"
            )));
        }
        if overlap[a] >= patch_size[a] {
            return Err(Error::InvalidArgument(format!(
                "overlap {overlap:?} must be smaller than patch {patch_size:?}"
            )));
        }
    }
    let stride: [usize; 3] = std::array::from_fn(|a| patch_size[a] - overlap[a]);
    let per_axis: Vec<Vec<usize>> = (0..3)
        .map(|a| axis_starts(volume_dims[a], patch_size[a], stride[a]))
        .collect();
    let mut starts = Vec::with_capacity(per_axis.iter().map(Vec::len).product());
    for &z in &per_axis[2] {
        for &y in &per_axis[1] {
            for &x in &per_axis[0] {
                starts.push([x, y, z]);
            }
        }
    }
    Ok(PatchGrid {
        patch_size,
        stride,
        volume_dims,
        starts,
    })
}

/// Linear taper from 1 at the patch centre to `TAPER_FLOOR` at its faces.
pub fn taper(len: usize) -> Vec<f64> {
    if len == 1 {
        return vec![1.0];
    }
    let c = (len - 1) as f64 / 2.0;
    (0..len)
        .map(|i| (1.0 - (1.0 - TAPER_FLOOR) * (i as f64 - c).abs() / c).max(TAPER_FLOOR))
        .collect()
}

/// Blend per-patch DVFs into one whole-volume field by taper-weighted averaging.
pub fn fuse_patches(patch_dvfs: &[Dvf], grid: &PatchGrid) -> Result<Dvf> {
    if patch_dvfs.len() != grid.starts.len() {
        return Err(Error::InvalidArgument(format!(
            "{} patch DVFs for a grid of {} patches",
            patch_dvfs.len(),
            grid.starts.len()
        )));
    }
    if let Some(p) = patch_dvfs.iter().find(|p| p.dims != grid.patch_size) {
        return Err(Error::DimMismatch(format!(
            "patch DVF {:?} vs patch size {:?}",
            p.dims, grid.patch_size
        )));
    }
    let dims = grid.volume_dims;
    let n = voxel_count(dims);
    let ps = grid.patch_size;
    let w: Vec<Vec<f64>> = (0..3).map(|a| taper(ps[a])).collect();
    let mut num = vec![0.0f64; 3 * n];
    let mut den = vec![0.0f64; n];
    for (patch, start) in patch_dvfs.iter().zip(&grid.starts) {
        let pn = patch.voxel_count();
        for z in 0..ps[2] {
            for y in 0..ps[1] {
                let wyz = w[1][y] * w[2][z];
                for x in 0..ps[0] {
                    let wt = w[0][x] * wyz;
                    let src = index(ps, x, y, z);
                    let dst = index(dims, start[0] + x, start[1] + y, start[2] + z);
                    den[dst] += wt;
                    for c in 0..3 {
                        num[c * n + dst] += wt * patch.data[c * pn + src] as f64;
                    }
                }
            }
        }
    }
    let data = num
        .iter()
        .enumerate()
        .map(|(i, &v)| (v / den[i % n]) as f32)
        .collect();
    Dvf::from_data(dims, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(dims: [usize; 3], slope: f32) -> Volume {
        Volume::from_fn(dims, [1.0; 3], |x, _, _| slope * x as f32).unwrap()
    }

    /// Independent scalar trilinear oracle (weights summed explicitly).
    fn oracle_sample(v: &Volume, p: [f64; 3]) -> f64 {
        let d = v.dims();
        let mut acc = 0.0;
        let c: Vec<f64> = (0..3).map(|a| p[a].clamp(0.0, (d[a] - 1) as f64)).collect();
        for z in 0..d[2] {
            for y in 0..d[1] {
                for x in 0..d[0] {
                    let w = (1.0 - (c[0] - x as f64).abs()).max(0.0)
                        * (1.0 - (c[1] - y as f64).abs()).max(0.0)
                        * (1.0 - (c[2] - z as f64).abs()).max(0.0);
                    acc += w * v.get(x, y, z) as f64;
                }
            }
        }
        acc
    }

    #[test]
    fn zero_dvf_warp_is_identity() {
        let v = Volume::from_fn([5, 4, 3], [1.0; 3], |x, y, z| {
            match (x + y + z) % 4 {
                0 => -0.0,
                1 => 0.0,
                _ => ((x * 7 + y * 13 + z * 29) % 17) as f32 * 0.37 - 2.0,
            }
        })
        .unwrap();
        let out = warp(&v, &Dvf::zeros(v.dims())).unwrap();
        let bits = |v: &Volume| v.voxels().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&out), bits(&v));
    }

    #[test]
    fn integer_shift_of_ramp() {
        let v = ramp([6, 3, 3], 1.0);
        let out = warp(&v, &Dvf::uniform(v.dims(), [1.0, 0.0, 0.0])).unwrap();
        for z in 0..3 {
            for y in 0..3 {
                for x in 0..6 {
                    let expect = (x + 1).min(5) as f32;
                    assert_eq!(out.get(x, y, z), expect);
                }
            }
        }
    }

    #[test]
    fn half_voxel_shift_matches_oracle() {
        let v = ramp([7, 4, 3], 2.0);
        let dvf = Dvf::uniform(v.dims(), [0.5, 0.0, 0.0]);
        let out = warp(&v, &dvf).unwrap();
        for z in 0..3 {
            for y in 0..4 {
                for x in 0..7 {
                    let o = oracle_sample(&v, [x as f64 + 0.5, y as f64, z as f64]);
                    assert!((out.get(x, y, z) as f64 - o).abs() < 1e-5);
                    if x < 6 {
                        assert_eq!(out.get(x, y, z), 2.0 * x as f32 + 1.0);
                    }
                }
            }
        }
    }

    #[test]
    fn warp_rejects_mismatch() {
        let v = ramp([4, 4, 4], 1.0);
        assert!(matches!(
            warp(&v, &Dvf::zeros([4, 4, 3])),
            Err(Error::DimMismatch(_))
        ));
    }

    #[test]
    fn upsample_examples() {
        let z = upsample_dvf(&Dvf::zeros([2, 2, 2]), [4, 4, 4]).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));

        let c = upsample_dvf(&Dvf::uniform([2, 2, 2], [1.0, 0.0, 0.0]), [4, 4, 4]).unwrap();
        assert!(c.component(0).iter().all(|&v| v == 2.0));
        assert!(c.component(1).iter().all(|&v| v == 0.0));

        assert!(upsample_dvf(&Dvf::zeros([4, 4, 4]), [2, 4, 4]).is_err());
    }

    #[test]
    fn upsample_linear_field_matches_closed_form() {
        let src = Dvf::from_fn([3, 3, 3], |x, _, _| [x as f32, 0.0, 0.0]);
        let up = upsample_dvf(&src, [5, 5, 5]).unwrap();
        for z in 0..5 {
            for y in 0..5 {
                for x in 0..5 {
                    // half-pixel alignment: source coordinate of output x
                    let s = ((x as f64 + 0.5) * 3.0 / 5.0 - 0.5).clamp(0.0, 2.0);
                    let expect = s * 5.0 / 3.0;
                    let got = up.at(x, y, z);
                    assert!((got[0] as f64 - expect).abs() < 1e-6, "{x}: {} vs {expect}", got[0]);
                    assert_eq!(got[1], 0.0);
                }
            }
        }
    }

    #[test]
    fn resample_adjoint_is_transpose() {
        // <R a, b> == <a, Rᵀ b>
        let sd = [3, 2, 4];
        let dd = [7, 5, 8];
        let a: Vec<f32> = (0..24).map(|i| ((i * 37) % 11) as f32 - 5.0).collect();
        let b: Vec<f32> = (0..280).map(|i| ((i * 13) % 7) as f32 - 3.0).collect();
        let ra = resample_channel(&a, sd, dd);
        let rtb = resample_channel_adjoint(&b, sd, dd);
        let lhs: f64 = ra.iter().zip(&b).map(|(x, &y)| x * y as f64).sum();
        let rhs: f64 = a.iter().zip(&rtb).map(|(&x, y)| x as f64 * y).sum();
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));
    }

    #[test]
    fn compose_identities_and_shifts() {
        let d = [6, 5, 4];
        let a = Dvf::from_fn(d, |x, y, z| [0.1 * x as f32, -0.2 * y as f32, 0.05 * (z * x) as f32]);
        assert_eq!(compose(&a, &Dvf::zeros(d)).unwrap(), a);
        assert_eq!(compose(&Dvf::zeros(d), &a).unwrap(), a);

        let g = Dvf::uniform(d, [1.0, 0.0, 0.0]);
        let l = Dvf::uniform(d, [0.0, 1.0, 0.0]);
        let c = compose(&g, &l).unwrap();
        for i in 0..c.voxel_count() {
            assert_eq!(c.vector(i), [1.0, 1.0, 0.0]);
        }
    }

    #[test]
    fn compose_matches_double_warp() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let d = [16, 16, 16];
        for _ in 0..3 {
            let f: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.1..0.3));
            let v = Volume::from_fn(d, [1.0; 3], |x, y, z| {
                ((x as f64 * f[0]).sin() + (y as f64 * f[1]).cos() + (z as f64 * f[2]).sin()) as f32
            })
            .unwrap();
            let amp: [f32; 6] = std::array::from_fn(|_| rng.gen_range(-1.5..1.5));
            let g = Dvf::from_fn(d, |x, y, _| {
                [amp[0] * (y as f32 * 0.2).sin(), amp[1] * (x as f32 * 0.15).cos(), amp[2]]
            });
            let l = Dvf::from_fn(d, |_, y, z| {
                [amp[3], amp[4] * (z as f32 * 0.25).sin(), amp[5] * (y as f32 * 0.1).cos()]
            });
            let once = warp(&v, &compose(&g, &l).unwrap()).unwrap();
            let twice = warp(&warp(&v, &g).unwrap(), &l).unwrap();
            let mut worst = 0.0f32;
            for z in 4..12 {
                for y in 4..12 {
                    for x in 4..12 {
                        worst = worst.max((once.get(x, y, z) - twice.get(x, y, z)).abs());
                    }
                }
            }
            // the two routes interpolate at different stages; the residual is
            // bounded by second-order interpolation error of a smooth field
            assert!(worst < 0.05, "max interior deviation {worst}");
        }
    }

    #[test]
    fn clinical_patch_geometry() {
        let g = build_patch_grid([512, 512, 88], [64, 64, 64], [32, 32, 48]).unwrap();
        assert_eq!(g.stride, [32, 32, 16]);
        assert_eq!(g.axis_starts(0), (0..15).map(|k| 32 * k).collect::<Vec<_>>());
        assert_eq!(g.axis_starts(2), vec![0, 16, 24]);
        assert_eq!(g.len(), 675);
    }

    #[test]
    fn small_patch_grids() {
        let g = build_patch_grid([64, 64, 64], [64, 64, 64], [32, 32, 48]).unwrap();
        assert_eq!(g.starts, vec![[0, 0, 0]]);
        let g = build_patch_grid([96, 64, 64], [64, 64, 64], [32, 32, 48]).unwrap();
        assert_eq!(g.axis_starts(0), vec![0, 32]);
        assert_eq!(g.len(), 2);
        assert!(build_patch_grid([32, 64, 64], [64, 64, 64], [0, 0, 0]).is_err());
        assert!(build_patch_grid([64, 64, 64], [64, 64, 64], [64, 0, 0]).is_err());
    }

    fn coverage_ok(g: &PatchGrid) -> bool {
        let d = g.volume_dims;
        let mut hit = vec![false; voxel_count(d)];
        for s in &g.starts {
            for z in 0..g.patch_size[2] {
                for y in 0..g.patch_size[1] {
                    for x in 0..g.patch_size[0] {
                        hit[index(d, s[0] + x, s[1] + y, s[2] + z)] = true;
                    }
                }
            }
        }
        hit.into_iter().all(|h| h)
    }

    #[test]
    fn fuse_examples() {
        let g = build_patch_grid([8, 4, 4], [4, 4, 4], [2, 0, 0]).unwrap();
        assert_eq!(g.len(), 3);
        let zero = fuse_patches(&vec![Dvf::zeros([4, 4, 4]); 3], &g).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));

        let single = build_patch_grid([4, 4, 4], [4, 4, 4], [1, 1, 1]).unwrap();
        let p = Dvf::from_fn([4, 4, 4], |x, y, z| [x as f32 * 0.3, y as f32 - 1.0, z as f32 * 0.7]);
        assert_eq!(fuse_patches(std::slice::from_ref(&p), &single).unwrap(), p);

        assert!(fuse_patches(&vec![Dvf::zeros([4, 4, 4]); 2], &g).is_err());
        assert!(fuse_patches(&vec![Dvf::zeros([4, 4, 3]); 3], &g).is_err());
    }

    #[test]
    fn fuse_two_patches_matches_accumulation_oracle() {
        let g = build_patch_grid([6, 3, 3], [4, 3, 3], [2, 0, 0]).unwrap();
        assert_eq!(g.starts, vec![[0, 0, 0], [2, 0, 0]]);
        let a = Dvf::uniform([4, 3, 3], [1.0, 0.0, 0.0]);
        let b = Dvf::uniform([4, 3, 3], [3.0, 0.0, 0.0]);
        let fused = fuse_patches(&[a, b], &g).unwrap();

        // independent oracle: per-voxel loop over patches with the taper
        // written out explicitly
        let t = |i: usize, len: usize| {
            let c = (len as f64 - 1.0) / 2.0;
            if len == 1 {
                1.0
            } else {
                1.0 - 0.95 * ((i as f64) - c).abs() / c
            }
        };
        for z in 0..3 {
            for y in 0..3 {
                for x in 0..6 {
                    let mut num = 0.0;
                    let mut den = 0.0;
                    for (k, val) in [(0usize, 1.0), (2usize, 3.0)] {
                        if x >= k && x < k + 4 {
                            let w = t(x - k, 4) * t(y, 3) * t(z, 3);
                            num += w * val;
                            den += w;
                        }
                    }
                    let expect = num / den;
                    let got = fused.at(x, y, z)[0] as f64;
                    assert!((got - expect).abs() < 1e-6);
                    if (2..4).contains(&x) {
                        assert!(got > 1.0 && got < 3.0);
                    }
                }
            }
        }
    }

    proptest! {
        #[test]
        fn patch_grids_cover_everything(dx in 1usize..20, dy in 1usize..20, dz in 1usize..20,
                                        px in 1usize..8, py in 1usize..8, pz in 1usize..8,
                                        ox in 0usize..8, oy in 0usize..8, oz in 0usize..8) {
            let d = [dx.max(px), dy.max(py), dz.max(pz)];
            let p = [px, py, pz];
            let o = [ox % px, oy % py, oz % pz];
            let g = build_patch_grid(d, p, o).unwrap();
            prop_assert!(coverage_ok(&g));
            for s in &g.starts {
                for a in 0..3 {
                    prop_assert!(s[a] + p[a] <= d[a]);
                }
            }
        }

        #[test]
        fn warp_stays_within_input_range(vals in proptest::collection::vec(-1000.0f32..1000.0, 60),
                                         shift in proptest::collection::vec(-6.0f32..6.0, 180)) {
            let v = Volume::new([5, 4, 3], [1.0; 3], vals).unwrap();
            let dvf = Dvf::from_data([5, 4, 3], shift).unwrap();
            let out = warp(&v, &dvf).unwrap();
            let (lo, hi) = v.min_max();
            prop_assert!(out.voxels().iter().all(|&x| x >= lo && x <= hi));
        }

        #[test]
        fn fusing_agreeing_patches_is_exact(c in proptest::collection::vec(-20.0f32..20.0, 3)) {
            let g = build_patch_grid([9, 7, 5], [4, 4, 4], [2, 1, 3]).unwrap();
            let patches = vec![Dvf::uniform([4, 4, 4], [c[0], c[1], c[2]]); g.len()];
            let fused = fuse_patches(&patches, &g).unwrap();
            for i in 0..fused.voxel_count() {
                prop_assert_eq!(fused.vector(i), [c[0], c[1], c[2]]);
            }
        }
    }
}
