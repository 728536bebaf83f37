use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Graph, Tensor, Var};

/// Geometry of a 3-D convolution layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 3],
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    /// Stride-1 cube kernel with "same" padding.
    pub fn same(in_channels: usize, out_channels: usize, k: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel: [k; 3],
            stride: 1,
            padding: k / 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel.iter().any(|&k| k % 2 == 0) {
            return Err(Error::InvalidArgument(format!(
                "kernel {:?} must be odd in every axis",
                self.kernel
            )));
        }
        if self.stride == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::InvalidArgument(format!("degenerate conv spec {self:?}")));
        }
        Ok(())
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        vec![
            self.out_channels,
            self.in_channels,
            self.kernel[0],
            self.kernel[1],
            self.kernel[2],
        ]
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel.iter().product::<usize>()
    }

    pub fn output_dims(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let span = input[a] + 2 * self.padding;
            if span < self.kernel[a] {
                return Err(Error::Shape(format!(
                    "input {input:?} too small for kernel {:?} with padding {}",
                    self.kernel, self.padding
                )));
            }
            out[a] = (span - self.kernel[a]) / self.stride + 1;
        }
        Ok(out)
    }
}

/// `C = A·B + beta·C` over strided f32 matrices.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |r: usize, cols: usize, rs: usize, cs: usize| (r - 1) * rs + (cols - 1) * cs;
    if k > 0 {
        assert!(last(m, k, rsa, csa) < a.len(), "gemm: A out of bounds");
        assert!(last(k, n, rsb, csb) < b.len(), "gemm: B out of bounds");
    }
    assert!(last(m, n, rsc, csc) < c.len(), "gemm: C out of bounds");
    // SAFETY: every element addressed by the strides lies within the slices
    // (checked above) and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

const CHUNK: usize = 256;

fn pad(x: &[f32], dims: [usize; 3], p: usize) -> (Vec<f32>, [usize; 3]) {
    let pd = [dims[0] + 2 * p, dims[1] + 2 * p, dims[2] + 2 * p];
    let mut out = vec![0.0; pd[0] * pd[1] * pd[2]];
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            let src = &x[dims[0] * (y + dims[1] * z)..][..dims[0]];
            let o = p + pd[0] * (y + p + pd[1] * (z + p));
            out[o..o + dims[0]].copy_from_slice(src);
        }
    }
    (out, pd)
}

fn kernel_offsets(kernel: [usize; 3], row: usize, plane: usize) -> Vec<usize> {
    let mut offs = Vec::with_capacity(kernel.iter().product());
    for dz in 0..kernel[2] {
        for dy in 0..kernel[1] {
            for dx in 0..kernel[0] {
                offs.push(dx + row * (dy + plane * dz));
            }
        }
    }
    offs
}

/// Stride-1 layout: the output is computed on the padded index grid so every
/// im2col row is a contiguous slice of the padded input.
struct DenseLayout {
    pd: [usize; 3],
    od: [usize; 3],
    psize: usize,
    span: usize,
    offs: Vec<usize>,
}

impl DenseLayout {
    fn new(spec: &ConvSpec, dims: [usize; 3], od: [usize; 3]) -> Self {
        let p = spec.padding;
        let pd = [dims[0] + 2 * p, dims[1] + 2 * p, dims[2] + 2 * p];
        let span = (od[0] - 1) + pd[0] * ((od[1] - 1) + pd[1] * (od[2] - 1)) + 1;
        Self {
            pd,
            od,
            psize: pd[0] * pd[1] * pd[2],
            span,
            offs: kernel_offsets(spec.kernel, pd[0], pd[1]),
        }
    }

    fn fill_col(&self, xp: &[f32], ci: usize, q0: usize, mc: usize, col: &mut [f32]) {
        let kk = self.offs.len();
        for i in 0..ci {
            for (k, &off) in self.offs.iter().enumerate() {
                let src = &xp[i * self.psize + q0 + off..][..mc];
                col[(i * kk + k) * mc..][..mc].copy_from_slice(src);
            }
        }
    }

    fn for_each_output(&self, mut f: impl FnMut(usize, usize)) {
        let mut j = 0;
        for z in 0..self.od[2] {
            for y in 0..self.od[1] {
                let base = self.pd[0] * (y + self.pd[1] * z);
                for x in 0..self.od[0] {
                    f(j, base + x);
                    j += 1;
                }
            }
        }
    }
}

/// General layout for strided convolutions: im2col by gather over output voxels.
struct GatherLayout {
    dims: [usize; 3],
    od: [usize; 3],
    kernel: [usize; 3],
    stride: usize,
    padding: usize,
}

impl GatherLayout {
    /// Calls `f(col_row, j, input_index)` for every in-bounds tap of output
    /// voxels `j0..j0 + mc`.
    fn for_each_tap(&self, ci: usize, j0: usize, mc: usize, mut f: impl FnMut(usize, usize, usize)) {
        let n_in = self.dims[0] * self.dims[1] * self.dims[2];
        let kk: usize = self.kernel.iter().product();
        for jj in 0..mc {
            let j = j0 + jj;
            let ox = j % self.od[0];
            let oy = (j / self.od[0]) % self.od[1];
            let oz = j / (self.od[0] * self.od[1]);
            let mut k = 0;
            for dz in 0..self.kernel[2] {
                let z = (oz * self.stride + dz) as isize - self.padding as isize;
                for dy in 0..self.kernel[1] {
                    let y = (oy * self.stride + dy) as isize - self.padding as isize;
                    for dx in 0..self.kernel[0] {
                        let x = (ox * self.stride + dx) as isize - self.padding as isize;
                        let inside = x >= 0
                            && y >= 0
                            && z >= 0
                            && (x as usize) < self.dims[0]
                            && (y as usize) < self.dims[1]
                            && (z as usize) < self.dims[2];
                        if inside {
                            let idx = x as usize
                                + self.dims[0] * (y as usize + self.dims[1] * z as usize);
                            for i in 0..ci {
                                f(i * kk + k, jj, i * n_in + idx);
                            }
                        }
                        k += 1;
                    }
                }
            }
        }
    }
}

fn conv_forward(spec: &ConvSpec, x: &Tensor, w: &[f32], bias: Option<&[f32]>) -> Result<Tensor> {
    let [n, ci] = [x.batch(), x.channels()];
    let dims = x.spatial();
    let od = spec.output_dims(dims)?;
    let co = spec.out_channels;
    let kk: usize = spec.kernel.iter().product();
    let n_in = dims[0] * dims[1] * dims[2];
    let n_out = od[0] * od[1] * od[2];
    let mut out = vec![0.0f32; n * co * n_out];

    for b in 0..n {
        let xb = &x.data()[b * ci * n_in..][..ci * n_in];
        let ob = &mut out[b * co * n_out..][..co * n_out];
        if spec.stride == 1 {
            let lay = DenseLayout::new(spec, dims, od);
            let xp: Vec<f32> = (0..ci)
                .flat_map(|i| pad(&xb[i * n_in..][..n_in], dims, spec.padding).0)
                .collect();
            let mut full = vec![0.0f32; co * lay.span];
            let mut col = vec![0.0f32; ci * kk * CHUNK];
            let mut q0 = 0;
            while q0 < lay.span {
                let mc = CHUNK.min(lay.span - q0);
                lay.fill_col(&xp, ci, q0, mc, &mut col);
                gemm(
                    co,
                    ci * kk,
                    mc,
                    w,
                    (ci * kk, 1),
                    &col,
                    (mc, 1),
                    0.0,
                    &mut full[q0..],
                    (lay.span, 1),
                );
                q0 += mc;
            }
            lay.for_each_output(|j, q| {
                for o in 0..co {
                    ob[o * n_out + j] = full[o * lay.span + q];
                }
            });
        } else {
            let lay = GatherLayout {
                dims,
                od,
                kernel: spec.kernel,
                stride: spec.stride,
                padding: spec.padding,
            };
            let mut col = vec![0.0f32; ci * kk * CHUNK];
            let mut j0 = 0;
            while j0 < n_out {
                let mc = CHUNK.min(n_out - j0);
                col[..ci * kk * mc].fill(0.0);
                lay.for_each_tap(ci, j0, mc, |r, jj, src| col[r * mc + jj] = xb[src]);
                gemm(
                    co,
                    ci * kk,
                    mc,
                    w,
                    (ci * kk, 1),
                    &col,
                    (mc, 1),
                    0.0,
                    &mut ob[j0..],
                    (n_out, 1),
                );
                j0 += mc;
            }
        }
        if let Some(bias) = bias {
            for (o, &bv) in bias.iter().enumerate() {
                for v in &mut ob[o * n_out..][..n_out] {
                    *v += bv;
                }
            }
        }
    }
    Tensor::new(vec![n, co, od[0], od[1], od[2]], out)
}

/// Returns (grad_x, grad_w).
fn conv_backward(
    spec: &ConvSpec,
    x: &Tensor,
    w: &[f32],
    od: [usize; 3],
    gout: &[f32],
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<f32>>, Option<Vec<f32>>) {
    let [n, ci] = [x.batch(), x.channels()];
    let dims = x.spatial();
    let co = spec.out_channels;
    let kk: usize = spec.kernel.iter().product();
    let n_in = dims[0] * dims[1] * dims[2];
    let n_out = od[0] * od[1] * od[2];
    let mut gx = need_x.then(|| vec![0.0f32; n * ci * n_in]);
    let mut gw = need_w.then(|| vec![0.0f32; w.len()]);
    let mut col = vec![0.0f32; ci * kk * CHUNK];
    let mut dcol = vec![0.0f32; ci * kk * CHUNK];

    for b in 0..n {
        let xb = &x.data()[b * ci * n_in..][..ci * n_in];
        let gb = &gout[b * co * n_out..][..co * n_out];
        if spec.stride == 1 {
            let lay = DenseLayout::new(spec, dims, od);
            let xp: Vec<f32> = (0..ci)
                .flat_map(|i| pad(&xb[i * n_in..][..n_in], dims, spec.padding).0)
                .collect();
            let mut gfull = vec![0.0f32; co * lay.span];
            lay.for_each_output(|j, q| {
                for o in 0..co {
                    gfull[o * lay.span + q] = gb[o * n_out + j];
                }
            });
            let mut gxp = need_x.then(|| vec![0.0f32; ci * lay.psize]);
            let mut q0 = 0;
            while q0 < lay.span {
                let mc = CHUNK.min(lay.span - q0);
                if let Some(gw) = gw.as_mut() {
                    lay.fill_col(&xp, ci, q0, mc, &mut col);
                    gemm(
                        co,
                        mc,
                        ci * kk,
                        &gfull[q0..],
                        (lay.span, 1),
                        &col,
                        (1, mc),
                        1.0,
                        gw,
                        (ci * kk, 1),
                    );
                }
                if let Some(gxp) = gxp.as_mut() {
                    gemm(
                        ci * kk,
                        co,
                        mc,
                        w,
                        (1, ci * kk),
                        &gfull[q0..],
                        (lay.span, 1),
                        0.0,
                        &mut dcol,
                        (mc, 1),
                    );
                    for i in 0..ci {
                        for (k, &off) in lay.offs.iter().enumerate() {
                            let dst = &mut gxp[i * lay.psize + q0 + off..][..mc];
                            for (d, s) in dst.iter_mut().zip(&dcol[(i * kk + k) * mc..][..mc]) {
                                *d += s;
                            }
                        }
                    }
                }
                q0 += mc;
            }
            if let (Some(gxp), Some(gx)) = (gxp, gx.as_mut()) {
                let p = spec.padding;
                let gxb = &mut gx[b * ci * n_in..][..ci * n_in];
                for i in 0..ci {
                    for z in 0..dims[2] {
                        for y in 0..dims[1] {
                            let s = i * lay.psize + p + lay.pd[0] * (y + p + lay.pd[1] * (z + p));
                            let d = i * n_in + dims[0] * (y + dims[1] * z);
                            gxb[d..d + dims[0]].copy_from_slice(&gxp[s..s + dims[0]]);
                        }
                    }
                }
            }
        } else {
            let lay = GatherLayout {
                dims,
                od,
                kernel: spec.kernel,
                stride: spec.stride,
                padding: spec.padding,
            };
            let mut j0 = 0;
            while j0 < n_out {
                let mc = CHUNK.min(n_out - j0);
                if let Some(gw) = gw.as_mut() {
                    col[..ci * kk * mc].fill(0.0);
                    lay.for_each_tap(ci, j0, mc, |r, jj, src| col[r * mc + jj] = xb[src]);
                    gemm(
                        co,
                        mc,
                        ci * kk,
                        &gb[j0..],
                        (n_out, 1),
                        &col,
                        (1, mc),
                        1.0,
                        gw,
                        (ci * kk, 1),
                    );
                }
                if let Some(gx) = gx.as_mut() {
                    gemm(
                        ci * kk,
                        co,
                        mc,
                        w,
                        (1, ci * kk),
                        &gb[j0..],
                        (n_out, 1),
                        0.0,
                        &mut dcol,
                        (mc, 1),
                    );
                    let gxb = &mut gx[b * ci * n_in..][..ci * n_in];
                    lay.for_each_tap(ci, j0, mc, |r, jj, dst| gxb[dst] += dcol[r * mc + jj]);
                }
                j0 += mc;
            }
        }
    }
    (gx, gw)
}

impl Graph {
    /// Cross-correlation with zero padding. `w` is shaped
    /// `[out, in, kx, ky, kz]`; `b` (optional) is `[out]`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        spec.validate()?;
        let xt = self.value(x);
        xt.require_5d("conv3d")?;
        if xt.channels() != spec.in_channels {
            return Err(Error::Shape(format!(
                "conv3d input has {} channels, spec expects {}",
                xt.channels(),
                spec.in_channels
            )));
        }
        if self.value(w).shape() != spec.weight_shape().as_slice() {
            return Err(Error::Shape(format!(
                "conv3d weights {:?}, expected {:?}",
                self.value(w).shape(),
                spec.weight_shape()
            )));
        }
        if let Some(b) = b {
            if self.value(b).numel() != spec.out_channels {
                return Err(Error::Shape(format!(
                    "conv3d bias has {} values for {} outputs",
                    self.value(b).numel(),
                    spec.out_channels
                )));
            }
        }
        let out = conv_forward(
            &spec,
            xt,
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        )?;
        let od = out.spatial();
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(
            out,
            &parents,
            Box::new(move |ctx| {
                let (gx, gw) = conv_backward(
                    &spec,
                    ctx.inputs[0],
                    ctx.inputs[1].data(),
                    od,
                    ctx.grad,
                    ctx.needs[0],
                    ctx.needs[1],
                );
                let mut grads = vec![gx, gw];
                if ctx.inputs.len() == 3 {
                    let n_out = od[0] * od[1] * od[2];
                    let co = spec.out_channels;
                    let mut gb = vec![0.0f64; co];
                    for chunk in ctx.grad.chunks(co * n_out) {
                        for (o, acc) in gb.iter_mut().enumerate() {
                            *acc += chunk[o * n_out..][..n_out].iter().map(|&v| v as f64).sum::<f64>();
                        }
                    }
                    grads.push(Some(gb.into_iter().map(|v| v as f32).collect()));
                }
                grads
            }),
        ))
    }
}
