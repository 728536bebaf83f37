use crate::error::{Error, Result};
use crate::mind::{clamp_shift, variance_floor, MindConfig};
use crate::nn::{Graph, Tensor, Var};

/// Clamped box sum along one axis: out(p) = Σ_{|s|≤r} f(clamp(p + s)).
fn box_axis(f: &[f64], dims: [usize; 3], axis: usize, r: usize) -> Vec<f64> {
    let stride = [1, dims[0], dims[0] * dims[1]][axis];
    let len = dims[axis];
    let mut out = vec![0.0; f.len()];
    for (i, o) in out.iter_mut().enumerate() {
        let p = (i / stride) % len;
        let base = i - p * stride;
        let mut acc = 0.0;
        for s in -(r as i64)..=r as i64 {
            acc += f[base + clamp_shift(p, s, len) * stride];
        }
        *o = acc;
    }
    out
}

/// Adjoint of [`box_axis`].
fn box_axis_adjoint(g: &[f64], dims: [usize; 3], axis: usize, r: usize) -> Vec<f64> {
    let stride = [1, dims[0], dims[0] * dims[1]][axis];
    let len = dims[axis];
    let mut out = vec![0.0; g.len()];
    for (i, &gv) in g.iter().enumerate() {
        let p = (i / stride) % len;
        let base = i - p * stride;
        for s in -(r as i64)..=r as i64 {
            out[base + clamp_shift(p, s, len) * stride] += gv;
        }
    }
    out
}

fn neighbour(dims: [usize; 3], i: usize, r: [i32; 3]) -> usize {
    let x = i % dims[0];
    let y = (i / dims[0]) % dims[1];
    let z = i / (dims[0] * dims[1]);
    clamp_shift(x, r[0] as i64, dims[0])
        + dims[0]
            * (clamp_shift(y, r[1] as i64, dims[1])
                + dims[1] * clamp_shift(z, r[2] as i64, dims[2]))
}

struct Forward {
    dist: Vec<f64>,
    var: Vec<f64>,
    floored: Vec<bool>,
    argmin: Vec<u8>,
    out: Vec<f32>,
}

fn forward(img: &[f32], dims: [usize; 3], cfg: &MindConfig) -> Forward {
    let n = img.len();
    let k = cfg.offsets.len();
    let r = cfg.patch_radius;
    let eps = variance_floor(img);
    let norm = ((2 * r + 1) as f64).powi(3);
    let mut dist = Vec::with_capacity(k * n);
    for off in &cfg.offsets {
        let d: Vec<f64> = (0..n)
            .map(|i| {
                let v = img[i] as f64 - img[neighbour(dims, i, *off)] as f64;
                v * v
            })
            .collect();
        let mut b = box_axis(&d, dims, 0, r);
        b = box_axis(&b, dims, 1, r);
        b = box_axis(&b, dims, 2, r);
        dist.extend(b.into_iter().map(|v| v / norm));
    }
    let mut var = vec![0.0; n];
    let mut floored = vec![false; n];
    let mut argmin = vec![0u8; n];
    let mut out = vec![0.0f32; k * n];
    for i in 0..n {
        let mut sum = 0.0;
        let mut m = 0;
        for c in 0..k {
            let d = dist[c * n + i];
            sum += d;
            if d < dist[m * n + i] {
                m = c;
            }
        }
        let mean = sum / k as f64;
        floored[i] = mean < eps;
        let v = mean.max(eps);
        var[i] = v;
        argmin[i] = m as u8;
        let dmin = dist[m * n + i];
        for c in 0..k {
            out[c * n + i] = (-(dist[c * n + i] - dmin) / v).exp() as f32;
        }
    }
    Forward {
        dist,
        var,
        floored,
        argmin,
        out,
    }
}

fn backward(img: &[f32], dims: [usize; 3], cfg: &MindConfig, fw: &Forward, grad: &[f32]) -> Vec<f64> {
    let n = img.len();
    let k = cfg.offsets.len();
    let r = cfg.patch_radius;
    let norm = ((2 * r + 1) as f64).powi(3);
    // gradient w.r.t. the box-averaged distances
    let mut gd = vec![0.0f64; k * n];
    for i in 0..n {
        let v = fw.var[i];
        let m = fw.argmin[i] as usize;
        let dmin = fw.dist[m * n + i];
        let mut to_min = 0.0;
        let mut to_var = 0.0;
        for c in 0..k {
            if c == m {
                continue;
            }
            let e = fw.out[c * n + i] as f64;
            let ge = grad[c * n + i] as f64 * e;
            gd[c * n + i] -= ge / v;
            to_min += ge / v;
            to_var += ge * (fw.dist[c * n + i] - dmin) / (v * v);
        }
        gd[m * n + i] += to_min;
        if !fw.floored[i] {
            for c in 0..k {
                gd[c * n + i] += to_var / k as f64;
            }
        }
    }
    let mut gimg = vec![0.0f64; n];
    for (c, off) in cfg.offsets.iter().enumerate() {
        let mut g = box_axis_adjoint(&gd[c * n..][..n], dims, 2, r);
        g = box_axis_adjoint(&g, dims, 1, r);
        g = box_axis_adjoint(&g, dims, 0, r);
        for (i, &gv) in g.iter().enumerate() {
            let j = neighbour(dims, i, *off);
            let t = 2.0 * (img[i] as f64 - img[j] as f64) * gv / norm;
            gimg[i] += t;
            gimg[j] -= t;
        }
    }
    gimg
}

impl Graph {
    /// Differentiable MIND descriptor of a single-channel volume; one output
    /// channel per neighbourhood offset.
    pub fn mind(&mut self, img: Var, cfg: &MindConfig) -> Result<Var> {
        let t = self.value(img);
        t.require_5d("mind")?;
        if t.channels() != 1 {
            return Err(Error::Shape(format!(
                "mind expects a single-channel image, got {:?}",
                t.shape()
            )));
        }
        let dims = t.spatial();
        cfg.validate(dims)?;
        let n = t.voxels();
        let k = cfg.offsets.len();
        let mut saved = Vec::with_capacity(t.batch());
        let mut data = Vec::with_capacity(t.batch() * k * n);
        for plane in t.data().chunks(n) {
            let fw = forward(plane, dims, cfg);
            data.extend_from_slice(&fw.out);
            saved.push(fw);
        }
        let out = Tensor::new(vec![t.batch(), k, dims[0], dims[1], dims[2]], data)?;
        let cfg = cfg.clone();
        Ok(self.push(
            out,
            &[img],
            Box::new(move |ctx| {
                let mut g = Vec::with_capacity(ctx.inputs[0].numel());
                for (b, plane) in ctx.inputs[0].data().chunks(n).enumerate() {
                    let gb = backward(plane, dims, &cfg, &saved[b], &ctx.grad[b * k * n..][..k * n]);
                    g.extend(gb.into_iter().map(|v| v as f32));
                }
                vec![Some(g)]
            }),
        ))
    }
}
