use crate::error::{Error, Result};
use crate::nn::{Graph, Tensor, Var};

/// Denominator floor for the correlation coefficient.
pub const NCC_EPS: f64 = 1e-8;
/// Probabilities are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]` before the log.
pub const BCE_CLAMP: f64 = 1e-7;

fn check_pair(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    a.require_5d(what)?;
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Axis derivative with central differences inside and one-sided differences
/// at the borders; zero along singleton axes.
pub(crate) fn axis_gradient(f: &[f64], dims: [usize; 3], axis: usize) -> Vec<f64> {
    let stride = [1, dims[0], dims[0] * dims[1]][axis];
    let len = dims[axis];
    let mut out = vec![0.0; f.len()];
    if len < 2 {
        return out;
    }
    for (i, o) in out.iter_mut().enumerate() {
        let p = (i / stride) % len;
        *o = if p == 0 {
            f[i + stride] - f[i]
        } else if p == len - 1 {
            f[i] - f[i - stride]
        } else {
            (f[i + stride] - f[i - stride]) / 2.0
        };
    }
    out
}

pub(crate) fn axis_gradient_adjoint(g: &[f64], dims: [usize; 3], axis: usize) -> Vec<f64> {
    let stride = [1, dims[0], dims[0] * dims[1]][axis];
    let len = dims[axis];
    let mut out = vec![0.0; g.len()];
    if len < 2 {
        return out;
    }
    for (i, &gv) in g.iter().enumerate() {
        let p = (i / stride) % len;
        if p == 0 {
            out[i + stride] += gv;
            out[i] -= gv;
        } else if p == len - 1 {
            out[i] += gv;
            out[i - stride] -= gv;
        } else {
            out[i + stride] += gv / 2.0;
            out[i - stride] -= gv / 2.0;
        }
    }
    out
}

/// Second difference along one axis with the stencil centred at
/// `clamp(i, 1, n - 2)`; zero when the axis has fewer than three samples.
pub(crate) fn axis_second_difference(f: &[f64], dims: [usize; 3], axis: usize) -> Vec<f64> {
    let stride = [1, dims[0], dims[0] * dims[1]][axis];
    let len = dims[axis];
    let mut out = vec![0.0; f.len()];
    if len < 3 {
        return out;
    }
    for (i, o) in out.iter_mut().enumerate() {
        let p = (i / stride) % len;
        let c = i - p * stride + p.clamp(1, len - 2) * stride;
        *o = f[c - stride] - 2.0 * f[c] + f[c + stride];
    }
    out
}

fn axis_second_difference_adjoint(g: &[f64], dims: [usize; 3], axis: usize) -> Vec<f64> {
    let stride = [1, dims[0], dims[0] * dims[1]][axis];
    let len = dims[axis];
    let mut out = vec![0.0; g.len()];
    if len < 3 {
        return out;
    }
    for (i, &gv) in g.iter().enumerate() {
        let p = (i / stride) % len;
        let c = i - p * stride + p.clamp(1, len - 2) * stride;
        out[c - stride] += gv;
        out[c] -= 2.0 * gv;
        out[c + stride] += gv;
    }
    out
}

fn to_f64(d: &[f32]) -> Vec<f64> {
    d.iter().map(|&v| v as f64).collect()
}

fn to_f32(d: Vec<f64>) -> Vec<f32> {
    d.into_iter().map(|v| v as f32).collect()
}

fn centred(d: &[f32]) -> Vec<f64> {
    let m = d.iter().map(|&v| v as f64).sum::<f64>() / d.len() as f64;
    d.iter().map(|&v| v as f64 - m).collect()
}

impl Graph {
    /// Normalized cross-correlation per (batch, channel) plane, averaged.
    pub fn ncc(&mut self, a: Var, b: Var) -> Result<Var> {
        check_pair(self.value(a), self.value(b), "ncc")?;
        let n = self.value(a).voxels();
        let planes = self.value(a).numel() / n;
        let mut total = 0.0;
        for (pa, pb) in self.value(a).data().chunks(n).zip(self.value(b).data().chunks(n)) {
            let (ca, cb) = (centred(pa), centred(pb));
            let cov = ca.iter().zip(&cb).map(|(x, y)| x * y).sum::<f64>() / n as f64;
            let va = ca.iter().map(|x| x * x).sum::<f64>() / n as f64;
            let vb = cb.iter().map(|x| x * x).sum::<f64>() / n as f64;
            total += cov / (va * vb).sqrt().max(NCC_EPS);
        }
        let value = total / planes as f64;
        Ok(self.push_with_scalar(
            Tensor::scalar(value as f32),
            Some(value),
            &[a, b],
            Box::new(move |ctx| {
                let up = ctx.grad[0] as f64 / planes as f64;
                let mut ga = Vec::with_capacity(planes * n);
                let mut gb = Vec::with_capacity(planes * n);
                let pairs = ctx.inputs[0].data().chunks(n).zip(ctx.inputs[1].data().chunks(n));
                for (pa, pb) in pairs {
                    let (ca, cb) = (centred(pa), centred(pb));
                    let nf = n as f64;
                    let cov = ca.iter().zip(&cb).map(|(x, y)| x * y).sum::<f64>() / nf;
                    let va = ca.iter().map(|x| x * x).sum::<f64>() / nf;
                    let vb = cb.iter().map(|x| x * x).sum::<f64>() / nf;
                    let den = (va * vb).sqrt();
                    if den >= NCC_EPS {
                        for i in 0..n {
                            ga.push((up * (cb[i] / den - cov * ca[i] / (va * den)) / nf) as f32);
                            gb.push((up * (ca[i] / den - cov * cb[i] / (vb * den)) / nf) as f32);
                        }
                    } else {
                        for i in 0..n {
                            ga.push((up * cb[i] / (NCC_EPS * nf)) as f32);
                            gb.push((up * ca[i] / (NCC_EPS * nf)) as f32);
                        }
                    }
                }
                vec![ctx.needs[0].then_some(ga), ctx.needs[1].then_some(gb)]
            }),
        ))
    }

    /// Gradient-difference loss: mean over planes, axes and voxels of
    /// `(∂a − ∂b)²`.
    pub fn gd(&mut self, a: Var, b: Var) -> Result<Var> {
        check_pair(self.value(a), self.value(b), "gd")?;
        let dims = self.value(a).spatial();
        let n = self.value(a).voxels();
        let planes = self.value(a).numel() / n;
        let count = (planes * 3 * n) as f64;
        let diff = |a: &Tensor, b: &Tensor| -> Vec<f64> {
            a.data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| x as f64 - y as f64)
                .collect()
        };
        let e = diff(self.value(a), self.value(b));
        let mut total = 0.0;
        for plane in e.chunks(n) {
            for axis in 0..3 {
                total += axis_gradient(plane, dims, axis).iter().map(|v| v * v).sum::<f64>();
            }
        }
        let value = total / count;
        Ok(self.push_with_scalar(
            Tensor::scalar(value as f32),
            Some(value),
            &[a, b],
            Box::new(move |ctx| {
                let e = diff(ctx.inputs[0], ctx.inputs[1]);
                let up = ctx.grad[0] as f64;
                let mut ge = Vec::with_capacity(e.len());
                for plane in e.chunks(n) {
                    let mut acc = vec![0.0; n];
                    for axis in 0..3 {
                        let d: Vec<f64> = axis_gradient(plane, dims, axis)
                            .into_iter()
                            .map(|v| 2.0 * v * up / count)
                            .collect();
                        for (a, v) in acc.iter_mut().zip(axis_gradient_adjoint(&d, dims, axis)) {
                            *a += v;
                        }
                    }
                    ge.extend(acc);
                }
                vec![
                    ctx.needs[0].then(|| ge.iter().map(|&v| v as f32).collect()),
                    ctx.needs[1].then(|| ge.iter().map(|&v| -v as f32).collect()),
                ]
            }),
        ))
    }

    /// Root mean square over the nine first-derivative maps of a 3-channel
    /// field.
    pub fn jacobian_rms(&mut self, dvf: Var) -> Result<Var> {
        self.stencil_rms(dvf, "jacobian_rms", axis_gradient, axis_gradient_adjoint, 3)
    }

    /// Root mean square over the three per-component Laplacians of a
    /// 3-channel field.
    pub fn laplacian_rms(&mut self, dvf: Var) -> Result<Var> {
        self.stencil_rms(
            dvf,
            "laplacian_rms",
            axis_second_difference,
            axis_second_difference_adjoint,
            1,
        )
    }

    /// `maps_per_component == 3` keeps each axis derivative as its own map;
    /// `1` sums the axis stencils into a single map per component.
    fn stencil_rms(
        &mut self,
        dvf: Var,
        what: &str,
        op: fn(&[f64], [usize; 3], usize) -> Vec<f64>,
        adj: fn(&[f64], [usize; 3], usize) -> Vec<f64>,
        maps_per_component: usize,
    ) -> Result<Var> {
        let t = self.value(dvf);
        t.require_5d(what)?;
        if t.channels() != 3 {
            return Err(Error::Shape(format!(
                "{what} expects a 3-channel field, got {:?}",
                t.shape()
            )));
        }
        let dims = t.spatial();
        let n = t.voxels();
        let count = (t.numel() * maps_per_component) as f64;
        let maps = move |plane: &[f64]| -> Vec<Vec<f64>> {
            let per_axis: Vec<Vec<f64>> = (0..3).map(|a| op(plane, dims, a)).collect();
            if maps_per_component == 3 {
                per_axis
            } else {
                let mut sum = vec![0.0; plane.len()];
                for m in &per_axis {
                    for (s, v) in sum.iter_mut().zip(m) {
                        *s += v;
                    }
                }
                vec![sum]
            }
        };
        let data = to_f64(t.data());
        let mut sq = 0.0;
        for plane in data.chunks(n) {
            for m in maps(plane) {
                sq += m.iter().map(|v| v * v).sum::<f64>();
            }
        }
        let rms = (sq / count).sqrt();
        Ok(self.push_with_scalar(
            Tensor::scalar(rms as f32),
            Some(rms),
            &[dvf],
            Box::new(move |ctx| {
                let total = ctx.inputs[0].numel();
                if rms == 0.0 {
                    return vec![Some(vec![0.0; total])];
                }
                let scale = ctx.grad[0] as f64 / (count * rms);
                let data = to_f64(ctx.inputs[0].data());
                let mut g = Vec::with_capacity(total);
                for plane in data.chunks(n) {
                    let ms = maps(plane);
                    let mut acc = vec![0.0; n];
                    for a in 0..3 {
                        let m = &ms[if maps_per_component == 3 { a } else { 0 }];
                        let up: Vec<f64> = m.iter().map(|v| v * scale).collect();
                        for (s, v) in acc.iter_mut().zip(adj(&up, dims, a)) {
                            *s += v;
                        }
                    }
                    g.extend(acc);
                }
                vec![Some(to_f32(g))]
            }),
        ))
    }

    /// Mean binary cross-entropy of probabilities `p` against a constant
    /// label.
    pub fn bce(&mut self, p: Var, label: f32) -> Result<Var> {
        let t = self.value(p);
        if let Some(i) = t.data().iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument(format!(
                "bce input {} at index {i} is not a probability",
                t.data()[i]
            )));
        }
        let y = label as f64;
        let n = t.numel() as f64;
        let value = t
            .data()
            .iter()
            .map(|&v| {
                let q = (v as f64).clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                -(y * q.ln() + (1.0 - y) * (1.0 - q).ln())
            })
            .sum::<f64>()
            / n;
        Ok(self.push_with_scalar(
            Tensor::scalar(value as f32),
            Some(value),
            &[p],
            Box::new(move |ctx| {
                let up = ctx.grad[0] as f64 / n;
                let g = ctx.inputs[0]
                    .data()
                    .iter()
                    .map(|&v| {
                        let v = v as f64;
                        if !(BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&v) {
                            return 0.0;
                        }
                        (up * (-y / v + (1.0 - y) / (1.0 - v))) as f32
                    })
                    .collect();
                vec![Some(g)]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::check::{check_gradients, random_tensor};

    fn scalar_of(f: impl Fn(&mut Graph, &[Var]) -> Result<Var>, inputs: &[Tensor]) -> f64 {
        let mut g = Graph::new();
        let v: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &v).unwrap();
        g.scalar(out)
    }

    #[test]
    fn ncc_self_and_anti() {
        let x = random_tensor(vec![1, 2, 4, 4, 4], 1);
        assert_eq!(scalar_of(|g, v| g.ncc(v[0], v[0]), &[x.clone()]), 1.0);
        let neg = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| 3.0 - v).collect()).unwrap();
        let r = scalar_of(|g, v| g.ncc(v[0], v[1]), &[x, neg]);
        assert!((r + 1.0).abs() < 1e-12);
    }

    #[test]
    fn ncc_matches_direct_formula() {
        let a = random_tensor(vec![1, 1, 4, 4, 4], 2);
        let b = random_tensor(vec![1, 1, 4, 4, 4], 3);
        let (ma, mb) = (
            a.data().iter().map(|&v| v as f64).sum::<f64>() / 64.0,
            b.data().iter().map(|&v| v as f64).sum::<f64>() / 64.0,
        );
        let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
        for (&x, &y) in a.data().iter().zip(b.data()) {
            let (x, y) = (x as f64 - ma, y as f64 - mb);
            cov += x * y;
            va += x * x;
            vb += y * y;
        }
        let want = cov / (va.sqrt() * vb.sqrt());
        let got = scalar_of(|g, v| g.ncc(v[0], v[1]), &[a, b]);
        assert!((got - want).abs() < 1e-6);
    }

    #[test]
    fn ncc_affine_invariance() {
        let a = random_tensor(vec![1, 1, 4, 4, 4], 4);
        let b = random_tensor(vec![1, 1, 4, 4, 4], 5);
        let b2 = Tensor::new(b.shape().to_vec(), b.data().iter().map(|v| 2.5 * v - 7.0).collect()).unwrap();
        let r1 = scalar_of(|g, v| g.ncc(v[0], v[1]), &[a.clone(), b]);
        let r2 = scalar_of(|g, v| g.ncc(v[0], v[1]), &[a, b2]);
        assert!((r1 - r2).abs() < 1e-6);
    }

    #[test]
    fn ncc_constant_inputs_are_finite() {
        let c = Tensor::full(vec![1, 1, 3, 3, 3], 4.0);
        let r = scalar_of(|g, v| g.ncc(v[0], v[1]), &[c.clone(), c]);
        assert_eq!(r, 0.0);
    }

    #[test]
    fn gd_identities() {
        let x = random_tensor(vec![1, 1, 5, 4, 3], 6);
        let shifted = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v + 0.5).collect()).unwrap();
        assert_eq!(scalar_of(|g, v| g.gd(v[0], v[0]), &[x.clone()]), 0.0);
        assert!(scalar_of(|g, v| g.gd(v[0], v[1]), &[x, shifted]) < 1e-12);
    }

    #[test]
    fn gd_ramps() {
        let dims = [6, 3, 4];
        let ramp = |s: f32| {
            let mut d = Vec::new();
            for _z in 0..dims[2] {
                for _y in 0..dims[1] {
                    for x in 0..dims[0] {
                        d.push(s * x as f32);
                    }
                }
            }
            Tensor::from_grid(dims, d).unwrap()
        };
        // only the x term is nonzero: (1 - 3)² everywhere, borders included
        let got = scalar_of(|g, v| g.gd(v[0], v[1]), &[ramp(1.0), ramp(3.0)]);
        assert!((got - 4.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn reg_terms() {
        let dims = [5, 4, 6];
        let n = 120;
        let mut lin = vec![0.0f32; 3 * n];
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    lin[x + 5 * (y + 4 * z)] = x as f32;
                }
            }
        }
        let field = Tensor::new(vec![1, 3, 5, 4, 6], lin).unwrap();
        let j = scalar_of(|g, v| g.jacobian_rms(v[0]), &[field.clone()]);
        let l = scalar_of(|g, v| g.laplacian_rms(v[0]), &[field]);
        assert!((j - (1.0f64 / 9.0).sqrt()).abs() < 1e-12);
        assert_eq!(l, 0.0);

        let c = Tensor::full(vec![1, 3, 4, 4, 4], 2.0);
        assert_eq!(scalar_of(|g, v| g.jacobian_rms(v[0]), &[c.clone()]), 0.0);
        assert_eq!(scalar_of(|g, v| g.laplacian_rms(v[0]), &[c]), 0.0);
    }

    #[test]
    fn reg_homogeneity() {
        let f = random_tensor(vec![1, 3, 4, 5, 3], 7);
        let f2 = Tensor::new(f.shape().to_vec(), f.data().iter().map(|v| 2.0 * v).collect()).unwrap();
        for op in [Graph::jacobian_rms, Graph::laplacian_rms] {
            let a = scalar_of(|g, v| op(g, v[0]), &[f.clone()]);
            let b = scalar_of(|g, v| op(g, v[0]), &[f2.clone()]);
            assert_eq!(b, 2.0 * a);
        }
    }

    #[test]
    fn reg_rejects_wrong_channels() {
        let mut g = Graph::new();
        let v = g.input(Tensor::zeros(vec![1, 2, 3, 3, 3]));
        assert!(g.jacobian_rms(v).is_err());
        assert!(g.laplacian_rms(v).is_err());
    }

    #[test]
    fn bce_values() {
        let half = Tensor::full(vec![1, 1, 2, 2, 2], 0.5);
        let ln2 = std::f64::consts::LN_2;
        assert!((scalar_of(|g, v| g.bce(v[0], 1.0), &[half.clone()]) - ln2).abs() < 1e-12);
        assert!((scalar_of(|g, v| g.bce(v[0], 0.0), &[half]) - ln2).abs() < 1e-12);
        let p = Tensor::new(vec![3], vec![0.2, 0.7, 0.9]).unwrap();
        let want = -((0.2f32 as f64).ln() + (0.7f32 as f64).ln() + (0.9f32 as f64).ln()) / 3.0;
        assert!((scalar_of(|g, v| g.bce(v[0], 1.0), &[p]) - want).abs() < 1e-6);
        let mut g = Graph::new();
        let bad = g.input(Tensor::new(vec![2], vec![0.5, 1.5]).unwrap());
        assert!(g.bce(bad, 1.0).is_err());
        let nan = g.input(Tensor::new(vec![1], vec![f32::NAN]).unwrap());
        assert!(g.bce(nan, 1.0).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let a = random_tensor(vec![1, 2, 4, 4, 4], 8);
        let b = random_tensor(vec![1, 2, 4, 4, 4], 9);
        let f = random_tensor(vec![1, 3, 4, 5, 4], 10);
        let probs = Tensor::new(
            vec![1, 1, 4, 4, 4],
            random_tensor(vec![64], 11).data().iter().map(|v| 0.5 + 0.4 * v).collect(),
        )
        .unwrap();
        let cases: Vec<(&str, Vec<Tensor>, Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>)> = vec![
            ("ncc", vec![a.clone(), b.clone()], Box::new(|g, v| g.ncc(v[0], v[1]))),
            ("gd", vec![a, b], Box::new(|g, v| g.gd(v[0], v[1]))),
            ("jacobian_rms", vec![f.clone()], Box::new(|g, v| g.jacobian_rms(v[0]))),
            ("laplacian_rms", vec![f], Box::new(|g, v| g.laplacian_rms(v[0]))),
            ("bce1", vec![probs.clone()], Box::new(|g, v| g.bce(v[0], 1.0))),
            ("bce0", vec![probs], Box::new(|g, v| g.bce(v[0], 0.0))),
        ];
        for (name, inputs, f) in cases {
            let e = check_gradients(&inputs, 1e-3, 128, 0, f).unwrap();
            assert!(e.iter().all(|&e| e <= 1e-3), "{name}: {e:?}");
        }
    }
}
