use crate::error::{Error, Result};
use crate::nn::{Graph, Tensor, Var};

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

impl Graph {
    fn unary(
        &mut self,
        x: Var,
        f: impl Fn(f32) -> f32,
        // derivative from (input, output)
        df: impl Fn(f32, f32) -> f32 + 'static,
    ) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(
            out,
            &[x],
            Box::new(move |ctx| {
                let g = ctx
                    .inputs[0]
                    .data()
                    .iter()
                    .zip(ctx.output.data())
                    .zip(ctx.grad)
                    .map(|((&i, &o), &g)| g * df(i, o))
                    .collect();
                vec![Some(g)]
            }),
        )
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f32) -> Var {
        self.unary(
            x,
            move |v| if v > 0.0 { v } else { slope * v },
            move |i, _| if i > 0.0 { 1.0 } else { slope },
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, 0.0)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |v| (1.0 / (1.0 + (-(v as f64)).exp())) as f32,
            |_, o| o * (1.0 - o),
        )
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f32::tanh, |_, o| 1.0 - o * o)
    }

    /// `s·x + c`.
    pub fn affine(&mut self, x: Var, s: f32, c: f32) -> Var {
        let scalar = self
            .scalar_opt(x)
            .map(|v| s as f64 * v + c as f64);
        let t = self.value(x);
        let data = t.data().iter().map(|&v| s * v + c).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push_with_scalar(
            out,
            scalar,
            &[x],
            Box::new(move |ctx| vec![Some(ctx.grad.iter().map(|&g| g * s).collect())]),
        )
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Var {
        self.affine(x, s, 0.0)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "add")?;
        let scalar = self.scalar_opt(a).zip(self.scalar_opt(b)).map(|(x, y)| x + y);
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push_with_scalar(
            out,
            scalar,
            &[a, b],
            Box::new(|ctx| {
                vec![
                    ctx.needs[0].then(|| ctx.grad.to_vec()),
                    ctx.needs[1].then(|| ctx.grad.to_vec()),
                ]
            }),
        ))
    }

    /// Σ wᵢ·xᵢ over scalar or same-shape terms.
    pub fn weighted_sum(&mut self, terms: &[(Var, f32)]) -> Result<Var> {
        let (&(first, w0), rest) = terms
            .split_first()
            .ok_or_else(|| Error::InvalidArgument("weighted_sum of nothing".into()))?;
        let mut acc = self.scale(first, w0);
        for &(v, w) in rest {
            let s = self.scale(v, w);
            acc = self.add(acc, s)?;
        }
        Ok(acc)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(
            out,
            &[a, b],
            Box::new(|ctx| {
                let (a, b) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                vec![
                    ctx.needs[0].then(|| ctx.grad.iter().zip(b).map(|(g, y)| g * y).collect()),
                    ctx.needs[1].then(|| ctx.grad.iter().zip(a).map(|(g, x)| g * x).collect()),
                ]
            }),
        ))
    }

    /// Multiply every channel of `x` by the single-channel map `a`.
    pub fn mul_channels(&mut self, x: Var, a: Var) -> Result<Var> {
        let (xt, at) = (self.value(x), self.value(a));
        xt.require_5d("mul_channels")?;
        at.require_5d("mul_channels")?;
        if at.channels() != 1 || at.batch() != xt.batch() || at.spatial() != xt.spatial() {
            return Err(Error::Shape(format!(
                "mul_channels: map {:?} does not broadcast over {:?}",
                at.shape(),
                xt.shape()
            )));
        }
        let (c, n) = (xt.channels(), xt.voxels());
        let mut data = xt.data().to_vec();
        for (b, plane) in data.chunks_mut(c * n).enumerate() {
            let m = &at.data()[b * n..][..n];
            for ch in plane.chunks_mut(n) {
                for (v, w) in ch.iter_mut().zip(m) {
                    *v *= w;
                }
            }
        }
        let out = Tensor::new(xt.shape().to_vec(), data)?;
        Ok(self.push(
            out,
            &[x, a],
            Box::new(move |ctx| {
                let (xd, ad) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                let gx = ctx.needs[0].then(|| {
                    let mut g = ctx.grad.to_vec();
                    for (b, plane) in g.chunks_mut(c * n).enumerate() {
                        let m = &ad[b * n..][..n];
                        for ch in plane.chunks_mut(n) {
                            for (v, w) in ch.iter_mut().zip(m) {
                                *v *= w;
                            }
                        }
                    }
                    g
                });
                let ga = ctx.needs[1].then(|| {
                    let mut g = vec![0.0f64; ad.len()];
                    for (b, gb) in g.chunks_mut(n).enumerate() {
                        for ch in 0..c {
                            let off = (b * c + ch) * n;
                            for (i, acc) in gb.iter_mut().enumerate() {
                                *acc += ctx.grad[off + i] as f64 * xd[off + i] as f64;
                            }
                        }
                    }
                    g.into_iter().map(|v| v as f32).collect()
                });
                vec![gx, ga]
            }),
        ))
    }

    /// Multiply channel `c` by `scales[c]`.
    pub fn scale_channels(&mut self, x: Var, scales: &[f32]) -> Result<Var> {
        let xt = self.value(x);
        xt.require_5d("scale_channels")?;
        if scales.len() != xt.channels() {
            return Err(Error::Shape(format!(
                "{} scales for {} channels",
                scales.len(),
                xt.channels()
            )));
        }
        let n = xt.voxels();
        let scales = scales.to_vec();
        let apply = {
            let scales = scales.clone();
            move |d: &mut [f32]| {
                for (k, ch) in d.chunks_mut(n).enumerate() {
                    let s = scales[k % scales.len()];
                    for v in ch {
                        *v *= s;
                    }
                }
            }
        };
        let mut data = xt.data().to_vec();
        apply(&mut data);
        let out = Tensor::new(xt.shape().to_vec(), data)?;
        Ok(self.push(
            out,
            &[x],
            Box::new(move |ctx| {
                let mut g = ctx.grad.to_vec();
                apply(&mut g);
                vec![Some(g)]
            }),
        ))
    }

    /// Concatenate along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(parts[0]);
        first.require_5d("concat_channels")?;
        let (nb, sp) = (first.batch(), first.spatial());
        let mut chans = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            t.require_5d("concat_channels")?;
            if t.batch() != nb || t.spatial() != sp {
                return Err(Error::Shape(format!(
                    "concat_channels: {:?} vs {:?}",
                    t.shape(),
                    first.shape()
                )));
            }
            chans.push(t.channels());
        }
        let n = sp[0] * sp[1] * sp[2];
        let total: usize = chans.iter().sum();
        let mut data = Vec::with_capacity(nb * total * n);
        for b in 0..nb {
            for (&p, &c) in parts.iter().zip(&chans) {
                data.extend_from_slice(&self.value(p).data()[b * c * n..][..c * n]);
            }
        }
        let out = Tensor::new(vec![nb, total, sp[0], sp[1], sp[2]], data)?;
        Ok(self.push(
            out,
            parts,
            Box::new(move |ctx| {
                let mut grads: Vec<Vec<f32>> =
                    chans.iter().map(|&c| Vec::with_capacity(nb * c * n)).collect();
                let mut off = 0;
                for _ in 0..nb {
                    for (g, &c) in grads.iter_mut().zip(&chans) {
                        g.extend_from_slice(&ctx.grad[off..off + c * n]);
                        off += c * n;
                    }
                }
                grads
                    .into_iter()
                    .zip(&ctx.needs)
                    .map(|(g, &need)| need.then_some(g))
                    .collect()
            }),
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        let n = self.value(x).numel();
        self.push_with_scalar(
            Tensor::scalar(total as f32),
            Some(total),
            &[x],
            Box::new(move |ctx| vec![Some(vec![ctx.grad[0]; n])]),
        )
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let total: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        let m = total / n as f64;
        self.push_with_scalar(
            Tensor::scalar(m as f32),
            Some(m),
            &[x],
            Box::new(move |ctx| vec![Some(vec![(ctx.grad[0] as f64 / n as f64) as f32; n])]),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::check::{check_gradients, random_tensor};

    fn eval(f: impl Fn(&mut Graph, Var) -> Var, v: f32) -> f32 {
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(v));
        let y = f(&mut g, x);
        g.value(y).item()
    }

    #[test]
    fn activation_origins() {
        assert_eq!(eval(|g, x| g.leaky_relu(x, 0.2), 0.0), 0.0);
        assert_eq!(eval(|g, x| g.sigmoid(x), 0.0), 0.5);
        assert_eq!(eval(|g, x| g.tanh(x), 0.0), 0.0);
        assert_eq!(eval(|g, x| g.leaky_relu(x, 0.2), -1.0), -0.2);
        assert_eq!(eval(|g, x| g.relu(x), -3.0), 0.0);
    }

    #[test]
    fn linear_form_gradient_is_exact() {
        let x = random_tensor(vec![2, 3, 4], 1);
        let mut g = Graph::new();
        let w = g.param(random_tensor(vec![2, 3, 4], 2));
        let xv = g.input(x.clone());
        let p = g.mul(w, xv).unwrap();
        let loss = g.sum(p);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap(), x.data());
        assert!(g.grad(xv).is_none());
    }

    #[test]
    fn quadratic_gradient_is_exact() {
        let w0 = random_tensor(vec![10], 3);
        let mut g = Graph::new();
        let w = g.param(w0.clone());
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        let want: Vec<f32> = w0.data().iter().map(|v| 2.0 * v).collect();
        assert_eq!(g.grad(w).unwrap(), want.as_slice());
    }

    #[test]
    fn repeated_backward_accumulates_until_zeroed() {
        let mut g = Graph::new();
        let w = g.param(Tensor::new(vec![2], vec![1.0, -2.0]).unwrap());
        let loss = g.sum(w);
        g.backward(loss).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[2.0, 2.0]);
        g.zero_grad();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn backward_needs_scalar() {
        let mut g = Graph::new();
        let w = g.param(Tensor::zeros(vec![3]));
        let y = g.tanh(w);
        assert!(g.backward(y).is_err());
    }

    #[test]
    fn activation_gradients() {
        let x = [random_tensor(vec![1, 2, 4, 4, 4], 5)];
        let cases: Vec<(&str, Box<dyn Fn(&mut Graph, Var) -> Var>)> = vec![
            ("leaky_relu", Box::new(|g, v| g.leaky_relu(v, 0.2))),
            ("relu", Box::new(|g, v| g.relu(v))),
            ("sigmoid", Box::new(|g, v| g.sigmoid(v))),
            ("tanh", Box::new(|g, v| g.tanh(v))),
        ];
        for (name, f) in cases {
            let e = check_gradients(&x, 1e-3, 128, 1, |g, v| Ok(f(g, v[0]))).unwrap();
            assert!(e[0] <= 1e-3, "{name}: {e:?}");
        }
    }

    #[test]
    fn structural_gradients() {
        let a = random_tensor(vec![1, 2, 3, 4, 2], 6);
        let b = random_tensor(vec![1, 3, 3, 4, 2], 7);
        let m = random_tensor(vec![1, 1, 3, 4, 2], 8);
        let e = check_gradients(&[a.clone(), b.clone()], 1e-3, 64, 2, |g, v| {
            g.concat_channels(&[v[0], v[1]])
        })
        .unwrap();
        assert!(e.iter().all(|&e| e <= 1e-3), "{e:?}");
        let e = check_gradients(&[b, m], 1e-3, 64, 3, |g, v| g.mul_channels(v[0], v[1])).unwrap();
        assert!(e.iter().all(|&e| e <= 1e-3), "{e:?}");
        let e = check_gradients(&[a], 1e-3, 64, 4, |g, v| {
            let s = g.scale_channels(v[0], &[2.0, -0.5])?;
            let t = g.affine(s, 3.0, 1.0);
            Ok(g.mean(t))
        })
        .unwrap();
        assert!(e[0] <= 1e-3, "{e:?}");
    }

    #[test]
    fn scalar_sums_keep_full_precision() {
        let mut g = Graph::new();
        let a = g.input(Tensor::scalar(1.0));
        let b = g.input(Tensor::new(vec![1], vec![1e-9]).unwrap());
        let b = g.sum(b);
        let s = g.weighted_sum(&[(a, 1.0), (b, 1.0)]).unwrap();
        assert_eq!(g.value(s).item(), 1.0);
        assert!((g.scalar(s) - (1.0 + 1e-9f32 as f64)).abs() < 1e-15);
    }
}
