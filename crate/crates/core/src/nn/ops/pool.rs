use crate::error::{Error, Result};
use crate::nn::{Graph, Tensor, Var};

impl Graph {
    /// 2×2×2 max pooling with stride 2. Backward routes each gradient to the
    /// first maximum in scan order (x fastest).
    pub fn maxpool3d(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        t.require_5d("maxpool3d")?;
        let d = t.spatial();
        if d.iter().any(|&v| v % 2 != 0) {
            return Err(Error::Shape(format!(
                "maxpool3d needs even spatial dims, got {d:?}"
            )));
        }
        let od = [d[0] / 2, d[1] / 2, d[2] / 2];
        let planes = t.batch() * t.channels();
        let n_in = d[0] * d[1] * d[2];
        let n_out = od[0] * od[1] * od[2];
        let mut out = Vec::with_capacity(planes * n_out);
        let mut arg = Vec::with_capacity(planes * n_out);
        for p in 0..planes {
            let src = &t.data()[p * n_in..][..n_in];
            for z in 0..od[2] {
                for y in 0..od[1] {
                    for x in 0..od[0] {
                        let mut best = f32::NEG_INFINITY;
                        let mut at = usize::MAX;
                        for dz in 0..2 {
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    let i = 2 * x + dx + d[0] * (2 * y + dy + d[1] * (2 * z + dz));
                                    if at == usize::MAX || src[i] > best {
                                        best = src[i];
                                        at = i;
                                    }
                                }
                            }
                        }
                        out.push(best);
                        arg.push((p * n_in + at) as u32);
                    }
                }
            }
        }
        let shape = vec![t.batch(), t.channels(), od[0], od[1], od[2]];
        let total = t.numel();
        Ok(self.push(
            Tensor::new(shape, out)?,
            &[x],
            Box::new(move |ctx| {
                let mut g = vec![0.0f32; total];
                for (&a, &v) in arg.iter().zip(ctx.grad) {
                    g[a as usize] += v;
                }
                vec![Some(g)]
            }),
        ))
    }
}
