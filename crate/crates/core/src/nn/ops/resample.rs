use crate::error::{Error, Result};
use crate::nn::{Graph, Tensor, Var};
use crate::transform::{
    resample_channel, resample_channel_adjoint, trilinear_adjoint, trilinear_with_grad, warp_scalar,
};

impl Graph {
    /// Half-pixel aligned trilinear resampling to `dims`, optionally multiplying
    /// channel `c` by `scales[c]` (used to keep displacements in voxel units).
    pub fn upsample(&mut self, x: Var, dims: [usize; 3], scales: Option<&[f32]>) -> Result<Var> {
        let t = self.value(x);
        t.require_5d("upsample")?;
        let (nb, c, src) = (t.batch(), t.channels(), t.spatial());
        let scales: Vec<f64> = match scales {
            Some(s) if s.len() == c => s.iter().map(|&v| v as f64).collect(),
            Some(s) => {
                return Err(Error::Shape(format!("{} scales for {c} channels", s.len())));
            }
            None => vec![1.0; c],
        };
        let n_src = t.voxels();
        let n_dst = dims[0] * dims[1] * dims[2];
        let mut data = Vec::with_capacity(nb * c * n_dst);
        for (k, plane) in t.data().chunks(n_src).enumerate() {
            let s = scales[k % c];
            data.extend(resample_channel(plane, src, dims).into_iter().map(|v| (v * s) as f32));
        }
        let out = Tensor::new(vec![nb, c, dims[0], dims[1], dims[2]], data)?;
        Ok(self.push(
            out,
            &[x],
            Box::new(move |ctx| {
                let mut g = Vec::with_capacity(nb * c * n_src);
                for (k, plane) in ctx.grad.chunks(n_dst).enumerate() {
                    let s = scales[k % c];
                    g.extend(
                        resample_channel_adjoint(plane, src, dims)
                            .into_iter()
                            .map(|v| (v * s) as f32),
                    );
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Spatial transformer: `out(p) = img(p + dvf(p))` with trilinear
    /// sampling and edge clamping. `img` is `[1, 1, ...]`, `dvf` `[1, 3, ...]`
    /// in voxel units.
    pub fn warp(&mut self, img: Var, dvf: Var) -> Result<Var> {
        let (it, dt) = (self.value(img), self.value(dvf));
        it.require_5d("warp")?;
        dt.require_5d("warp")?;
        if it.batch() != 1 || it.channels() != 1 || dt.batch() != 1 || dt.channels() != 3 {
            return Err(Error::Shape(format!(
                "warp expects [1,1,..] image and [1,3,..] field, got {:?} and {:?}",
                it.shape(),
                dt.shape()
            )));
        }
        if it.spatial() != dt.spatial() {
            return Err(Error::DimMismatch(format!(
                "image {:?} vs field {:?}",
                it.spatial(),
                dt.spatial()
            )));
        }
        let dims = it.spatial();
        let out = Tensor::new(it.shape().to_vec(), warp_scalar(it.data(), dims, dt.data()))?;
        Ok(self.push(
            out,
            &[img, dvf],
            Box::new(move |ctx| {
                let (src, field) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                let n = src.len();
                let mut gimg = ctx.needs[0].then(|| vec![0.0f64; n]);
                let mut gdvf = ctx.needs[1].then(|| vec![0.0f32; 3 * n]);
                let mut i = 0;
                for z in 0..dims[2] {
                    for y in 0..dims[1] {
                        for x in 0..dims[0] {
                            let g = ctx.grad[i] as f64;
                            let pos = [
                                x as f64 + field[i] as f64,
                                y as f64 + field[n + i] as f64,
                                z as f64 + field[2 * n + i] as f64,
                            ];
                            if let Some(gd) = gdvf.as_mut() {
                                let (_, d) = trilinear_with_grad(src, dims, pos);
                                for c in 0..3 {
                                    gd[c * n + i] = (g * d[c]) as f32;
                                }
                            }
                            if let Some(gi) = gimg.as_mut() {
                                trilinear_adjoint(gi, dims, pos, g);
                            }
                            i += 1;
                        }
                    }
                }
                vec![
                    gimg.map(|v| v.into_iter().map(|x| x as f32).collect()),
                    gdvf,
                ]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::check::{check_gradients, random_tensor};
    use crate::transform::{upsample_dvf, warp, Dvf};
    use crate::volume::Volume;

    #[test]
    fn upsample_matches_dvf_upsampling() {
        let low = random_tensor(vec![1, 3, 2, 3, 2], 1);
        let dims = [8, 6, 4];
        let mut g = Graph::new();
        let x = g.input(low.clone());
        let ratios = [4.0, 2.0, 2.0];
        let y = g.upsample(x, dims, Some(&ratios)).unwrap();
        let want = upsample_dvf(&Dvf::from_data([2, 3, 2], low.into_data()).unwrap(), dims).unwrap();
        assert_eq!(g.value(y).data(), want.data());
    }

    #[test]
    fn warp_matches_transform_warp() {
        let img = random_tensor(vec![1, 1, 5, 4, 6], 2);
        let field = random_tensor(vec![1, 3, 5, 4, 6], 3);
        let mut g = Graph::new();
        let (iv, fv) = (g.input(img.clone()), g.input(field.clone()));
        let y = g.warp(iv, fv).unwrap();
        let vol = Volume::new([5, 4, 6], [1.0; 3], img.into_data()).unwrap();
        let dvf = Dvf::from_data([5, 4, 6], field.into_data()).unwrap();
        assert_eq!(g.value(y).data(), warp(&vol, &dvf).unwrap().voxels());
    }

    #[test]
    fn upsample_gradients() {
        let e = check_gradients(&[random_tensor(vec![1, 2, 2, 3, 2], 4)], 1e-3, 64, 0, |g, v| {
            g.upsample(v[0], [4, 6, 5], Some(&[1.5, -2.0]))
        })
        .unwrap();
        assert!(e[0] <= 1e-3, "{e:?}");
    }

    #[test]
    fn warp_gradients() {
        let img = random_tensor(vec![1, 1, 5, 5, 5], 5);
        let field = random_tensor(vec![1, 3, 5, 5, 5], 6);
        let e = check_gradients(&[img, field], 1e-3, 96, 0, |g, v| g.warp(v[0], v[1])).unwrap();
        assert!(e.iter().all(|&e| e <= 1e-3), "{e:?}");
    }
}
