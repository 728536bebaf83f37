//! Central finite-difference gradient checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Uniform values in [-1, 1).
pub fn random_tensor(shape: Vec<usize>, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    Tensor::new(shape, data).expect("shape and data agree")
}

fn projection(g: &Graph, out: Var, weights: &[f32]) -> f64 {
    let v = g.value(out);
    if v.is_scalar() {
        return g.scalar(out) * weights[0] as f64;
    }
    v.data()
        .iter()
        .zip(weights)
        .map(|(&a, &w)| a as f64 * w as f64)
        .sum()
}

/// Compares analytic gradients of `build` against central differences with
/// step `h`. Non-scalar outputs are projected onto a fixed random direction.
/// At most `probes` elements per input are perturbed. Returns one relative
/// error `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` per input
/// (absolute error when both norms are below 1e-6).
pub fn check_gradients<F>(
    inputs: &[Tensor],
    h: f32,
    probes: usize,
    seed: u64,
    build: F,
) -> Result<Vec<f64>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let n_out = g.value(out).numel();
    let weights = if n_out == 1 {
        vec![1.0]
    } else {
        random_tensor(vec![n_out], seed ^ 0x5eed).into_data()
    };
    g.backward_with(out, weights.clone())?;
    let analytic: Vec<Vec<f32>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f32]>::to_vec))
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        Ok(projection(&g, out, &weights))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut errors = Vec::with_capacity(inputs.len());
    for (k, t) in inputs.iter().enumerate() {
        let idx: Vec<usize> = if t.numel() <= probes {
            (0..t.numel()).collect()
        } else {
            rand::seq::index::sample(&mut rng, t.numel(), probes).into_vec()
        };
        let mut diff = 0.0f64;
        let mut norm_a = 0.0f64;
        let mut norm_n = 0.0f64;
        let mut work = inputs.to_vec();
        for &i in &idx {
            let orig = t.data()[i];
            work[k].data_mut()[i] = orig + h;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = orig - h;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let step = (orig + h) as f64 - (orig - h) as f64;
            let numeric = (plus - minus) / step;
            let a = analytic[k][i] as f64;
            diff += (a - numeric).powi(2);
            norm_a += a * a;
            norm_n += numeric * numeric;
        }
        let scale = norm_a.sqrt().max(norm_n.sqrt());
        errors.push(if scale < 1e-6 {
            diff.sqrt()
        } else {
            diff.sqrt() / scale
        });
    }
    Ok(errors)
}
