//! Training objectives, built on the autodiff graph.
//!
//! ```text
//! total = α·SIM(I_d, I_t) + β·ADV(I_d) + γ·R(u)
//! SIM   = [1 − NCC(MIND(I_d), MIND(I_t))] + δ·GD(MIND(I_d), MIND(I_t))
//! R     = μ1·rms(∇u) + μ2·rms(∇²u)
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mind::MindConfig;
use crate::nn::{Graph, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f32,
    pub beta: f32,
    pub gamma: f32,
    pub delta: f32,
    pub mu1: f32,
    pub mu2: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 200.0,
            beta: 1.0,
            gamma: 10.0,
            delta: 5.0,
            mu1: 1.0,
            mu2: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.beta, self.gamma, self.delta, self.mu1, self.mu2];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "loss weights must be finite and non-negative: {self:?}"
            )));
        }
        Ok(())
    }
}

/// `[1 − ncc(mind(d), mind(t))] + delta·gd(mind(d), mind(t))`.
pub fn sim_loss(g: &mut Graph, deformed: Var, target: Var, delta: f32, mind: &MindConfig) -> Result<Var> {
    let md = g.mind(deformed, mind)?;
    let mt = g.mind(target, mind)?;
    let corr = g.ncc(md, mt)?;
    let dissim = g.affine(corr, -1.0, 1.0);
    let grad_diff = g.gd(md, mt)?;
    g.weighted_sum(&[(dissim, 1.0), (grad_diff, delta)])
}

/// `mu1·rms(Jacobian) + mu2·rms(Laplacian)` of a `[1, 3, ...]` field.
pub fn reg_loss(g: &mut Graph, dvf: Var, mu1: f32, mu2: f32) -> Result<Var> {
    let first = g.jacobian_rms(dvf)?;
    let second = g.laplacian_rms(dvf)?;
    g.weighted_sum(&[(first, mu1), (second, mu2)])
}

/// Non-saturating generator term: BCE of the deformed-image output against 1.
pub fn adv_generator_loss(g: &mut Graph, disc_on_deformed: Var) -> Result<Var> {
    g.bce(disc_on_deformed, 1.0)
}

/// Mean of BCE(target output, 1) and BCE(deformed output, 0).
pub fn adv_discriminator_loss(g: &mut Graph, disc_on_deformed: Var, disc_on_target: Var) -> Result<Var> {
    let real = g.bce(disc_on_target, 1.0)?;
    let fake = g.bce(disc_on_deformed, 0.0)?;
    g.weighted_sum(&[(real, 0.5), (fake, 0.5)])
}

/// Scalar nodes of the generator objective.
#[derive(Debug, Clone, Copy)]
pub struct GeneratorLoss {
    pub total: Var,
    pub sim: Var,
    pub adv: Var,
    pub reg: Var,
}

pub fn total_generator_loss(
    g: &mut Graph,
    deformed: Var,
    target: Var,
    dvf: Var,
    disc_out: Var,
    weights: &LossWeights,
    mind: &MindConfig,
) -> Result<GeneratorLoss> {
    let sim = sim_loss(g, deformed, target, weights.delta, mind)?;
    let adv = adv_generator_loss(g, disc_out)?;
    let reg = reg_loss(g, dvf, weights.mu1, weights.mu2)?;
    let total = g.weighted_sum(&[(sim, weights.alpha), (adv, weights.beta), (reg, weights.gamma)])?;
    Ok(GeneratorLoss {
        total,
        sim,
        adv,
        reg,
    })
}
