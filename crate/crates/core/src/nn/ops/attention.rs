use crate::error::{Error, Result};
use crate::nn::{ConvSpec, Graph, Var};

/// Parameters of an additive attention gate, all 1×1×1 convolutions.
#[derive(Debug, Clone, Copy)]
pub struct GateVars {
    /// `[inter, x_channels, 1, 1, 1]`
    pub wx: Var,
    /// `[inter, g_channels, 1, 1, 1]`
    pub wg: Var,
    /// `[inter]`
    pub bias: Var,
    /// `[1, inter, 1, 1, 1]`
    pub psi_w: Var,
    /// `[1]`
    pub psi_b: Var,
}

impl Graph {
    /// `x ⊙ sigmoid(psi(relu(Wx·x + Wg·g + b)))`, with `g` brought to the
    /// spatial grid of `x` by trilinear resampling.
    pub fn attention_gate(&mut self, x: Var, g: Var, p: &GateVars) -> Result<Var> {
        let (xs, gs) = (self.value(x).shape().to_vec(), self.value(g).shape().to_vec());
        let wx = self.value(p.wx).shape().to_vec();
        let wg = self.value(p.wg).shape().to_vec();
        let psi = self.value(p.psi_w).shape().to_vec();
        if xs.len() != 5 || gs.len() != 5 || wx.len() != 5 || wg.len() != 5 || psi.len() != 5 {
            return Err(Error::Shape("attention_gate expects 5-D tensors".into()));
        }
        let inter = wx[0];
        if wx[1] != xs[1] || wg[1] != gs[1] || wg[0] != inter || psi[1] != inter || psi[0] != 1 {
            return Err(Error::Shape(format!(
                "attention_gate channel mismatch: x {:?}, g {:?}, Wx {wx:?}, Wg {wg:?}, psi {psi:?}",
                xs, gs
            )));
        }
        let theta = self.conv3d(x, p.wx, None, ConvSpec::same(xs[1], inter, 1))?;
        let mut phi = self.conv3d(g, p.wg, Some(p.bias), ConvSpec::same(gs[1], inter, 1))?;
        let target = [xs[2], xs[3], xs[4]];
        if self.value(phi).spatial() != target {
            phi = self.upsample(phi, target, None)?;
        }
        let sum = self.add(theta, phi)?;
        let act = self.relu(sum);
        let logits = self.conv3d(act, p.psi_w, Some(p.psi_b), ConvSpec::same(inter, 1, 1))?;
        let alpha = self.sigmoid(logits);
        self.mul_channels(x, alpha)
    }
}
