//! Generator and discriminator networks shared by the global and local stages.
//!
//! Generator: moving and target are stacked into two channels and encoded by
//! four convolution blocks separated by 2×2×2 max pooling. Two attention gates
//! sit across the second and third pooling boundaries: each gates the
//! shallower feature map with the deeper one, and the gated map is pooled and
//! concatenated onto the deeper block's output. A 3-channel head at 1/8
//! resolution produces a tanh-bounded displacement that is trilinearly
//! upsampled back to the input grid.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{container_paths, write_atomic};
use crate::nn::{ConvSpec, GateVars, Graph, ParamSet, Tensor, Var};

/// Network inputs are HU scaled by 2⁻¹⁰, which is exact in binary floating
/// point.
pub const HU_SCALE: f32 = 1.0 / 1024.0;
/// Total spatial reduction of the generator encoder.
pub const GENERATOR_REDUCTION: usize = 8;
/// Total spatial reduction of the discriminator.
pub const DISCRIMINATOR_REDUCTION: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Global,
    Local,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Global => "global",
            Stage::Local => "local",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Stage::Global => 0,
            Stage::Local => 1,
        }
    }
}

/// Layer plan for both networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchSpec {
    pub block_convs: [usize; 4],
    pub block_channels: [usize; 4],
    pub kernel: usize,
    /// Intermediate channels of the two attention gates.
    pub gate_channels: [usize; 2],
    pub head_kernel: usize,
    pub disc_channels: [usize; 3],
    pub leaky_slope: f32,
}

impl Default for ArchSpec {
    fn default() -> Self {
        Self {
            block_convs: [2, 3, 3, 3],
            block_channels: [16, 32, 64, 64],
            kernel: 3,
            gate_channels: [16, 32],
            head_kernel: 3,
            disc_channels: [16, 32, 64],
            leaky_slope: 0.2,
        }
    }
}

impl ArchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.block_convs.iter().any(|&n| n == 0)
            || self.block_channels.iter().any(|&c| c == 0)
            || self.gate_channels.iter().any(|&c| c == 0)
            || self.disc_channels.iter().any(|&c| c == 0)
        {
            return Err(Error::InvalidArgument(format!("degenerate architecture {self:?}")));
        }
        if self.kernel % 2 == 0 || self.head_kernel % 2 == 0 {
            return Err(Error::InvalidArgument("kernel sizes must be odd".into()));
        }
        if !(self.leaky_slope >= 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "leaky slope {} outside [0, 1)",
                self.leaky_slope
            )));
        }
        Ok(())
    }

    pub fn conv_count(&self) -> usize {
        self.block_convs.iter().sum()
    }

    /// Input channels of block `b` (after any gated concatenation).
    fn block_input(&self, b: usize) -> usize {
        match b {
            0 => 2,
            1 => self.block_channels[0],
            2 => self.block_channels[1],
            _ => self.block_channels[2] + self.block_channels[1],
        }
    }

    fn head_input(&self) -> usize {
        self.block_channels[3] + self.block_channels[2]
    }

    /// Every generator convolution as (parameter prefix, spec).
    fn generator_convs(&self) -> Vec<(String, ConvSpec)> {
        let mut out = Vec::new();
        for b in 0..4 {
            for i in 0..self.block_convs[b] {
                let cin = if i == 0 { self.block_input(b) } else { self.block_channels[b] };
                out.push((
                    format!("enc{}.{}", b + 1, i),
                    ConvSpec::same(cin, self.block_channels[b], self.kernel),
                ));
            }
        }
        out
    }

    /// (x channels, g channels, intermediate) for gates across pooling
    /// boundaries 2 and 3.
    fn gates(&self) -> [(usize, usize, usize); 2] {
        [
            (self.block_channels[1], self.block_channels[2], self.gate_channels[0]),
            (self.block_channels[2], self.block_channels[3], self.gate_channels[1]),
        ]
    }

    fn head(&self) -> ConvSpec {
        ConvSpec::same(self.head_input(), 3, self.head_kernel)
    }

    fn disc_convs(&self) -> Vec<ConvSpec> {
        let chans = [
            1,
            self.disc_channels[0],
            self.disc_channels[1],
            self.disc_channels[2],
            1,
        ];
        (0..4)
            .map(|i| ConvSpec {
                in_channels: chans[i],
                out_channels: chans[i + 1],
                kernel: [3; 3],
                stride: 2,
                padding: 1,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct NetMeta {
    network: String,
    stage: Stage,
    arch: ArchSpec,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_disp: Option<f32>,
}

fn he_uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt() as f32;
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("shape and data agree")
}

fn check_params(set: &ParamSet, expected: &[(String, Vec<usize>)]) -> Result<()> {
    if set.len() != expected.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, found {}",
            expected.len(),
            set.len()
        )));
    }
    for (name, shape) in expected {
        let t = set.require(name)?;
        if t.shape() != shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "tensor {name:?} has shape {:?}, expected {shape:?}",
                t.shape()
            )));
        }
    }
    Ok(())
}

fn save_net(path: &Path, meta: &NetMeta, params: &ParamSet) -> Result<()> {
    params.save(path)?;
    write_atomic(&meta_path(path), serde_json::to_string_pretty(meta)?.as_bytes())
}

fn load_meta(path: &Path) -> Result<NetMeta> {
    let p = meta_path(path);
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", p.display())))
}

/// `<stem>.arch.json` beside the parameter manifest.
pub fn meta_path(path: &Path) -> std::path::PathBuf {
    let (manifest, _) = container_paths(path);
    manifest.with_extension("arch.json")
}

/// Parameters bound into a graph, in [`ParamSet`] order.
#[derive(Debug, Clone)]
pub struct Binding {
    names: Vec<String>,
    pub vars: Vec<Var>,
}

impl Binding {
    fn bind(g: &mut Graph, set: &ParamSet, trainable: bool) -> Self {
        let mut names = Vec::with_capacity(set.len());
        let mut vars = Vec::with_capacity(set.len());
        for (name, t) in set.iter() {
            names.push(name.to_string());
            vars.push(if trainable {
                g.param(t.clone())
            } else {
                g.input(t.clone())
            });
        }
        Self { names, vars }
    }

    fn var(&self, name: &str) -> Var {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("parameter {name:?} validated at construction"));
        self.vars[i]
    }

    fn gate(&self, prefix: &str) -> GateVars {
        GateVars {
            wx: self.var(&format!("{prefix}.wx")),
            wg: self.var(&format!("{prefix}.wg")),
            bias: self.var(&format!("{prefix}.bias")),
            psi_w: self.var(&format!("{prefix}.psi_w")),
            psi_b: self.var(&format!("{prefix}.psi_b")),
        }
    }

    /// Gradients in parameter order (zeros where none reached a tensor).
    pub fn grads(&self, g: &Graph) -> Vec<Vec<f32>> {
        self.vars
            .iter()
            .map(|&v| {
                g.grad(v)
                    .map_or_else(|| vec![0.0; g.value(v).numel()], <[f32]>::to_vec)
            })
            .collect()
    }
}

fn single_channel(g: &Graph, v: Var, what: &str) -> Result<[usize; 3]> {
    let s = g.value(v).shape();
    if s.len() != 5 || s[0] != 1 || s[1] != 1 {
        return Err(Error::Shape(format!(
            "{what} expects a [1, 1, x, y, z] image, got {s:?}"
        )));
    }
    Ok([s[2], s[3], s[4]])
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorParams {
    pub stage: Stage,
    pub arch: ArchSpec,
    pub max_disp: f32,
    pub params: ParamSet,
}

impl GeneratorParams {
    fn expected(arch: &ArchSpec) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (name, spec) in arch.generator_convs() {
            out.push((format!("{name}.w"), spec.weight_shape()));
            out.push((format!("{name}.b"), vec![spec.out_channels]));
        }
        for (k, (cx, cg, ci)) in arch.gates().into_iter().enumerate() {
            let p = format!("gate{}", k + 2);
            out.push((format!("{p}.wx"), vec![ci, cx, 1, 1, 1]));
            out.push((format!("{p}.wg"), vec![ci, cg, 1, 1, 1]));
            out.push((format!("{p}.bias"), vec![ci]));
            out.push((format!("{p}.psi_w"), vec![1, ci, 1, 1, 1]));
            out.push((format!("{p}.psi_b"), vec![1]));
        }
        let head = arch.head();
        out.push(("head.w".into(), head.weight_shape()));
        out.push(("head.b".into(), vec![3]));
        out
    }

    /// He-uniform weights, zero biases and a zero displacement head.
    pub fn init(stage: Stage, arch: &ArchSpec, max_disp: f32, seed: u64) -> Result<Self> {
        arch.validate()?;
        if !(max_disp > 0.0 && max_disp.is_finite()) {
            return Err(Error::InvalidArgument(format!("max_disp {max_disp} must be positive")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2 * stage.stream());
        let mut params = ParamSet::new();
        for (name, shape) in Self::expected(arch) {
            let t = if name.starts_with("head.") || shape.len() == 1 {
                Tensor::zeros(shape)
            } else {
                let fan_in = shape[1..].iter().product();
                he_uniform(&mut rng, shape, fan_in)
            };
            params.insert(name, t)?;
        }
        Ok(Self {
            stage,
            arch: arch.clone(),
            max_disp,
            params,
        })
    }

    pub fn from_params(stage: Stage, arch: ArchSpec, max_disp: f32, params: ParamSet) -> Result<Self> {
        arch.validate()?;
        check_params(&params, &Self::expected(&arch))?;
        Ok(Self {
            stage,
            arch,
            max_disp,
            params,
        })
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Binding {
        Binding::bind(g, &self.params, trainable)
    }

    /// Builds the generator on `g`. `moving` and `target` are `[1, 1, x, y, z]`
    /// HU tensors; returns a `[1, 3, x, y, z]` displacement in voxels.
    pub fn forward(&self, g: &mut Graph, b: &Binding, moving: Var, target: Var) -> Result<Var> {
        let dims = single_channel(g, moving, "generator")?;
        if single_channel(g, target, "generator")? != dims {
            return Err(Error::DimMismatch(format!(
                "moving {:?} vs target {:?}",
                g.value(moving).shape(),
                g.value(target).shape()
            )));
        }
        if dims.iter().any(|&d| d == 0 || d % GENERATOR_REDUCTION != 0) {
            return Err(Error::DimMismatch(format!(
                "generator input dims {dims:?} must be divisible by {GENERATOR_REDUCTION}"
            )));
        }
        let arch = &self.arch;
        let convs = arch.generator_convs();
        let mut convs = convs.iter();
        let mut block = |g: &mut Graph, mut h: Var, n: usize| -> Result<Var> {
            for _ in 0..n {
                let (name, spec) = convs.next().expect("conv plan");
                let w = b.var(&format!("{name}.w"));
                let bias = b.var(&format!("{name}.b"));
                let y = g.conv3d(h, w, Some(bias), *spec)?;
                h = g.leaky_relu(y, arch.leaky_slope);
            }
            Ok(h)
        };

        let stacked = g.concat_channels(&[moving, target])?;
        let x = g.scale(stacked, HU_SCALE);
        let e1 = block(g, x, arch.block_convs[0])?;
        let p1 = g.maxpool3d(e1)?;
        let e2 = block(g, p1, arch.block_convs[1])?;
        let p2 = g.maxpool3d(e2)?;
        let e3 = block(g, p2, arch.block_convs[2])?;

        let gated2 = g.attention_gate(e2, e3, &b.gate("gate2"))?;
        let gated2 = g.maxpool3d(gated2)?;
        let c3 = g.concat_channels(&[e3, gated2])?;
        let p3 = g.maxpool3d(c3)?;
        let e4 = block(g, p3, arch.block_convs[3])?;

        let gated3 = g.attention_gate(e3, e4, &b.gate("gate3"))?;
        let gated3 = g.maxpool3d(gated3)?;
        let c4 = g.concat_channels(&[e4, gated3])?;

        let raw = g.conv3d(c4, b.var("head.w"), Some(b.var("head.b")), arch.head())?;
        let bounded = g.tanh(raw);
        let coarse = g.value(bounded).spatial();
        let ratio: Vec<f32> = (0..3).map(|a| (dims[a] / coarse[a]) as f32).collect();
        let per_axis: Vec<f32> = ratio.iter().map(|r| self.max_disp / r).collect();
        let scaled = g.scale_channels(bounded, &per_axis)?;
        g.upsample(scaled, dims, Some(&ratio))
    }

    /// Inference-only forward on HU tensors.
    pub fn predict(&self, moving: &Tensor, target: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let (m, t) = (g.input(moving.clone()), g.input(target.clone()));
        let out = self.forward(&mut g, &b, m, t)?;
        Ok(g.value(out).clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = NetMeta {
            network: "generator".into(),
            stage: self.stage,
            arch: self.arch.clone(),
            max_disp: Some(self.max_disp),
        };
        save_net(path, &meta, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let meta = load_meta(path)?;
        if meta.network != "generator" {
            return Err(Error::Checkpoint(format!(
                "{} holds a {}, not a generator",
                path.display(),
                meta.network
            )));
        }
        let max_disp = meta
            .max_disp
            .ok_or_else(|| Error::Checkpoint("generator metadata lacks max_disp".into()))?;
        Self::from_params(meta.stage, meta.arch, max_disp, ParamSet::load(path)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorParams {
    pub stage: Stage,
    pub arch: ArchSpec,
    pub params: ParamSet,
}

impl DiscriminatorParams {
    fn expected(arch: &ArchSpec) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (i, spec) in arch.disc_convs().iter().enumerate() {
            out.push((format!("d{}.w", i + 1), spec.weight_shape()));
            out.push((format!("d{}.b", i + 1), vec![spec.out_channels]));
        }
        out
    }

    pub fn init(stage: Stage, arch: &ArchSpec, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2 * stage.stream() + 1);
        let mut params = ParamSet::new();
        for (name, shape) in Self::expected(arch) {
            let t = if shape.len() == 1 {
                Tensor::zeros(shape)
            } else {
                let fan_in = shape[1..].iter().product();
                he_uniform(&mut rng, shape, fan_in)
            };
            params.insert(name, t)?;
        }
        Ok(Self {
            stage,
            arch: arch.clone(),
            params,
        })
    }

    pub fn from_params(stage: Stage, arch: ArchSpec, params: ParamSet) -> Result<Self> {
        arch.validate()?;
        check_params(&params, &Self::expected(&arch))?;
        Ok(Self {
            stage,
            arch,
            params,
        })
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Binding {
        Binding::bind(g, &self.params, trainable)
    }

    /// Per-region realism probabilities for a `[1, 1, x, y, z]` HU image.
    pub fn forward(&self, g: &mut Graph, b: &Binding, image: Var) -> Result<Var> {
        let dims = single_channel(g, image, "discriminator")?;
        if dims.iter().any(|&d| d < DISCRIMINATOR_REDUCTION) {
            return Err(Error::DimMismatch(format!(
                "discriminator input {dims:?} is smaller than {DISCRIMINATOR_REDUCTION} voxels per axis"
            )));
        }
        let mut h = g.scale(image, HU_SCALE);
        let convs = self.arch.disc_convs();
        for (i, spec) in convs.iter().enumerate() {
            let w = b.var(&format!("d{}.w", i + 1));
            let bias = b.var(&format!("d{}.b", i + 1));
            let y = g.conv3d(h, w, Some(bias), *spec)?;
            h = if i + 1 < convs.len() {
                g.leaky_relu(y, self.arch.leaky_slope)
            } else {
                g.sigmoid(y)
            };
        }
        Ok(h)
    }

    pub fn predict(&self, image: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let x = g.input(image.clone());
        let out = self.forward(&mut g, &b, x)?;
        Ok(g.value(out).clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = NetMeta {
            network: "discriminator".into(),
            stage: self.stage,
            arch: self.arch.clone(),
            max_disp: None,
        };
        save_net(path, &meta, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let meta = load_meta(path)?;
        if meta.network != "discriminator" {
            return Err(Error::Checkpoint(format!(
                "{} holds a {}, not a discriminator",
                path.display(),
                meta.network
            )));
        }
        Self::from_params(meta.stage, meta.arch, ParamSet::load(path)?)
    }
}
