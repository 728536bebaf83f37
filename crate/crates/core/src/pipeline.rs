//! Two-stage training (global, then local on patches) and two-stage inference.
//!
//! Inference: the pair is mean-pooled to the global grid, the global generator
//! predicts a coarse field that is upsampled to full resolution and used to
//! warp the moving image. The local generator then runs on every patch of the
//! patch grid, the patch fields are fused, composed with the global field, and
//! the moving image is warped once by the result.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{adv_discriminator_loss, total_generator_loss, LossWeights};
use crate::mind::MindConfig;
use crate::model::{
    ArchSpec, DiscriminatorParams, GeneratorParams, Stage, DISCRIMINATOR_REDUCTION, GENERATOR_REDUCTION,
};
use crate::nn::{Graph, ParamSet, Tensor};
use crate::transform::{build_patch_grid, compose, fuse_patches, upsample_dvf, warp, Dvf, PatchGrid};
use crate::volume::Volume;

pub const ADAM_EPS: f64 = 1e-8;
pub const LOSS_CSV_HEADER: &str = "epoch,stage,sim,adv_g,adv_d,reg,total";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub weights: LossWeights,
    pub learning_rate: f32,
    pub adam_betas: (f32, f32),
    pub epochs_global: usize,
    pub epochs_local: usize,
    /// Generator/discriminator update pairs per epoch.
    pub steps_per_epoch: usize,
    pub patch_size: [usize; 3],
    pub overlap: [usize; 3],
    /// Largest per-axis size of the global-stage grid.
    pub global_downsample_target: usize,
    /// Displacement cap in voxels.
    pub max_disp: f32,
    pub seed: u64,
    pub worker_count: usize,
    pub mind: MindConfig,
    pub arch: ArchSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            learning_rate: 2e-4,
            adam_betas: (0.5, 0.999),
            epochs_global: 20,
            epochs_local: 20,
            steps_per_epoch: 8,
            patch_size: [64; 3],
            overlap: [32, 32, 48],
            global_downsample_target: 64,
            max_disp: 10.0,
            seed: 0,
            worker_count: 1,
            mind: MindConfig::default(),
            arch: ArchSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.arch.validate()?;
        let invalid = |m: String| Err(Error::InvalidArgument(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return invalid(format!("learning_rate {} must be positive", self.learning_rate));
        }
        let (b1, b2) = self.adam_betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return invalid(format!("adam_betas {:?} must lie in [0, 1)", self.adam_betas));
        }
        for a in 0..3 {
            if self.overlap[a] >= self.patch_size[a] {
                return invalid(format!(
                    "overlap {:?} must be smaller than patch_size {:?}",
                    self.overlap, self.patch_size
                ));
            }
            let p = self.patch_size[a];
            if p % GENERATOR_REDUCTION != 0 || p < DISCRIMINATOR_REDUCTION {
                return invalid(format!(
                    "patch_size {:?} must be multiples of {GENERATOR_REDUCTION} and at least {DISCRIMINATOR_REDUCTION}",
                    self.patch_size
                ));
            }
        }
        if self.global_downsample_target < DISCRIMINATOR_REDUCTION {
            return invalid(format!(
                "global_downsample_target {} below {DISCRIMINATOR_REDUCTION}",
                self.global_downsample_target
            ));
        }
        if !(self.max_disp > 0.0 && self.max_disp.is_finite()) {
            return invalid(format!("max_disp {} must be positive", self.max_disp));
        }
        if self.steps_per_epoch == 0 {
            return invalid("steps_per_epoch must be at least 1".into());
        }
        if self.worker_count == 0 {
            return invalid("worker_count must be at least 1".into());
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Per-axis size of the global-stage grid: the volume size capped at
    /// `global_downsample_target` and rounded down to a multiple of the
    /// generator reduction.
    pub fn global_dims(&self, dims: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let d = dims[a].min(self.global_downsample_target);
            out[a] = d - d % GENERATOR_REDUCTION;
            if out[a] < DISCRIMINATOR_REDUCTION {
                return Err(Error::DimMismatch(format!(
                    "volume {dims:?} too small for the global stage (need {DISCRIMINATOR_REDUCTION} voxels per axis)"
                )));
            }
        }
        Ok(out)
    }

    pub fn patch_grid(&self, dims: [usize; 3]) -> Result<PatchGrid> {
        build_patch_grid(dims, self.patch_size, self.overlap)
    }
}

/// First and second moment estimates for one [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u32,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros = || params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// Adam with bias correction.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &[Vec<f32>],
    state: &mut AdamState,
    lr: f32,
    betas: (f32, f32),
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::InvalidArgument(format!(
            "{} gradients and {} moment buffers for {} tensors",
            grads.len(),
            state.m.len(),
            params.len()
        )));
    }
    state.step += 1;
    let (b1, b2) = betas;
    let c1 = 1.0 - (b1 as f64).powi(state.step as i32);
    let c2 = 1.0 - (b2 as f64).powi(state.step as i32);
    for (k, t) in params.tensors_mut().enumerate() {
        let (g, m, v) = (&grads[k], &mut state.m[k], &mut state.v[k]);
        if g.len() != t.numel() {
            return Err(Error::Shape(format!(
                "gradient of length {} for tensor {:?}",
                g.len(),
                t.shape()
            )));
        }
        for (i, p) in t.data_mut().iter_mut().enumerate() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let mh = m[i] as f64 / c1;
            let vh = v[i] as f64 / c2;
            *p -= (lr as f64 * mh / (vh.sqrt() + ADAM_EPS)) as f32;
        }
    }
    Ok(())
}

/// Mean losses of one stage-epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub stage: Stage,
    pub sim: f64,
    pub adv_g: f64,
    pub adv_d: f64,
    pub reg: f64,
    pub total: f64,
}

pub fn loss_history_csv(records: &[LossRecord]) -> String {
    let mut out = String::from(LOSS_CSV_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{:.9},{:.9},{:.9},{:.9},{:.9}",
            r.epoch,
            r.stage.name(),
            r.sim,
            r.adv_g,
            r.adv_d,
            r.reg,
            r.total
        );
    }
    out
}

/// Generator and discriminator of one stage.
#[derive(Debug, Clone)]
pub struct StagePair {
    pub generator: GeneratorParams,
    pub discriminator: DiscriminatorParams,
}

impl StagePair {
    /// Identity-initialised pair (zero displacement head).
    pub fn init(stage: Stage, cfg: &TrainConfig) -> Result<Self> {
        Ok(Self {
            generator: GeneratorParams::init(stage, &cfg.arch, cfg.max_disp, cfg.seed)?,
            discriminator: DiscriminatorParams::init(stage, &cfg.arch, cfg.seed)?,
        })
    }
}

/// All four networks.
#[derive(Debug, Clone)]
pub struct Models {
    pub global: StagePair,
    pub local: StagePair,
}

const CHECKPOINTS: [&str; 4] = [
    "global_generator",
    "global_discriminator",
    "local_generator",
    "local_discriminator",
];

impl Models {
    pub fn init(cfg: &TrainConfig) -> Result<Self> {
        Ok(Self {
            global: StagePair::init(Stage::Global, cfg)?,
            local: StagePair::init(Stage::Local, cfg)?,
        })
    }

    /// Checkpoint stems inside a directory, in G/D × global/local order.
    pub fn checkpoint_names() -> [&'static str; 4] {
        CHECKPOINTS
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.global.generator.save(&dir.join(CHECKPOINTS[0]))?;
        self.global.discriminator.save(&dir.join(CHECKPOINTS[1]))?;
        self.local.generator.save(&dir.join(CHECKPOINTS[2]))?;
        self.local.discriminator.save(&dir.join(CHECKPOINTS[3]))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let models = Self {
            global: StagePair {
                generator: GeneratorParams::load(&dir.join(CHECKPOINTS[0]))?,
                discriminator: DiscriminatorParams::load(&dir.join(CHECKPOINTS[1]))?,
            },
            local: StagePair {
                generator: GeneratorParams::load(&dir.join(CHECKPOINTS[2]))?,
                discriminator: DiscriminatorParams::load(&dir.join(CHECKPOINTS[3]))?,
            },
        };
        check_stage(&models.global.generator, Stage::Global)?;
        check_stage(&models.local.generator, Stage::Local)?;
        for (d, s) in [(&models.global.discriminator, Stage::Global), (&models.local.discriminator, Stage::Local)] {
            if d.stage != s {
                return Err(Error::Checkpoint(format!(
                    "discriminator checkpoint is for the {} stage, expected {}",
                    d.stage.name(),
                    s.name()
                )));
            }
        }
        Ok(models)
    }
}

fn check_stage(g: &GeneratorParams, want: Stage) -> Result<()> {
    if g.stage != want {
        return Err(Error::Checkpoint(format!(
            "generator checkpoint is for the {} stage, expected {}",
            g.stage.name(),
            want.name()
        )));
    }
    Ok(())
}

fn to_tensor(v: &Volume) -> Tensor {
    Tensor::from_grid(v.dims(), v.voxels().to_vec()).expect("volume dims match voxel count")
}

fn tensor_to_dvf(t: &Tensor) -> Result<Dvf> {
    Dvf::from_data(t.spatial(), t.data().to_vec())
}

#[derive(Debug, Default, Clone, Copy)]
struct StepLosses {
    sim: f64,
    adv_g: f64,
    adv_d: f64,
    reg: f64,
    total: f64,
}

struct Trainer<'a> {
    cfg: &'a TrainConfig,
    pair: StagePair,
    gen_opt: AdamState,
    disc_opt: AdamState,
}

impl<'a> Trainer<'a> {
    fn new(cfg: &'a TrainConfig, pair: StagePair) -> Self {
        let gen_opt = AdamState::new(&pair.generator.params);
        let disc_opt = AdamState::new(&pair.discriminator.params);
        Self {
            cfg,
            pair,
            gen_opt,
            disc_opt,
        }
    }

    /// One discriminator update followed by one generator update. The
    /// generator forward is shared: the discriminator trains on its output
    /// detached, then the generator loss is taken against the updated
    /// discriminator.
    fn step(&mut self, moving: &Tensor, target: &Tensor) -> Result<StepLosses> {
        let cfg = self.cfg;
        let gen = &self.pair.generator;
        let mut g = Graph::new();
        let gb = gen.bind(&mut g, true);
        let (m, t) = (g.input(moving.clone()), g.input(target.clone()));
        let dvf = gen.forward(&mut g, &gb, m, t)?;
        let deformed = g.warp(m, dvf)?;

        let disc = &mut self.pair.discriminator;
        let adv_d = {
            let mut dg = Graph::new();
            let db = disc.bind(&mut dg, true);
            let fake = dg.input(g.value(deformed).clone());
            let real = dg.input(target.clone());
            let d_fake = disc.forward(&mut dg, &db, fake)?;
            let d_real = disc.forward(&mut dg, &db, real)?;
            let loss = adv_discriminator_loss(&mut dg, d_fake, d_real)?;
            dg.backward(loss)?;
            let grads = db.grads(&dg);
            adam_step(&mut disc.params, &grads, &mut self.disc_opt, cfg.learning_rate, cfg.adam_betas)?;
            dg.scalar(loss)
        };

        let db = disc.bind(&mut g, false);
        let d_out = disc.forward(&mut g, &db, deformed)?;
        let l = total_generator_loss(&mut g, deformed, t, dvf, d_out, &cfg.weights, &cfg.mind)?;
        g.backward(l.total)?;
        let grads = gb.grads(&g);
        let out = StepLosses {
            sim: g.scalar(l.sim),
            adv_g: g.scalar(l.adv),
            adv_d,
            reg: g.scalar(l.reg),
            total: g.scalar(l.total),
        };
        if !out.total.is_finite() {
            return Err(Error::Degenerate(format!("non-finite generator loss {out:?}")));
        }
        adam_step(
            &mut self.pair.generator.params,
            &grads,
            &mut self.gen_opt,
            cfg.learning_rate,
            cfg.adam_betas,
        )?;
        Ok(out)
    }

    fn run_epochs<F>(&mut self, stage: Stage, epochs: usize, mut sample: F) -> Result<Vec<LossRecord>>
    where
        F: FnMut(usize) -> Result<(Tensor, Tensor)>,
    {
        let steps = self.cfg.steps_per_epoch;
        let mut history = Vec::with_capacity(epochs);
        for epoch in 1..=epochs {
            let mut acc = StepLosses::default();
            for s in 0..steps {
                let (m, t) = sample((epoch - 1) * steps + s)?;
                let l = self.step(&m, &t)?;
                acc.sim += l.sim;
                acc.adv_g += l.adv_g;
                acc.adv_d += l.adv_d;
                acc.reg += l.reg;
                acc.total += l.total;
            }
            let n = steps as f64;
            let rec = LossRecord {
                epoch,
                stage,
                sim: acc.sim / n,
                adv_g: acc.adv_g / n,
                adv_d: acc.adv_d / n,
                reg: acc.reg / n,
                total: acc.total / n,
            };
            log::info!(
                "{} epoch {epoch}/{epochs}: sim {:.5} adv_g {:.4} adv_d {:.4} reg {:.5} total {:.4}",
                stage.name(),
                rec.sim,
                rec.adv_g,
                rec.adv_d,
                rec.reg,
                rec.total
            );
            history.push(rec);
        }
        Ok(history)
    }
}

fn check_pairs(pairs: &[(Volume, Volume)]) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no training pairs".into()));
    }
    for (m, t) in pairs {
        if m.dims() != t.dims() {
            return Err(Error::DimMismatch(format!(
                "moving {:?} vs target {:?}",
                m.dims(),
                t.dims()
            )));
        }
    }
    Ok(())
}

/// Mean-pool a volume onto the global grid.
pub fn global_input(vol: &Volume, cfg: &TrainConfig) -> Result<Volume> {
    vol.downsample_area(cfg.global_dims(vol.dims())?)
}

/// Trains the global pair on whole, mean-pooled volumes. Pairs are visited
/// in order, one per step.
pub fn train_global(
    pairs: &[(Volume, Volume)],
    cfg: &TrainConfig,
    init: StagePair,
) -> Result<(StagePair, Vec<LossRecord>)> {
    cfg.validate()?;
    check_pairs(pairs)?;
    check_stage(&init.generator, Stage::Global)?;
    let pooled: Vec<(Tensor, Tensor)> = pairs
        .iter()
        .map(|(m, t)| Ok((to_tensor(&global_input(m, cfg)?), to_tensor(&global_input(t, cfg)?))))
        .collect::<Result<_>>()?;
    let mut trainer = Trainer::new(cfg, init);
    let history = trainer.run_epochs(Stage::Global, cfg.epochs_global, |step| {
        Ok(pooled[step % pooled.len()].clone())
    })?;
    Ok((trainer.pair, history))
}

/// Trains the local pair on patch pairs drawn uniformly (pair, then grid
/// start) from `pairs`, which should already be globally aligned.
pub fn train_local(
    pairs: &[(Volume, Volume)],
    cfg: &TrainConfig,
    init: StagePair,
) -> Result<(StagePair, Vec<LossRecord>)> {
    cfg.validate()?;
    check_pairs(pairs)?;
    check_stage(&init.generator, Stage::Local)?;
    let grids: Vec<PatchGrid> = pairs
        .iter()
        .map(|(m, _)| cfg.patch_grid(m.dims()))
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(PATCH_STREAM);
    let mut trainer = Trainer::new(cfg, init);
    let history = trainer.run_epochs(Stage::Local, cfg.epochs_local, |_| {
        let k = rng.gen_range(0..pairs.len());
        let grid = &grids[k];
        let origin = grid.starts[rng.gen_range(0..grid.len())];
        let (m, t) = &pairs[k];
        Ok((
            to_tensor(&m.crop(origin, grid.patch_size)?),
            to_tensor(&t.crop(origin, grid.patch_size)?),
        ))
    })?;
    Ok((trainer.pair, history))
}

const PATCH_STREAM: u64 = 16;

/// Full-resolution global field for a pair.
pub fn predict_global(moving: &Volume, target: &Volume, gen: &GeneratorParams, cfg: &TrainConfig) -> Result<Dvf> {
    let (m, t) = (global_input(moving, cfg)?, global_input(target, cfg)?);
    let coarse = tensor_to_dvf(&gen.predict(&to_tensor(&m), &to_tensor(&t))?)?;
    upsample_dvf(&coarse, moving.dims())
}

/// Local field over the whole volume: one generator pass per grid patch,
/// fanned out over `cfg.worker_count` threads and fused in grid order.
pub fn predict_local(
    aligned: &Volume,
    target: &Volume,
    gen: &GeneratorParams,
    cfg: &TrainConfig,
) -> Result<(Dvf, usize)> {
    let grid = cfg.patch_grid(aligned.dims())?;
    let run = |origin: &[usize; 3]| -> Result<Dvf> {
        let m = aligned.crop(*origin, grid.patch_size)?;
        let t = target.crop(*origin, grid.patch_size)?;
        tensor_to_dvf(&gen.predict(&to_tensor(&m), &to_tensor(&t))?)
    };
    let workers = cfg.worker_count.clamp(1, grid.len());
    let patches: Vec<Dvf> = if workers == 1 {
        grid.starts.iter().map(run).collect::<Result<_>>()?
    } else {
        let chunk = grid.len().div_ceil(workers);
        std::thread::scope(|s| {
            let handles: Vec<_> = grid
                .starts
                .chunks(chunk)
                .map(|part| s.spawn(|| part.iter().map(run).collect::<Result<Vec<Dvf>>>()))
                .collect();
            let mut all = Vec::with_capacity(grid.len());
            for h in handles {
                all.extend(h.join().expect("patch worker panicked")?);
            }
            Ok::<_, Error>(all)
        })?
    };
    Ok((fuse_patches(&patches, &grid)?, grid.len()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub global_seconds: f64,
    pub local_seconds: f64,
    pub total_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct RegistrationResult {
    /// Pull-back field in voxels on the moving grid.
    pub final_dvf: Dvf,
    pub deformed: Volume,
    pub global_dvf: Dvf,
    pub local_dvf: Dvf,
    pub patches: usize,
    pub timing: Timing,
}

pub fn register(
    moving: &Volume,
    target: &Volume,
    global: &GeneratorParams,
    local: &GeneratorParams,
    cfg: &TrainConfig,
) -> Result<RegistrationResult> {
    cfg.validate()?;
    check_stage(global, Stage::Global)?;
    check_stage(local, Stage::Local)?;
    if moving.dims() != target.dims() {
        return Err(Error::DimMismatch(format!(
            "moving {:?} vs target {:?}",
            moving.dims(),
            target.dims()
        )));
    }
    let start = Instant::now();
    let global_dvf = predict_global(moving, target, global, cfg)?;
    let aligned = warp(moving, &global_dvf)?;
    let global_seconds = start.elapsed().as_secs_f64();

    let local_start = Instant::now();
    let (local_dvf, patches) = predict_local(&aligned, target, local, cfg)?;
    let final_dvf = compose(&global_dvf, &local_dvf)?;
    let deformed = warp(moving, &final_dvf)?;
    let local_seconds = local_start.elapsed().as_secs_f64();
    Ok(RegistrationResult {
        final_dvf,
        deformed,
        global_dvf,
        local_dvf,
        patches,
        timing: Timing {
            global_seconds,
            local_seconds,
            total_seconds: start.elapsed().as_secs_f64(),
        },
    })
}

/// Output of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub models: Models,
    pub history: Vec<LossRecord>,
}

/// Global stage, then the local stage on the globally warped pairs.
pub fn train(pairs: &[(Volume, Volume)], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_pairs(pairs)?;
    let init = Models::init(cfg)?;
    let (global, mut history) = train_global(pairs, cfg, init.global)?;
    let aligned: Vec<(Volume, Volume)> = if cfg.epochs_local == 0 {
        Vec::new()
    } else {
        pairs
            .iter()
            .map(|(m, t)| {
                let u = predict_global(m, t, &global.generator, cfg)?;
                Ok((warp(m, &u)?, t.clone()))
            })
            .collect::<Result<_>>()?
    };
    let local = if cfg.epochs_local == 0 {
        init.local
    } else {
        let (local, h) = train_local(&aligned, cfg, init.local)?;
        history.extend(h);
        local
    };
    Ok(TrainOutcome {
        models: Models { global, local },
        history,
    })
}
