use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dirforge::io::{container_paths, read_container, sha256_file, write_atomic};
use dirforge::metrics::{evaluate, LandmarkSet, MetricReport, Thresholds};
use dirforge::pipeline::{loss_history_csv, register, train, Models, TrainConfig};
use dirforge::transform::Dvf;
use dirforge::volume::{make_phantom, PhantomSpec, Volume};

use crate::manifest::{FileEntry, PairEntry, PairsManifest, PhantomManifest, PHANTOM_FORMAT};
use crate::{Cli, Command, EvaluateArgs, InfoArgs, PhantomArgs, RegisterArgs, TrainArgs};

pub const CONFIG_FILE: &str = "config.json";
pub const LOSS_FILE: &str = "loss_history.csv";
pub const TIMING_FILE: &str = "timing.json";

/// A flag value that is well-formed for clap but unusable.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// 1 for usage errors, 2 for bad or unreadable data, 3 otherwise.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<UsageError>() {
            return 1;
        }
        if cause.is::<dirforge::Error>() || cause.is::<std::io::Error>() || cause.is::<serde_json::Error>() {
            return 2;
        }
    }
    3
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub fn run(cli: &Cli) -> Result<()> {
    if cli.workers == 0 {
        return Err(usage("--workers must be at least 1"));
    }
    match &cli.command {
        Command::Phantom(a) => phantom(a),
        Command::Train(a) => train_cmd(a, cli.workers),
        Command::Register(a) => register_cmd(a, cli.workers),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Info(a) => info(a),
    }
}

/// Runs `write` against a scratch directory inside `out` and moves its files
/// into `out` only if it succeeds.
fn staged(out: &Path, write: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let scratch = tempfile::Builder::new()
        .prefix(".dirforge-")
        .tempdir_in(out)
        .with_context(|| format!("creating scratch directory in {}", out.display()))?;
    write(scratch.path())?;
    let mut names: Vec<_> = fs::read_dir(scratch.path())?
        .map(|e| e.map(|e| e.file_name()))
        .collect::<std::io::Result<_>>()?;
    names.sort();
    for name in names {
        fs::rename(scratch.path().join(&name), out.join(&name))
            .with_context(|| format!("moving {} into {}", name.to_string_lossy(), out.display()))?;
    }
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {what} {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {what} {}", path.display()))
}

fn load_volume(path: &Path, what: &str) -> Result<Volume> {
    Volume::load(path).with_context(|| format!("loading {what} volume {}", path.display()))
}

fn container_entry(dir: &Path, role: &str, stem: &str) -> Result<FileEntry> {
    let (_, payload) = container_paths(&dir.join(stem));
    Ok(FileEntry {
        role: role.into(),
        path: format!("{stem}.json"),
        payload: Some(format!("{stem}.bin")),
        sha256: sha256_file(&payload)?,
    })
}

fn file_entry(dir: &Path, role: &str, name: &str) -> Result<FileEntry> {
    Ok(FileEntry {
        role: role.into(),
        path: name.into(),
        payload: None,
        sha256: sha256_file(&dir.join(name))?,
    })
}

fn phantom(a: &PhantomArgs) -> Result<()> {
    let mut spec: PhantomSpec = read_json(&a.spec, "phantom spec")?;
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    spec.validate().context("invalid phantom spec")?;
    let ph = make_phantom(&spec)?;
    let sp = spec.spacing_mm;
    staged(&a.out, |dir| {
        ph.moving.save(&dir.join("moving"))?;
        ph.target.save(&dir.join("target"))?;
        ph.truth_dvf.save(&dir.join("truth_dvf"), sp)?;
        ph.landmarks_moving.save_csv(&dir.join("landmarks_moving.csv"))?;
        ph.landmarks_target.save_csv(&dir.join("landmarks_target.csv"))?;
        write_atomic(&dir.join("spec.json"), serde_json::to_string_pretty(&spec)?.as_bytes())?;
        let manifest = PhantomManifest {
            format: PHANTOM_FORMAT.into(),
            seed: spec.seed,
            spec: spec.clone(),
            files: vec![
                container_entry(dir, "moving", "moving")?,
                container_entry(dir, "target", "target")?,
                container_entry(dir, "truth_dvf", "truth_dvf")?,
                file_entry(dir, "landmarks_moving", "landmarks_moving.csv")?,
                file_entry(dir, "landmarks_target", "landmarks_target.csv")?,
                file_entry(dir, "spec", "spec.json")?,
            ],
            pairs: vec![PairEntry {
                moving: "moving.json".into(),
                target: "target.json".into(),
                landmarks_moving: Some("landmarks_moving.csv".into()),
                landmarks_target: Some("landmarks_target.csv".into()),
            }],
        };
        write_atomic(
            &dir.join("manifest.json"),
            serde_json::to_string_pretty(&manifest)?.as_bytes(),
        )?;
        Ok(())
    })?;
    println!("wrote phantom {:?} (seed {}) to {}", spec.dims, spec.seed, a.out.display());
    Ok(())
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            TrainConfig::from_json(&text).with_context(|| format!("invalid config {}", p.display()))
        }
        None => Ok(TrainConfig::default()),
    }
}

fn train_cmd(a: &TrainArgs, workers: usize) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    cfg.worker_count = workers;
    cfg.validate().context("invalid training configuration")?;
    let pair_paths = PairsManifest::load(&a.pairs)?;
    if pair_paths.is_empty() {
        bail!(dirforge::Error::InvalidArgument(format!(
            "{} lists no pairs",
            a.pairs.display()
        )));
    }
    let pairs: Vec<(Volume, Volume)> = pair_paths
        .iter()
        .map(|(m, t)| Ok((load_volume(m, "moving")?, load_volume(t, "target")?)))
        .collect::<Result<_>>()?;
    let outcome = train(&pairs, &cfg).context("training failed")?;
    staged(&a.out, |dir| {
        outcome.models.save(dir)?;
        write_atomic(&dir.join(LOSS_FILE), loss_history_csv(&outcome.history).as_bytes())?;
        write_atomic(&dir.join(CONFIG_FILE), cfg.to_json()?.as_bytes())?;
        Ok(())
    })?;
    println!(
        "trained {} global + {} local epochs on {} pair(s); checkpoints in {}",
        cfg.epochs_global,
        cfg.epochs_local,
        pairs.len(),
        a.out.display()
    );
    Ok(())
}

fn register_cmd(a: &RegisterArgs, workers: usize) -> Result<()> {
    let cfg_path = a.ckpt.join(CONFIG_FILE);
    let mut cfg = load_config(cfg_path.exists().then_some(cfg_path.as_path()))?;
    cfg.worker_count = workers;
    let models = Models::load(&a.ckpt).with_context(|| format!("loading checkpoints from {}", a.ckpt.display()))?;
    let moving = load_volume(&a.moving, "moving")?;
    let target = load_volume(&a.target, "target")?;
    let r = register(&moving, &target, &models.global.generator, &models.local.generator, &cfg)
        .context("registration failed")?;
    let sp = moving.spacing();
    staged(&a.out, |dir| {
        r.final_dvf.save(&dir.join("final_dvf"), sp)?;
        r.deformed.save(&dir.join("deformed"))?;
        r.global_dvf.save(&dir.join("global_dvf"), sp)?;
        r.local_dvf.save(&dir.join("local_dvf"), sp)?;
        write_atomic(&dir.join(TIMING_FILE), serde_json::to_string_pretty(&r.timing)?.as_bytes())?;
        Ok(())
    })?;
    println!(
        "registered {:?} with {} patch(es) in {:.2} s; outputs in {}",
        moving.dims(),
        r.patches,
        r.timing.total_seconds,
        a.out.display()
    );
    Ok(())
}

fn evaluate_cmd(a: &EvaluateArgs) -> Result<()> {
    if !(a.body_hu.is_finite() && a.bone_hu.is_finite()) {
        return Err(usage("thresholds must be finite"));
    }
    let deformed = load_volume(&a.deformed, "deformed")?;
    let target = load_volume(&a.target, "target")?;
    let (dvf, _) = Dvf::load(&a.dvf).with_context(|| format!("loading DVF {}", a.dvf.display()))?;
    let lm_m = LandmarkSet::load_csv(&a.landmarks_moving)
        .with_context(|| format!("loading {}", a.landmarks_moving.display()))?;
    let lm_t = LandmarkSet::load_csv(&a.landmarks_target)
        .with_context(|| format!("loading {}", a.landmarks_target.display()))?;
    let thresholds = Thresholds {
        body_hu: a.body_hu,
        bone_hu: a.bone_hu,
    };
    let report = evaluate(&a.fraction, &deformed, &target, &dvf, &lm_m, &lm_t, thresholds)?;
    let stem = a.out.with_extension("");
    let csv_path = with_suffix(&stem, ".csv");
    let json_path = with_suffix(&stem, ".json");
    write_atomic(&csv_path, MetricReport::to_csv(std::slice::from_ref(&report)).as_bytes())?;
    write_atomic(&json_path, serde_json::to_string_pretty(&report)?.as_bytes())?;
    println!(
        "TRE {:.3} ± {:.3} mm, MAE {:.2} HU, NCC {:.4}, DSC {:.4}, fold fraction {:.6}",
        report.tre_mean, report.tre_std, report.mae, report.ncc, report.dsc, report.fold_fraction
    );
    Ok(())
}

fn with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

fn parse_slice(spec: &str, depth: usize) -> Result<usize> {
    let z = spec
        .strip_prefix("z=")
        .and_then(|n| n.parse::<usize>().ok())
        .ok_or_else(|| usage(format!("--slice expects z=N, got {spec:?}")))?;
    if z >= depth {
        return Err(usage(format!("slice z={z} outside 0..{depth}")));
    }
    Ok(z)
}

/// 8-bit binary PGM of one axial slice, windowed to the slice's range. Vector
/// containers are shown as magnitude.
pub fn slice_pgm(data: &[f32], dims: [usize; 3], channels: usize, z: usize) -> Vec<u8> {
    let n = dims[0] * dims[1] * dims[2];
    let plane = dims[0] * dims[1];
    let values: Vec<f64> = (0..plane)
        .map(|i| {
            let at = z * plane + i;
            if channels == 1 {
                data[at] as f64
            } else {
                (0..channels).map(|c| (data[c * n + at] as f64).powi(2)).sum::<f64>().sqrt()
            }
        })
        .collect();
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = format!("P5\n{} {}\n255\n", dims[0], dims[1]).into_bytes();
    out.extend(values.iter().map(|&v| {
        if hi > lo {
            ((v - lo) / (hi - lo) * 255.0).round() as u8
        } else {
            0
        }
    }));
    out
}

fn info(a: &InfoArgs) -> Result<()> {
    let c = read_container(&a.file).with_context(|| format!("reading {}", a.file.display()))?;
    let (header, payload) = container_paths(&a.file);
    let h = &c.header;
    let (lo, hi) = c
        .data
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let z = a.slice.as_deref().map(|s| parse_slice(s, h.dims[2])).transpose()?;
    println!("file: {}", header.display());
    println!("dims: {} x {} x {}", h.dims[0], h.dims[1], h.dims[2]);
    println!("spacing_mm: {} x {} x {}", h.spacing_mm[0], h.spacing_mm[1], h.spacing_mm[2]);
    println!("channels: {}", h.channels);
    println!("min: {lo}");
    println!("max: {hi}");
    println!("sha256: {}", sha256_file(&payload)?);
    if let Some(z) = z {
        let out = a.slice_out.clone().unwrap_or_else(|| {
            with_suffix(&header.with_extension(""), &format!("_z{z}.pgm"))
        });
        write_atomic(&out, &slice_pgm(&c.data, h.dims, h.channels, z))?;
        println!("slice: {}", out.display());
    }
    Ok(())
}
