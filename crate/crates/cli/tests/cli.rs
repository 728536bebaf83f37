use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dirforge::io::sha256_file;
use dirforge::metrics::LandmarkSet;
use dirforge::pipeline::{Models, TrainConfig, LOSS_CSV_HEADER};
use dirforge::transform::Dvf;
use dirforge::volume::Volume;
use serde_json::Value;
use tempfile::TempDir;

fn dirforge(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dirforge"))
        .args(args)
        .current_dir(cwd)
        .env_remove("DIRFORGE_WORKERS")
        .output()
        .expect("spawn dirforge")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = dirforge(args, cwd);
    assert!(
        out.status.success(),
        "dirforge {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str], cwd: &Path) -> i32 {
    dirforge(args, cwd).status.code().expect("exit code")
}

const RIGID: &str = r#"{"dims":[32,32,24],"spacing_mm":[0.9,0.9,2.0],"seed":3,
  "deformation":{"rigid_shift":{"shift_mm":[1.8,0,0]}}}"#;

const BUMP: &str = r#"{"dims":[32,32,24],"spacing_mm":[0.9,0.9,2.0],"seed":0,
  "deformation":{"gaussian_bump":{"center_mm":[14.4,14.4,24.0],"peak_mm":[3,0,0],"sigma_mm":12}}}"#;

const SMALL: &str = r#"{"epochs_global":2,"epochs_local":1,"steps_per_epoch":1,
  "patch_size":[16,16,16],"overlap":[8,8,8],"global_downsample_target":32}"#;

fn phantom(dir: &Path, name: &str, spec: &str) -> PathBuf {
    let spec_path = dir.join(format!("{name}_spec.json"));
    fs::write(&spec_path, spec).unwrap();
    ok(&["phantom", "--spec", spec_path.to_str().unwrap(), "--out", name], dir);
    dir.join(name)
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn phantom_output_is_deterministic_and_checksummed() {
    let tmp = TempDir::new().unwrap();
    let a = phantom(tmp.path(), "a", RIGID);
    let b = phantom(tmp.path(), "b", RIGID);
    assert_eq!(dir_bytes(&a), dir_bytes(&b));

    let m = manifest(&a);
    assert_eq!(m["format"], "dirforge-phantom-1");
    assert_eq!(m["seed"], 3);
    let files = m["files"].as_array().unwrap();
    assert_eq!(files.len(), 6);
    for f in files {
        let checked = f.get("payload").and_then(Value::as_str).unwrap_or_else(|| f["path"].as_str().unwrap());
        assert!(a.join(f["path"].as_str().unwrap()).is_file());
        assert_eq!(sha256_file(&a.join(checked)).unwrap(), f["sha256"].as_str().unwrap());
    }
    assert_eq!(LandmarkSet::load_csv(&a.join("landmarks_moving.csv")).unwrap().len(), 8);
    assert_eq!(LandmarkSet::load_csv(&a.join("landmarks_target.csv")).unwrap().len(), 8);
    assert!(!fs::read_dir(&a).unwrap().any(|e| e.unwrap().file_name().to_string_lossy().starts_with('.')));
}

#[test]
fn phantom_seed_flag_overrides_spec() {
    let tmp = TempDir::new().unwrap();
    let spec = tmp.path().join("spec.json");
    fs::write(&spec, RIGID).unwrap();
    let s = spec.to_str().unwrap();
    ok(&["phantom", "--spec", s, "--out", "x", "--seed", "11"], tmp.path());
    ok(&["phantom", "--spec", s, "--out", "y"], tmp.path());
    assert_eq!(manifest(&tmp.path().join("x"))["seed"], 11);
    let mx = Volume::load(&tmp.path().join("x/moving")).unwrap();
    let my = Volume::load(&tmp.path().join("y/moving")).unwrap();
    assert_ne!(mx, my);
}

#[test]
fn bump_truth_peaks_at_the_requested_displacement() {
    let tmp = TempDir::new().unwrap();
    let dir = phantom(tmp.path(), "bump", BUMP);
    let (truth, spacing) = Dvf::load(&dir.join("truth_dvf")).unwrap();
    assert_eq!(spacing, [0.9, 0.9, 2.0]);
    let peak_mm = truth.component(0).iter().map(|&v| v as f64 * spacing[0]).fold(0.0, f64::max);
    assert!((peak_mm - 3.0).abs() <= 1e-3, "peak {peak_mm}");
    assert!(truth.component(1).iter().chain(truth.component(2)).all(|&v| v == 0.0));
}

#[test]
fn info_reports_header_and_payload_checksum() {
    let tmp = TempDir::new().unwrap();
    let dir = phantom(tmp.path(), "p", RIGID);
    let m = manifest(&dir);
    let sha = |role: &str| {
        m["files"].as_array().unwrap().iter().find(|f| f["role"] == role).unwrap()["sha256"]
            .as_str()
            .unwrap()
            .to_string()
    };

    let vol = ok(&["info", "--file", "p/moving.bin"], tmp.path());
    assert!(vol.contains("dims: 32 x 32 x 24"), "{vol}");
    assert!(vol.contains("spacing_mm: 0.9 x 0.9 x 2"), "{vol}");
    assert!(vol.contains("channels: 1"), "{vol}");
    assert!(vol.contains(&format!("sha256: {}", sha("moving"))), "{vol}");

    let dvf = ok(&["info", "--file", "p/truth_dvf"], tmp.path());
    assert!(dvf.contains("channels: 3"), "{dvf}");
    assert!(dvf.contains("max: 1.8"), "{dvf}");
    assert!(dvf.contains(&format!("sha256: {}", sha("truth_dvf"))), "{dvf}");
}

#[test]
fn info_writes_a_slice_image() {
    let tmp = TempDir::new().unwrap();
    phantom(tmp.path(), "p", RIGID);
    ok(&["info", "--file", "p/moving.json", "--slice", "z=12"], tmp.path());
    let pgm = fs::read(tmp.path().join("p/moving_z12.pgm")).unwrap();
    let header = b"P5\n32 32\n255\n";
    assert_eq!(&pgm[..header.len()], header);
    assert_eq!(pgm.len(), header.len() + 32 * 32);
    assert!(pgm[header.len()..].iter().any(|&v| v == 255));

    ok(&["info", "--file", "p/truth_dvf", "--slice", "z=0", "--slice-out", "u.pgm"], tmp.path());
    assert!(tmp.path().join("u.pgm").is_file());

    assert_eq!(code(&["info", "--file", "p/moving", "--slice", "z=24"], tmp.path()), 1);
    assert_eq!(code(&["info", "--file", "p/moving", "--slice", "y=3"], tmp.path()), 1);
}

#[test]
fn zero_epoch_training_writes_the_initialisation() {
    let tmp = TempDir::new().unwrap();
    phantom(tmp.path(), "p", RIGID);
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, r#"{"epochs_global":0,"epochs_local":0,"seed":5}"#).unwrap();
    ok(&["train", "--pairs", "p/manifest.json", "--config", "cfg.json", "--out", "ck"], tmp.path());
    let ck = tmp.path().join("ck");

    let mut expected_cfg = TrainConfig::default();
    expected_cfg.epochs_global = 0;
    expected_cfg.epochs_local = 0;
    expected_cfg.seed = 5;
    let init = tmp.path().join("init");
    Models::init(&expected_cfg).unwrap().save(&init).unwrap();
    for (name, bytes) in dir_bytes(&init) {
        assert_eq!(fs::read(ck.join(&name)).unwrap(), bytes, "{name}");
    }

    let csv = fs::read_to_string(ck.join("loss_history.csv")).unwrap();
    assert_eq!(csv.trim_end(), LOSS_CSV_HEADER);

    let frozen = TrainConfig::from_json(&fs::read_to_string(ck.join("config.json")).unwrap()).unwrap();
    assert_eq!(frozen, expected_cfg);
    let raw: Value = serde_json::from_str(&fs::read_to_string(ck.join("config.json")).unwrap()).unwrap();
    let w = &raw["weights"];
    for (k, v) in [("alpha", 200.0), ("beta", 1.0), ("gamma", 10.0), ("delta", 5.0), ("mu1", 1.0), ("mu2", 0.5)] {
        assert_eq!(w[k].as_f64(), Some(v), "{k} in {raw}");
    }
}

#[test]
fn identity_checkpoints_register_to_the_moving_image() {
    let tmp = TempDir::new().unwrap();
    phantom(tmp.path(), "p", RIGID);
    fs::write(
        tmp.path().join("cfg.json"),
        r#"{"epochs_global":0,"epochs_local":0,"patch_size":[16,16,16],"overlap":[8,8,8],"global_downsample_target":32}"#,
    )
    .unwrap();
    ok(&["train", "--pairs", "p/manifest.json", "--config", "cfg.json", "--out", "ck"], tmp.path());
    ok(
        &["--workers", "2", "register", "--moving", "p/moving", "--target", "p/target", "--ckpt", "ck", "--out", "r"],
        tmp.path(),
    );
    let r = tmp.path().join("r");
    let moving = Volume::load(&tmp.path().join("p/moving")).unwrap();
    let deformed = Volume::load(&r.join("deformed")).unwrap();
    assert_eq!(deformed.dims(), moving.dims());
    assert_eq!(deformed.spacing(), moving.spacing());
    let bits = |v: &Volume| v.voxels().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&deformed), bits(&moving));
    for name in ["final_dvf", "global_dvf", "local_dvf"] {
        let (dvf, sp) = Dvf::load(&r.join(name)).unwrap();
        assert_eq!(dvf.dims(), moving.dims());
        assert_eq!(sp, moving.spacing());
        assert!(dvf.data().iter().all(|&v| v == 0.0), "{name}");
    }
    let timing: Value = serde_json::from_str(&fs::read_to_string(r.join("timing.json")).unwrap()).unwrap();
    assert!(timing["total_seconds"].as_f64().unwrap() > 0.0);
    assert!(timing["global_seconds"].as_f64().unwrap() >= 0.0);
    assert!(timing["local_seconds"].as_f64().unwrap() >= 0.0);
}

#[test]
fn small_training_run_logs_each_epoch_and_is_reproducible() {
    let tmp = TempDir::new().unwrap();
    phantom(tmp.path(), "p", RIGID);
    fs::write(tmp.path().join("cfg.json"), SMALL).unwrap();
    for out in ["a", "b"] {
        ok(&["train", "--pairs", "p/manifest.json", "--config", "cfg.json", "--out", out], tmp.path());
    }
    let csv = fs::read_to_string(tmp.path().join("a/loss_history.csv")).unwrap();
    let rows: Vec<_> = csv.lines().collect();
    assert_eq!(rows[0], LOSS_CSV_HEADER);
    assert_eq!(rows.len(), 1 + 2 + 1);
    assert!(rows[1].starts_with("1,global,") && rows[2].starts_with("2,global,") && rows[3].starts_with("1,local,"));
    assert_eq!(dir_bytes(&tmp.path().join("a")), dir_bytes(&tmp.path().join("b")));
}

#[test]
fn evaluating_a_perfect_registration() {
    let tmp = TempDir::new().unwrap();
    phantom(tmp.path(), "p", RIGID);
    let args = |dvf: &str, out: &str| -> Vec<String> {
        [
            "evaluate", "--deformed", "p/target", "--target", "p/target", "--dvf", dvf,
            "--landmarks-moving", "p/landmarks_moving.csv", "--landmarks-target", "p/landmarks_target.csv",
            "--out", out, "--body-hu", "-400", "--bone-hu", "250", "--fraction", "f1",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect()
    };
    let run = |dvf: &str, out: &str| {
        let a = args(dvf, out);
        ok(&a.iter().map(String::as_str).collect::<Vec<_>>(), tmp.path());
        let v: Value = serde_json::from_str(&fs::read_to_string(tmp.path().join(format!("{out}.json"))).unwrap()).unwrap();
        v
    };

    let report = run("p/truth_dvf", "truth");
    assert!(report["tre_mean"].as_f64().unwrap() <= 1e-3, "{report}");
    assert_eq!(report["mae"].as_f64().unwrap(), 0.0);
    assert_eq!(report["ncc"].as_f64().unwrap(), 1.0);
    assert_eq!(report["dsc"].as_f64().unwrap(), 1.0);
    assert_eq!(report["fold_fraction"].as_f64().unwrap(), 0.0);
    assert_eq!(report["body_hu"].as_f64().unwrap(), -400.0);
    assert_eq!(report["bone_hu"].as_f64().unwrap(), 250.0);
    assert_eq!(report["fraction"], "f1");

    let csv = fs::read_to_string(tmp.path().join("truth.csv")).unwrap();
    let rows: Vec<_> = csv.lines().collect();
    assert_eq!(rows[0], "fraction,tre_mean,tre_std,mae,ncc,dsc,jac_min,fold_frac");
    assert!(rows[1].starts_with("f1,"));

    // with a zero field the landmarks stay where the moving image had them
    let (truth, sp) = Dvf::load(&tmp.path().join("p/truth_dvf")).unwrap();
    Dvf::zeros(truth.dims()).save(&tmp.path().join("zero"), sp).unwrap();
    let report = run("zero", "zero");
    assert!((report["tre_mean"].as_f64().unwrap() - 1.8).abs() < 1e-3, "{report}");
}

#[test]
fn exit_codes_separate_usage_and_data_errors() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    assert_eq!(code(&["--version"], dir), 0);
    assert_eq!(code(&["info", "--bogus"], dir), 1);
    assert_eq!(code(&["frobnicate"], dir), 1);
    assert_eq!(code(&["--workers", "0", "info", "--file", "x"], dir), 1);
    assert_eq!(code(&["info", "--file", "missing"], dir), 2);

    fs::write(dir.join("bad.json"), "{not json").unwrap();
    assert_eq!(code(&["phantom", "--spec", "bad.json", "--out", "o"], dir), 2);
    assert!(!dir.join("o").exists());

    fs::write(dir.join("pairs.json"), r#"{"pairs":[{"moving":"nope","target":"nope"}]}"#).unwrap();
    assert_eq!(code(&["train", "--pairs", "pairs.json", "--out", "ck"], dir), 2);
    assert!(!dir.join("ck").exists());

    fs::write(dir.join("empty.json"), r#"{"pairs":[]}"#).unwrap();
    assert_eq!(code(&["train", "--pairs", "empty.json", "--out", "ck"], dir), 2);

    phantom(dir, "p", RIGID);
    fs::write(dir.join("cfg.json"), r#"{"patch_size":[64,64,64],"overlap":[64,0,0]}"#).unwrap();
    assert_eq!(code(&["train", "--pairs", "p/manifest.json", "--config", "cfg.json", "--out", "ck"], dir), 2);
    assert_eq!(code(&["register", "--moving", "p/moving", "--target", "p/target", "--ckpt", "nowhere", "--out", "r"], dir), 2);
    assert!(!dir.join("r").exists());
}
