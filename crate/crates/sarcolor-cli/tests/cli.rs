//! Integration tests of the command-line surface.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use num_complex::Complex64;
use sarcolor::polmath::{CovarianceMatrix, PolFeature};
use sarcolor::raster::{Layout, PolRaster};
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sarcolor"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn sarcolor")
}

fn ok(args: &[&str]) {
    let out = run(args);
    assert!(
        out.status.success(),
        "command {:?} failed: {}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
}

fn path(dir: &TempDir, rel: &str) -> PathBuf {
    dir.path().join(rel)
}

fn s(p: &Path) -> String {
    p.to_str().unwrap().to_string()
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut entries: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                std::fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    entries.sort_by(|a, b| a.0.cmp(&b.0));
    entries
}

#[test]
fn synth_writes_five_rasters_and_manifest() {
    let tmp = TempDir::new().unwrap();
    let out = path(&tmp, "scene");
    ok(&[
        "synth", "--out", &s(&out), "--width", "64", "--height", "64", "--seed", "5",
    ]);
    let rasters: Vec<_> = std::fs::read_dir(&out)
        .unwrap()
        .filter_map(|e| {
            let name = e.unwrap().file_name().to_string_lossy().into_owned();
            name.ends_with(".pras").then_some(name)
        })
        .collect();
    assert_eq!(rasters.len(), 5, "expected 5 raster files, got {rasters:?}");
    assert!(out.join("manifest.txt").exists());
    assert!(out.join("synth.config.txt").exists());
}

#[test]
fn synth_same_seed_identical_files() {
    let tmp = TempDir::new().unwrap();
    let a = path(&tmp, "a");
    let b = path(&tmp, "b");
    for dir in [&a, &b] {
        ok(&[
            "synth", "--out", &s(dir), "--width", "32", "--height", "32", "--seed", "9",
        ]);
    }
    assert_eq!(dir_bytes(&a), dir_bytes(&b));
}

#[test]
fn synth_rejects_bad_dims_with_exit_2() {
    let tmp = TempDir::new().unwrap();
    let out = run(&[
        "synth",
        "--out",
        &s(&path(&tmp, "x")),
        "--width",
        "30",
        "--height",
        "32",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_file_sets_values_and_flags_override() {
    let tmp = TempDir::new().unwrap();
    let cfg = path(&tmp, "run.cfg");
    std::fs::write(&cfg, "width = 32\nheight = 32\nseed = 4\n").unwrap();
    let a = path(&tmp, "a");
    ok(&["synth", "--out", &s(&a), "--config", &s(&cfg)]);
    let log = std::fs::read_to_string(a.join("synth.config.txt")).unwrap();
    assert!(log.contains("width = 32"));
    assert!(log.contains("seed = 4"));
    // Explicit flag wins over the file.
    let b = path(&tmp, "b");
    ok(&["synth", "--out", &s(&b), "--config", &s(&cfg), "--seed", "8"]);
    let log = std::fs::read_to_string(b.join("synth.config.txt")).unwrap();
    assert!(log.contains("seed = 8"));
}

fn quick_scene(tmp: &TempDir, name: &str, seed: u64) -> PathBuf {
    let dir = path(tmp, name);
    ok(&[
        "synth",
        "--out",
        &s(&dir),
        "--width",
        "32",
        "--height",
        "32",
        "--seed",
        &seed.to_string(),
    ]);
    dir
}

fn quick_train(tmp: &TempDir, scene: &Path, name: &str, epochs: usize) -> PathBuf {
    let dir = path(tmp, name);
    ok(&[
        "train",
        "--data",
        &s(scene),
        "--out",
        &s(&dir),
        "--epochs",
        &epochs.to_string(),
        "--batch",
        "256",
        "--patch",
        "16",
        "--seed",
        "7",
    ]);
    dir
}

#[test]
fn train_loss_csv_rows_match_steps_and_start_near_uniform() {
    let tmp = TempDir::new().unwrap();
    let scene = quick_scene(&tmp, "scene", 1);
    let model = quick_train(&tmp, &scene, "model", 2);
    let csv = std::fs::read_to_string(model.join("loss.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    // 32x32 at patch 16 = 4 tiles of 256 px; batch 256 → 1 step per tile.
    assert_eq!(rows.len(), 8, "2 epochs x 4 tiles");
    let first: f64 = rows[0].split(',').nth(2).unwrap().parse().unwrap();
    let uniform = 32f64.ln() / 32.0;
    assert!(
        (first - uniform).abs() / uniform < 0.05,
        "first loss {first} vs uniform {uniform}"
    );
}

#[test]
fn train_resume_reproduces_trace() {
    let tmp = TempDir::new().unwrap();
    let scene = quick_scene(&tmp, "scene", 2);
    let full = quick_train(&tmp, &scene, "full", 4);
    let half = quick_train(&tmp, &scene, "half", 2);
    let resumed = path(&tmp, "resumed");
    ok(&[
        "train",
        "--data",
        &s(&scene),
        "--out",
        &s(&resumed),
        "--epochs",
        "4",
        "--batch",
        "256",
        "--patch",
        "16",
        "--seed",
        "7",
        "--resume",
        &s(&half.join("checkpoint.pckp")),
    ]);
    let full_csv = std::fs::read_to_string(full.join("loss.csv")).unwrap();
    let half_csv = std::fs::read_to_string(half.join("loss.csv")).unwrap();
    let resumed_csv = std::fs::read_to_string(resumed.join("loss.csv")).unwrap();
    let tail: Vec<&str> = full_csv.lines().skip(1 + 8).collect();
    let resumed_rows: Vec<&str> = resumed_csv.lines().skip(1).collect();
    assert_eq!(tail, resumed_rows, "resumed trace differs");
    assert_eq!(half_csv.lines().count(), 1 + 8);
    // Checkpoints of full and resumed runs are byte-identical.
    assert_eq!(
        std::fs::read(full.join("checkpoint.pckp")).unwrap(),
        std::fs::read(resumed.join("checkpoint.pckp")).unwrap()
    );
}

#[test]
fn colorize_outputs_and_flags() {
    let tmp = TempDir::new().unwrap();
    let scene = quick_scene(&tmp, "scene", 3);
    let model = quick_train(&tmp, &scene, "model", 1);
    let recon = path(&tmp, "recon");
    ok(&[
        "colorize",
        "--input",
        &s(&scene.join("vv.pras")),
        "--checkpoint",
        &s(&model.join("checkpoint.pckp")),
        "--out",
        &s(&recon),
    ]);
    for f in ["recon.pras", "flags.pras", "pauli.png", "colorize.config.txt"] {
        assert!(recon.join(f).exists(), "missing {f}");
    }
    // PSD audit and VV consistency at raster (f32) precision.
    let cov = PolRaster::read(&recon.join("recon.pras")).unwrap();
    let flags = PolRaster::read(&recon.join("flags.pras")).unwrap();
    let vv = PolRaster::read(&scene.join("vv.pras")).unwrap();
    for y in 0..32 {
        for x in 0..32 {
            let c = cov.covariance(x, y).unwrap();
            let (feat, _) = c.normalize().unwrap();
            assert!(
                sarcolor::polmath::psd_check(&feat, 1e-5).satisfied,
                "pixel ({x},{y})"
            );
            if (flags.get(x, y, 0) as u32) & sarcolor::pipeline::FLAG_POWER_FALLBACK == 0 {
                assert_eq!(cov.get(x, y, 2), vv.get(x, y, 0), "pixel ({x},{y})");
            }
        }
    }
}

#[test]
fn eval_of_truth_against_itself_is_zero_error() {
    let tmp = TempDir::new().unwrap();
    let scene = quick_scene(&tmp, "scene", 4);
    let evald = path(&tmp, "eval");
    ok(&[
        "eval",
        "--recon",
        &s(&scene.join("covariance.pras")),
        "--truth",
        &s(&scene.join("covariance.pras")),
        "--out",
        &s(&evald),
    ]);
    let csv = std::fs::read_to_string(evald.join("metrics.csv")).unwrap();
    for line in csv.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        match cols[0] {
            name if name.starts_with("delta") || name.starts_with("Re") || name.starts_with("Im") => {
                let eps: f64 = cols[3].parse().unwrap();
                assert!(eps.abs() < 1e-9, "{name} eps {eps}");
            }
            name if name.starts_with('C') => {
                let coi: f64 = cols[4].parse().unwrap();
                assert!((coi - 1.0).abs() < 1e-6, "{name} coi {coi}");
            }
            _ => {}
        }
    }
    // Histogram mass equals pixel count.
    let hist = std::fs::read_to_string(evald.join("bartlett_hist.csv")).unwrap();
    let mass: u64 = hist
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(2).unwrap().parse::<u64>().unwrap())
        .sum();
    assert_eq!(mass, 32 * 32);
    // Row names match the error-analysis table labels.
    assert!(csv.contains("delta1") && csv.contains("Im(rho12)") && csv.contains("C12"));
}

#[test]
fn decomp_pure_volume_freeman_is_green_dominant() {
    let tmp = TempDir::new().unwrap();
    let mut raster = PolRaster::new(8, 8, Layout::Cov9);
    let f = 0.5;
    let vol = CovarianceMatrix::new(
        f,
        2.0 * f / 3.0,
        f,
        Complex64::ZERO,
        Complex64::new(f / 3.0, 0.0),
        Complex64::ZERO,
    )
    .unwrap();
    for y in 0..8 {
        for x in 0..8 {
            raster.set_covariance(x, y, &vol);
        }
    }
    let input = path(&tmp, "vol.pras");
    raster.write(&input).unwrap();
    let out = path(&tmp, "dec");
    ok(&["decomp", "--input", &s(&input), "--method", "freeman", "--out", &s(&out)]);
    let png = image::open(out.join("freeman.png")).unwrap().to_rgb8();
    let p = png.get_pixel(4, 4);
    assert!(p[1] > p[0] && p[1] > p[2], "not green-dominant: {p:?}");
    let pv = PolRaster::read(&out.join("freeman_pv.pras")).unwrap();
    let ps = PolRaster::read(&out.join("freeman_ps.pras")).unwrap();
    assert!(pv.get(4, 4, 0) > 0.0 && ps.get(4, 4, 0).abs() < 1e-6);
}

#[test]
fn decomp_sea_archetype_lands_in_surface_zone() {
    let tmp = TempDir::new().unwrap();
    let sea = PolFeature {
        delta: [0.45, 0.02, 0.53],
        rho: [
            Complex64::new(0.9, 0.0),
            Complex64::new(0.05, 0.0),
            Complex64::new(0.05, 0.0),
        ],
    };
    let cov = CovarianceMatrix::from_feature(&sea, 1.0);
    let mut raster = PolRaster::new(8, 8, Layout::Cov9);
    for y in 0..8 {
        for x in 0..8 {
            raster.set_covariance(x, y, &cov);
        }
    }
    let input = path(&tmp, "sea.pras");
    raster.write(&input).unwrap();
    let out = path(&tmp, "dec");
    ok(&["decomp", "--input", &s(&input), "--method", "halpha", "--out", &s(&out)]);
    let zones = PolRaster::read(&out.join("zones.pras")).unwrap();
    let surface = zones.data.iter().filter(|&&z| z as u32 == 1).count();
    assert!(
        surface * 2 > zones.data.len(),
        "surface zone not the majority"
    );
}

#[test]
fn decomp_unknown_method_is_rejected() {
    let tmp = TempDir::new().unwrap();
    let out = run(&[
        "decomp",
        "--input",
        "nope.pras",
        "--method",
        "bogus",
        "--out",
        &s(&path(&tmp, "x")),
    ]);
    assert!(!out.status.success());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_input_file_is_exit_2() {
    let tmp = TempDir::new().unwrap();
    let out = run(&[
        "decomp",
        "--input",
        &s(&path(&tmp, "missing.pras")),
        "--method",
        "pauli",
        "--out",
        &s(&path(&tmp, "x")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn numerical_failure_is_exit_3() {
    let tmp = TempDir::new().unwrap();
    // A zero-power pixel cannot be normalized: eval reports exit code 3.
    let raster = PolRaster::new(4, 4, Layout::Cov9);
    let input = path(&tmp, "zero.pras");
    raster.write(&input).unwrap();
    let out = run(&[
        "eval",
        "--recon",
        &s(&input),
        "--truth",
        &s(&input),
        "--out",
        &s(&path(&tmp, "x")),
    ]);
    assert_eq!(out.status.code(), Some(3));
}
