//! End-to-end runs of the `dnf` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dnf_core::model::Checkpoint;
use dnf_core::scenegen::{Corpus, Split};
use dnf_core::tensor::read_map;

fn dnf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dnf")).args(args).args(["--log", "warn"]).output().expect("spawn dnf")
}

fn ok(args: &[&str]) -> String {
    let out = dnf(args);
    assert!(out.status.success(), "dnf {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

/// A tiny corpus plus a one-epoch flow checkpoint.
fn fixture(dir: &Path) -> (PathBuf, PathBuf) {
    let corpus = dir.join("corpus");
    let run = dir.join("run");
    ok(&["gen", "--train", "12", "--test", "4", "--res", "16", "--seed", "2", "--out", &s(&corpus)]);
    ok(&["train", "--corpus", &s(&corpus), "--out", &s(&run), "--epochs", "1", "--batch", "4", "--base-channels", "4", "--seed", "3"]);
    (corpus, run.join("model.dnfc"))
}

#[test]
fn pipeline_is_deterministic_and_jobs_invariant() {
    let dir = tempfile::tempdir().unwrap();
    let (corpus, ckpt) = fixture(dir.path());
    for f in ["config.json", "train_log.csv", "model.dnfc"] {
        assert!(ckpt.parent().unwrap().join(f).exists(), "{f} missing");
    }
    let m1 = dir.path().join("m1.csv");
    let m2 = dir.path().join("m2.csv");
    let m3 = dir.path().join("m3.csv");
    ok(&["eval", "--ckpt", &s(&ckpt), "--corpus", &s(&corpus), "--jobs", "1", "--out", &s(&m1)]);
    ok(&["eval", "--ckpt", &s(&ckpt), "--corpus", &s(&corpus), "--jobs", "1", "--out", &s(&m2)]);
    ok(&["eval", "--ckpt", &s(&ckpt), "--corpus", &s(&corpus), "--jobs", "3", "--out", &s(&m3)]);
    let a = std::fs::read(&m1).unwrap();
    assert_eq!(a, std::fs::read(&m2).unwrap());
    assert_eq!(a, std::fs::read(&m3).unwrap());
    let text = String::from_utf8(a).unwrap();
    assert!(text.starts_with("sample,property,psnr,ssim,ae_deg,amre,whdr\n"));
    // 4 samples x 5 properties plus 5 mean rows.
    assert_eq!(text.lines().count(), 1 + 20 + 5);
    assert!(dir.path().join("m1.config.json").exists());

    // Same seeds from scratch give the same weights (the checkpoint also records the corpus path).
    let again = tempfile::tempdir().unwrap();
    let (_, ckpt2) = fixture(again.path());
    let (a, b) = (Checkpoint::load(&ckpt).unwrap(), Checkpoint::load(&ckpt2).unwrap());
    assert_eq!(a.model.params.checksum(), b.model.params.checksum());
}

#[test]
fn infer_lightfit_relight() {
    let dir = tempfile::tempdir().unwrap();
    let (corpus, ckpt) = fixture(dir.path());
    let c = Corpus::open(&corpus).unwrap();
    let sample = c.sample_path(Split::Test, 0);
    let pred = dir.path().join("pred");
    ok(&["infer", "--ckpt", &s(&ckpt), "--input", &s(&sample), "--out", &s(&pred)]);
    for p in ["albedo", "metallic", "roughness", "normal", "depth", "mask"] {
        let m = read_map(&pred.join(format!("{p}.dnt"))).unwrap();
        assert_eq!((m.height, m.width), (16, 16), "{p}");
        assert!(m.is_finite());
    }
    assert!(pred.join("albedo.png").exists());

    let lights = dir.path().join("lights.json");
    let stdout = ok(&["lightfit", "--sample", &s(&sample), "--out", &s(&lights)]);
    assert!(!stdout.is_empty());
    let relit = dir.path().join("relit.dnt");
    ok(&["relight", "--sample", &s(&sample), "--lights", &s(&lights), "--out", &s(&relit)]);
    let img = read_map(&relit).unwrap();
    let gt = read_map(&sample.join("image.dnt")).unwrap();
    assert!(dnf_core::metrics::psnr(&img, &gt, 1.0).unwrap() > 30.0);
    let edited = dir.path().join("edited.dnt");
    ok(&["relight", "--sample", &s(&sample), "--lights", &s(&lights), "--albedo", "0,0,0", "--metallic", "1", "--out", &s(&edited)]);
    let e = read_map(&edited).unwrap();
    assert!(e.data.iter().sum::<f32>() < img.data.iter().sum::<f32>());
}

#[test]
fn ablate_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    ok(&["gen", "--train", "8", "--test", "2", "--res", "16", "--seed", "5", "--out", &s(&corpus)]);
    let out = dir.path().join("abl");
    ok(&[
        "ablate", "--corpus", &s(&corpus), "--out", &s(&out), "--arms", "flow,noise_flow,image_ddpm_v", "--repeats", "1", "--seed", "3", "--epochs", "1", "--batch", "4",
        "--base-channels", "4", "--ddpm-steps", "3", "--sweep-steps", "1,2",
    ]);
    let table = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    let rows: Vec<&str> = table.lines().collect();
    assert!(rows[0].starts_with("arm,property,runs,psnr,psnr_std,ssim"));
    assert_eq!(rows.len(), 1 + 3);
    for arm in ["flow", "noise_flow", "image_ddpm_v"] {
        assert!(rows.iter().any(|r| r.starts_with(&format!("{arm},albedo,1,"))), "{arm} row missing");
    }
    ok(&["report", "--dir", &s(&out)]);
    let report = std::fs::read_to_string(out.join("report.txt")).unwrap();
    assert!(report.contains("K=2"));
    assert!(std::fs::read_to_string(out.join("step_sweep.csv")).unwrap().starts_with("arm,steps,psnr,runs\n"));
}

#[test]
fn error_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none.dnfc");
    let out = dir.path().join("x.csv");
    assert_eq!(dnf(&["eval", "--ckpt", &s(&missing), "--corpus", &s(dir.path()), "--out", &s(&out)]).status.code(), Some(3));
    let garbage = dir.path().join("garbage.dnfc");
    std::fs::write(&garbage, b"not a checkpoint").unwrap();
    assert_eq!(dnf(&["infer", "--ckpt", &s(&garbage), "--input", &s(dir.path()), "--out", &s(&out)]).status.code(), Some(3));
    assert_eq!(dnf(&["train", "--lambda-rec", "0.1", "--corpus", "c", "--out", "o"]).status.code(), Some(2));
    assert_eq!(dnf(&["gen", "--train", "1"]).status.code(), Some(2));
    assert!(!out.exists());
}
