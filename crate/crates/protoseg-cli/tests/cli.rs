//! End-to-end tests of the `protoseg` binary: every subcommand, exit-code
//! conventions, artifact formats, and determinism of `gen`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_protoseg"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary should launch")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Generates a small corpus and returns its directory.
fn small_corpus(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    let out = run(&[
        "gen",
        "--out",
        data.to_str().unwrap(),
        "--num",
        "6",
        "--classes",
        "3",
        "--size",
        "32",
        "--seed",
        "5",
    ]);
    assert!(out.status.success(), "gen failed: {}", stderr(&out));
    data
}

/// Trains a one-epoch toy model and returns the checkpoint path.
fn toy_checkpoint(dir: &Path, data: &Path) -> PathBuf {
    let cfg = dir.join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"z": 8, "radius": 1, "epochs": 1, "episodes_per_epoch": 3, "t_train": 1, "lr": 0.001}"#,
    )
    .unwrap();
    let ckpt = dir.join("model.ckpt");
    let out = run(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--holdout",
        "2",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "train failed: {}", stderr(&out));
    ckpt
}

fn dir_digest(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let entry = entry.unwrap();
        files.insert(
            entry.file_name().to_string_lossy().into_owned(),
            std::fs::read(entry.path()).unwrap(),
        );
    }
    files
}

#[test]
fn gen_is_bitwise_deterministic_and_validates_classes() {
    let tmp = TempDir::new().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for dir in [&a, &b] {
        let out = run(&[
            "gen", "--out", dir.to_str().unwrap(), "--num", "4", "--classes", "2", "--size",
            "32", "--seed", "9",
        ]);
        assert!(out.status.success());
    }
    assert_eq!(dir_digest(&a), dir_digest(&b), "same flags must give identical bytes");

    let out = run(&[
        "gen", "--out", tmp.path().join("c").to_str().unwrap(), "--num", "4", "--classes", "1",
        "--size", "32", "--seed", "9",
    ]);
    assert_eq!(out.status.code(), Some(2), "argument errors exit 2");
    assert!(stderr(&out).contains("need ≥ 2 classes"), "got: {}", stderr(&out));
}

#[test]
fn gradcheck_passes_and_rejects_unknown_ops() {
    let out = run(&["gradcheck", "--op", "dice", "--seed", "3"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("dice"));
    assert!(stdout(&out).contains("PASS"));

    let out = run(&["gradcheck", "--op", "bogus"]);
    assert_eq!(out.status.code(), Some(2), "unknown op is an argument error");
}

#[test]
fn train_writes_checkpoint_manifest_and_commented_log() {
    let tmp = TempDir::new().unwrap();
    let data = small_corpus(tmp.path());
    let ckpt = toy_checkpoint(tmp.path(), &data);

    assert!(ckpt.exists());
    assert!(ckpt.with_extension("ckpt.json").exists() || {
        // manifest lives at "<out>.json" appended, not an extension swap
        let mut os = ckpt.as_os_str().to_owned();
        os.push(".json");
        PathBuf::from(os).exists()
    });
    let log = {
        let mut os = ckpt.as_os_str().to_owned();
        os.push(".train.csv");
        PathBuf::from(os)
    };
    let text = std::fs::read_to_string(&log).unwrap();
    assert!(text.starts_with("# "), "log must open with config echo lines");
    assert!(text.contains("# radius = 1"));
    assert!(text.contains("# holdout = 2"));
    assert!(text.contains("epoch,l_seg"), "header row present");
}

#[test]
fn eval_writes_report_and_curve_with_config_echo() {
    let tmp = TempDir::new().unwrap();
    let data = small_corpus(tmp.path());
    let ckpt = toy_checkpoint(tmp.path(), &data);
    let report = tmp.path().join("report.csv");
    let curve = tmp.path().join("curve.csv");
    let out = run(&[
        "eval",
        "--data",
        data.to_str().unwrap(),
        "--model",
        ckpt.to_str().unwrap(),
        "--holdout",
        "2",
        "--repeats",
        "2",
        "--t-infer",
        "3",
        "--report",
        report.to_str().unwrap(),
        "--curve",
        curve.to_str().unwrap(),
        "--baseline",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("affine-only baseline mean DSC"), "{stdout}");

    let rep = std::fs::read_to_string(&report).unwrap();
    assert!(rep.contains("# t_infer = 3"));
    assert!(rep.contains("# baseline_mean_dsc = "));
    assert!(rep.contains("class,repeat,mean_dsc"));
    assert!(rep.contains("summary"));

    let cur = std::fs::read_to_string(&curve).unwrap();
    assert!(cur.contains("t,mean_dsc"));
    let data_rows: Vec<&str> =
        cur.lines().filter(|l| !l.starts_with('#') && !l.starts_with("t,")).collect();
    assert_eq!(data_rows.len(), 3, "one row per iteration: {cur}");
    assert!(data_rows[0].starts_with("1,"));
    assert!(data_rows[2].starts_with("3,"));
}

#[test]
fn eval_rejects_config_conflicting_with_manifest() {
    let tmp = TempDir::new().unwrap();
    let data = small_corpus(tmp.path());
    let ckpt = toy_checkpoint(tmp.path(), &data);
    let bad_cfg = tmp.path().join("bad.json");
    std::fs::write(&bad_cfg, r#"{"radius": 2}"#).unwrap();
    let out = run(&[
        "eval",
        "--data",
        data.to_str().unwrap(),
        "--model",
        ckpt.to_str().unwrap(),
        "--holdout",
        "2",
        "--config",
        bad_cfg.to_str().unwrap(),
        "--report",
        tmp.path().join("r.csv").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1), "manifest conflicts are runtime errors");
    assert!(stderr(&out).contains("radius"), "got: {}", stderr(&out));
}

#[test]
fn infer_emits_masks_and_per_iteration_dsc() {
    let tmp = TempDir::new().unwrap();
    let data = small_corpus(tmp.path());
    let ckpt = toy_checkpoint(tmp.path(), &data);
    let prefix = tmp.path().join("pred");
    let out = run(&[
        "infer",
        "--model",
        ckpt.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--support",
        "s0000",
        "--query",
        "s0001",
        "--class",
        "2",
        "--t-infer",
        "2",
        "--out",
        prefix.to_str().unwrap(),
        "--emit-iterations",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));

    let final_pgm = tmp.path().join("pred.final.pgm");
    let bytes = std::fs::read(&final_pgm).unwrap();
    assert!(bytes.starts_with(b"P5\n32 32\n255\n"), "valid P5 header");
    let pixels = &bytes[bytes.len() - 32 * 32..];
    assert!(pixels.iter().all(|&b| b == 0 || b == 255), "binary mask values");

    assert!(tmp.path().join("pred.iter1.pgm").exists());
    assert!(tmp.path().join("pred.iter2.pgm").exists());
    assert!(!tmp.path().join("pred.iter3.pgm").exists());

    let dsc_csv = std::fs::read_to_string(tmp.path().join("pred.dsc.csv")).unwrap();
    assert!(dsc_csv.contains("t,dsc"));
    assert!(dsc_csv.lines().any(|l| l.starts_with("0,")), "initial-mask row present");
    assert!(dsc_csv.lines().any(|l| l.starts_with("2,")), "final iteration row present");

    let out = run(&[
        "infer",
        "--model",
        ckpt.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--support",
        "nope",
        "--query",
        "s0001",
        "--class",
        "2",
        "--out",
        prefix.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1), "unknown sample ids are runtime errors");
}

#[test]
fn missing_dataset_is_a_runtime_error() {
    let tmp = TempDir::new().unwrap();
    let out = run(&[
        "train",
        "--data",
        tmp.path().join("absent").to_str().unwrap(),
        "--holdout",
        "0",
        "--out",
        tmp.path().join("m.ckpt").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
}
