use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn superres(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_superres"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn pipeline(dir: &Path, seed: &str) {
    let out = dir.to_str().unwrap();
    for cmd in ["simulate", "analyze", "reconstruct"] {
        let o = superres(&[
            cmd, "--x", "1,3", "--seed", seed, "--frames", "300", "--orders", "3..4", "--out", out,
        ]);
        assert!(o.status.success(), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
    }
}

#[test]
fn pipeline_is_byte_identical_under_a_fixed_seed() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pipeline(a.path(), "11");
    pipeline(b.path(), "11");
    for file in [
        "curves/g3.csv",
        "curves/g4.replicates.json",
        "fits.json",
        "spectra.json",
        "evidence.json",
        "table.csv",
        "reconstruction.json",
        "frames.bin",
    ] {
        assert_eq!(
            fs::read(a.path().join(file)).unwrap(),
            fs::read(b.path().join(file)).unwrap(),
            "{file} differs"
        );
    }
    let c = tempfile::tempdir().unwrap();
    pipeline(c.path(), "12");
    assert_ne!(
        fs::read(a.path().join("curves/g3.csv")).unwrap(),
        fs::read(c.path().join("curves/g3.csv")).unwrap()
    );

    let report = superres(&["report", "--out", a.path().to_str().unwrap()]);
    let text = String::from_utf8(report.stdout).unwrap();
    assert!(text.contains("geometry x = (1,3)"), "{text}");
    assert!(text.contains("candidates"), "{text}");
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(
        &cfg,
        "seed = 1\norders = [3]\n[geometry]\nx = [1, 3]\n[simulation]\nframes = 50\n",
    )
    .unwrap();
    let out = dir.path().join("out");
    let o = superres(&[
        "simulate",
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "9",
        "--orders",
        "3,4",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 9);
    assert_eq!(manifest["config"]["orders"], serde_json::json!([3, 4]));
    assert_eq!(manifest["config"]["simulation"]["frames"], 50);
    assert!(out.join("curves/g4.csv").exists());
}

#[test]
fn config_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(superres(&["simulate", "--out", out]).status.code(), Some(2));
    assert_eq!(
        superres(&["simulate", "--x", "0,3", "--out", out]).status.code(),
        Some(2)
    );

    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "frames = 3\n[geometry]\nx = [1]\n").unwrap();
    let o = superres(&["simulate", "--config", cfg.to_str().unwrap(), "--out", out]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("frames"));
}

#[test]
fn empty_evidence_exits_with_3_and_fit_failure_with_4() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    fs::create_dir_all(dir.path().join("curves")).unwrap();
    fs::write(
        dir.path().join("curves/g3.csv"),
        "delta1_rad,g_value\n0,1\n1,1.1\n2,1.2\n",
    )
    .unwrap();
    let o = superres(&["analyze", "--x", "1,3", "--orders", "3", "--out", out]);
    assert_eq!(o.status.code(), Some(4));
    // the failed order is still recorded
    assert!(dir.path().join("fits.json").exists());

    let o = superres(&["reconstruct", "--x", "1,3", "--out", out]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn single_frame_omits_sigma() {
    let dir = tempfile::tempdir().unwrap();
    let o = superres(&[
        "simulate",
        "--x",
        "1,3",
        "--frames",
        "1",
        "--orders",
        "3",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("no error bars"));
    let csv = fs::read_to_string(dir.path().join("curves/g3.csv")).unwrap();
    assert!(csv.starts_with("delta1_rad,g_value\n"));
}

#[test]
fn aperture_csv() {
    let o = superres(&["aperture", "--orders", "2..4"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows[0], "m,r_moving,r_total");
    assert_eq!(rows[1], "2,1,1");
    assert!(rows[3].starts_with("4,0.333"));
}
