use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use elastoreg::registration::DispField;

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_elastoreg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn simulate(cfg: &Path, dir: &Path) {
    ok(&["--jobs", "1", "simulate", "--config", s(cfg), "--out", s(dir)]);
}

fn register(cfg: &Path, seq: &Path, out: &Path) {
    ok(&[
        "--jobs",
        "1",
        "register",
        "--config",
        s(cfg),
        "--sequence",
        s(seq),
        "--out",
        s(out),
    ]);
}

/// The quick configuration with the inclusion as stiff as the background and
/// only two frames.
fn homogeneous_config(dir: &Path) -> PathBuf {
    let text = fs::read_to_string(config("quick.toml"))
        .unwrap()
        .replace("inclusion_modulus = 40.0", "inclusion_modulus = 10.0")
        .replace("frames = 3", "frames = 2")
        .replace("target_frame = 2", "target_frame = 1");
    let path = dir.join("homogeneous.toml");
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn missing_sequence_reports_not_found_with_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("no_such_sequence");
    let out = run(&[
        "register",
        "--config",
        s(&config("quick.toml")),
        "--sequence",
        s(&missing),
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error: not-found:"), "{err}");
    assert!(err.contains("no_such_sequence"), "{err}");
}

#[test]
fn malformed_config_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "name = \"bad\"\n[phantom]\nno_such_key = 1\n").unwrap();
    let out = run(&["simulate", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error: config:"), "{err}");
}

#[test]
fn two_frame_homogeneous_simulation_and_registration() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = homogeneous_config(dir.path());
    let seq = dir.path().join("seq");
    simulate(&cfg, &seq);
    let listing = fs::read_to_string(seq.join("sequence.txt")).unwrap();
    assert_eq!(listing.lines().count(), 3, "{listing}");
    for f in [
        "frame_000.rfimg",
        "frame_001.rfimg",
        "registration_mesh.txt",
        "truth_registration.truthseq",
    ] {
        assert!(seq.join(f).is_file(), "{f} missing");
    }

    let reg = dir.path().join("reg");
    register(&cfg, &seq, &reg);
    for label in ["R_eps", "R_epsi", "R_Peps", "R_Psig"] {
        let d = DispField::read(&reg.join(label).join("frame_001.dispfield")).unwrap();
        assert_eq!(d.increment.as_slice(), d.accumulated.as_slice(), "{label}");
        assert!(!reg.join(label).join("frame_002.dispfield").exists());
    }
    let report = fs::read_to_string(reg.join("report.csv")).unwrap();
    assert_eq!(report.lines().filter(|l| l.starts_with("R_")).count(), 4, "{report}");
}

#[test]
fn identical_frames_register_to_zero_and_leave_contrast_undefined() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("quick.toml");
    let seq = dir.path().join("seq");
    simulate(&cfg, &seq);
    let first = fs::read(seq.join("frame_000.rfimg")).unwrap();
    for k in 1..3 {
        fs::write(seq.join(format!("frame_{k:03}.rfimg")), &first).unwrap();
    }

    let reg = dir.path().join("reg");
    register(&cfg, &seq, &reg);
    for label in ["R_eps", "R_epsi", "R_Peps", "R_Psig"] {
        for k in 1..3 {
            let d = DispField::read(&reg.join(label).join(format!("frame_{k:03}.dispfield"))).unwrap();
            let max = d.accumulated.as_slice().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(max < 1e-12, "{label} frame {k}: max |u| = {max}");
        }
    }

    // Zero measured strain makes the contrast metrics undefined.
    let out_dir = dir.path().join("metrics");
    let out = run(&[
        "metrics",
        "--config",
        s(&cfg),
        "--truth",
        s(&seq.join("truth_registration.truthseq")),
        "--measured",
        s(&reg.join("R_Psig")),
        "--out",
        s(&out_dir),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    let row = |metric: &str| {
        csv.lines()
            .find(|l| l.starts_with("quick,1,") && l.contains(&format!(",{metric},")))
            .unwrap_or_else(|| panic!("no {metric} row in {csv}"))
            .to_string()
    };
    assert!(
        row("disp_error_total").contains(",1.000000000000e2,1"),
        "{}",
        row("disp_error_total")
    );
    assert!(row("sr").ends_with(",0"), "{}", row("sr"));
}

#[test]
fn metrics_of_truth_against_itself_are_zero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("quick.toml");
    let seq = dir.path().join("seq");
    simulate(&cfg, &seq);
    let reg = dir.path().join("reg");
    register(&cfg, &seq, &reg);

    // Replace a registered field with the truth on the same mesh.
    let truth = elastoreg::forward::TruthSequence::read(&seq.join("truth_registration.truthseq")).unwrap();
    let file = reg.join("R_eps").join("frame_001.dispfield");
    let mut d = DispField::read(&file).unwrap();
    d.accumulated = truth.frames[1].clone();
    d.write(&file).unwrap();
    fs::remove_file(reg.join("R_eps").join("frame_002.dispfield")).unwrap();

    let out_dir = dir.path().join("metrics");
    ok(&[
        "metrics",
        "--config",
        s(&cfg),
        "--truth",
        s(&seq.join("truth_registration.truthseq")),
        "--measured",
        s(&file),
        "--out",
        s(&out_dir),
    ]);
    let csv = fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    for line in csv.lines().filter(|l| l.contains("_error_")) {
        let value: f64 = line.split(',').nth(4).unwrap().parse().unwrap();
        assert!(value.abs() < 1e-9, "{line}");
    }
}

#[test]
fn metrics_reject_a_field_from_another_mesh() {
    let dir = tempfile::tempdir().unwrap();
    let quick = config("quick.toml");
    let seq = dir.path().join("seq");
    simulate(&quick, &seq);
    let reg = dir.path().join("reg");
    register(&quick, &seq, &reg);

    let coarse = dir.path().join("coarse.toml");
    let text = fs::read_to_string(&quick).unwrap().replacen(
        "[registration]\nelement_size = 1.0",
        "[registration]\nelement_size = 2.0",
        1,
    );
    fs::write(&coarse, text).unwrap();
    let seq2 = dir.path().join("seq2");
    simulate(&coarse, &seq2);

    let out = run(&[
        "metrics",
        "--config",
        s(&coarse),
        "--truth",
        s(&seq2.join("truth_registration.truthseq")),
        "--measured",
        s(&reg.join("R_eps")),
        "--out",
        s(&dir.path().join("m")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: incompatible:"));
}
