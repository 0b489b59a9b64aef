use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn circsel(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_circsel"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn desk_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn run_adversary_report_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("runs");
    let cfg = desk_config();
    let o = circsel(&["run", "--config", s(&cfg), "--seed", "3", "--duration", "240", "--strategy", "car", "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let dir = out.join("seed-3");
    for f in ["streams.csv", "circuits.csv", "pool.csv", "metrics.json", "topology.toml", "manifest.toml"] {
        assert!(dir.join(f).is_file(), "missing {f}");
    }
    let manifest = fs::read_to_string(dir.join("manifest.toml")).unwrap();
    assert!(manifest.contains("strategy = \"car\""));
    assert!(manifest.contains("seeds = [3]"));

    let o = circsel(&["adversary", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.join("adversary.json").is_file());
    assert!(dir.join("compromise_relay.csv").is_file());
    assert!(dir.join("compromise_as.csv").is_file());

    let rep = tmp.path().join("rep");
    let o = circsel(&["report", s(&out), "--out", s(&rep)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(rep.join("report.txt").is_file());
    assert!(rep.join("seed-3_ttfb_cdf.tsv").is_file());
}

#[test]
fn manifest_rerun_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let o = circsel(&["run", "--seed", "5", "--duration", "180", "--out", s(&a)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = circsel(&["run", "--manifest", s(&a.join("seed-5/manifest.toml")), "--out", s(&b)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["streams.csv", "metrics.json", "manifest.toml"] {
        assert_eq!(fs::read(a.join("seed-5").join(f)).unwrap(), fs::read(b.join("seed-5").join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn sweep_prints_grid_with_reference_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("sweep");
    let o = circsel(&[
        "sweep", "--seed", "1", "--duration", "150", "--strategy", "vanilla,car,rtt_only", "--circuits", "3,5", "--out", s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8(o.stdout).unwrap();
    for row in ["vanilla-unchanged", "car-unchanged", "rtt_only-n3", "rtt_only-n5", "published reference"] {
        assert!(text.contains(row), "missing {row} in\n{text}");
    }
    assert!(out.join("sweep.csv").is_file());
    assert!(out.join("rtt_only-n5/seed-1/streams.csv").is_file());
}

#[test]
fn config_errors_exit_1() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(circsel(&["run", "--config", "/nonexistent/x.toml"]).status.code(), Some(1));
    assert_eq!(circsel(&["run", "--strategy", "fastest"]).status.code(), Some(1));
    assert_eq!(circsel(&["run", "--circuits", "0"]).status.code(), Some(1));
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "[experiment]\nduration_s = -5\n").unwrap();
    let o = circsel(&["run", "--config", s(&bad), "--out", s(tmp.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("duration_s"));
}

#[test]
fn runtime_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let o = circsel(&["report", s(tmp.path()), "--out", s(&tmp.path().join("r"))]);
    assert_eq!(o.status.code(), Some(2));
    let o = circsel(&["adversary", s(tmp.path())]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn help_exits_0() {
    let o = circsel(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).contains("sweep"));
}
