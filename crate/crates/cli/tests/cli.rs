use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn slowlight(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slowlight")).args(args).output().expect("binary runs")
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn figure1_passes_checks_and_writes_its_files() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let o = slowlight(&["scenario", "figure1", "--check", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["manifest.json", "report.json", "dispersion_curves.csv", "diagonals.csv", "working_points.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let m = manifest(&out);
    assert_eq!(m["status"], "complete");
    assert_eq!(m["checks_passed"], true);
    assert_eq!(m["derived"]["k0"], 1.0e7);
}

#[test]
fn repeated_runs_give_identical_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        let o = slowlight(&["dispersion", "--out", d.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0));
    }
    for f in ["dispersion_curves.csv", "full_relation.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn configuration_errors_exit_with_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let out = out.to_str().unwrap();
    let bad_unit = write(tmp.path(), "unit.toml", "[packet]\nsigma = \"1 s\"\n");
    let negative = write(tmp.path(), "neg.toml", "[group_velocity]\nkind = \"uniform\"\nvalue = \"-1 m/s\"\n");
    let unknown = write(tmp.path(), "unknown.toml", "[grid]\nsize = 3\n");
    let other = write(tmp.path(), "other.toml", "[scenario]\nname = \"figure3\"\n");
    for args in [
        vec!["ray", "--config", &bad_unit, "--out", out],
        vec!["ray", "--config", &negative, "--out", out],
        vec!["ray", "--config", &unknown, "--out", out],
        vec!["scenario", "figure2a", "--config", &other, "--out", out],
        vec!["scenario", "figure9", "--out", out],
        vec!["scenario", "figure1", "--resolution-scale", "3", "--out", out],
        vec!["ray", "--config", "/nonexistent/config.toml", "--out", out],
    ] {
        let o = slowlight(&args);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
}

#[test]
fn numerical_failure_exits_with_3_and_marks_the_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "nyq.toml", "[grid]\nn = 8\n[packet]\nsigma = \"2 mm\"\n[wave]\nt_end = \"1 us\"\n");
    let out = tmp.path().join("run");
    let o = slowlight(&["wave", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    let m = manifest(&out);
    assert_eq!(m["status"], "failed");
    assert!(m["error"].as_str().unwrap().contains("Nyquist"));
}

#[test]
fn failed_checks_exit_with_4_only_when_enforced() {
    let tmp = tempfile::tempdir().unwrap();
    // No drop ever reflects, so the sweep cannot show any ordering.
    let cfg = write(tmp.path(), "flat.toml", "[sweep]\ndrop_max = \"0 mm/s\"\ndrop_steps = 2\nv_g_steps = 2\n");
    let out = tmp.path().join("run");
    let out = out.to_str().unwrap();
    let o = slowlight(&["sweep", "--config", &cfg, "--out", out, "--check"]);
    assert_eq!(o.status.code(), Some(4));
    let o = slowlight(&["sweep", "--config", &cfg, "--out", out]);
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn resolution_scale_reaches_the_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let o = slowlight(&["ray", "--resolution-scale", "0.5", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(manifest(&out)["grid"]["n"], 2048);
}
