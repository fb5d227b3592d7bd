use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use halfline_weyl::cli::canonical_json;
use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_halfline-weyl"))
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn run(config: &Path, out: &Path, extra: &[&str]) -> i32 {
    let status = bin()
        .arg("run")
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(extra)
        .status()
        .unwrap();
    status.code().unwrap()
}

fn results(out: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(out.join("results.json")).unwrap()).unwrap()
}

fn complex(v: &Value) -> (f64, f64) {
    (v[0].as_f64().unwrap(), v[1].as_f64().unwrap())
}

const HARMONIC_EIGS: &str = r#"
task = "eigs"
boundary = "dirichlet"

[potential]
family = "harmonic"

[settings]
region = { re = [0.0, 12.0], im = [-1.0, 1.0] }
"#;

const CONSTANT_WEYL: &str = r#"
task = "weyl"

[potential]
family = "constant"
value = [1.0, 0.0]

[settings]
lambda = [0.0, 0.0]
x_max = 10.0
"#;

#[test]
fn eigs_harmonic_lists_three_eigenvalues() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "eigs.toml", HARMONIC_EIGS);
    let out = dir.path().join("out");
    assert_eq!(run(&cfg, &out, &["--plots"]), 0);
    let r = results(&out);
    assert_eq!(r["task"], "eigs");
    for key in ["config_echo", "diagnostics", "version"] {
        assert!(r.get(key).is_some(), "{key}");
    }
    let eigs = r["results"]["eigenvalues"].as_array().unwrap();
    assert_eq!(eigs.len(), 3);
    for (e, want) in eigs.iter().zip([3.0, 7.0, 11.0]) {
        let (re, im) = complex(&e["lambda"]);
        assert!((re - want).abs() < 1e-6 && im.abs() < 1e-6, "{re} {im}");
    }
    let csv = fs::read_to_string(out.join("eigenvalues.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "re,im,multiplicity,residual,enclosure_radius,refined");
    assert_eq!(lines.len(), 4);
    assert!(fs::read_to_string(out.join("eigenvalues.svg")).unwrap().starts_with("<svg"));
}

#[test]
fn check_a_violation_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "a.toml",
        r#"
task = "check-a"
[potential]
family = "constant"
value = [1.0, 0.0]
[settings]
lambda = [2.0, 0.0]
x_max = 10.0
"#,
    );
    let out = dir.path().join("out");
    assert_eq!(run(&cfg, &out, &[]), 3);
    let r = results(&out);
    assert_eq!(r["results"]["report"]["holds"], false);
    assert_eq!(r["results"]["report"]["first_violation"].as_f64(), Some(0.0));
    assert!(r["diagnostics"]["violation"].is_object());
}

#[test]
fn weyl_constant_potential() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "w.toml", CONSTANT_WEYL);
    let out = dir.path().join("out");
    assert_eq!(run(&cfg, &out, &[]), 0);
    let r = results(&out);
    let (re, im) = complex(&r["results"]["mu"]);
    assert!((re + 1.0).abs() < 1e-9 && im.abs() < 1e-9);
    let radius = r["results"]["final_radius"].as_f64().unwrap();
    assert!(radius <= r["results"]["radius_tol"].as_f64().unwrap());

    let mut rdr = csv::Reader::from_path(out.join("disks.csv")).unwrap();
    let radii: Vec<f64> = rdr.records().map(|r| r.unwrap()[3].parse().unwrap()).collect();
    assert!(radii.len() >= 2);
    assert!(radii.windows(2).all(|p| p[1] <= p[0]));
    for f in ["eta.csv", "boundary_limit.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
}

#[test]
fn results_round_trip_and_runs_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "eigs.toml", HARMONIC_EIGS);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_eq!(run(&cfg, &a, &[]), 0);
    let status = bin()
        .env("HALFLINE_WEYL_THREADS", "1")
        .args(["run", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&b)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    for f in ["results.json", "eigenvalues.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let text = fs::read_to_string(a.join("results.json")).unwrap();
    let parsed: Value = serde_json::from_str(&text).unwrap();
    assert_eq!(canonical_json(&parsed), text);
}

#[test]
fn unconverged_disks_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "w.toml", &format!("{CONSTANT_WEYL}b_max = 2.0\nradius_tol = 1e-12\n"));
    let out = dir.path().join("out");
    assert_eq!(run(&cfg, &out, &[]), 2);
    let r = results(&out);
    assert_eq!(r["results"]["converged"], false);
    assert_eq!(r["diagnostics"]["error_kind"], "non-convergence");
}

#[test]
fn config_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write_config(dir.path(), "bad.toml", "task = \"eigs\"\n[potential]\nfamily = \"harmonic\"\n");
    let status = bin().args(["validate", "--config"]).arg(&bad).status().unwrap();
    assert_eq!(status.code(), Some(1));
    let out = dir.path().join("out");
    assert_eq!(run(&bad, &out, &[]), 1);
    assert_eq!(results(&out)["diagnostics"]["error_kind"], "config");

    let missing = dir.path().join("missing.toml");
    assert_eq!(run(&missing, &out, &[]), 1);

    let good = write_config(dir.path(), "good.toml", HARMONIC_EIGS);
    let status = bin().args(["validate", "--config"]).arg(&good).status().unwrap();
    assert_eq!(status.code(), Some(0));

    let status = bin()
        .env("HALFLINE_WEYL_THREADS", "zero")
        .args(["run", "--config"])
        .arg(&good)
        .arg("--out")
        .arg(dir.path().join("t"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(1));
}

#[test]
fn tabulated_potential_from_csv() {
    let dir = tempfile::tempdir().unwrap();
    let mut table = String::from("x,re,im\n");
    for i in 0..=400 {
        let x = 30.0 * i as f64 / 400.0;
        table.push_str(&format!("{x},1.0,{x}\n"));
    }
    fs::write(dir.path().join("q.csv"), table).unwrap();
    let cfg = write_config(
        dir.path(),
        "t.toml",
        r#"
task = "check-a"
[potential]
family = "tabulated"
path = "q.csv"
[settings]
lambda = [0.0, 0.0]
x_lo = 1.0
x_max = 25.0
"#,
    );
    let out = dir.path().join("out");
    assert_eq!(run(&cfg, &out, &[]), 0);
    let r = results(&out);
    assert_eq!(r["results"]["report"]["holds"], true);
    assert_eq!(r["results"]["rho_growth"]["nondecreasing"], true);
}

#[test]
fn region_map_writes_grid() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "r.toml",
        r#"
task = "region-map"
[potential]
family = "constant"
value = [1.0, 0.0]
[settings]
region = { re = [-1.0, 3.0], im = [-1.0, 1.0] }
region_n = [5, 3]
x_max = 10.0
"#,
    );
    let out = dir.path().join("out");
    assert_eq!(run(&cfg, &out, &["--plots"]), 0);
    let mut rdr = csv::Reader::from_path(out.join("region.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 15);
    // lambda = 3 on the real axis puts q - lambda on the cut
    let cut = rows.iter().find(|r| &r[0] == "3.0000000000000000e0" && &r[1] == "0.0000000000000000e0").unwrap();
    assert_eq!(&cut[2], "0");
    assert!(out.join("region.svg").exists());
}

#[test]
fn resolvent_and_bounds_tasks() {
    let dir = tempfile::tempdir().unwrap();
    let source = "\n[source]\nkind = \"exponential\"\namplitude = [1.0, 0.0]\nrate = 1.0\n";
    let cfg = write_config(
        dir.path(),
        "res.toml",
        &format!("task = \"resolvent\"\n[potential]\nfamily = \"constant\"\nvalue = [1.0, 0.0]\n{source}"),
    );
    let out = dir.path().join("res");
    assert_eq!(run(&cfg, &out, &[]), 0);
    let r = results(&out);
    assert!((r["results"]["norm_y"].as_f64().unwrap() - 0.25).abs() < 1e-6);
    assert!(out.join("resolvent.csv").exists());

    let cfg = write_config(
        dir.path(),
        "b.toml",
        &format!("task = \"bounds\"\n[potential]\nfamily = \"constant\"\nvalue = [1.0, 0.0]\n{source}"),
    );
    let out = dir.path().join("b");
    assert_eq!(run(&cfg, &out, &[]), 0);
    let r = results(&out);
    for k in ["plain_bound", "energy_bound", "weighted_bound"] {
        assert_eq!(r["results"][k], true, "{k}");
    }
    assert!((r["results"]["norm_g"].as_f64().unwrap() - 0.5f64.sqrt()).abs() < 1e-6);

    // lambda = 0 for q = -1 puts q on the cut: condition A cannot hold from 0
    let cfg = write_config(
        dir.path(),
        "bad.toml",
        &format!("task = \"bounds\"\n[potential]\nfamily = \"constant\"\nvalue = [-1.0, 0.0]\n{source}"),
    );
    assert_eq!(run(&cfg, &dir.path().join("bad"), &[]), 3);
}
