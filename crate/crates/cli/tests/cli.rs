use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn nlfb(args: &[&str], threads: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_nlfb"));
    cmd.args(args);
    match threads {
        Some(t) => cmd.env("NLFB_THREADS", t),
        None => cmd.env_remove("NLFB_THREADS"),
    };
    cmd.output().expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("run.cfg");
    fs::write(&path, text).unwrap();
    path
}

fn run_in(dir: &TempDir, sub: &str, text: &str, threads: Option<&str>) -> (Output, PathBuf) {
    let cfg = write_config(dir.path(), text);
    let out = dir.path().join(format!("out-{sub}-{}", threads.unwrap_or("default")));
    let output = nlfb(
        &[sub, "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()],
        threads,
    );
    (output, out)
}

fn manifest(out: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: &str = "grid.h = 0.1\ngrid.r_inf = 2\n";

#[test]
fn solve_zero_data_gives_zero_field() {
    let dir = TempDir::new().unwrap();
    let (o, out) = run_in(&dir, "solve", SMALL, None);
    assert!(o.status.success(), "{}", stderr(&o));
    let m = manifest(&out);
    assert_eq!(m["command"], "solve");
    assert_eq!(m["results"]["energy"].as_f64(), Some(0.0));
    let result: Value = serde_json::from_str(&fs::read_to_string(out.join("result.json")).unwrap()).unwrap();
    assert!(result["field"].as_array().unwrap().iter().all(|v| v.as_f64() == Some(0.0)));
    assert_eq!(m["config_sha256"].as_str().unwrap().len(), 64);
    assert!(m["timing"]["wall_seconds"].is_number());
    let leftovers: Vec<_> = fs::read_dir(&out)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().ends_with(".partial"))
        .collect();
    assert!(leftovers.is_empty());
}

#[test]
fn unknown_key_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let (o, _) = run_in(&dir, "solve", "grid.h = 0.1\nproblem.rho_ = 1\n", None);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("rho_") && err.contains("line 2"), "{err}");
}

#[test]
fn data_file_with_wrong_signature_is_rejected() {
    let dir = TempDir::new().unwrap();
    fs::write(
        dir.path().join("g.csv"),
        "# 1 0.05 1 2\nindex,x1,role,value\n0,-1.975,exterior,0\n",
    )
    .unwrap();
    let text = format!("{SMALL}problem.g = file\nproblem.g_file = g.csv\n");
    let (o, out) = run_in(&dir, "solve", &text, None);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(!out.join("manifest.json").exists());
}

#[test]
fn data_file_round_trips() {
    let dir = TempDir::new().unwrap();
    let text = format!("{SMALL}problem.g = half_space\nproblem.rho = 0.2\n");
    let (o, first) = run_in(&dir, "solve", &text, None);
    assert!(o.status.success(), "{}", stderr(&o));
    fs::copy(first.join("field.csv"), dir.path().join("g.csv")).unwrap();
    let text = format!("{SMALL}problem.g = file\nproblem.g_file = g.csv\nproblem.rho = 0.2\n");
    let (o, second) = run_in(&dir, "analyze", &text, None);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(second.join("report.json").exists());
}

#[test]
fn rho_sweep_writes_table_and_slope() {
    let dir = TempDir::new().unwrap();
    let text = format!(
        "{SMALL}problem.g = bump\nsweep.rhos = 1e-3, 1e-2, 1e-1, 1\nsolver.restarts = 2\n"
    );
    let (o, out) = run_in(&dir, "rho-sweep", &text, None);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("rho_sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "rho,lifting_distance");
    assert_eq!(lines.len(), 5);
    let rhos: Vec<f64> = lines[1..].iter().map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(rhos, vec![1e-3, 1e-2, 1e-1, 1.0]);
    assert!(manifest(&out)["results"].get("slope").is_some());
}

#[test]
fn rho_sweep_without_rhos_leaves_previous_run_intact() {
    let dir = TempDir::new().unwrap();
    let (o, out) = run_in(&dir, "solve", SMALL, None);
    assert!(o.status.success());
    let before = fs::read(out.join("manifest.json")).unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let o = nlfb(
        &["rho-sweep", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()],
        None,
    );
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(fs::read(out.join("manifest.json")).unwrap(), before);
}

#[test]
fn oracle_compare_reports_agreement() {
    let dir = TempDir::new().unwrap();
    let text = "grid.h = 0.2\ngrid.r_inf = 2\nkernel.s = 0.4\nproblem.g = half_space\nproblem.phase = two\n\
                problem.xi = 0.2\noracle.instances = 50\nsolver.restarts = 8\n";
    let (o, out) = run_in(&dir, "oracle-compare", text, None);
    assert!(o.status.success(), "{}", stderr(&o));
    let m = manifest(&out);
    assert_eq!(m["results"]["interior_nodes"], 10);
    assert_eq!(m["results"]["instances"], 50);
    assert_eq!(m["results"]["agreement_percent"].as_f64(), Some(100.0));
    let csv = fs::read_to_string(out.join("oracle_compare.csv")).unwrap();
    assert_eq!(csv.lines().count(), 51);
}

#[test]
fn oracle_compare_on_large_grid_is_a_capacity_error() {
    let dir = TempDir::new().unwrap();
    let (o, _) = run_in(&dir, "oracle-compare", SMALL, None);
    assert_eq!(o.status.code(), Some(5), "{}", stderr(&o));
}

#[test]
fn analyze_and_refine_write_tables() {
    let dir = TempDir::new().unwrap();
    let text = format!("{SMALL}problem.g = half_space\nproblem.rho = 0.2\nrefine.levels = 1\nsolver.restarts = 2\n");
    let (o, out) = run_in(&dir, "analyze", &text, None);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert!(report.get("subsolution_max").is_some());
    for k in 0..report["points"].as_array().unwrap().len() {
        let csv = fs::read_to_string(out.join(format!("density_{k}.csv"))).unwrap();
        assert!(csv.starts_with("r,sup,zero_ratio,pos_ratio\n"));
    }
    let (o, out) = run_in(&dir, "refine", &text, None);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("refine.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn invalid_thread_count_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let (o, _) = run_in(&dir, "solve", SMALL, Some("zero"));
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn thread_count_does_not_change_artifacts() {
    let dir = TempDir::new().unwrap();
    let text = format!("{SMALL}problem.g = half_space\nproblem.rho = 0.3\nproblem.phase = two\nsolver.restarts = 4\n");
    let (a, out1) = run_in(&dir, "solve", &text, Some("1"));
    let (b, out4) = run_in(&dir, "solve", &text, Some("4"));
    assert!(a.status.success() && b.status.success());
    for name in ["result.json", "field.csv"] {
        assert_eq!(fs::read(out1.join(name)).unwrap(), fs::read(out4.join(name)).unwrap(), "{name}");
    }
    let strip = |mut m: Value| {
        m.as_object_mut().unwrap().remove("timing");
        m
    };
    assert_eq!(strip(manifest(&out1)), strip(manifest(&out4)));
}

#[test]
fn seed_flag_overrides_config() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("seeded");
    let o = nlfb(
        &["solve", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "17"],
        None,
    );
    assert!(o.status.success());
    assert_eq!(manifest(&out)["seeds"]["base"], 17);
}
