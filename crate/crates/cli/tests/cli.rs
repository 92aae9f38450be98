use serde_json::Value;
use sha2::{Digest, Sha256};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

const SMALL_ORACLE: &str = r#"
seed = 3

[oracle]
grid = 11
powers = 12
ells = [10, 20, 40]
green_kubo_lags = 40

[oracle.local_times]
trajectories = 2000
times = [100, 1000]
"#;

fn lorentz(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lorentz"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p
}

fn report(dir: &Path, sub: &str) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join(sub).join("report.json")).unwrap()).unwrap()
}

fn csv_bodies(dir: &Path) -> Vec<(String, String)> {
    let mut v: Vec<(String, String)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read_to_string(&p).unwrap()))
        .collect();
    v.sort();
    v
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited")
}

#[test]
fn moments_to_eight_pass_quickly() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let t0 = Instant::now();
    let o = lorentz(&["moments", "--max-m", "8", "--out", out]);
    assert!(t0.elapsed().as_secs_f64() < 10.0);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = report(tmp.path(), "moments");
    assert_eq!(r["status"], "ok");
    assert_eq!(r["checks_passed"], true);
    let enumeration = fs::read_to_string(tmp.path().join("moments/enumeration.csv")).unwrap();
    assert!(enumeration.starts_with("m,q,N,eps,J2,J1,J11,r,s\n"));
}

#[test]
fn missing_radius_names_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(
        tmp.path(),
        "bad.toml",
        "[table]\nobstacles = [{ center = [0.0, 0.0], radius = 0.4 }, { center = [0.5, 0.5] }]\n",
    );
    let o = lorentz(&["validate", "--config", cfg.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("config invalid") && err.contains("radius"), "{err}");
    assert!(!tmp.path().join("validate").exists());
}

#[test]
fn semantic_errors_are_config_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let overlap = write(
        tmp.path(),
        "overlap.toml",
        "[table]\nobstacles = [{ center = [0.0, 0.0], radius = 0.4 }, { center = [0.3, 0.3], radius = 0.2 }]\n",
    );
    let o = lorentz(&["validate", "--config", overlap.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("table.obstacles"));
    let unknown = write(tmp.path(), "unknown.toml", "[limit_test]\ncentered = [\"nope\"]\n");
    let o = lorentz(&["limit-test", "--config", unknown.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("limit_test.centered"));
}

#[test]
fn same_seed_gives_identical_csv_bodies() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "oracle.toml", SMALL_ORACLE);
    let mut bodies = Vec::new();
    for run in ["a", "b"] {
        let out = tmp.path().join(run);
        let o = lorentz(&["oracle", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert!(matches!(code(&o), 0 | 4), "{}", String::from_utf8_lossy(&o.stderr));
        bodies.push(csv_bodies(&out.join("oracle")));
    }
    assert!(!bodies[0].is_empty());
    assert_eq!(bodies[0], bodies[1]);
    let other = tmp.path().join("c");
    lorentz(&["oracle", "--config", cfg.to_str().unwrap(), "--seed", "4", "--out", other.to_str().unwrap()]);
    let changed = csv_bodies(&other.join("oracle"));
    let sims = |b: &[(String, String)]| b.iter().find(|(n, _)| n == "local_times.csv").unwrap().1.clone();
    assert_ne!(sims(&bodies[0]), sims(&changed));
}

#[test]
fn report_hash_matches_the_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "m.toml", "seed = 9\n\n[moments]\nmax_m = 4\n");
    let o = lorentz(&["moments", "--config", cfg.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let hex: String = Sha256::digest(fs::read(&cfg).unwrap()).iter().map(|b| format!("{b:02x}")).collect();
    let r = report(tmp.path(), "moments");
    assert_eq!(r["config_hash"], hex.as_str());
    assert_eq!(r["seed"], 9);
    let m: Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("moments/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["config_hash"], hex.as_str());
    assert!(m["wall_seconds"].as_f64().unwrap() >= 0.0);
    // Defaults are materialized.
    assert_eq!(m["config"]["moments"]["brute_force_max_m"], 7);
    assert!(m["config"]["observables"][0]["observable"].is_object());
}

#[test]
fn manifest_alone_reproduces_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "oracle.toml", SMALL_ORACLE);
    let first = tmp.path().join("first");
    lorentz(&["oracle", "--config", cfg.to_str().unwrap(), "--out", first.to_str().unwrap()]);
    let manifest = first.join("oracle/manifest.json");
    let second = tmp.path().join("second");
    let o = lorentz(&["oracle", "--config", manifest.to_str().unwrap(), "--out", second.to_str().unwrap()]);
    assert!(matches!(code(&o), 0 | 4), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(csv_bodies(&first.join("oracle")), csv_bodies(&second.join("oracle")));
    let (a, b) = (report(&first, "oracle"), report(&second, "oracle"));
    assert_eq!(a["sections"], b["sections"]);
}

#[test]
fn failing_section_marks_the_report_partial() {
    let tmp = tempfile::tempdir().unwrap();
    // A periodic chain is rejected; the lazy-walk local times still run.
    let body = format!(
        "{SMALL_ORACLE}\n[oracle.chain]\nmatrix = [[0.0, 1.0], [1.0, 0.0]]\nsteps = {{ state = [[1, 0], [-1, 0]] }}\n"
    );
    let cfg = write(tmp.path(), "periodic.toml", &body);
    let o = lorentz(&["oracle", "--config", cfg.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(code(&o), 3);
    let r = report(tmp.path(), "oracle");
    assert_eq!(r["status"], "partial");
    let sections = r["sections"].as_array().unwrap();
    let chain = sections.iter().find(|s| s["name"] == "chain").unwrap();
    assert_eq!(chain["status"], "failed");
    assert_eq!(chain["error"]["code"], "InvalidChain");
    let lt = sections.iter().find(|s| s["name"] == "local_times").unwrap();
    assert_eq!(lt["status"], "ok");
}

#[test]
fn validate_certifies_the_default_table() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(
        tmp.path(),
        "v.toml",
        "[table.probe]\nboundary_points = 500\ndirections = 500\nflight_cap = 50.0\n\n[validate]\ninvariance_samples = 5000\nmin_p_value = 0.0\n",
    );
    let o = lorentz(&["validate", "--config", cfg.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = report(tmp.path(), "validate");
    let table = &r["sections"][0]["result"];
    let tau = table["certificate"]["tau_max"].as_f64().unwrap();
    assert!(tau > 0.2 && tau < 2.0, "tau_max {tau}");
    assert_eq!(table["certificate"]["heuristic"], true);
    assert!(tmp.path().join("validate/obstacles.csv").exists());
}

#[test]
fn custom_cell_table_from_csv() {
    let tmp = tempfile::tempdir().unwrap();
    write(tmp.path(), "cells.csv", "cell_x,cell_y,coefficient\n0,0,1.0\n0,1,-1.0\n");
    let cfg = write(
        tmp.path(),
        "c.toml",
        "[[observables]]\nname = \"cell0\"\npreset = \"cell0\"\n\n[[observables]]\nname = \"dipole\"\npreset = \"dipole\"\n\n\
         [[observables]]\nname = \"sin_phi_cell0\"\npreset = \"sin_phi_cell0\"\n\n[[observables]]\nname = \"vertical\"\ntable_csv = \"cells.csv\"\nintegral = 0.0\n\n[moments]\nmax_m = 2\n",
    );
    let o = lorentz(&["moments", "--config", cfg.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let m: Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("moments/manifest.json")).unwrap()).unwrap();
    let v = &m["config"]["observables"][3];
    assert_eq!(v["name"], "vertical");
    assert_eq!(v["observable"]["profile"]["cells"][1][0], serde_json::json!([0, 1]));
    assert!(v.get("table_csv").is_none());
}
