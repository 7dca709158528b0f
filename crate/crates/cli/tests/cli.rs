use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_coalescence"))
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).env("COALESCENCE_WORKERS", "1").args(args).output().unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn physics_params() -> Value {
    json!({"nu": 1.5e-5, "eps_diss": 1e-2, "a": 1e-5, "big_l": 0.1, "rho0": 1e-5, "tau_p": 1e-3, "u_p": 1e-3, "n": 1e9})
}

#[test]
fn physics_reports_all_rates() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("p.json"), physics_params().to_string()).unwrap();
    let o = run_in(dir.path(), &["physics", "--params", "p.json", "--out", "d.json"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let d = read_json(&dir.path().join("d.json"));
    for k in ["saffman_turner", "inertial_range", "capacity_heuristic", "abrahamson"] {
        assert!(d["rates"][k]["value"].as_f64().unwrap() > 0.0, "{k}");
    }
    assert!(d["kolmogorov"]["eta"].as_f64().unwrap() > 0.0);
    assert!(d["abstract"]["xi"].as_f64().is_some());
}

#[test]
fn unknown_config_keys_fail() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.json"), r#"{"cell": {"sigma0": 0.5, "sigma": 0.5, "xi": 1, "r0": 1, "bogus": 2}}"#).unwrap();
    let o = run_in(dir.path(), &["cell", "--config", "c.json", "--out", "x.json"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bogus"));
}

#[test]
fn simulate_pde_compare_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({
        "covariance": {"kind": "gaussian_bump", "kappa": 1.0, "cutoff_k": 6.0, "n_modes": 32, "seed": 1},
        "simulate": {
            "params": {"n_particles": 400, "eps_radius": 0.0025, "xi": 1.0, "sigma": 0.2, "sigma0": 0.2,
                       "r0": 1.0, "dt": 0.01, "t_end": 0.2, "seed": 3},
            "snapshot_times": [0.1, 0.2]
        },
        "pde": {"model": {"diffusivity": 0.04, "rbar": 0.0, "t_end": 0.2, "grid": {"half_width": 2.5, "cells": 32}}}
    });
    fs::write(dir.path().join("c.json"), cfg.to_string()).unwrap();
    let o = run_in(dir.path(), &["simulate", "--config", "c.json", "--out", "sim.csv", "--free"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let curve = fs::read_to_string(dir.path().join("sim.csv")).unwrap();
    assert!(curve.starts_with("t,alive_fraction"));
    assert!(dir.path().join("sim_snap1.csv").exists() && dir.path().join("sim_snap1.json").exists());

    let o = run_in(
        dir.path(),
        &["pde", "--config", "c.json", "--out", "pde.csv", "--snapshots", "0.1,0.2", "--geometry-from", "sim_snap0.csv"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let o = run_in(dir.path(), &["compare", "--sim", "sim.csv", "--pde", "pde.csv", "--out", "r.json", "--tolerance", "1.5"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = read_json(&dir.path().join("r.json"));
    assert_eq!(r["snapshots"].as_array().unwrap().len(), 2);
    assert_eq!(r["alive_fraction"]["sim"].as_f64(), Some(1.0));
    assert!((r["alive_fraction"]["pde"].as_f64().unwrap() - 1.0).abs() < 1e-9);

    let o = run_in(dir.path(), &["compare", "--sim", "sim.csv", "--pde", "pde.csv", "--out", "r.json", "--tolerance", "1e-6"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn cell_and_capacity_on_coarse_grids() {
    let dir = tempfile::tempdir().unwrap();
    let grid = json!({"h0": 0.25, "core_radius": 1.25, "domain_radius": 40.0, "stretch": 1.3, "octant": true});
    let cfg = json!({
        "covariance": {"kind": "gaussian_bump", "kappa": 1.0, "cutoff_k": 6.0, "n_modes": 64, "seed": 1},
        "cell": {"sigma0": 0.5, "sigma": 0.5, "xi": 1.0, "r0": 1.0,
                 "grid": {"h0": 0.25, "core_radius": 1.25, "domain_radius": 300.0, "stretch": 1.3, "octant": true}},
        "capacity": {"set": {"kind": "ball", "radius": 1.0}, "sigma0": 1.0, "sigma": 0.0, "xi": 1.0, "grid": grid}
    });
    fs::write(dir.path().join("c.json"), cfg.to_string()).unwrap();
    let o = run_in(dir.path(), &["cell", "--config", "c.json", "--out", "cell.json", "--dump-u", "u.csv"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let cell = read_json(&dir.path().join("cell.json"));
    let (a, b) = (cell["rbar_theta"].as_f64().unwrap(), cell["rbar_laplace"].as_f64().unwrap());
    assert!(a > 0.0 && a < 1.0 && (a / b - 1.0).abs() < 0.01);
    let u = fs::read_to_string(dir.path().join("u.csv")).unwrap();
    assert_eq!(u.lines().count(), cell["grid_stats"]["nodes"].as_u64().unwrap() as usize + 1);

    let o = run_in(dir.path(), &["capacity", "--config", "c.json", "--out", "cap.json", "--r0-scan", "1,100,3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let cap = read_json(&dir.path().join("cap.json"));
    let value = cap["capacity"]["cap_value"].as_f64().unwrap();
    assert!((value / (4.0 * std::f64::consts::PI) - 1.0).abs() < 0.1, "{value}");
    assert_eq!(cap["r0_scan"]["points"].as_array().unwrap().len(), 3);
    assert_eq!(cap["r0_scan"]["monotone"], json!(true));

    let o = run_in(dir.path(), &["capacity", "--config", "c.json", "--out", "cap.json", "--xi-scan", "1,2"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn plan_exit_code_follows_comparisons() {
    let dir = tempfile::tempdir().unwrap();
    let plan = |max: f64| {
        json!({
            "name": "tiny",
            "seeds": [1],
            "outputs_dir": "out",
            "stages": [{"id": "phys", "op": {"module": "physics", "params": physics_params()}}],
            "comparisons": [{"kind": "within", "name": "stokes", "value": "/phys/stokes", "max": max}]
        })
    };
    fs::write(dir.path().join("ok.json"), plan(1.0).to_string()).unwrap();
    fs::write(dir.path().join("bad.json"), plan(1e-6).to_string()).unwrap();
    let o = run_in(dir.path(), &["plan", "--file", "ok.json", "--out", "report.json"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = read_json(&dir.path().join("report.json"));
    assert_eq!(r["passed"], json!(true));
    assert_eq!(r["stages"][0]["cache_hit"], json!(false));
    let o = run_in(dir.path(), &["plan", "--file", "bad.json", "--out", "report.json"]);
    assert_eq!(o.status.code(), Some(2));
    let r = read_json(&dir.path().join("report.json"));
    assert_eq!(r["stages"][0]["cache_hit"], json!(true));

    let o = run_in(dir.path(), &["plan", "--builtin", "saffman_turner", "--quick", "--outputs-dir", "st"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = run_in(dir.path(), &["plan", "--builtin", "nope"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn quick_three_routes_plan_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_in(dir.path(), &["plan", "--builtin", "three_routes", "--quick", "--outputs-dir", "tr", "--out", "r.json"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = read_json(&dir.path().join("r.json"));
    let ids: Vec<&str> = r["stages"].as_array().unwrap().iter().map(|s| s["id"].as_str().unwrap()).collect();
    assert_eq!(ids, ["cell_limit", "capacity", "cell", "pde", "simulation"]);
    assert_eq!(r["comparisons"].as_array().unwrap().len(), 2);
}
