//! End-to-end tests of the `mtd` binary against direct library calls.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::Value;

use mtd_core::cli::{certify_run, recover_run, solve_run, SolutionFile, EXIT_CONFIG, EXIT_GATE, EXIT_OK};
use mtd_core::config::{OutageConfig, ScenarioConfig};

fn configs() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn mtd(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_mtd")).args(args).output().expect("spawn mtd");
    let text = format!("{}{}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr));
    (out.status.code().unwrap_or(-1), text)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path, name: &str, cfg: &ScenarioConfig) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, cfg.to_json().unwrap()).unwrap();
    p
}

fn solve_to(dir: &Path, config: &Path, seed: u64) -> PathBuf {
    let (code, text) = mtd(&["--config", s(config), "--seed", &seed.to_string(), "--out", s(dir), "solve"]);
    assert_eq!(code, EXIT_OK, "{text}");
    dir.join("solution.json")
}

fn json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

/// Solution JSON without the wall-clock field.
fn timeless(p: &Path) -> Value {
    let mut v = json(p);
    v["checkpoint"]["report"].as_object_mut().unwrap().remove("wall_time_s");
    v
}

#[test]
fn solve_and_certify_are_thin_compositions() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = configs().join("circular_small_leader.json");
    let sol_path = solve_to(dir.path(), &cfg_path, 3);
    let from_cli = SolutionFile::load(&sol_path).unwrap();
    let direct = solve_run(&ScenarioConfig::load(&cfg_path).unwrap(), 3).unwrap();
    assert_eq!(from_cli.decision, direct.decision);
    assert_eq!(from_cli.checkpoint.z, direct.checkpoint.z);
    assert_eq!(from_cli.checkpoint.report.status, direct.checkpoint.report.status);
    assert_eq!(from_cli.seed, 3);

    let (code, text) = mtd(&["--out", s(dir.path()), "certify", "--solution", s(&sol_path)]);
    assert_eq!(code, EXIT_OK, "{text}");
    let cert = json(&dir.path().join("certificate.json"));
    let expect = serde_json::to_value(certify_run(&from_cli, from_cli.config.epsilon).unwrap()).unwrap();
    assert_eq!(cert, expect);

    let (code, text) = mtd(&["--out", s(dir.path()), "recover", "--solution", s(&sol_path)]);
    assert_eq!(code, EXIT_OK, "{text}");
    let rec = json(&dir.path().join("recovery.json"));
    assert_eq!(rec, serde_json::to_value(recover_run(&from_cli, None).unwrap()).unwrap());
}

#[test]
fn same_seed_gives_identical_outputs() {
    let cfg = configs().join("circular_small_leader.json");
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert_eq!(timeless(&solve_to(a.path(), &cfg, 5)), timeless(&solve_to(b.path(), &cfg, 5)));
    for d in [&a, &b] {
        let (code, text) = mtd(&["--config", s(&cfg), "--seed", "7", "--out", s(d.path()), "ensemble", "--runs", "2"]);
        assert_eq!(code, EXIT_OK, "{text}");
    }
    for f in ["ensemble.csv", "summary.json", "histograms.csv"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let csv = fs::read_to_string(a.path().join("ensemble.csv")).unwrap();
    assert!(csv.starts_with("# mtd-ensemble v1\n"));
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn configuration_errors_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _) = mtd(&["--config", "/nonexistent/config.json", "--out", s(dir.path()), "solve"]);
    assert_eq!(code, EXIT_CONFIG);

    let mut v = json(&configs().join("double_integrator.json"));
    v["transcription"]["n_leader"] = Value::from(0);
    let bad = dir.path().join("bad.json");
    fs::write(&bad, v.to_string()).unwrap();
    let (code, text) = mtd(&["--config", s(&bad), "--out", s(dir.path()), "solve"]);
    assert_eq!(code, EXIT_CONFIG, "{text}");

    v["transcription"]["n_leader"] = Value::from(10);
    v["transcription"]["unknown_knob"] = Value::from(1.0);
    fs::write(&bad, v.to_string()).unwrap();
    let (code, text) = mtd(&["--config", s(&bad), "--out", s(dir.path()), "solve"]);
    assert_eq!(code, EXIT_CONFIG);
    assert!(text.contains("unknown_knob"), "{text}");

    let (code, _) = mtd(&["--out", s(dir.path()), "solve"]);
    assert_eq!(code, EXIT_CONFIG);
}

#[test]
fn failed_jacobian_gate_exits_with_code_4() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ScenarioConfig::load(&configs().join("circular_small_bilevel.json")).unwrap();
    let (code, text) = mtd(&["--config", s(&write_config(dir.path(), "ok.json", &cfg)), "--out", s(dir.path()), "check-jacobian"]);
    assert_eq!(code, EXIT_OK, "{text}");
    let summary = json(&dir.path().join("jacobian.json"));
    assert_eq!(summary["passed"], Value::Bool(true));
    assert!(dir.path().join("e_rel.csv").exists() && dir.path().join("sparsity.csv").exists());

    cfg.jacobian.gate = 1e-30;
    let (code, text) = mtd(&["--config", s(&write_config(dir.path(), "tight.json", &cfg)), "--out", s(dir.path()), "check-jacobian", "--point", "random"]);
    assert_eq!(code, EXIT_GATE, "{text}");
}

#[test]
fn zero_length_outage_gives_degenerate_certificate_and_no_recovery_demand() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ScenarioConfig::load(&configs().join("double_integrator.json")).unwrap();
    cfg.outage = Some(OutageConfig { n_follower: Some(10), first: 3, count: 0 });
    let sol = solve_to(dir.path(), &write_config(dir.path(), "zero.json", &cfg), 0);

    let (code, text) = mtd(&["--out", s(dir.path()), "certify", "--solution", s(&sol)]);
    assert_eq!(code, EXIT_OK, "{text}");
    let c = json(&dir.path().join("certificate.json"));
    assert!(c["window"].is_null() && c["certificate"].is_null());
    for k in ["delta_theoretical", "delta_computed", "dtau_theoretical", "dtau_computed", "dtau_actual"] {
        assert_eq!(c["triad"][k].as_f64(), Some(0.0), "{k}");
    }

    let (code, text) = mtd(&["--out", s(dir.path()), "recover", "--solution", s(&sol)]);
    assert_eq!(code, EXIT_OK, "{text}");
    let r = json(&dir.path().join("recovery.json"));
    assert!(r["r_e"].is_null(), "{r}");
    assert_eq!(r["e_min"].as_f64(), Some(0.0));
    assert_eq!(r["feasible"], Value::Bool(true));
}

#[test]
fn double_integrator_recovery_matches_closed_form_gramian() {
    let dir = tempfile::tempdir().unwrap();
    let sol = solve_to(dir.path(), &configs().join("double_integrator.json"), 0);
    let t_final = SolutionFile::load(&sol).unwrap().decision.t_dag;
    let t = 0.3 * t_final;
    let (code, text) = mtd(&["--out", s(dir.path()), "recover", "--solution", s(&sol), "--t-rec", &t.to_string(), "--u-bar", "0.5"]);
    assert_eq!(code, EXIT_OK, "{text}");
    let r = json(&dir.path().join("recovery.json"));
    let w: Vec<Vec<f64>> = serde_json::from_value(r["w"].clone()).unwrap();
    let w_rec: Vec<Vec<f64>> = serde_json::from_value(r["w_recovery"].clone()).unwrap();
    let (mut err, mut err_rec, mut scale) = (0.0f64, 0.0f64, 0.0f64);
    for i in 0..6 {
        for j in 0..6 {
            let (a, b) = (i % 3, j % 3);
            let expect = if a != b {
                0.0
            } else {
                match (i < 3, j < 3) {
                    (true, true) => t.powi(3) / 3.0,
                    (false, false) => t,
                    _ => t * t / 2.0,
                }
            };
            let sign = if (i < 3) != (j < 3) { -1.0 } else { 1.0 };
            err = err.max((w[i][j] - expect).abs());
            err_rec = err_rec.max((w_rec[i][j] - sign * expect).abs());
            scale = scale.max(expect.abs());
        }
    }
    assert!(err <= 1e-10 * scale && err_rec <= 1e-10 * scale, "{err} {err_rec} {scale}");
    assert!((r["e_avail"].as_f64().unwrap() - 3.0 * 0.25 * t).abs() <= 1e-12 * t);
    assert_eq!(r["t_rec"].as_f64(), Some(t));
}

#[test]
fn shipped_configs_round_trip() {
    let mut n = 0;
    for entry in fs::read_dir(configs()).unwrap() {
        let p = entry.unwrap().path();
        let cfg = ScenarioConfig::load(&p).unwrap();
        let back = ScenarioConfig::from_json_str(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(cfg, back, "{}", p.display());
        n += 1;
    }
    assert!(n >= 6);
}

#[test]
fn leader_only_solve_meets_constraint_tolerance() {
    let mut cfg = ScenarioConfig::load(&configs().join("circular_small_leader.json")).unwrap();
    cfg.outage = None;
    let sol = solve_run(&cfg, 1).unwrap();
    let r = &sol.checkpoint.report;
    assert_eq!(r.status, mtd_core::solver::SolveStatus::Converged);
    assert!(r.max_violation <= 1e-8, "{}", r.max_violation);
    let last = sol.decision.x_dag.last().unwrap();
    assert!(last.iter().all(|v| v.abs() <= 1e-8), "{last:?}");
    let t = sol.decision.t_dag;
    assert!((cfg.transcription.t_bounds[0]..=cfg.transcription.t_bounds[1]).contains(&t));
}
