use std::path::Path;

use assert_cmd::Command;
use pre_forge::algebra::{CoherenceVector, OperatorBasis, RMat, RVec};
use pre_forge::catalog;
use pre_forge::constraints::Ensemble;
use pre_forge::model::vectorize;
use pre_forge::solver::{analytic_k2, ensemble_distance};
use serde_json::Value;
use tempfile::TempDir;

const RF: &str = "catalog:resonance_fluorescence";
const AE: &str = "catalog:absorption_emission";

fn cli() -> Command {
    Command::cargo_bin("pre-forge").unwrap()
}

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

fn run(args: &[&str]) -> Run {
    let out = cli().args(args).output().unwrap();
    Run {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8(out.stdout).unwrap(),
        stderr: String::from_utf8(out.stderr).unwrap(),
    }
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn matrix(v: &Value) -> Vec<Vec<f64>> {
    v.as_array()
        .unwrap()
        .iter()
        .map(|r| r.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect())
        .collect()
}

fn ensemble(v: &Value) -> Ensemble {
    let states = matrix(&v["states"])
        .into_iter()
        .map(|s| CoherenceVector(RVec::from_vec(s)))
        .collect();
    let k = matrix(&v["kappa"]);
    let kappa = RMat::from_fn(k.len(), k.len(), |i, j| k[i][j]);
    Ensemble::new(2, states, kappa).unwrap()
}

fn rf_k2_bundle(dir: &TempDir) -> std::path::PathBuf {
    let path = dir.path().join("rf2.json");
    let r = run(&["search", RF, "-p", "Omega=0.18", "--k", "2", "--out", path.to_str().unwrap()]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    path
}

#[test]
fn analyze_prints_the_resonance_fluorescence_generator() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("a.json");
    let r = run(&["analyze", RF, "--param", "Omega=0.18", "--param", "gamma=1", "--out", out.to_str().unwrap()]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert!(r.stdout.contains("L0 ="));
    let b = json(&out);
    assert_eq!(b["schema"], "pre-forge/bundle@1");
    let expected = [[-0.5, 0.0, 0.0], [0.0, -0.5, -0.18], [0.0, 0.18, -1.0]];
    for (row, exp) in matrix(&b["model"]["l0"]).iter().zip(expected) {
        for (a, e) in row.iter().zip(exp) {
            assert!((a - e).abs() < 1e-14, "{row:?}");
        }
    }
    let b_vec: Vec<f64> = b["model"]["b"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    assert_eq!(b_vec, vec![0.0, 0.0, -1.0]);
    // x_ss = (0, 2Ω, −1)/(1 + 2Ω²) for γ = 1.
    let x_ss: Vec<f64> = b["model"]["x_ss"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    let den = 1.0 + 2.0 * 0.18f64.powi(2);
    assert!((x_ss[1] - 0.36 / den).abs() < 1e-14 && (x_ss[2] + 1.0 / den).abs() < 1e-14);
}

#[test]
fn missing_parameter_is_a_usage_error_naming_it() {
    let r = run(&["analyze", RF]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("`Omega`"), "{}", r.stderr);
}

#[test]
fn absorption_emission_eigenvalues() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("a.json");
    let r = run(&["analyze", AE, "-p", "gamma_minus=0.8", "-p", "gamma_plus=0.2", "--out", out.to_str().unwrap()]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let spectrum = json(&out)["model"]["spectrum"].clone();
    let mut found: Vec<(f64, u64)> = spectrum
        .as_array()
        .unwrap()
        .iter()
        .map(|c| (c["value"][0].as_f64().unwrap(), c["algebraic"].as_u64().unwrap()))
        .collect();
    found.sort_by(|a, b| a.0.total_cmp(&b.0));
    assert_eq!(found.len(), 2);
    assert!((found[0].0 + 1.0).abs() < 1e-12 && found[0].1 == 1);
    assert!((found[1].0 + 0.5).abs() < 1e-12 && found[1].1 == 2);
}

#[test]
fn spec_errors_point_at_the_field() {
    let dir = TempDir::new().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(
        &bad,
        r#"{
  "schema": "pre-forge/me-spec@1",
  "dim": "two",
  "hamiltonian": [],
  "lindblads": []
}"#,
    )
    .unwrap();
    let r = run(&["analyze", bad.to_str().unwrap()]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("line 3") && r.stderr.contains("`dim`"), "{}", r.stderr);

    let unbound = dir.path().join("unbound.json");
    std::fs::write(
        &unbound,
        r#"{
  "schema": "pre-forge/me-spec@1",
  "dim": 2,
  "parameters": { "g": 1.0 },
  "hamiltonian": [[[0, 0], [0, 0]], [[0, 0], [0, 0]]],
  "lindblads": [[[[0, 0], [0, 0]], [["sqrt(kappa)", 0], [0, 0]]]]
}"#,
    )
    .unwrap();
    let r = run(&["analyze", unbound.to_str().unwrap()]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("`kappa`") && r.stderr.contains("lindblads[0][1][0].re"), "{}", r.stderr);
}

#[test]
fn search_finds_the_analytic_two_member_ensembles() {
    let dir = TempDir::new().unwrap();
    let b = json(&rf_k2_bundle(&dir));
    let found: Vec<Ensemble> = b["search"]["ensembles"].as_array().unwrap().iter().map(ensemble).collect();
    assert_eq!(found.len(), 3);
    let bm = vectorize(&catalog::resonance_fluorescence(1.0, 0.18).unwrap(), &OperatorBasis::new(2).unwrap()).unwrap();
    for a in &analytic_k2(&bm).unwrap().ensembles {
        let best = found.iter().map(|e| ensemble_distance(a, e, bm.scale(), &[])).fold(f64::INFINITY, f64::min);
        assert!(best < 1e-8, "analytic ensemble missing ({best:e})");
    }
}

#[test]
fn absorption_emission_disc_has_two_ensembles_up_to_mirroring() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("ae.json");
    let r = run(&[
        "search", AE, "-p", "gamma_plus=0.05", "--k", "3", "--basis", "1,0,0;0,0,1", "--dedup-symmetry", "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let b = json(&out);
    let ens = b["search"]["ensembles"].as_array().unwrap();
    assert_eq!(ens.len(), 2);
    for e in ens {
        assert!(matrix(&e["states"]).iter().all(|x| x[1].abs() < 1e-9));
    }
    let csv = run(&["plotdata", out.to_str().unwrap(), "--figure", "fig3"]);
    assert_eq!(csv.code, 0);
    let members: Vec<&str> = csv.stdout.lines().skip(1).filter(|l| l.contains(",member,")).collect();
    assert_eq!(members.len(), 6);
    assert!(members.iter().all(|l| l.ends_with(",ccw") || l.ends_with(",cw")));
}

#[test]
fn wigner_reduction_gives_families_for_any_size() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("k7.json");
    let r = run(&["search", AE, "-p", "gamma_plus=0.2", "--k", "7", "--out", out.to_str().unwrap()]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let s = &json(&out)["search"];
    assert_eq!(s["reduction"], "wigner family");
    assert!(!s["ensembles"].as_array().unwrap().is_empty());
    assert!(s["verification"].as_array().unwrap().iter().all(|v| v["pass"] == true));
}

#[test]
fn verify_rejects_perturbed_rates() {
    let dir = TempDir::new().unwrap();
    let bundle = rf_k2_bundle(&dir);
    let ok = run(&["verify", RF, "-p", "Omega=0.18", "--ensemble", bundle.to_str().unwrap(), "--index", "1"]);
    assert_eq!(ok.code, 0, "{}", ok.stdout);

    let mut e = json(&bundle)["search"]["ensembles"][1].clone();
    let k = e["kappa"][0][1].as_f64().unwrap();
    e["kappa"][0][1] = (k * 1.05).into();
    let edited = dir.path().join("edited.json");
    std::fs::write(&edited, serde_json::to_string(&e).unwrap()).unwrap();
    let bad = run(&["verify", RF, "-p", "Omega=0.18", "--ensemble", edited.to_str().unwrap()]);
    assert_eq!(bad.code, 1);
    assert!(bad.stdout.contains("max residual"), "{}", bad.stdout);
}

#[test]
fn scheme_for_the_u_axis_ensemble_has_half_amplitude_imaginary_offsets() {
    let dir = TempDir::new().unwrap();
    let bundle = rf_k2_bundle(&dir);
    let u_axis = json(&bundle)["search"]["ensembles"]
        .as_array()
        .unwrap()
        .iter()
        .position(|e| matrix(&e["states"])[0][0].abs() > 1e-3)
        .unwrap()
        .to_string();
    let out = dir.path().join("scheme.json");
    let r = run(&[
        "scheme", RF, "-p", "Omega=0.18", "--ensemble", bundle.to_str().unwrap(), "--index", &u_axis, "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let settings = json(&out)["scheme"]["settings"].clone();
    let betas: Vec<(f64, f64)> = settings
        .as_array()
        .unwrap()
        .iter()
        .map(|s| (s["beta"][0][0].as_f64().unwrap(), s["beta"][0][1].as_f64().unwrap()))
        .collect();
    assert_eq!(betas.len(), 2);
    for (re, im) in &betas {
        assert!(re.abs() < 1e-9 && (im.abs() - 0.5).abs() < 1e-9, "{betas:?}");
    }
    assert!((betas[0].1 + betas[1].1).abs() < 1e-9);
}

#[test]
fn plotdata_rows_and_errors() {
    let dir = TempDir::new().unwrap();
    let bundle = rf_k2_bundle(&dir);
    let b = bundle.to_str().unwrap();
    let fig1a = run(&["plotdata", b, "--figure", "fig1a"]);
    assert_eq!(fig1a.code, 0);
    let lines: Vec<&str> = fig1a.stdout.lines().collect();
    assert_eq!(lines[0], "figure,ensemble,role,member,x,y,z,u,v,w,weight,next,rate,cycling");
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[1..].iter().filter(|l| l.contains(",member,")).count(), 2);
    assert!(lines[3].contains(",steady_state,"));

    let empty = run(&["plotdata", b, "--figure", "fig4b"]);
    assert_eq!(empty.code, 0);
    assert_eq!(empty.stdout.lines().count(), 1);

    let unknown = run(&["plotdata", b, "--figure", "fig7"]);
    assert_eq!(unknown.code, 2);
    assert!(unknown.stderr.contains("fig7"));
}

#[test]
fn rerun_reproduces_the_bundle() {
    let dir = TempDir::new().unwrap();
    let bundle = rf_k2_bundle(&dir);
    let r = run(&["rerun", bundle.to_str().unwrap()]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert!(r.stdout.contains("reproduces"));
}

#[test]
fn scan_writes_parameter_counts() {
    let dir = TempDir::new().unwrap();
    let csv = dir.path().join("scan.csv");
    let r = run(&[
        "scan", AE, "--vary", "gamma_plus", "--from", "0.04", "--to", "0.08", "--step", "0.02", "--k", "3", "--basis",
        "1,0,0;0,0,1", "--dedup-symmetry", "--seeds", "128", "--csv", csv.to_str().unwrap(),
    ]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines, vec!["gamma_plus,count", "0.04,2", "0.06,0", "0.08,0"]);
    assert!(r.stdout.contains("count changes near gamma_plus = 0.05"));
}

#[test]
fn simulate_records_events() {
    let dir = TempDir::new().unwrap();
    let bundle = rf_k2_bundle(&dir);
    let events = dir.path().join("events.csv");
    let out = dir.path().join("sim.json");
    let r = run(&[
        "simulate", RF, "-p", "Omega=0.18", "--ensemble", bundle.to_str().unwrap(), "--index", "2", "--jumps",
        "2000", "--rng", "5", "--events", events.to_str().unwrap(), "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let text = std::fs::read_to_string(&events).unwrap();
    assert_eq!(text.lines().next(), Some("time,channel,from,to"));
    assert_eq!(text.lines().count(), 2001);
    let stats = &json(&out)["trajectory"]["stats"];
    assert_eq!(stats["n_jumps"], 2000);
    assert_eq!(json(&out)["rng_seed"], 5);
}

#[test]
fn thread_override_must_be_positive() {
    let r = cli().env("PRE_FORGE_THREADS", "zero").args(["catalog"]).output().unwrap();
    assert_eq!(r.status.code(), Some(2));
    let ok = cli().env("PRE_FORGE_THREADS", "2").args(["catalog"]).output().unwrap();
    assert!(String::from_utf8(ok.stdout).unwrap().contains("catalog:resonance_fluorescence"));
}
