use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn vqr(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vqr"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn run(cmd: &str, dir: &Path) -> Output {
    vqr(&cmd.split_whitespace().collect::<Vec<_>>(), dir)
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn synth(dir: &Path, n_obs: usize, extra: &[&str]) {
    let n = n_obs.to_string();
    let mut args = vec!["synth", "--n-obs", &n, "--out", "d.csv"];
    args.extend_from_slice(extra);
    let o = vqr(&args, dir);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

fn fit_args<'a>(extra: &[&'a str]) -> Vec<&'a str> {
    let mut a: Vec<&str> = "fit --data d.csv --x-cols x --y-cols y --out m.json"
        .split(' ')
        .collect();
    a.extend_from_slice(extra);
    a
}

#[test]
fn grid_of_one_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    synth(dir.path(), 50, &[]);
    let o = vqr(&fit_args(&["--grid", "1"]), dir.path());
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn missing_file_is_an_io_error() {
    let dir = TempDir::new().unwrap();
    let o = vqr(&fit_args(&[]), dir.path());
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("d.csv"));
}

#[test]
fn unknown_column_and_bad_flags_are_config_errors() {
    let dir = TempDir::new().unwrap();
    synth(dir.path(), 50, &[]);
    let o = run("fit --data d.csv --y-cols nope --out m.json", dir.path());
    assert_eq!(code(&o), 3);
    assert_eq!(code(&vqr(&fit_args(&["--epsilon", "0"]), dir.path())), 3);
    assert_eq!(code(&run("fit --bogus", dir.path())), 3);
}

#[test]
fn fit_writes_converged_model_and_quantiles() {
    let dir = TempDir::new().unwrap();
    synth(dir.path(), 300, &[]);
    let o = vqr(&fit_args(&["--report", "r.txt"]), dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("converged"));
    assert!(dir.path().join("r.txt").exists());

    let doc: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("m.json")).unwrap()).unwrap();
    assert!(doc["report"]["converged"].as_bool().unwrap());
    assert!(doc["report"]["col_residual"].as_f64().unwrap() <= 1e-6);
    assert_eq!(doc["psi"].as_array().unwrap().len(), 300);

    let o = run("quantiles --model m.json --out q.csv", dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("q.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "probe,x_probe_1,eta,rank,u_1,q_1");
    // four probes times twenty ranks
    assert_eq!(lines.len(), 1 + 4 * 20);
    assert!(lines[1].starts_with("q10,"));
}

#[test]
fn non_convergence_still_writes_the_model() {
    let dir = TempDir::new().unwrap();
    synth(dir.path(), 200, &[]);
    let o = vqr(&fit_args(&["--max-iter", "2"]), dir.path());
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stdout).contains("NOT CONVERGED"));
    assert!(dir.path().join("m.json").exists());
}

#[test]
fn probe_outside_data_range_names_nearest_observation() {
    let dir = TempDir::new().unwrap();
    synth(dir.path(), 200, &[]);
    assert_eq!(code(&vqr(&fit_args(&["--grid", "5"]), dir.path())), 0);
    let o = run("quantiles --model m.json --probes 7.5", dir.path());
    assert_eq!(code(&o), 3);
    let msg = stderr(&o);
    assert!(
        msg.contains("probe 7.5") && msg.contains("nearest observation"),
        "{msg}"
    );
}

#[test]
fn two_dimensional_surface_has_n_squared_rows() {
    let dir = TempDir::new().unwrap();
    synth(dir.path(), 150, &["--dim", "2"]);
    let o = run(
        "fit --data d.csv --x-cols x --y-cols y1,y2 --grid 10 --out m.json",
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = run("quantiles --model m.json --probes q50", dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = String::from_utf8(o.stdout).unwrap();
    assert_eq!(out.lines().count(), 1 + 100);
    assert!(out.starts_with("probe,x_probe_1,eta,rank,u_1,u_2,q_1,q_2"));

    // the classical comparison needs a scalar response
    let o = run("compare-qr --data d.csv --x-cols x --y-cols y1,y2", dir.path());
    assert_eq!(code(&o), 3);
}

#[test]
fn compare_table_layout() {
    let dir = TempDir::new().unwrap();
    synth(dir.path(), 200, &[]);
    let o = run("compare-qr --data d.csv --x-cols x --y-cols y --grid 10", dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "metric,probe,eps=0.05,eps=0.1,eps=0.5,eps=1");
    assert_eq!(lines.len(), 1 + 8);
    assert!(lines[1].starts_with("qr_vs_vqr,q10,"));
    assert!(lines[5].starts_with("soft_vs_hard,q10,"));
}

#[test]
fn synth_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let sample = |seed: u64| {
        let o = run(&format!("synth --n-obs 20 --seed {seed}"), dir.path());
        assert_eq!(code(&o), 0);
        o.stdout
    };
    assert_eq!(sample(3), sample(3));
    assert_ne!(sample(3), sample(4));

    let o = run("synth --n-obs 20 --out d.csv --truth t.csv --truth-steps 4", dir.path());
    assert_eq!(code(&o), 0);
    let truth = std::fs::read_to_string(dir.path().join("t.csv")).unwrap();
    // 4 covariate levels times 3 interior ranks
    assert_eq!(truth.lines().count(), 1 + 12);
    assert!(truth.starts_with("x_level,x,u,q"));
}

#[test]
fn check_passes_and_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let a = run("check --seed 11 --out c.json", dir.path());
    let b = run("check --seed 11", dir.path());
    assert_eq!(code(&a), 0, "{}", String::from_utf8_lossy(&a.stdout));
    assert_eq!(a.stdout, b.stdout);
    let doc: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("c.json")).unwrap()).unwrap();
    assert_eq!(doc["passed"], true);
    assert_eq!(doc["seed"], 11);
}

#[test]
fn worker_count_does_not_change_the_fit() {
    let dir = TempDir::new().unwrap();
    synth(dir.path(), 1200, &[]);
    let psi = |workers: &str, out: &str| {
        let cmd = format!("--workers {workers} fit --data d.csv --x-cols x --y-cols y --out {out}");
        let o = run(&cmd, dir.path());
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let doc: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join(out)).unwrap()).unwrap();
        (doc["psi"].clone(), doc["b"].clone())
    };
    assert_eq!(psi("1", "a.json"), psi("4", "b.json"));
}
