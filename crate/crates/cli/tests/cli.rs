use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn pia(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pia"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("run pia")
}

fn pia_threads(dir: &Path, args: &[&str], threads: usize) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pia"))
        .current_dir(dir)
        .env("RAYON_NUM_THREADS", threads.to_string())
        .args(args)
        .output()
        .expect("run pia")
}

fn write_config(dir: &Path, name: &str, v: &Value) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p
}

fn small_lin(n_max: usize) -> Value {
    json!({
        "benchmark": "bm-lin",
        "scheme": {"n_max": n_max, "num_paths": 4000, "num_steps": 20, "seed": 5},
        "output": "out/report"
    })
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn list_benchmarks_prints_registry() {
    let dir = tempfile::tempdir().unwrap();
    let o = pia(dir.path(), &["list-benchmarks"]);
    assert!(o.status.success());
    let s = String::from_utf8(o.stdout).unwrap();
    for n in ["bm-lin", "bm-cos", "bm-vol"] {
        assert!(s.contains(n));
    }
}

#[test]
fn minimal_solve_writes_one_row_per_iterate() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "c.json", &small_lin(3));
    let o = pia(dir.path(), &["solve", "--config", "c.json"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("out/report.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "n,phi_n,value,stderr,err,z_distance,control_distance,wall_ms");
    assert_eq!(lines.len(), 1 + 4);
    assert!(String::from_utf8(o.stdout).unwrap().contains("analytic"));
    // no temporary files left behind
    assert_eq!(fs::read_dir(dir.path().join("out")).unwrap().count(), 1);
}

#[test]
fn phi_zero_must_be_one() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = small_lin(2);
    c["scheme"]["schedule"] = json!({"kind": "table", "values": [2.0, 4.0, 8.0]});
    write_config(dir.path(), "c.json", &c);
    let o = pia(dir.path(), &["solve", "--config", "c.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("phi(0) = 1"), "{}", stderr(&o));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn validation_failures_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let mut unknown = small_lin(1);
    unknown["scheme"]["bogus"] = json!(1);
    write_config(dir.path(), "a.json", &unknown);
    let mut bench = small_lin(1);
    bench["benchmark"] = json!("bm-nope");
    write_config(dir.path(), "b.json", &bench);
    for f in ["a.json", "b.json"] {
        let o = pia(dir.path(), &["solve", "--config", f]);
        assert_eq!(o.status.code(), Some(2), "{f}: {}", stderr(&o));
    }
    let o = pia(dir.path(), &["solve", "--config", "missing.json"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn fixed_seed_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "c.json", &small_lin(2));
    let mut outs = vec![];
    for (i, threads) in [1, 4, 1].iter().enumerate() {
        let out = format!("run{i}");
        let o = pia_threads(
            dir.path(),
            &["solve", "--config", "c.json", "--out", &out, "--format", "both"],
            *threads,
        );
        assert!(o.status.success(), "{}", stderr(&o));
        outs.push((
            fs::read(dir.path().join(format!("{out}.csv"))).unwrap(),
            fs::read_to_string(dir.path().join(format!("{out}.json"))).unwrap(),
        ));
    }
    assert_eq!(outs[0].0, outs[1].0);
    assert_eq!(outs[0].0, outs[2].0);
    // the envelopes differ only in the recorded output path
    let strip = |s: &str| {
        let mut v: Value = serde_json::from_str(s).unwrap();
        v["config"]["output"] = Value::Null;
        v
    };
    assert_eq!(strip(&outs[0].1), strip(&outs[1].1));
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "c.json", &small_lin(1));
    let o = pia(dir.path(), &["solve", "--config", "c.json", "--seed", "99", "--format", "json"]);
    assert!(o.status.success());
    let v: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("out/report.json")).unwrap()).unwrap();
    assert_eq!(v["seed"], json!(99));
    assert_eq!(v["config"]["scheme"]["seed"], json!(99));
}

#[test]
fn envelope_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = small_lin(2);
    c["format"] = json!("json");
    write_config(dir.path(), "c.json", &c);
    let o = pia(dir.path(), &["solve", "--config", "c.json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let first: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("out/report.json")).unwrap()).unwrap();
    for key in ["reference", "records", "crosschecks", "fitted_rate", "seed", "versions"] {
        assert!(first.get(key).is_some(), "missing {key}");
    }
    assert_eq!(first["reference"]["provenance"], json!("analytic"));
    let embedded = first["config"].clone();
    assert_eq!(embedded["benchmark"], c["benchmark"]);
    assert_eq!(embedded["scheme"]["num_paths"], c["scheme"]["num_paths"]);
    write_config(dir.path(), "again.json", &embedded);
    let o = pia(dir.path(), &["solve", "--config", "again.json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let second: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("out/report.json")).unwrap()).unwrap();
    assert_eq!(first, second);
}

#[test]
fn converge_labels_rows() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = small_lin(3);
    c["scheme"]["num_paths"] = json!(20000);
    c["schedules"] = json!([{"kind": "exponential", "base": 2.0}, {"kind": "super_exponential", "base": 2.0}]);
    write_config(dir.path(), "c.json", &c);
    let o = pia(dir.path(), &["converge", "--config", "c.json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("out/report.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert!(lines[0].starts_with("schedule,n,phi_n"));
    assert_eq!(lines.len(), 1 + 2 * 4);
    let cols = |l: &str| -> (String, f64, f64) {
        let f: Vec<&str> = l.split(',').collect();
        (f[0].to_string(), f[5].parse().unwrap(), f[4].parse().unwrap())
    };
    for n in 1..=3 {
        let (la, ea, sa) = cols(lines[1 + n]);
        let (lb, eb, sb) = cols(lines[5 + n]);
        assert_eq!((la.as_str(), lb.as_str()), ("exp2", "superexp2"));
        // smaller positive part of the error, up to one stderr
        assert!(eb.max(0.0) <= ea.max(0.0) + sa.max(sb), "n={n}: {eb} vs {ea}");
    }
}

#[test]
fn converge_single_schedule_matches_solve() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = small_lin(2);
    c["schedules"] = json!([{"kind": "exponential", "base": 4.0}]);
    write_config(dir.path(), "c.json", &c);
    assert!(pia(dir.path(), &["solve", "--config", "c.json", "--out", "solve"]).status.success());
    assert!(pia(dir.path(), &["converge", "--config", "c.json", "--out", "conv"]).status.success());
    let solve = fs::read_to_string(dir.path().join("solve.csv")).unwrap();
    let conv = fs::read_to_string(dir.path().join("conv.csv")).unwrap();
    let labelled: Vec<String> = solve.lines().skip(1).map(|l| format!("exp4,{l}")).collect();
    assert_eq!(conv.lines().skip(1).collect::<Vec<_>>(), labelled);
}

#[test]
fn converge_without_schedules_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "c.json", &small_lin(1));
    let o = pia(dir.path(), &["converge", "--config", "c.json"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn crosscheck_default_sizes() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "lin.json", &json!({"benchmark": "bm-lin"}));
    let o = pia(dir.path(), &["crosscheck", "--config", "lin.json", "1"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    write_config(dir.path(), "cos.json", &json!({"benchmark": "bm-cos", "crosscheck_n": 2}));
    let o = pia(dir.path(), &["crosscheck", "--config", "cos.json"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    assert!(String::from_utf8(o.stdout).unwrap().contains("PASS"));
}

#[test]
fn crosscheck_rejects_controlled_volatility() {
    let dir = tempfile::tempdir().unwrap();
    write_config(
        dir.path(),
        "c.json",
        &json!({"benchmark": "bm-vol", "scheme": {"mode": "mc_controlled_vol", "num_paths": 1000, "num_steps": 10}}),
    );
    let o = pia(dir.path(), &["crosscheck", "--config", "c.json"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn pde_mode_from_config() {
    let dir = tempfile::tempdir().unwrap();
    write_config(
        dir.path(),
        "c.json",
        &json!({
            "benchmark": "bm-cos",
            "scheme": {
                "mode": "pde_markovian",
                "n_max": 4,
                "grid": {"x_min": -6.0, "x_max": 6.0, "num_nodes": 201, "num_time_steps": 100}
            }
        }),
    );
    let o = pia(dir.path(), &["solve", "--config", "c.json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8(o.stdout).unwrap().contains("pde_oracle"));
}
