use std::path::Path;
use std::process::{Command, Output};

use rnls_core::fieldfile::read_field;

const SMALL: [&str; 4] = ["--set", "grid.n=64", "--set", "grid.half_width=8"];

fn rnls(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rnls"))
        .args(args)
        .arg("--set")
        .arg(format!(
            "output.directory={:?}",
            dir.join("out").to_str().unwrap()
        ))
        .env_remove("RNLS_THREADS")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn small(extra: &[&'static str]) -> Vec<&'static str> {
    let mut v = SMALL.to_vec();
    v.extend_from_slice(extra);
    v
}

#[test]
fn solve_writes_field_and_table() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["solve"];
    args.extend(small(&["--set", "model.omega=-2"]));
    let o = rnls(dir.path(), &args);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let line = stdout(&o);
    let action: f64 = line
        .split("action=")
        .nth(1)
        .unwrap()
        .split_whitespace()
        .next()
        .unwrap()
        .parse()
        .unwrap();
    assert!(action < 0.0, "{line}");
    let out = dir.path().join("out");
    let (field, params) = read_field(&out.join("gs.field")).unwrap();
    assert_eq!(params.omega, -2.0);
    assert_eq!(field.len(), 64 * 64);
    let csv = std::fs::read_to_string(out.join("gs.csv")).unwrap();
    assert!(csv.starts_with("omega,Omega,mass,action,energy,mu,lz_expect,n_vortices,iters,converged,residual,init_used\n"));
    assert!(!out.join(".rnls.lock").exists());
}

#[test]
fn lambda0_prints_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = rnls(
        dir.path(),
        &["lambda0", "--set", "model.Omega=0.5", "--set", "grid.n=128"],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: f64 = stdout(&o)
        .split("lambda0=")
        .nth(1)
        .unwrap()
        .split_whitespace()
        .next()
        .unwrap()
        .parse()
        .unwrap();
    assert!((v - 1.0).abs() <= 1e-6, "{v}");
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = rnls(dir.path(), &["solve", "--set", "model.Omega=1.2"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Omega_max"), "{}", stderr(&o));

    let o = rnls(dir.path(), &["solve", "--set", "model.nosuch=1"]);
    assert_eq!(o.status.code(), Some(2));

    let o = rnls(dir.path(), &["bogus"]);
    assert_eq!(o.status.code(), Some(2));

    let o = rnls(dir.path(), &["solve", "--set", "model.omega=-0.5"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("lambda0"), "{}", stderr(&o));

    let o = Command::new(env!("CARGO_BIN_EXE_rnls"))
        .arg("info")
        .env("RNLS_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn config_file_must_agree_with_the_command() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    std::fs::write(
        &path,
        "[experiment]\nkind = \"sweep\"\n[model]\nomega = -3.0\n",
    )
    .unwrap();
    let o = rnls(dir.path(), &["solve", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(
        stderr(&o).contains("exactly one experiment"),
        "{}",
        stderr(&o)
    );

    std::fs::write(
        &path,
        "[grid]\nn = 48\nhalf_width = 8.0\n[model]\nomega = -3.0\n",
    )
    .unwrap();
    let o = rnls(dir.path(), &["solve", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}

#[test]
fn non_convergence_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["solve"];
    args.extend(small(&["--set", "solver.max_iters=5"]));
    let o = rnls(dir.path(), &args);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stdout(&o).contains("converged=false"));
}

#[test]
fn locked_output_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(dir.path().join("out")).unwrap();
    std::fs::write(dir.path().join("out/.rnls.lock"), "1\n").unwrap();
    let mut args = vec!["solve"];
    args.extend(small(&[]));
    let o = rnls(dir.path(), &args);
    assert_ne!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("locked"), "{}", stderr(&o));
}

#[test]
fn sweep_is_deterministic_and_records_satisfy_the_action_identity() {
    let run = |dir: &Path| {
        let mut args = vec!["sweep"];
        args.extend(small(&[
            "--set",
            "model.omega_list={ start = -4.0, stop = -2.0, step = 0.5 }",
            "--set",
            "output.formats=[\"csv\", \"json-lines\"]",
        ]));
        let o = rnls(dir, &args);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        (
            std::fs::read(dir.join("out/sweep.csv")).unwrap(),
            std::fs::read_to_string(dir.join("out/sweep.jsonl")).unwrap(),
        )
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (csv_a, json_a) = run(a.path());
    let (csv_b, _) = run(b.path());
    assert_eq!(csv_a, csv_b);

    let text = String::from_utf8(csv_a).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
    let mut rows = 0;
    for line in lines {
        let cells: Vec<&str> = line.split(',').collect();
        let f = |name: &str| cells[col(name)].parse::<f64>().unwrap();
        let (s, e, w, m) = (f("action"), f("energy"), f("omega"), f("mass"));
        assert!(
            (s - (e + w * m)).abs() <= 1e-9 * s.abs().max(e.abs()),
            "{line}"
        );
        rows += 1;
    }
    assert_eq!(rows, 5);
    for line in json_a.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["mass"].as_f64().unwrap() > 0.0);
    }
}

#[test]
fn loop_reports_relative_errors() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["loop"];
    args.extend(small(&[
        "--set",
        "model.omega=-3",
        "--set",
        "output.formats=[\"json-lines\"]",
    ]));
    let o = rnls(dir.path(), &args);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = std::fs::read_to_string(dir.path().join("out/loop.jsonl")).unwrap();
    let v: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert!(v["e_rel_omega"].as_f64().unwrap() < 1e-6, "{v}");
    assert!(v["e_rel_s"].as_f64().unwrap() < 1e-8, "{v}");
    assert!(dir.path().join("out/egs.field").exists());
}

#[test]
fn solve_energy_hits_the_mass() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["solve-energy"];
    args.extend(small(&["--set", "experiment.mass=10"]));
    let o = rnls(dir.path(), &args);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let (field, params) = read_field(&dir.path().join("out/egs.field")).unwrap();
    assert!((field.mass() - 10.0).abs() < 1e-10);
    assert!(params.omega < -1.0);
}
