use std::fs;
use std::process::{Command, Output};

use extrinsic_cli::{parse_config, CliError};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_extrinsic"));
    c.env_remove("CW_SEED");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stdout(out: &Output) -> String {
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn meta<'a>(csv: &'a str, key: &str) -> Option<&'a str> {
    csv.lines()
        .find_map(|l| l.strip_prefix("# ")?.strip_prefix(key)?.strip_prefix('='))
}

/// Rows after the column header.
fn rows(csv: &str) -> Vec<Vec<String>> {
    csv.lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').map(String::from).collect())
        .collect()
}

#[test]
fn geometry_check_on_cylinder_passes_every_row() {
    let csv = stdout(&run(&[
        "geometry-check",
        "--manifold",
        "cylinder",
        "--samples",
        "25",
    ]));
    let rows = rows(&csv);
    assert!(rows.len() >= 25 * 5);
    assert!(rows.iter().all(|r| r[4] == "true"), "{csv}");
    assert_eq!(meta(&csv, "result.failures"), Some("0"));
}

#[test]
fn missing_manifold_exits_with_usage_error() {
    let out = run(&["geometry-check"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--manifold"));
    let out = run(&["heat", "--manifold", "sphere:N=3,rho=1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn module_errors_exit_nonzero() {
    let out = run(&["heat", "--manifold", "klein-bottle", "--f", "x1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("klein-bottle"));
    let out = run(&[
        "heat",
        "--manifold",
        "sphere:N=3,rho=1",
        "--f",
        "x3",
        "--t",
        "1",
        "--dt",
        "0.3",
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn seed_is_recorded_and_env_seed_applies() {
    let args = [
        "heat",
        "--manifold",
        "sphere:N=3,rho=1",
        "--f",
        "x3",
        "--dt",
        "0.05",
        "--paths",
        "50",
    ];
    let default = stdout(&run(&args));
    assert_eq!(meta(&default, "seed"), Some("42"));
    let env = stdout(&bin().args(args).env("CW_SEED", "7").output().unwrap());
    assert_eq!(meta(&env, "seed"), Some("7"));
    let flag = stdout(
        &bin()
            .args(args)
            .args(["--seed", "9"])
            .env("CW_SEED", "7")
            .output()
            .unwrap(),
    );
    assert_eq!(meta(&flag, "seed"), Some("9"));
    assert_ne!(rows(&default), rows(&env));
}

#[test]
fn config_file_values_are_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(
        &cfg,
        "# heat run\nmanifold = sphere:N=3,rho=1\nf = x3\ndt=1e-3\npaths = 40\nt = 0.5\n",
    )
    .unwrap();
    let c = cfg.to_str().unwrap();
    let parsed = parse_config(["extrinsic", "heat", "--config", c, "--dt", "5e-4"]).unwrap();
    assert_eq!(parsed.dt, 5e-4);
    assert_eq!(parsed.paths, 40);
    assert_eq!(parsed.t, 0.5);
    let parsed = parse_config(["extrinsic", "heat", "--config", c]).unwrap();
    assert_eq!(parsed.dt, 1e-3);

    let json = dir.path().join("run.json");
    fs::write(&json, r#"{"manifold": "sphere:N=3,rho=1", "f": "x3", "dt": 0.01, "epsilons": [0.1, 0.01], "deterministic": true}"#)
        .unwrap();
    let parsed = parse_config(["extrinsic", "heat", "--config", json.to_str().unwrap()]).unwrap();
    assert_eq!(parsed.dt, 0.01);
    assert_eq!(parsed.epsilons, vec![0.1, 0.01]);
    assert!(parsed.deterministic);
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "manifold=cylinder\nspeed=3\n").unwrap();
    match parse_config([
        "extrinsic",
        "geometry-check",
        "--config",
        cfg.to_str().unwrap(),
    ]) {
        Err(CliError::Usage(m)) => assert!(m.contains("speed")),
        other => panic!("{other:?}"),
    }
    let out = run(&["geometry-check", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn out_file_matches_stdout_and_reruns_are_identical() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bismut.csv");
    let args = [
        "bismut",
        "--manifold",
        "sphere:N=3,rho=1",
        "--origin",
        "1,0,0",
        "--f",
        "x3",
        "--t",
        "0.5",
        "--t0",
        "0.25",
        "--dt",
        "0.01",
        "--paths",
        "500",
        "--deterministic",
    ];
    let out = run(&[&args[..], &["--out", path.to_str().unwrap()]].concat());
    assert!(out.status.success());
    assert!(out.stdout.is_empty());
    let first = fs::read(&path).unwrap();
    assert_eq!(first, run(&args).stdout);
    let again = run(&[
        &args[..],
        &["--out", path.to_str().unwrap(), "--workers", "2"],
    ]
    .concat());
    assert!(again.status.success());
    assert_eq!(fs::read(&path).unwrap(), first);
}

#[test]
fn metadata_reconstructs_the_run() {
    let csv = stdout(&run(&[
        "ibp",
        "--manifold",
        "sphere:N=3,rho=1",
        "--origin",
        "0.7071067811865476,0,0.7071067811865476",
        "--direction",
        "1,0,0",
        "--f",
        "x3",
        "--dt",
        "0.02",
        "--paths",
        "300",
        "--deterministic",
        "--seed",
        "5",
    ]));
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("replay.cfg");
    let body: String = csv
        .lines()
        .filter_map(|l| l.strip_prefix("# "))
        .filter(|l| l.contains('=') && !l.starts_with("result."))
        .map(|l| format!("{l}\n"))
        .collect();
    fs::write(&cfg, body).unwrap();
    let replay = stdout(&run(&["ibp", "--config", cfg.to_str().unwrap()]));
    assert_eq!(replay, csv);
}

#[test]
fn ibp_residual_row_is_small() {
    let csv = stdout(&run(&[
        "ibp",
        "--manifold",
        "sphere:N=3,rho=1",
        "--origin",
        "0.7071067811865476,0,0.7071067811865476",
        "--direction",
        "1,0,0",
        "--f",
        "x3",
        "--dt",
        "0.01",
        "--paths",
        "4000",
    ]));
    let residual = rows(&csv).into_iter().find(|r| r[0] == "residual").unwrap();
    let (mean, se): (f64, f64) = (residual[2].parse().unwrap(), residual[3].parse().unwrap());
    assert!(mean.abs() <= 3.0 * se, "{mean} ± {se}");
}

#[test]
fn floats_use_seventeen_significant_digits() {
    let csv = stdout(&run(&[
        "clark-ocone",
        "--f",
        "x1^2",
        "--dt",
        "0.05",
        "--paths",
        "100",
    ]));
    let row = &rows(&csv)[0];
    let mantissa = row[2].split('e').next().unwrap();
    assert_eq!(mantissa.trim_start_matches('-').replace('.', "").len(), 17);
    let x: f64 = row[2].parse().unwrap();
    assert_eq!(format!("{x:.16e}"), row[2]);
}

#[test]
fn transport_and_develop_report_summaries() {
    let csv = stdout(&run(&[
        "transport",
        "--manifold",
        "sphere:N=3,rho=1",
        "--phi",
        "0.5235987755982988",
        "--steps",
        "400",
    ]));
    let got: f64 = meta(&csv, "result.holonomy").unwrap().parse().unwrap();
    let want: f64 = meta(&csv, "result.holonomy_expected")
        .unwrap()
        .parse()
        .unwrap();
    assert!((got - want).abs() < 1e-5);
    let csv = stdout(&run(&[
        "develop",
        "--manifold",
        "sl2",
        "--t",
        "0.5",
        "--steps",
        "200",
        "--direction",
        "1,0,0,-1",
    ]));
    let err: f64 = meta(&csv, "result.sup_roundtrip_err")
        .unwrap()
        .parse()
        .unwrap();
    assert!(err < 1e-5);
    assert_eq!(rows(&csv).len(), 201);
}

#[test]
fn malliavin_table_and_ranks() {
    let csv = stdout(&run(&[
        "malliavin",
        "--system",
        "heisenberg",
        "--dt",
        "0.05",
        "--paths",
        "200",
        "--level",
        "2",
    ]));
    assert_eq!(meta(&csv, "result.ranks"), Some("2,3"));
    assert_eq!(meta(&csv, "result.hormander_level"), Some("2"));
    let fracs: Vec<f64> = rows(&csv).iter().map(|r| r[1].parse().unwrap()).collect();
    assert_eq!(fracs.len(), 5);
    assert!(fracs.windows(2).all(|w| w[1] <= w[0]));
    let csv = stdout(&run(&[
        "malliavin",
        "--system",
        "degenerate-2d",
        "--dt",
        "0.1",
        "--paths",
        "20",
        "--level",
        "4",
    ]));
    assert_eq!(meta(&csv, "result.hormander_level"), Some("none"));
}

#[test]
fn every_subcommand_has_help() {
    for cmd in extrinsic_cli::Command::ALL {
        let out = run(&[cmd.as_str(), "--help"]);
        assert!(out.status.success(), "{cmd}");
    }
}
