//! The command-line front end: exit codes, output files and error messages.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(format!("{name}.json"))
}

fn balsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_balsim")).args(args).output().unwrap()
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

#[test]
fn run_writes_metrics_and_prints_a_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m.csv");
    let sc = scenario("drill");
    let o = balsim(&[
        "run",
        "--scenario",
        sc.to_str().unwrap(),
        "--no-guides",
        "--duration",
        "0.05",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    let stdout = text(&o.stdout);
    assert!(stdout.contains("steps:              50"), "{stdout}");
    let csv = std::fs::read_to_string(&out).unwrap();
    assert_eq!(csv.lines().count(), 52);
    assert!(csv.lines().nth(1).unwrap().contains("angle_bit"));
}

#[test]
fn check_reports_four_passing_lines() {
    let sc = scenario("standing");
    let o = balsim(&["check", "--scenario", sc.to_str().unwrap(), "--samples", "3", "--problems", "30"]);
    let stdout = text(&o.stdout);
    assert!(o.status.success(), "{stdout}{}", text(&o.stderr));
    assert_eq!(stdout.lines().filter(|l| l.starts_with("[PASS]")).count(), 4, "{stdout}");
}

#[test]
fn solve_lcp_prints_the_solution() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("p.txt");
    // M = [[2,1],[1,2]], q = [-1, 1]: z = (0.5, 0), w = (0, 1.5)
    std::fs::write(&f, "# tiny\n2\n2 1\n1 2\n-1 1\n").unwrap();
    let o = balsim(&["solve-lcp", "--file", f.to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    let stdout = text(&o.stdout);
    let z: Vec<f64> = stdout
        .lines()
        .find_map(|l| l.strip_prefix("z: "))
        .unwrap()
        .split_whitespace()
        .map(|x| x.parse().unwrap())
        .collect();
    assert!((z[0] - 0.5).abs() < 1e-12 && z[1].abs() < 1e-12, "{stdout}");

    std::fs::write(&f, "2\n1 2 3\n").unwrap();
    let o = balsim(&["solve-lcp", "--file", f.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(text(&o.stderr).contains("expected 6 numbers"), "{}", text(&o.stderr));
}

#[test]
fn bad_inputs_fail_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m.csv");
    let missing = dir.path().join("nope.json");
    let o = balsim(&["run", "--scenario", missing.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(text(&o.stderr).contains("nope.json"));

    let bad = dir.path().join("bad.json");
    std::fs::write(
        &bad,
        r#"{"name":"x","avatar":{"humanoid":{"name":"a","height":1.8,"mass":75}},"duration":1,"timestep":0.5}"#,
    )
    .unwrap();
    let o = balsim(&["run", "--scenario", bad.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(text(&o.stderr).contains("timestep"), "{}", text(&o.stderr));

    let sc = scenario("standing");
    let o = balsim(&["serve", "--scenario", sc.to_str().unwrap(), "--rate", "0"]);
    assert!(!o.status.success());
    assert!(text(&o.stderr).contains("--rate"));
}
