use std::fs;
use std::path::Path;
use std::process::Command;

fn run(args: &[&str], out: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_pmuvsi"))
        .arg("run")
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    out.sort();
    out
}

#[test]
fn same_seed_gives_identical_files() {
    let tmp = tempfile::tempdir().unwrap();
    for scenario in ["noise", "line-outage", "proportional"] {
        let a = tmp.path().join(format!("{scenario}-a"));
        let b = tmp.path().join(format!("{scenario}-b"));
        let extra: &[&str] = if scenario == "line-outage" { &["--noise-sv", "0.001"] } else { &[] };
        let args: Vec<&str> = [scenario, "--seed", "17"].iter().chain(extra).copied().collect();
        assert!(run(&args, &a).status.success());
        assert!(run(&args, &b).status.success());
        let (fa, fb) = (files(&a), files(&b));
        assert!(fa.iter().any(|(n, _)| n == "results.csv"));
        assert_eq!(fa, fb, "{scenario}");
    }
}

#[test]
fn different_seed_changes_noisy_results() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(run(&["noise", "--seed", "1"], &a).status.success());
    assert!(run(&["noise", "--seed", "2"], &b).status.success());
    assert_ne!(fs::read(a.join("results.csv")).unwrap(), fs::read(b.join("results.csv")).unwrap());
}

#[test]
fn results_table_has_expected_columns() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(run(&["three-bus"], tmp.path()).status.success());
    let text = fs::read_to_string(tmp.path().join("results.csv")).unwrap();
    let header = text.lines().next().unwrap();
    assert_eq!(header, "time_or_lambda,bus,vsi,lti,flag,event,bus_kind");
    assert_eq!(text.lines().count(), 6);
    assert!(tmp.path().join("circles.csv").exists());
}

#[test]
fn errors_are_reported_as_json() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["proportional", "--case", "/nonexistent/case.m"], tmp.path());
    assert!(!out.status.success());
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "io");
    let out = run(&["noise", "--noise-sv=-1"], tmp.path());
    assert!(!out.status.success());
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "model");
    let out = run(&["proportional", "--refresh-admittance-at", "3"], tmp.path());
    assert_eq!(serde_json::from_slice::<serde_json::Value>(&out.stderr).unwrap()["error"], "config");
}

#[test]
fn json_case_round_trips_through_the_cli() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("case.json");
    pmuvsi::io::write_case_json(&pmuvsi::io::ieee30(), &path).unwrap();
    let (a, b) = (tmp.path().join("json"), tmp.path().join("m"));
    assert!(run(&["proportional", "--case", path.to_str().unwrap()], &a).status.success());
    assert!(run(&["proportional"], &b).status.success());
    assert_eq!(fs::read(a.join("results.csv")).unwrap(), fs::read(b.join("results.csv")).unwrap());
}
