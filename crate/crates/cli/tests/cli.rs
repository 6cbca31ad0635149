use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_msnimble"))
}

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

fn golden(name: &str) -> PathBuf {
    data("golden").join(name)
}

fn run(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("binary runs");
    assert!(out.status.success(), "msnimble {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Runs mechanisms, factors, DA and GWAS on the bundled toy data into `dir`.
fn toy_workflow(dir: &Path, threads: &str) {
    let (y, x, g) = (data("Y.tsv"), data("X.tsv"), data("G.tsv"));
    let (mech, fac, da, gw) = (dir.join("mech.json"), dir.join("factors.json"), dir.join("da.tsv"), dir.join("gwas.tsv"));
    let common = ["--threads", threads, "--input", s(&y), "--design", s(&x), "--interest", "treatment"];
    let with = |extra: &[&str]| -> Vec<String> { common.iter().chain(extra).map(|v| v.to_string()).collect() };
    let call = |sub: &str, extra: &[&str]| {
        let mut args = vec![sub.to_string()];
        args.extend(with(extra));
        run(&args.iter().map(String::as_str).collect::<Vec<_>>());
    };
    call("estimate-mechanisms", &["--out", s(&mech)]);
    call("factors", &["--mech", s(&mech), "--k", "2", "--out", s(&fac)]);
    call("da", &["--mech", s(&mech), "--factors", s(&fac), "--out", s(&da)]);
    call("gwas", &["--mech", s(&mech), "--factors", s(&fac), "--geno", s(&g), "--out", s(&gw)]);
}

const OUTPUTS: [&str; 4] = ["mech.json", "factors.json", "da.tsv", "gwas.tsv"];

#[test]
fn toy_workflow_matches_golden_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let t0 = Instant::now();
    toy_workflow(dir.path(), "1");
    let elapsed = t0.elapsed();
    if std::env::var_os("MSNIMBLE_UPDATE_GOLDEN").is_some() {
        std::fs::create_dir_all(data("golden")).unwrap();
        for f in OUTPUTS {
            std::fs::copy(dir.path().join(f), golden(f)).unwrap();
        }
    }
    for f in OUTPUTS {
        let got = std::fs::read(dir.path().join(f)).unwrap();
        let want = std::fs::read(golden(f)).unwrap();
        assert!(got == want, "{f} differs from the golden copy");
    }
    assert!(elapsed.as_secs_f64() < 10.0, "toy workflow took {elapsed:?}");
}

#[test]
fn thread_count_does_not_change_results() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    toy_workflow(a.path(), "1");
    toy_workflow(b.path(), "8");
    for f in OUTPUTS {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn manifests_record_input_hashes_and_config() {
    let dir = tempfile::tempdir().unwrap();
    toy_workflow(dir.path(), "1");
    let text = std::fs::read_to_string(dir.path().join("da.tsv.manifest.json")).unwrap();
    let m: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(m["subcommand"], "da");
    assert_eq!(m["inputs"].as_array().unwrap().len(), 4);
    for h in m["inputs"].as_array().unwrap().iter().chain(m["outputs"].as_array().unwrap()) {
        assert_eq!(h["sha256"].as_str().unwrap().len(), 64);
    }
    assert_eq!(m["config"]["k"], 2);
    assert_eq!(m["config"]["da"]["max_iter"], 10);
    assert_eq!(m["config"]["da"]["quadrature_order"], 12);
}

#[test]
fn da_without_mechanisms_is_a_missing_input() {
    let out = bin().args(["da", "--input", s(&data("Y.tsv")), "--design", s(&data("X.tsv")), "--out", "unused.tsv"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1);
    assert!(err.starts_with("MISSING_INPUT: "), "{err}");
}

#[test]
fn errors_are_single_classified_lines() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.tsv");
    std::fs::write(&bad, "metabolite\ts1\ts2\nm1\t1.0\n").unwrap();
    let out = bin().args(["estimate-mechanisms", "--input", s(&bad), "--out", s(&dir.path().join("m.json"))]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1);
    assert!(err.starts_with("PARSE_ERROR: "), "{err}");

    let out = bin().args(["da", "--bogus"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8(out.stderr).unwrap().starts_with("USAGE_ERROR: "));
}

#[test]
fn mismatched_cdf_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mech = dir.path().join("mech.json");
    run(&["estimate-mechanisms", "--input", s(&data("Y.tsv")), "--out", s(&mech)]);
    let out = bin()
        .args(["factors", "--input", s(&data("Y.tsv")), "--design", s(&data("X.tsv")), "--mech", s(&mech), "--k", "2", "--cdf", "logistic"])
        .args(["--out", s(&dir.path().join("f.json"))])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8(out.stderr).unwrap().starts_with("STORE_ERROR: "));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "seed = 5\n[da]\nmax_iter = 3\n").unwrap();
    let out = dir.path().join("imp.tsv");
    run(&["impute", "--config", s(&cfg), "--seed", "6", "--input", s(&data("Y.tsv")), "--out", s(&out)]);
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("imp.tsv.manifest.json")).unwrap()).unwrap();
    assert_eq!(m["config"]["seed"], 6);
    assert_eq!(m["config"]["da"]["max_iter"], 3);
    assert_eq!(m["inputs"].as_array().unwrap().len(), 1);
}

#[test]
fn minimum_imputation_fills_observed_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("imp.tsv");
    run(&["impute", "--method", "min", "--input", s(&data("Y.tsv")), "--out", s(&out)]);
    let text = std::fs::read_to_string(&out).unwrap();
    assert!(text.starts_with("# msnimble"));
    let body: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(body.len(), 51);
    let src = std::fs::read_to_string(data("Y.tsv")).unwrap();
    for (a, b) in src.lines().filter(|l| !l.starts_with('#')).skip(1).zip(body.iter().skip(1)) {
        let orig: Vec<&str> = a.split('\t').collect();
        let fill: Vec<&str> = b.split('\t').collect();
        let observed: Vec<f64> = orig[1..].iter().filter_map(|v| v.parse().ok()).collect();
        if observed.is_empty() {
            continue;
        }
        let min = observed.iter().copied().fold(f64::INFINITY, f64::min);
        for (o, f) in orig[1..].iter().zip(&fill[1..]) {
            let f: f64 = f.parse().unwrap();
            match o.parse::<f64>() {
                Ok(v) => assert_eq!(v, f),
                Err(_) => assert_eq!(f, min),
            }
        }
    }
}

#[test]
fn simulate_writes_metrics_for_each_method() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sim.toml");
    std::fs::write(&cfg, "[simulation]\nreplicates = 1\nq_thresholds = [0.2]\n[simulation.design]\np = 60\nn = 50\nk = 2\n").unwrap();
    let out = dir.path().join("metrics.tsv");
    let data_dir = dir.path().join("data");
    run(&["simulate", "--config", s(&cfg), "--k", "2", "--methods", "msnimble,min-ols", "--data-out", s(&data_dir), "--out", s(&out)]);
    let text = std::fs::read_to_string(&out).unwrap();
    let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("0\tmsnimble\t2\t0.2\t"));
    assert!(rows[2].starts_with("0\tmin-ols\t2\t0.2\t"));
    for f in ["Y.tsv", "X.tsv", "G.tsv", "truth.tsv"] {
        assert!(data_dir.join(f).exists(), "{f}");
    }
}
