use std::path::Path;
use std::process::{Command, Output};

fn bhcoop(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bhcoop")).args(args).output().expect("binary runs")
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap()
}

#[test]
fn region_writes_csv_per_scheme_and_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let run = |sub: &str| {
        let out = dir.path().join(sub);
        let o = bhcoop(&["region", "--scheme", "FRS,NM", "--alpha-points", "3", "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        out
    };
    let (a, b) = (run("a"), run("b"));
    for f in ["frs.csv", "nm.csv"] {
        let text = read(&a.join(f));
        assert_eq!(text.lines().count(), 4);
        assert_eq!(text, read(&b.join(f)));
    }
    let manifest: serde_json::Value = serde_json::from_str(&read(&a.join("manifest.json"))).unwrap();
    assert_eq!(manifest["command"], "region");
    assert_eq!(manifest["files"].as_array().unwrap().len(), 2);
    assert_eq!(manifest["config"]["nt"], 2);
}

#[test]
fn montecarlo_small_grid() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("mc");
    let o = bhcoop(&[
        "montecarlo",
        "--samples",
        "2",
        "--snr",
        "0,10",
        "--capacity",
        "1",
        "--seed",
        "5",
        "--threads",
        "2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = read(&out.join("montecarlo.csv"));
    assert_eq!(csv.lines().count(), 3);
    let manifest: serde_json::Value = serde_json::from_str(&read(&out.join("manifest.json"))).unwrap();
    assert_eq!(manifest["seed"], 5);
    assert_eq!(manifest["config"]["n_samples"], 2);
}

#[test]
fn qnm_single_antenna_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"nt": 1, "sigma2": 1.0, "P": [10, 10], "C": [1, 1],
            "H": [[[1.0, 0.0]], [[0.3, 0.1]], [[0.2, -0.4]], [[0.9, 0.2]]]}"#,
    )
    .unwrap();
    let out = dir.path().join("q");
    let o = bhcoop(&["qnm", "--config", cfg.to_str().unwrap(), "--alpha-points", "3", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = read(&out.join("qnm.csv"));
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",QNM")));
}

#[test]
fn bad_input_is_fatal() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(bhcoop(&["region", "--scheme", "XYZ", "--out", out]).status.code(), Some(1));
    assert_eq!(bhcoop(&["region", "--config", "/nonexistent.json", "--out", out]).status.code(), Some(1));
}
