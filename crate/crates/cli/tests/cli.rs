use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use jumpcal::io::{read_quotes, Bundle};
use jumpcal::synthetic::Provenance;

const COARSE: &str = r#"{"grid": {"dtau": 0.05, "dy": 0.05}, "paths": {"n_paths": 400, "n_steps": 20}}"#;

fn jumpcal(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_jumpcal"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    o
}

#[test]
fn constant_vol_pipeline_matches_fourier() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(jumpcal(d, &["synth", "--preset", "table1"]));
    ok(jumpcal(d, &["price", "--vol", "vol.csv", "--tail", "tail.csv", "--out", "pide"]));
    ok(jumpcal(d, &["implied-vol", "--prices", "pide/prices.csv", "--out", "iv"]));
    let iv = read_quotes(&d.join("iv/implied_vol.csv"), Provenance::Synthetic).unwrap();
    let atm = iv.quotes.iter().find(|q| (q.tau - 1.0).abs() < 1e-12 && q.y.abs() < 1e-12).unwrap();
    // Jumps add variance on top of the diffusion.
    assert!(atm.implied_vol.unwrap() > 0.0226f64.sqrt());

    let o = ok(jumpcal(
        d,
        &["oracle-fourier", "--vol", "vol.csv", "--nu", "nu.csv", "--nodes", "quotes.csv", "--against", "pide/prices.csv"],
    ));
    let c: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert!(c["normalized_distance"].as_f64().unwrap() <= 0.10);
    assert!(c["mean_abs_rel"].as_f64().unwrap() <= 0.10);
    assert_eq!(c["count"].as_u64().unwrap(), 210);
}

#[test]
fn gradient_gate_passes_on_the_default_grid() {
    let dir = tempfile::tempdir().unwrap();
    let o = ok(jumpcal(dir.path(), &["check-gradients", "--grid", "20x41"]));
    let text = stdout(&o);
    assert!(text.contains("PASS"));
    for line in text.lines().filter(|l| l.contains("relative error")) {
        let err: f64 = line.rsplit(' ').next().unwrap().parse().unwrap();
        assert!(err < 1e-4, "{line}");
    }
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("bad.json"), r#"{"grid": {"dtau": 0.05, "spacing": 1}}"#).unwrap();
    let o = jumpcal(d, &["--config", "bad.json", "synth", "--preset", "sec71"]);
    assert_eq!(o.status.code(), Some(2));
    let o = jumpcal(d, &["check-gradients", "--grid", "20x40"]);
    assert_eq!(o.status.code(), Some(2));
    fs::write(d.join("wide.json"), r#"{"calibration": {"lambda": 0.5}}"#).unwrap();
    let o = jumpcal(d, &["--config", "wide.json", "synth", "--preset", "sec71"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unfinished_calibration_exits_with_four_and_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("c.json"), r#"{"grid": {"dtau": 0.05, "dy": 0.05}, "calibration": {"vol_iters": 2}}"#).unwrap();
    ok(jumpcal(d, &["--config", "c.json", "synth", "--preset", "sec71"]));
    let o = jumpcal(d, &["--config", "c.json", "calibrate-vol", "--quotes", "quotes.csv", "--tail", "tail.csv", "--out", "fit"]);
    assert_eq!(o.status.code(), Some(4));
    let bundle = Bundle::read(&d.join("fit/calibrate_vol.json")).unwrap();
    assert!(bundle.flagged);
    assert_eq!(bundle.config.calibration.vol_iters, 2);
    assert!(d.join("fit/vol.csv").exists());
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(
        d.join("c.json"),
        r#"{"grid": {"dtau": 0.05, "dy": 0.05}, "noise": 0.01, "seed": 11, "calibration": {"vol_iters": 15}}"#,
    )
    .unwrap();
    for run in ["a", "b"] {
        ok(jumpcal(d, &["--config", "c.json", "--out", run, "--emit-plots", "synth", "--preset", "sec71"]));
        let fit = format!("{run}/fit");
        let quotes = format!("{run}/quotes.csv");
        let tail = format!("{run}/tail.csv");
        jumpcal(d, &["--config", "c.json", "--out", &fit, "calibrate-vol", "--quotes", &quotes, "--tail", &tail]);
    }
    let files = [
        "vol.csv",
        "nu.csv",
        "tail.csv",
        "quotes.csv",
        "synth.json",
        "plots/tail.csv",
        "plots/vol_slices.csv",
        "fit/vol.csv",
        "fit/calibrate_vol.json",
    ];
    for f in files {
        let a = fs::read(d.join("a").join(f)).unwrap();
        let b = fs::read(d.join("b").join(f)).unwrap();
        assert!(a == b, "{f} differs between reruns");
    }
    let bundle = Bundle::read(&d.join("a/synth.json")).unwrap();
    assert_eq!(bundle.config.seed, 11);
    assert!(bundle.version.starts_with("jumpcal "));
}

#[test]
fn split_calibration_then_recovery_and_lookbacks() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = COARSE.replacen('{', r#"{"calibration": {"residual_tol": 0.005}, "#, 1);
    fs::write(d.join("c.json"), cfg).unwrap();
    ok(jumpcal(d, &["--config", "c.json", "--out", "split", "calibrate-split", "--preset", "sec73"]));
    let history: Vec<serde_json::Value> =
        serde_json::from_str(&fs::read_to_string(d.join("split/history.json")).unwrap()).unwrap();
    let last = history.last().unwrap()["residual"].as_f64().unwrap();
    assert!(last <= 0.005);
    let bundle = Bundle::read(&d.join("split/calibrate_split.json")).unwrap();
    assert!(!bundle.flagged);
    assert_eq!(bundle.history.as_array().unwrap().len(), history.len());
    let progress = fs::read_to_string(d.join("split/progress.jsonl")).unwrap();
    assert_eq!(progress.lines().count(), history.len());

    ok(jumpcal(d, &["--config", "c.json", "--out", "rec", "recover-nu", "--tail", "split/tail.csv"]));
    assert!(d.join("rec/nu.csv").exists());

    let o = ok(jumpcal(d, &["--config", "c.json", "--out", "mc", "mc-exotics", "--bundle", "split/calibrate_split.json"]));
    assert!(stdout(&o).contains("jump model beats local vol"));
    let table = fs::read_to_string(d.join("mc/lookback_call_prices.csv")).unwrap();
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows[0], "model,0.1,0.2,0.3,0.5");
    assert_eq!(rows.len(), 7);
}

#[test]
fn market_import_logs_rejected_rows() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("m.csv"), "strike,days,price\n10000,73,500\n11000,73,50\n9000,73,500\n").unwrap();
    let o = ok(jumpcal(d, &["quotes-import", "--market", "m.csv", "--s0", "10000"]));
    assert!(String::from_utf8_lossy(&o.stderr).contains("rejected line 4"));
    let q = read_quotes(&d.join("quotes.csv"), Provenance::Market).unwrap();
    assert_eq!(q.quotes.len(), 2);
    assert!((q.quotes[1].y - 1.1f64.ln()).abs() < 1e-15);
}
