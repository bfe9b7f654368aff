use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn lcfed(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lcfed"))
        .args(args)
        .env("LCFED_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn run_config(dir: &Path, body: &str) -> Output {
    let cfg = dir.join("exp.cfg");
    fs::write(&cfg, body).unwrap();
    let out = dir.join("out");
    lcfed(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()])
}

const SMALL: &str = "strategies=fedavg\nseeds=3\nrounds=1\nm=6\ndata.samples_per_device=40\n\
cluster.k=2\ncluster.d=3\nmodel.hidden=8\n";

#[test]
fn single_round_writes_header_and_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_config(dir.path(), SMALL);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("out/fedavg_seed3.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(
        lines[0],
        "round,strategy,seed,mean_acc,std_acc,ari,sim_flops,bytes_up,bytes_down,cluster_sizes"
    );
    assert!(lines[1].starts_with("0,fedavg,3,"));
}

#[test]
fn repeated_runs_are_byte_identical() {
    let body = format!("{SMALL}rounds=3\n")
        .replace("rounds=1\n", "")
        .replace("fedavg", "lcfed,ifca");
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert!(run_config(a.path(), &body).status.success());
    assert!(run_config(b.path(), &body).status.success());
    for name in ["lcfed_seed3.csv", "ifca_seed3.csv", "summary.json"] {
        let x = fs::read(a.path().join("out").join(name)).unwrap();
        let y = fs::read(b.path().join("out").join(name)).unwrap();
        assert_eq!(x, y, "{name}");
    }
}

#[test]
fn summary_statistics_recompute_from_csvs() {
    let body = "strategies=lcfed,fedavg\nseeds=1,2,3,4,5\nrounds=2\nm=6\ndata.samples_per_device=40\n\
cluster.k=2\ncluster.d=3\nmodel.hidden=8\n";
    let dir = tempfile::tempdir().unwrap();
    assert!(run_config(dir.path(), body).status.success());
    let summary: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/summary.json")).unwrap()).unwrap();
    let strategies = summary["strategies"].as_array().unwrap();
    assert_eq!(strategies.len(), 2);
    for s in strategies {
        let name = s["strategy"].as_str().unwrap();
        let finals: Vec<f64> = (1..=5)
            .map(|seed| {
                let csv = fs::read_to_string(dir.path().join(format!("out/{name}_seed{seed}.csv"))).unwrap();
                let last = csv.lines().last().unwrap();
                last.split(',').nth(3).unwrap().parse().unwrap()
            })
            .collect();
        let mean = finals.iter().sum::<f64>() / 5.0;
        let std = (finals.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 5.0).sqrt();
        // CSV values carry six decimals.
        assert!((s["mean_acc"].as_f64().unwrap() - mean).abs() < 1e-6, "{name}");
        assert!((s["std_acc"].as_f64().unwrap() - std).abs() < 1e-5, "{name}");
        assert_eq!(s["runs"].as_array().unwrap().len(), 5);
    }
}

#[test]
fn invalid_config_exits_nonzero_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_config(dir.path(), &format!("{SMALL}train.eta=-1\n"));
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.eta"));

    let out = run_config(dir.path(), "strategies=fedavg,kmeans\n");
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("strategies"));
}

fn report_rows(stdout: &[u8]) -> Vec<Vec<String>> {
    String::from_utf8_lossy(stdout)
        .lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with("m,"))
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn cost_report_matches_hand_computed_rows() {
    let out = lcfed(&[
        "cost-report",
        "--m",
        "100",
        "--k",
        "10",
        "--dim",
        "61706",
        "--d",
        "50",
        "--head-dim",
        "850",
    ]);
    assert!(out.status.success());
    let rows = report_rows(&out.stdout);
    let find = |s: &str| {
        rows.iter()
            .find(|r| r[0] == "100" && r[1] == "10" && r[2] == s)
            .unwrap()
            .clone()
    };

    // m*K*3*D + m*D; uplink adds the low-rank vector; downlink adds the global embedding.
    let lc = find("lcfed");
    assert_eq!(lc[3], (100 * 10 * 3 * 50 + 100 * 50).to_string());
    assert_eq!(lc[4], ((100 * 61706 + 100 * 50) * 4).to_string());
    assert_eq!(lc[5], (100 * (61706 + (61706 - 850)) * 4).to_string());

    let full = find("fedgroup");
    assert_eq!(full[3], (100u64 * 10 * 3 * 61706).to_string());
    let ifca = find("ifca");
    assert_eq!(ifca[5], (100u64 * 10 * 61706 * 4).to_string());
}

#[test]
fn default_cost_report_covers_both_reference_scales() {
    let out = lcfed(&["cost-report"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout).to_string();
    let rows = report_rows(&out.stdout);
    for (m, k) in [("100", "10"), ("1000", "100")] {
        assert_eq!(rows.iter().filter(|r| r[0] == m && r[1] == k).count(), 7);
    }
    assert!(text.contains("96000"));
}
