use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use fpcert::bounds::{Certificate, Method, QuantileBound};
use fpcert::config::RunConfig;
use fpcert::fixed_point::{MetricId, NonFinitePolicy};
use fpcert::pipeline::{run_config, Manifest, Pipeline, RunOptions, Stage};
use fpcert::report::*;
use fpcert::Error;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn opts(out: &Path) -> RunOptions {
    RunOptions { seed: None, out: Some(out.to_path_buf()), policy: NonFinitePolicy::CountAsFailure }
}

fn read(dir: &Path, name: &str) -> String {
    fs::read_to_string(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

#[test]
fn toy_smoke_run_is_fast_complete_and_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let t = Instant::now();
    run_config(&configs().join("toy.json"), &opts(a.path())).unwrap();
    assert!(t.elapsed().as_secs_f64() < 5.0, "{:?}", t.elapsed());
    run_config(&configs().join("toy.json"), &opts(b.path())).unwrap();
    for f in ["certificates.csv", "quantiles.csv", "ledger.txt", "manifest.json", "plots/plots.gp"] {
        assert!(a.path().join(f).exists(), "missing {f}");
        assert_eq!(read(a.path(), f), read(b.path(), f), "{f} differs");
    }
    let m: Manifest = serde_json::from_str(&read(a.path(), "manifest.json")).unwrap();
    assert_eq!(m.status, "complete");
    assert_eq!(m.seed, 7);
    let cfg = RunConfig::load(&configs().join("toy.json")).unwrap();
    assert_eq!(m.config_hash, cfg.hash());
    let ledger = read(a.path(), "ledger.txt");
    assert!(ledger.contains("0.919"), "{ledger}");
}

#[test]
fn seed_override_changes_outputs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_config(&configs().join("toy.json"), &opts(a.path())).unwrap();
    run_config(&configs().join("toy.json"), &RunOptions { seed: Some(99), ..opts(b.path()) }).unwrap();
    let m: Manifest = serde_json::from_str(&read(b.path(), "manifest.json")).unwrap();
    assert_eq!(m.seed, 99);
    assert_ne!(read(a.path(), "certificates.csv"), read(b.path(), "certificates.csv"));
}

#[test]
fn emitted_certificates_are_consistent() {
    let dir = tempfile::tempdir().unwrap();
    run_config(&configs().join("toy.json"), &opts(dir.path())).unwrap();
    let text = read(dir.path(), "certificates.csv");
    assert_eq!(text.lines().next().unwrap(), CERTIFICATES_HEADER);
    let certs = parse_certificates(&text).unwrap();
    assert_eq!(certs.len(), 21 * 81);
    assert_eq!(certificates_csv(&certs), text);
    for c in &certs {
        assert!(c.bound >= c.empirical);
        assert!(matches!(c.method, Method::SampleConvergence | Method::Combined));
    }
    for k in 0..=20 {
        let row: Vec<&Certificate> = certs.iter().filter(|c| c.k == k).collect();
        assert!(row.windows(2).all(|w| w[1].bound <= w[0].bound));
    }
    let plots = dir.path().join("plots");
    for e in [1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0] {
        let name = format!("success_fp_residual_eps{}.dat", fmt_sig(e).replace('-', "m").replace('.', "p"));
        let data = fs::read_to_string(plots.join(&name)).unwrap_or_else(|_| panic!("{name}"));
        for line in data.lines().skip(1) {
            let mut it = line.split_whitespace();
            let k: usize = it.next().unwrap().parse().unwrap();
            let v: f64 = it.next().unwrap().parse().unwrap();
            let c = certs.iter().find(|c| c.k == k && fmt_sig(c.epsilon) == fmt_sig(e)).unwrap();
            assert_eq!(fmt_sig(v), fmt_sig(1.0 - c.bound));
        }
    }
    let wc = fs::read_to_string(plots.join("worst_case_fp_residual.dat")).unwrap();
    for line in wc.lines().skip(1) {
        let mut it = line.split_whitespace();
        let k: i32 = it.next().unwrap().parse().unwrap();
        let v: f64 = it.next().unwrap().parse().unwrap();
        // 2 * 0.5^k * dist_upper
        assert_eq!(fmt_sig(v), fmt_sig(2.0 * 0.5f64.powi(k) * 4.0));
    }
}

#[test]
fn quantile_curves_nonincreasing_for_convergent_runs() {
    let dir = tempfile::tempdir().unwrap();
    run_config(&configs().join("toy.json"), &opts(dir.path())).unwrap();
    let q = parse_quantiles(&read(dir.path(), "quantiles.csv")).unwrap();
    assert!(!q.is_empty());
    for qq in [0.5, 0.9] {
        let curve: Vec<f64> = q.iter().filter(|r| r.quantile == qq).map(|r| r.epsilon_bound.unwrap()).collect();
        assert!(curve.windows(2).all(|w| w[1] <= w[0]), "{curve:?}");
        let name = format!("plots/quantile_fp_residual_q{}.dat", fmt_sig(qq).replace('.', "p"));
        let n = read(dir.path(), &name).lines().count() - 1;
        assert_eq!(n, curve.len());
    }
}

#[test]
fn stages_run_independently() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::load(&configs().join("toy.json")).unwrap();
    let p = Pipeline::new(cfg.clone(), &opts(dir.path())).unwrap();
    assert!(p.run(Stage::Certify).is_err());
    for s in [Stage::Gen, Stage::Run, Stage::Certify, Stage::Quantiles, Stage::Report] {
        p.run(s).unwrap();
    }
    let whole = tempfile::tempdir().unwrap();
    Pipeline::new(cfg, &opts(whole.path())).unwrap().run(Stage::All).unwrap();
    for f in ["certificates.csv", "quantiles.csv"] {
        assert_eq!(read(dir.path(), f), read(whole.path(), f));
    }
}

#[test]
fn budget_violations_are_rejected_before_compute() {
    let dir = tempfile::tempdir().unwrap();
    let text = read(&configs(), "toy.json").replace("\"delta\": 1e-3", "\"delta\": 0.0125");
    let path = dir.path().join("bad.json");
    fs::write(&path, &text).unwrap();
    let out = dir.path().join("out");
    match run_config(&path, &opts(&out)) {
        Err(Error::Config { path, .. }) => assert_eq!(path, "bounds.metrics[0].grid"),
        other => panic!("expected a config error, got {other:?}"),
    }
    assert!(!out.join("instances.json").exists());

    let bin = env!("CARGO_BIN_EXE_fpcert");
    let st = Command::new(bin).args(["all", "--config"]).arg(&path).arg("--out").arg(&out).output().unwrap();
    assert_eq!(st.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&st.stderr).contains("bounds.metrics[0].grid"));

    fs::write(&path, text.replace("\"n_samples\": 50", "\"n_samples\": 50, \"extra\": 1")).unwrap();
    assert!(matches!(RunConfig::load(&path), Err(Error::Config { .. })));
    let st = Command::new(bin).args(["all", "--config"]).arg(dir.path().join("missing.json")).output().unwrap();
    assert_ne!(st.status.code(), Some(0));
}

#[test]
fn binary_runs_toy_config() {
    let dir = tempfile::tempdir().unwrap();
    let st = Command::new(env!("CARGO_BIN_EXE_fpcert"))
        .args(["all", "--threads", "2", "--config"])
        .arg(configs().join("toy.json"))
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(st.status.success(), "{}", String::from_utf8_lossy(&st.stderr));
    let lib = tempfile::tempdir().unwrap();
    run_config(&configs().join("toy.json"), &opts(lib.path())).unwrap();
    assert_eq!(read(dir.path(), "certificates.csv"), read(lib.path(), "certificates.csv"));
}

#[test]
fn golden_csv_layout() {
    let certs = vec![Certificate {
        method: Method::PacBayes,
        metric: MetricId::Nmse,
        k: 3,
        epsilon: -12.5,
        n_samples: 1000,
        h_samples: 2000,
        empirical: 0.125,
        r_bar: 1.0 / 3.0,
        bound: 0.5,
        confidence: 0.99988,
    }];
    let golden = "method,metric,k,epsilon,n_samples,h_samples,empirical,r_bar,bound,confidence\n\
                  pac_bayes,nmse,3,-12.5,1000,2000,0.125,0.333333333333,0.5,0.99988\n";
    assert_eq!(certificates_csv(&certs), golden);
    let rows = vec![
        QuantileBound { metric: MetricId::FpResidual, k: 4, quantile: 0.9, epsilon_bound: Some(1e-3), confidence: 0.9919 },
        QuantileBound { metric: MetricId::FpResidual, k: 5, quantile: 0.9, epsilon_bound: None, confidence: 0.9919 },
    ];
    assert_eq!(quantiles_csv(&rows), "metric,k,quantile,epsilon_bound,confidence\nfp_residual,4,0.9,0.001,0.9919\n");
    assert_eq!(quantiles_csv(&rows[1..]), format!("{QUANTILES_HEADER}\n"));
    assert!(parse_quantiles(&quantiles_csv(&rows[1..])).unwrap().is_empty());
    assert_eq!(TRAINING_LOG_HEADER, "epoch,sampled_risk,B_value,kl_inverse_term,penalty_term,objective");
    assert!(parse_certificates("method,metric\n").is_err());
    let bad = golden.replace(",0.5,", ",0.5");
    assert!(matches!(parse_certificates(&bad), Err(Error::Parse { offset: 2, .. })));
}

#[test]
fn fmt_sig_keeps_twelve_digits() {
    assert_eq!(fmt_sig(0.0), "0");
    assert_eq!(fmt_sig(1.0 / 3.0), "0.333333333333");
    assert_eq!(fmt_sig(2.0 / 3.0 * 1e-9).parse::<f64>().unwrap(), 6.66666666667e-10);
    assert_eq!(fmt_sig(-80.0), "-80");
}
