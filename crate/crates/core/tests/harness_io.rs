//! Run artifacts: determinism, schemas, seed isolation, and report round trips.

use std::fs;

use exdrl_core::harness::{self, EvalReport, ReportFormat, RunConfig};
use exdrl_core::{AgentConfig, ConstantPolicy, Error, RiskKind, RiskMeasure};

fn tiny_cfg(dir: &std::path::Path) -> RunConfig {
    RunConfig {
        seed: 5,
        n_train_steps: 60,
        n_eval_scenarios: 40,
        volatilities: vec![0.2, 0.4],
        output_dir: dir.to_path_buf(),
        agent: AgentConfig {
            n_quantiles: 20,
            hidden: vec![8],
            batch_size: 8,
            warmup_steps: 16,
            ..AgentConfig::default()
        },
        ..RunConfig::default()
    }
}

const CVAR95: RiskMeasure = RiskMeasure {
    kind: RiskKind::Cvar,
    alpha: 0.95,
};

#[test]
fn training_writes_identical_artifacts_for_identical_seeds() {
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    harness::run_train(&tiny_cfg(d1.path())).unwrap();
    harness::run_train(&tiny_cfg(d2.path())).unwrap();
    for f in [harness::METRICS_FILE, harness::CHECKPOINT_FILE] {
        assert_eq!(fs::read(d1.path().join(f)).unwrap(), fs::read(d2.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn zero_steps_leaves_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        n_train_steps: 0,
        ..tiny_cfg(dir.path())
    };
    let out = harness::train(&cfg).unwrap();
    assert_eq!(out.checkpoint, harness::initial_agent(&cfg).unwrap().checkpoint());
    assert!(out.metrics.is_empty());
}

#[test]
fn checkpoint_round_trips_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_cfg(dir.path());
    let out = harness::run_train(&cfg).unwrap();
    let path = dir.path().join(harness::CHECKPOINT_FILE);
    let loaded = harness::load_checkpoint(&path).unwrap();
    assert_eq!(loaded, out.checkpoint);
    let again = dir.path().join("again.json");
    harness::save_checkpoint(&loaded, &again).unwrap();
    assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap());
}

#[test]
fn baseline_metrics_differ_only_in_tail_columns() {
    let dir = tempfile::tempdir().unwrap();
    let ex = harness::train(&tiny_cfg(dir.path())).unwrap();
    let mut base_cfg = tiny_cfg(dir.path());
    base_cfg.agent.baseline_mode = true;
    let base = harness::train(&base_cfg).unwrap();
    let ex_csv = harness::metrics_csv(&ex.metrics, false);
    let base_csv = harness::metrics_csv(&base.metrics, true);
    let (ex_lines, base_lines): (Vec<&str>, Vec<&str>) = (ex_csv.lines().collect(), base_csv.lines().collect());
    assert_eq!(ex_lines[0], base_lines[0]);
    assert_eq!(ex_lines.len(), base_lines.len());
    for line in &base_lines[1..] {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(&cols[3..], &["NA", "NA", "NA"]);
    }
    let last: Vec<&str> = ex_lines.last().unwrap().split(',').collect();
    assert!(last[1].parse::<f64>().is_ok() && last[5].parse::<u64>().is_ok());
}

#[test]
fn checkpoint_config_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_cfg(dir.path());
    let out = harness::train(&RunConfig {
        n_train_steps: 0,
        ..cfg.clone()
    })
    .unwrap();
    let mut other = cfg.clone();
    other.agent.critic_lr *= 2.0;
    assert!(matches!(harness::run_eval(&out.checkpoint, &other), Err(Error::Checkpoint(_))));
    // Market settings are not part of the checkpoint identity.
    let mut vol = cfg;
    vol.market.vol = 0.7;
    assert!(harness::run_eval(&out.checkpoint, &vol).is_ok());
}

#[test]
fn episodes_depend_only_on_seed_and_index() {
    let m = exdrl_core::MarketParams::default();
    let short = harness::evaluate(&ConstantPolicy(0.3), &m, 5, CVAR95, "x", 3).unwrap();
    let long = harness::evaluate(&ConstantPolicy(0.3), &m, 12, CVAR95, "x", 3).unwrap();
    assert_eq!(short.pnl[..], long.pnl[..5]);
    let other = harness::evaluate(&ConstantPolicy(0.3), &m, 5, CVAR95, "x", 4).unwrap();
    assert_ne!(short.pnl, other.pnl);
}

#[test]
fn scripted_hedge_ratio_endpoints_in_reports() {
    let m = exdrl_core::MarketParams::default();
    let full = harness::evaluate(&ConstantPolicy(1.0), &m, 50, CVAR95, "full", 1).unwrap();
    let none = harness::evaluate(&ConstantPolicy(0.0), &m, 50, CVAR95, "none", 1).unwrap();
    assert_eq!(full.gamma_hedge_ratio, Some(1.0));
    assert_eq!(none.gamma_hedge_ratio, Some(0.0));
}

fn parse_csv(text: &str) -> (Vec<String>, Vec<Vec<String>>) {
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(String::from).collect();
    let rows = lines.map(|l| l.split(',').map(String::from).collect()).collect();
    (header, rows)
}

#[test]
fn aggregates_recompute_from_emitted_episodes() {
    let dir = tempfile::tempdir().unwrap();
    let m = exdrl_core::MarketParams::default();
    let report = harness::evaluate(&ConstantPolicy(0.4), &m, 300, CVAR95, "EX-D4PG", 8).unwrap();
    harness::emit_report(std::slice::from_ref(&report), dir.path(), ReportFormat::Csv).unwrap();

    let (_, rows) = parse_csv(&fs::read_to_string(dir.path().join("pnl.csv")).unwrap());
    let pnl: Vec<f64> = rows.iter().map(|r| r[4].parse().unwrap()).collect();
    let ghr: Vec<f64> = rows.iter().filter(|r| r[5] != "NA").map(|r| r[5].parse().unwrap()).collect();
    let n = pnl.len() as f64;
    let mean = pnl.iter().sum::<f64>() / n;
    let std = (pnl.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let mut sorted = pnl.clone();
    sorted.sort_by(f64::total_cmp);
    let k = (0.05 * n).round() as usize;
    let var = sorted[k];
    let cvar = sorted[..=k].iter().sum::<f64>() / (k + 1) as f64;
    let ghr_mean = ghr.iter().sum::<f64>() / ghr.len() as f64;

    let (header, rows) = parse_csv(&fs::read_to_string(dir.path().join("summary.csv")).unwrap());
    assert_eq!(header, ["risk_measure", "metric", "EX-D4PG"]);
    let metrics: Vec<&str> = rows.iter().map(|r| r[1].as_str()).collect();
    assert_eq!(metrics, ["mean", "std", "VaR95", "CVaR95", "gamma_hedge_ratio"]);
    for (row, want) in rows.iter().zip([mean, std, var, cvar, ghr_mean]) {
        let got: f64 = row[2].parse().unwrap();
        assert!((got - want).abs() <= 1e-5 * want.abs().max(1e-12), "{}: {got} vs {want}", row[1]);
    }
}

#[test]
fn json_report_round_trip_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let m = exdrl_core::MarketParams::default();
    let cfg = tiny_cfg(dir.path());
    let report = harness::evaluate(&ConstantPolicy(0.5), &m, 30, CVAR95, "EX-D4PG", 2)
        .unwrap()
        .with_config(&cfg);
    let first = harness::reports_json(std::slice::from_ref(&report)).unwrap();
    let parsed: Vec<EvalReport> = serde_json::from_str(&first).unwrap();
    assert_eq!(parsed, vec![report.clone()]);
    assert_eq!(harness::reports_json(&parsed).unwrap(), first);

    let saved = harness::save_report(&report, dir.path()).unwrap();
    assert!(saved.to_string_lossy().ends_with(harness::REPORT_SUFFIX));
    assert_eq!(harness::load_reports(dir.path()).unwrap(), vec![report]);
}

#[test]
fn summary_places_two_agents_side_by_side() {
    let m = exdrl_core::MarketParams::default();
    let mut reports = Vec::new();
    for (label, a) in [("EX-D4PG", 0.6), ("QR-D4PG", 0.2)] {
        for alpha in [0.95, 0.99] {
            let rm = RiskMeasure {
                kind: RiskKind::Var,
                alpha,
            };
            reports.push(harness::evaluate(&ConstantPolicy(a), &m, 40, rm, label, 1).unwrap());
        }
    }
    let (header, rows) = parse_csv(&harness::summary_csv(&reports));
    assert_eq!(header, ["risk_measure", "metric", "EX-D4PG", "QR-D4PG"]);
    assert_eq!(rows.len(), 10);
    assert_eq!(rows[2][0..2], ["VaR95".to_string(), "VaR95".to_string()]);
    assert_eq!(rows[8][0..2], ["VaR99".to_string(), "CVaR99".to_string()]);
    assert!(rows.iter().all(|r| r.len() == 4 && r[2] != r[3]));
}

#[test]
fn sweep_shape_order_independence_and_single_cell_equivalence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_cfg(dir.path());
    let ck = harness::train(&cfg).unwrap().checkpoint;

    let reports = harness::run_sweep(&cfg, Some(&ck)).unwrap();
    assert_eq!(reports.len(), cfg.volatilities.len() * cfg.sweep_risk_measures.len());
    assert_eq!(harness::sweep_csv(&reports).lines().count(), 1 + reports.len());

    let mut reversed = cfg.clone();
    reversed.volatilities.reverse();
    reversed.sweep_risk_measures.reverse();
    let rev = harness::run_sweep(&reversed, Some(&ck)).unwrap();
    for r in &reports {
        let twin = rev
            .iter()
            .find(|x| x.volatility == r.volatility && x.risk_measure == r.risk_measure)
            .unwrap();
        assert_eq!(twin.pnl, r.pnl);
    }

    let single = RunConfig {
        volatilities: vec![0.4],
        sweep_risk_measures: vec![cfg.agent.risk],
        ..cfg.clone()
    };
    let swept = harness::run_sweep(&single, Some(&ck)).unwrap();
    let mut at_vol = cfg.clone();
    at_vol.market.vol = 0.4;
    let direct = harness::run_eval(&ck, &at_vol).unwrap();
    assert_eq!(swept.len(), 1);
    assert_eq!(swept[0].pnl, direct.pnl);
    assert_eq!(swept[0].cvar, direct.cvar);
    assert_eq!(swept[0].gamma_hedge_ratio, direct.gamma_hedge_ratio);
}

#[test]
fn sweep_without_checkpoint_trains_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        volatilities: vec![0.3],
        ..tiny_cfg(dir.path())
    };
    let reports = harness::run_sweep(&cfg, None).unwrap();
    assert_eq!(reports.len(), 2);
    for r in &reports {
        assert_eq!(r.config.as_ref().unwrap().agent.risk, r.risk_measure);
    }
}
