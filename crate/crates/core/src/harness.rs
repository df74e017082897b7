//! Run configuration, training and evaluation drivers, and report files.
//!
//! All randomness derives from [`RunConfig::seed`]: the agent, the training
//! environment, and the evaluation scenarios each get their own ChaCha
//! stream, and evaluation episode `i` uses stream `i` of the evaluation
//! generator, so its path depends only on `(seed, i)`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{Agent, AgentConfig, Checkpoint, FrozenPolicy, TrainMetrics};
use crate::error::{Error, Result};
use crate::market::{gamma_hedge_ratio, HedgingEnv, MarketParams, Policy};
use crate::quantile::{level_index, RiskKind, RiskMeasure};

const AGENT_STREAM: u64 = 1;
const TRAIN_ENV_STREAM: u64 = 2;
const EVAL_STREAM: u64 = 3;

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const REPORT_SUFFIX: &str = ".report.json";

/// Independent 64-bit seed for `stream` under `master`.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(stream);
    rng.next_u64()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; every random stream is derived from it.
    pub seed: u64,
    pub n_train_steps: u64,
    pub n_eval_scenarios: usize,
    pub volatilities: Vec<f64>,
    pub sweep_risk_measures: Vec<RiskMeasure>,
    pub output_dir: PathBuf,
    pub market: MarketParams,
    pub agent: AgentConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            n_train_steps: 10_000,
            n_eval_scenarios: 5000,
            volatilities: (1..=8).map(|i| i as f64 / 10.0).collect(),
            sweep_risk_measures: vec![
                RiskMeasure {
                    kind: RiskKind::Var,
                    alpha: 0.95,
                },
                RiskMeasure {
                    kind: RiskKind::Cvar,
                    alpha: 0.95,
                },
            ],
            output_dir: PathBuf::from("runs"),
            market: MarketParams::default(),
            agent: AgentConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_eval_scenarios < 1 {
            return Err(Error::config("n_eval_scenarios", "must be >= 1"));
        }
        for (i, v) in self.volatilities.iter().enumerate() {
            if !(*v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("volatilities[{i}]"), "must be > 0"));
            }
        }
        self.market.validate()?;
        self.agent.validate()
    }

    /// Agent label used as a report column.
    pub fn label(&self) -> &'static str {
        if self.agent.baseline_mode {
            "QR-D4PG"
        } else {
            "EX-D4PG"
        }
    }
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<TrainMetrics>,
}

/// The freshly initialized agent a run with `cfg` starts from.
pub fn initial_agent(cfg: &RunConfig) -> Result<Agent> {
    Agent::new(cfg.agent.clone(), derive_seed(cfg.seed, AGENT_STREAM))
}

/// Trains for `cfg.n_train_steps` environment steps.
pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut agent = initial_agent(cfg)?;
    let mut env = HedgingEnv::with_seed(cfg.market.clone(), derive_seed(cfg.seed, TRAIN_ENV_STREAM))?;
    let mut metrics = Vec::with_capacity(cfg.n_train_steps as usize);
    for _ in 0..cfg.n_train_steps {
        metrics.push(agent.train_step(&mut env)?);
    }
    Ok(TrainOutcome {
        checkpoint: agent.checkpoint(),
        metrics,
    })
}

/// Trains and writes `checkpoint.json` and `metrics.csv` into `cfg.output_dir`.
pub fn run_train(cfg: &RunConfig) -> Result<TrainOutcome> {
    let outcome = train(cfg)?;
    create_dir(&cfg.output_dir)?;
    save_checkpoint(&outcome.checkpoint, &cfg.output_dir.join(CHECKPOINT_FILE))?;
    let path = cfg.output_dir.join(METRICS_FILE);
    let mut file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    file.write_all(metrics_csv(&outcome.metrics, cfg.agent.baseline_mode).as_bytes())
        .map_err(|e| Error::io(&path, e))?;
    Ok(outcome)
}

const NA: &str = "NA";

fn opt_cell(v: Option<f64>) -> String {
    v.map_or_else(|| NA.to_string(), |x| x.to_string())
}

/// Training metrics as CSV. Tail columns hold `NA` in baseline mode.
pub fn metrics_csv(metrics: &[TrainMetrics], baseline_mode: bool) -> String {
    let mut out = String::from("step,qr_loss,actor_objective,gpd_sigma_mean,gpd_eps_mean,tail_update_skips\n");
    for m in metrics {
        let (sigma, eps, skips) = if baseline_mode {
            (NA.to_string(), NA.to_string(), NA.to_string())
        } else {
            (opt_cell(m.gpd_sigma), opt_cell(m.gpd_eps), m.tail_update_skips.to_string())
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            m.step,
            opt_cell(m.qr_loss),
            opt_cell(m.actor_objective),
            sigma,
            eps,
            skips
        );
    }
    out
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    let text = serde_json::to_string(ck)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Rounds to 6 significant digits.
pub fn round_sig6(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{x:.5e}").parse().unwrap_or(x)
}

/// Evaluation summary for one policy under one market.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    /// Objective the evaluated agent was trained on.
    pub risk_measure: RiskMeasure,
    pub volatility: f64,
    pub seed: u64,
    /// Per-episode terminal PnL.
    pub pnl: Vec<f64>,
    /// Per-episode gamma hedge ratio, `None` if the book never had gamma.
    pub episode_gamma_hedge_ratio: Vec<Option<f64>>,
    pub mean: f64,
    pub std: f64,
    pub var: f64,
    pub cvar: f64,
    pub gamma_hedge_ratio: Option<f64>,
    pub config: Option<RunConfig>,
}

/// Sample mean and (n - 1) standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Order-statistic VaR and CVaR of a PnL sample at index `round((1 - α) n)`.
pub fn empirical_var_cvar(pnl: &[f64], alpha: f64) -> (f64, f64) {
    let mut s = pnl.to_vec();
    s.sort_by(f64::total_cmp);
    let k = level_index(1.0 - alpha, s.len());
    (s[k], s[..=k].iter().sum::<f64>() / (k + 1) as f64)
}

impl EvalReport {
    /// Builds the aggregates from per-episode values (rounded first so the
    /// aggregates are a function of the emitted data).
    pub fn from_episodes(
        label: impl Into<String>,
        risk_measure: RiskMeasure,
        volatility: f64,
        seed: u64,
        pnl: Vec<f64>,
        ghr: Vec<Option<f64>>,
    ) -> Result<Self> {
        if pnl.is_empty() {
            return Err(Error::Empty("evaluation episodes"));
        }
        let pnl: Vec<f64> = pnl.into_iter().map(round_sig6).collect();
        let ghr: Vec<Option<f64>> = ghr.into_iter().map(|g| g.map(round_sig6)).collect();
        let mut r = Self {
            label: label.into(),
            risk_measure,
            volatility,
            seed,
            pnl,
            episode_gamma_hedge_ratio: ghr,
            mean: 0.0,
            std: 0.0,
            var: 0.0,
            cvar: 0.0,
            gamma_hedge_ratio: None,
            config: None,
        };
        r.recompute();
        Ok(r)
    }

    /// Recomputes every aggregate from `pnl` and the per-episode hedge ratios.
    pub fn recompute(&mut self) {
        let (mean, std) = mean_std(&self.pnl);
        let (var, cvar) = empirical_var_cvar(&self.pnl, self.risk_measure.alpha);
        let defined: Vec<f64> = self.episode_gamma_hedge_ratio.iter().flatten().copied().collect();
        self.mean = round_sig6(mean);
        self.std = round_sig6(std);
        self.var = round_sig6(var);
        self.cvar = round_sig6(cvar);
        self.gamma_hedge_ratio = (!defined.is_empty()).then(|| round_sig6(defined.iter().sum::<f64>() / defined.len() as f64));
    }

    pub fn with_config(mut self, cfg: &RunConfig) -> Self {
        self.config = Some(cfg.clone());
        self
    }

    /// `(metric, value)` rows of the aggregate table.
    pub fn aggregate_rows(&self) -> Vec<(String, Option<f64>)> {
        let pct = RiskMeasure {
            kind: RiskKind::Var,
            alpha: self.risk_measure.alpha,
        }
        .to_string();
        vec![
            ("mean".into(), Some(self.mean)),
            ("std".into(), Some(self.std)),
            (pct.clone(), Some(self.var)),
            (format!("C{pct}"), Some(self.cvar)),
            ("gamma_hedge_ratio".into(), self.gamma_hedge_ratio),
        ]
    }

    fn file_stem(&self) -> String {
        format!("{}-{}-vol{}", self.label, self.risk_measure, self.volatility)
    }
}

/// Runs `n` independent episodes with `policy` and summarizes them.
pub fn evaluate<P: Policy>(
    policy: &P,
    market: &MarketParams,
    n: usize,
    risk_measure: RiskMeasure,
    label: &str,
    seed: u64,
) -> Result<EvalReport> {
    let base = derive_seed(seed, EVAL_STREAM);
    let mut pnl = Vec::with_capacity(n);
    let mut ghr = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(base);
        rng.set_stream(i as u64);
        let mut env = HedgingEnv::new(market.clone(), rng)?;
        let mut total = 0.0;
        loop {
            let a = policy.action(&env.observation());
            let out = env.step(a);
            total += out.reward;
            if out.done {
                break;
            }
        }
        pnl.push(total);
        ghr.push(gamma_hedge_ratio(env.log()));
    }
    EvalReport::from_episodes(label, risk_measure, market.vol, seed, pnl, ghr)
}

/// Evaluates a checkpoint's noise-free policy under `cfg.market`.
pub fn run_eval(ck: &Checkpoint, cfg: &RunConfig) -> Result<EvalReport> {
    cfg.validate()?;
    ck.validate_against(&cfg.agent)?;
    let policy = FrozenPolicy::from_checkpoint(ck);
    let report = evaluate(
        &policy,
        &cfg.market,
        cfg.n_eval_scenarios,
        ck.config.risk,
        cfg.label(),
        cfg.seed,
    )?;
    Ok(report.with_config(cfg))
}

/// One report per `(volatility, risk measure)` cell. With a checkpoint the
/// same policy is evaluated in every cell; otherwise a fresh agent is
/// trained per cell on that risk measure. Every cell runs under the master
/// seed, so a cell's result does not depend on list order and all cells
/// share evaluation scenarios.
pub fn run_sweep(cfg: &RunConfig, checkpoint: Option<&Checkpoint>) -> Result<Vec<EvalReport>> {
    cfg.validate()?;
    if cfg.volatilities.is_empty() || cfg.sweep_risk_measures.is_empty() {
        return Err(Error::config("volatilities", "sweep needs at least one volatility and risk measure"));
    }
    let mut reports = Vec::new();
    for &vol in &cfg.volatilities {
        for risk in &cfg.sweep_risk_measures {
            let mut cell = cfg.clone();
            cell.market.vol = vol;
            let report = match checkpoint {
                Some(ck) => {
                    ck.validate_against(&cfg.agent)?;
                    let policy = FrozenPolicy::from_checkpoint(ck);
                    evaluate(&policy, &cell.market, cell.n_eval_scenarios, *risk, cfg.label(), cell.seed)?
                }
                None => {
                    cell.agent.risk = *risk;
                    let outcome = train(&cell)?;
                    run_eval(&outcome.checkpoint, &cell)?
                }
            };
            log::info!("sweep cell vol={vol} {risk}: mean {} {} {}", report.mean, report.var, report.cvar);
            reports.push(report.with_config(&cell));
        }
    }
    Ok(reports)
}

/// Sweep table: one row per `(volatility, risk measure)`.
pub fn sweep_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from("volatility,risk_measure,mean,std,var,cvar,gamma_hedge_ratio\n");
    for r in reports {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.volatility,
            r.risk_measure,
            r.mean,
            r.std,
            r.var,
            r.cvar,
            r.gamma_hedge_ratio.map_or_else(|| NA.to_string(), |g| g.to_string())
        );
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(Error::config("format", format!("unknown report format `{other}`"))),
        }
    }
}

/// Per-episode CSV: `label,risk_measure,volatility,episode,pnl,gamma_hedge_ratio`.
pub fn pnl_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from("label,risk_measure,volatility,episode,pnl,gamma_hedge_ratio\n");
    for r in reports {
        for (i, (p, g)) in r.pnl.iter().zip(&r.episode_gamma_hedge_ratio).enumerate() {
            let g = g.map_or_else(|| NA.to_string(), |v| v.to_string());
            let _ = writeln!(out, "{},{},{},{},{},{}", r.label, r.risk_measure, r.volatility, i, p, g);
        }
    }
    out
}

/// Aggregate table grouped by training risk measure, one value column per
/// agent: `risk_measure,metric,<agent>...`.
pub fn summary_csv(reports: &[EvalReport]) -> String {
    // Column names: the label, disambiguated by volatility when needed.
    let mut label_vols: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for r in reports {
        let v = label_vols.entry(&r.label).or_default();
        if !v.contains(&r.volatility) {
            v.push(r.volatility);
        }
    }
    let column = |r: &EvalReport| {
        if label_vols[r.label.as_str()].len() > 1 {
            format!("{}@vol={}", r.label, r.volatility)
        } else {
            r.label.clone()
        }
    };
    let mut columns: Vec<String> = Vec::new();
    let mut groups: Vec<String> = Vec::new();
    for r in reports {
        let c = column(r);
        if !columns.contains(&c) {
            columns.push(c);
        }
        let g = r.risk_measure.to_string();
        if !groups.contains(&g) {
            groups.push(g);
        }
    }
    let mut out = format!("risk_measure,metric,{}\n", columns.join(","));
    for g in &groups {
        let in_group: Vec<&EvalReport> = reports.iter().filter(|r| &r.risk_measure.to_string() == g).collect();
        let metrics: Vec<String> = in_group[0].aggregate_rows().into_iter().map(|(m, _)| m).collect();
        for (mi, m) in metrics.iter().enumerate() {
            let cells: Vec<String> = columns
                .iter()
                .map(|c| {
                    in_group
                        .iter()
                        .find(|r| &column(r) == c)
                        .and_then(|r| r.aggregate_rows()[mi].1)
                        .map_or_else(String::new, |v| v.to_string())
                })
                .collect();
            let _ = writeln!(out, "{g},{m},{}", cells.join(","));
        }
    }
    out
}

pub fn reports_json(reports: &[EvalReport]) -> Result<String> {
    Ok(serde_json::to_string_pretty(reports)?)
}

/// Writes reports into `dir`: `pnl.csv` and `summary.csv` for CSV,
/// `reports.json` for JSON. Returns the written paths.
pub fn emit_report(reports: &[EvalReport], dir: &Path, format: ReportFormat) -> Result<Vec<PathBuf>> {
    if reports.is_empty() {
        return Err(Error::Empty("reports"));
    }
    create_dir(dir)?;
    let files: Vec<(PathBuf, String)> = match format {
        ReportFormat::Csv => vec![
            (dir.join("pnl.csv"), pnl_csv(reports)),
            (dir.join("summary.csv"), summary_csv(reports)),
        ],
        ReportFormat::Json => vec![(dir.join("reports.json"), reports_json(reports)?)],
    };
    for (path, text) in &files {
        fs::write(path, text).map_err(|e| Error::io(path, e))?;
    }
    Ok(files.into_iter().map(|(p, _)| p).collect())
}

/// Saves one report as `<label>-<risk>-vol<v>.report.json` in `dir`.
pub fn save_report(report: &EvalReport, dir: &Path) -> Result<PathBuf> {
    create_dir(dir)?;
    let path = dir.join(format!("{}{REPORT_SUFFIX}", report.file_stem()));
    fs::write(&path, serde_json::to_string_pretty(report)?).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Loads every `*.report.json` in `dir`, sorted by file name.
pub fn load_reports(dir: &Path) -> Result<Vec<EvalReport>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with(REPORT_SUFFIX)))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            Ok(serde_json::from_str(&text)?)
        })
        .collect()
}
