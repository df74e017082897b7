//! Option book gamma-hedging simulator.
//!
//! Each day the agent picks `a ∈ [0, 1]`, the fraction of the book's gamma to
//! remove with a fresh at-the-money hedge option. Delta is then flattened with
//! the underlying, the price moves one GBM step, expiring options settle at
//! intrinsic value, and new client orders arrive. The reward is the change in
//! marked-to-market book value, which already includes the proportional
//! transaction cost paid on the hedge option.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

const DAYS_PER_YEAR: f64 = 365.0;

/// Standard normal CDF.
#[inline]
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal density.
#[inline]
pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// One exact lognormal step: `s * exp((drift - vol²/2) dt + vol √dt z)`.
#[inline]
pub fn gbm_step(s: f64, drift: f64, vol: f64, dt: f64, z: f64) -> f64 {
    s * ((drift - 0.5 * vol * vol) * dt + vol * dt.sqrt() * z).exp()
}

fn d1_d2(s: f64, k: f64, r: f64, q: f64, vol: f64, ttm: f64) -> (f64, f64) {
    let sd = vol * ttm.sqrt();
    let d1 = ((s / k).ln() + (r - q + 0.5 * vol * vol) * ttm) / sd;
    (d1, d1 - sd)
}

/// Black-Scholes-Merton call price. Intrinsic value at or past expiry.
pub fn bsm_price(s: f64, k: f64, r: f64, q: f64, vol: f64, ttm: f64) -> f64 {
    if ttm <= 0.0 {
        return (s - k).max(0.0);
    }
    let (d1, d2) = d1_d2(s, k, r, q, vol, ttm);
    s * (-q * ttm).exp() * norm_cdf(d1) - k * (-r * ttm).exp() * norm_cdf(d2)
}

/// Call delta `N(d1) e^{-qT}`.
pub fn bsm_delta(s: f64, k: f64, r: f64, q: f64, vol: f64, ttm: f64) -> f64 {
    if ttm <= 0.0 {
        return if s > k { 1.0 } else { 0.0 };
    }
    let (d1, _) = d1_d2(s, k, r, q, vol, ttm);
    (-q * ttm).exp() * norm_cdf(d1)
}

/// Call gamma `N'(d1) e^{-qT} / (s vol √T)`.
pub fn bsm_gamma(s: f64, k: f64, r: f64, q: f64, vol: f64, ttm: f64) -> f64 {
    if ttm <= 0.0 {
        return 0.0;
    }
    let (d1, _) = d1_d2(s, k, r, q, vol, ttm);
    (-q * ttm).exp() * norm_pdf(d1) / (s * vol * ttm.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MarketParams {
    pub s0: f64,
    pub vol: f64,
    /// Real-world drift of the underlying.
    pub mu: f64,
    pub r: f64,
    pub q: f64,
    /// Step length in years.
    pub dt: f64,
    /// Steps per episode.
    pub horizon: usize,
    /// Expected client orders per step.
    pub poisson_intensity: f64,
    pub client_maturity_days: usize,
    pub hedge_maturity_days: usize,
    /// Underlying units per option contract.
    pub contract_multiplier: f64,
    /// Proportional transaction cost on the hedge option.
    pub kappa: f64,
}

impl Default for MarketParams {
    fn default() -> Self {
        Self {
            s0: 10.0,
            vol: 0.3,
            mu: 0.0,
            r: 0.0,
            q: 0.0,
            dt: 1.0 / DAYS_PER_YEAR,
            horizon: 30,
            poisson_intensity: 1.0,
            client_maturity_days: 60,
            hedge_maturity_days: 30,
            contract_multiplier: 100.0,
            kappa: 0.01,
        }
    }
}

impl MarketParams {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, field: &str, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::config(format!("market.{field}"), msg))
            }
        };
        check(self.s0 > 0.0 && self.s0.is_finite(), "s0", "must be > 0")?;
        check(self.vol > 0.0 && self.vol.is_finite(), "vol", "must be > 0")?;
        check(self.dt > 0.0 && self.dt.is_finite(), "dt", "must be > 0")?;
        check(self.horizon >= 1, "horizon", "must be >= 1")?;
        check(
            self.poisson_intensity >= 0.0 && self.poisson_intensity.is_finite(),
            "poisson_intensity",
            "must be >= 0",
        )?;
        check((0.0..1.0).contains(&self.kappa), "kappa", "must lie in [0, 1)")?;
        check(self.client_maturity_days >= 1, "client_maturity_days", "must be >= 1")?;
        check(self.hedge_maturity_days >= 1, "hedge_maturity_days", "must be >= 1")?;
        check(self.contract_multiplier > 0.0, "contract_multiplier", "must be > 0")?;
        check(
            self.mu.is_finite() && self.r.is_finite() && self.q.is_finite(),
            "mu/r/q",
            "must be finite",
        )?;
        Ok(())
    }

    fn ttm(&self, maturity_step: usize, step: usize) -> f64 {
        (maturity_step as f64 - step as f64) * self.dt
    }
}

/// A European call held by the desk. `position` is in underlying units
/// (contracts times multiplier), negative when short.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptionContract {
    pub strike: f64,
    pub maturity_step: usize,
    pub position: f64,
    pub is_hedge: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PortfolioState {
    pub asset_position: f64,
    pub cash: f64,
    pub open_options: Vec<OptionContract>,
}

impl PortfolioState {
    fn option_sum(&self, m: &MarketParams, price: f64, step: usize, f: fn(f64, f64, f64, f64, f64, f64) -> f64) -> f64 {
        self.open_options
            .iter()
            .map(|o| o.position * f(price, o.strike, m.r, m.q, m.vol, m.ttm(o.maturity_step, step)))
            .sum()
    }

    /// Cash plus marked-to-market asset and options.
    pub fn value(&self, m: &MarketParams, price: f64, step: usize) -> f64 {
        self.cash + self.asset_position * price + self.option_sum(m, price, step, bsm_price)
    }

    pub fn delta(&self, m: &MarketParams, price: f64, step: usize) -> f64 {
        self.asset_position + self.option_sum(m, price, step, bsm_delta)
    }

    pub fn gamma(&self, m: &MarketParams, price: f64, step: usize) -> f64 {
        self.option_sum(m, price, step, bsm_gamma)
    }
}

/// Per-step audit record. Also the row type of the episode log CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// Price at which the hedge was placed.
    pub price: f64,
    pub gamma_pre: f64,
    pub gamma_post: f64,
    /// Signed hedge-option quantity in contracts.
    pub hedge_contracts: f64,
    /// Underlying units traded to flatten delta.
    pub delta_rebalance: f64,
    pub reward: f64,
    pub cumulative_pnl: f64,
}

/// Everything [`HedgingEnv::step`] did, beyond the log record.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub observation: [f64; 3],
    pub reward: f64,
    pub done: bool,
    pub record: StepRecord,
    /// Hedge-option quantity in underlying units.
    pub hedge_units: f64,
    /// Per-unit value of the hedge option at trade time.
    pub hedge_unit_value: f64,
    pub transaction_cost: f64,
    /// Book delta right after rebalancing.
    pub delta_post_rebalance: f64,
    pub price_next: f64,
    pub clients_arrived: usize,
}

/// Maps an observation to a hedge fraction.
pub trait Policy {
    fn action(&self, obs: &[f64; 3]) -> f64;
}

/// Always hedges the same fraction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantPolicy(pub f64);

impl Policy for ConstantPolicy {
    fn action(&self, _obs: &[f64; 3]) -> f64 {
        self.0
    }
}

/// Count of client orders for one step.
pub fn poisson_arrivals<R: Rng + ?Sized>(rng: &mut R, intensity: f64) -> usize {
    if intensity <= 0.0 {
        return 0;
    }
    let d = Poisson::new(intensity).expect("intensity checked positive");
    let n: f64 = d.sample(rng);
    n as usize
}

/// The hedging MDP. Observation is `(price, book gamma, hedge-option gamma per unit)`.
#[derive(Debug, Clone)]
pub struct HedgingEnv {
    params: MarketParams,
    rng: ChaCha8Rng,
    price: f64,
    step: usize,
    portfolio: PortfolioState,
    /// Book value after the previous step's arrivals.
    last_value: f64,
    cumulative: f64,
    log: Vec<StepRecord>,
}

impl HedgingEnv {
    pub fn new(params: MarketParams, rng: ChaCha8Rng) -> Result<Self> {
        params.validate()?;
        let mut env = Self {
            price: params.s0,
            params,
            rng,
            step: 0,
            portfolio: PortfolioState::default(),
            last_value: 0.0,
            cumulative: 0.0,
            log: Vec::new(),
        };
        env.reset();
        Ok(env)
    }

    pub fn with_seed(params: MarketParams, seed: u64) -> Result<Self> {
        Self::new(params, ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn params(&self) -> &MarketParams {
        &self.params
    }

    pub fn portfolio(&self) -> &PortfolioState {
        &self.portfolio
    }

    pub fn price(&self) -> f64 {
        self.price
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn log(&self) -> &[StepRecord] {
        &self.log
    }

    pub fn book_value(&self) -> f64 {
        self.portfolio.value(&self.params, self.price, self.step)
    }

    /// Starts a new episode from `s0` with an empty book, then admits the
    /// first day's client orders.
    pub fn reset(&mut self) -> [f64; 3] {
        self.price = self.params.s0;
        self.step = 0;
        self.portfolio = PortfolioState::default();
        self.cumulative = 0.0;
        self.log.clear();
        self.admit_clients();
        self.last_value = self.book_value();
        self.observation()
    }

    /// Replaces the book, for scripted scenarios.
    pub fn set_portfolio(&mut self, portfolio: PortfolioState) {
        self.portfolio = portfolio;
        self.last_value = self.book_value();
    }

    fn hedge_strike_and_maturity(&self) -> (f64, usize) {
        (self.price, self.step + self.params.hedge_maturity_days)
    }

    pub fn hedge_option_gamma(&self) -> f64 {
        let m = &self.params;
        let (k, mat) = self.hedge_strike_and_maturity();
        bsm_gamma(self.price, k, m.r, m.q, m.vol, m.ttm(mat, self.step))
    }

    pub fn observation(&self) -> [f64; 3] {
        [
            self.price,
            self.portfolio.gamma(&self.params, self.price, self.step),
            self.hedge_option_gamma(),
        ]
    }

    fn admit_clients(&mut self) -> usize {
        let n = poisson_arrivals(&mut self.rng, self.params.poisson_intensity);
        let m = &self.params;
        let maturity = self.step + m.client_maturity_days;
        let ttm = m.ttm(maturity, self.step);
        let unit_price = bsm_price(self.price, self.price, m.r, m.q, m.vol, ttm);
        for _ in 0..n {
            // The client is long or short with equal odds; the desk takes the
            // other side at fair value.
            let client_long = self.rng.random_bool(0.5);
            let position = if client_long { -m.contract_multiplier } else { m.contract_multiplier };
            self.portfolio.cash -= position * unit_price;
            self.portfolio.open_options.push(OptionContract {
                strike: self.price,
                maturity_step: maturity,
                position,
                is_hedge: false,
            });
        }
        n
    }

    fn settle_expired(&mut self) {
        let (price, step) = (self.price, self.step);
        let mut cash = 0.0;
        self.portfolio.open_options.retain(|o| {
            if o.maturity_step <= step {
                cash += o.position * (price - o.strike).max(0.0);
                false
            } else {
                true
            }
        });
        self.portfolio.cash += cash;
    }

    /// Advances one day. Actions outside `[0, 1]` are clamped.
    pub fn step(&mut self, action: f64) -> StepOutcome {
        let a = if (0.0..=1.0).contains(&action) {
            action
        } else {
            let c = if action.is_nan() { 0.0 } else { action.clamp(0.0, 1.0) };
            log::warn!("action {action} outside [0, 1], clamped to {c}");
            c
        };
        let m = self.params.clone();
        let (price, step) = (self.price, self.step);

        // Gamma hedge with a fresh ATM option.
        let gamma_pre = self.portfolio.gamma(&m, price, step);
        let (k, mat) = self.hedge_strike_and_maturity();
        let ttm = m.ttm(mat, step);
        let hedge_gamma = bsm_gamma(price, k, m.r, m.q, m.vol, ttm);
        let hedge_units = if gamma_pre != 0.0 { -a * gamma_pre / hedge_gamma } else { 0.0 };
        let hedge_unit_value = bsm_price(price, k, m.r, m.q, m.vol, ttm);
        let transaction_cost = m.kappa * (hedge_unit_value * hedge_units).abs();
        if hedge_units != 0.0 {
            self.portfolio.cash -= hedge_units * hedge_unit_value + transaction_cost;
            self.portfolio.open_options.push(OptionContract {
                strike: k,
                maturity_step: mat,
                position: hedge_units,
                is_hedge: true,
            });
        }
        let gamma_post = self.portfolio.gamma(&m, price, step);

        // Flatten delta with the underlying, cost-free.
        let delta_rebalance = -self.portfolio.delta(&m, price, step);
        self.portfolio.asset_position += delta_rebalance;
        self.portfolio.cash -= delta_rebalance * price;
        let delta_post_rebalance = self.portfolio.delta(&m, price, step);

        // Move the market, then settle expiries at intrinsic value.
        let z: f64 = StandardNormal.sample(&mut self.rng);
        self.price = gbm_step(price, m.mu, m.vol, m.dt, z);
        self.step += 1;
        self.settle_expired();

        // Reward is the change in marked-to-market book value, cost included.
        let value = self.book_value();
        let reward = value - self.last_value;
        self.cumulative += reward;
        let done = self.step >= m.horizon;

        // Client orders are booked at fair value, so they leave the book value unchanged.
        let clients_arrived = if done { 0 } else { self.admit_clients() };
        self.last_value = self.book_value();

        let record = StepRecord {
            step,
            price,
            gamma_pre,
            gamma_post,
            hedge_contracts: hedge_units / m.contract_multiplier,
            delta_rebalance,
            reward,
            cumulative_pnl: self.cumulative,
        };
        self.log.push(record.clone());
        StepOutcome {
            observation: self.observation(),
            reward,
            done,
            record,
            hedge_units,
            hedge_unit_value,
            transaction_cost,
            delta_post_rebalance,
            price_next: self.price,
            clients_arrived,
        }
    }
}

/// `1 - Σ sign(Γ_pre) Γ_post / Σ |Γ_pre|` over an episode log. `None` when
/// the book never had gamma.
pub fn gamma_hedge_ratio(records: &[StepRecord]) -> Option<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    for r in records {
        if r.gamma_pre != 0.0 {
            num += r.gamma_pre.signum() * r.gamma_post;
            den += r.gamma_pre.abs();
        }
    }
    (den > 0.0).then(|| 1.0 - num / den)
}

/// Writes an episode log as CSV.
pub fn write_episode_log<W: std::io::Write>(records: &[StepRecord], out: W) -> std::io::Result<()> {
    use std::io::Write as _;
    let mut w = std::io::BufWriter::new(out);
    writeln!(w, "step,price,gamma_pre,gamma_post,hedge_contracts,delta_rebalance,reward,cumulative_pnl")?;
    for r in records {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            r.step, r.price, r.gamma_pre, r.gamma_post, r.hedge_contracts, r.delta_rebalance, r.reward, r.cumulative_pnl
        )?;
    }
    w.flush()
}
