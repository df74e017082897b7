//! Independent oracles shared by the integration tests and the acceptance
//! runner. Each check returns the worst error it saw so callers can assert or
//! report it.

#![allow(dead_code)]

use exdrl_core::agent::{AgentConfig, AgentNets, STATE_DIM};
use exdrl_core::gpd::{self, GpdParams};
use exdrl_core::quantile::{RiskKind, RiskMeasure};
use exdrl_core::market::{bsm_delta, bsm_gamma, bsm_price, HedgingEnv, MarketParams, OptionContract};
use exdrl_core::nn::{Mlp, MlpSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ---------------------------------------------------------------- GPD

/// Closed-form GPD CDF, written out separately from the library.
pub fn gpd_cdf(x: f64, sigma: f64, eps: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if eps.abs() < 1e-12 {
        1.0 - (-x / sigma).exp()
    } else {
        1.0 - (1.0 + eps * x / sigma).powf(-1.0 / eps)
    }
}

pub fn gpd_loglik(xs: &[f64], sigma: f64, eps: f64) -> f64 {
    let n = xs.len() as f64;
    -n * sigma.ln() - (1.0 / eps + 1.0) * xs.iter().map(|x| (eps * x / sigma).ln_1p()).sum::<f64>()
}

/// Kolmogorov-Smirnov distance between a sample and the GPD CDF.
pub fn ks_distance(mut xs: Vec<f64>, sigma: f64, eps: f64) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = gpd_cdf(x, sigma, eps);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// Likelihood maximizer by successively finer grid searches.
pub fn grid_mle(xs: &[f64]) -> (f64, f64) {
    let search = |s_range: (f64, f64), e_range: (f64, f64), steps: usize| {
        let mut best = (f64::NEG_INFINITY, 0.0, 0.0);
        for i in 0..=steps {
            let s = s_range.0 + (s_range.1 - s_range.0) * i as f64 / steps as f64;
            for j in 0..=steps {
                let e = e_range.0 + (e_range.1 - e_range.0) * j as f64 / steps as f64;
                let ll = gpd_loglik(xs, s, e);
                if ll > best.0 {
                    best = (ll, s, e);
                }
            }
        }
        (best.1, best.2)
    };
    let (s, e) = search((0.2, 3.0), (0.02, 0.98), 56);
    let (s, e) = search((s - 0.05, s + 0.05), (e - 0.02, e + 0.02), 50);
    search((s - 0.002, s + 0.002), (e - 0.0008, e + 0.0008), 20)
}

// ---------------------------------------------------------------- pricing

fn phi(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Composite Simpson rule on `[a, b]` with `n` (even) panels.
fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let inner: f64 = (1..n)
        .map(|i| f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 })
        .sum();
    (f(a) + f(b) + inner) * h / 3.0
}

pub struct Greeks {
    pub price: f64,
    pub delta: f64,
    pub gamma: f64,
}

/// Call value and sensitivities as expectations over the terminal lognormal
/// law, integrated numerically above the exercise boundary `z*`.
pub fn lognormal_call(s: f64, k: f64, r: f64, q: f64, vol: f64, t: f64) -> Greeks {
    let sd = vol * t.sqrt();
    let m = (r - q - 0.5 * vol * vol) * t;
    let st = |z: f64| s * (m + sd * z).exp();
    let z_star = ((k / s).ln() - m) / sd;
    let hi = z_star.max(0.0) + 12.0;
    let disc = (-r * t).exp();
    Greeks {
        price: disc * simpson(|z| (st(z) - k) * phi(z), z_star, hi, 20_000),
        delta: disc * simpson(|z| st(z) / s * phi(z), z_star, hi, 20_000),
        gamma: disc * k * phi(z_star) / (s * s * sd),
    }
}

/// Worst absolute errors of the library greeks over a moneyness/maturity
/// grid: `[oracle price, oracle delta, oracle gamma, fd delta, fd gamma]`.
pub fn bsm_grid_errors() -> [f64; 5] {
    let mut worst = [0.0f64; 5];
    let k = 10.0;
    for m in [0.8, 0.9, 1.0, 1.1, 1.2] {
        let s = m * k;
        for days in [1.0, 7.0, 30.0, 60.0, 180.0] {
            let t = days / 365.0;
            for vol in [0.1, 0.3, 0.8] {
                for (r, q) in [(0.0, 0.0), (0.03, 0.0), (0.03, 0.02)] {
                    let o = lognormal_call(s, k, r, q, vol, t);
                    let p = bsm_price(s, k, r, q, vol, t);
                    let d = bsm_delta(s, k, r, q, vol, t);
                    let g = bsm_gamma(s, k, r, q, vol, t);
                    let h = 1e-5 * s;
                    let pu = bsm_price(s + h, k, r, q, vol, t);
                    let pd = bsm_price(s - h, k, r, q, vol, t);
                    let errs = [
                        (p - o.price).abs(),
                        (d - o.delta).abs(),
                        (g - o.gamma).abs(),
                        (d - (pu - pd) / (2.0 * h)).abs(),
                        (g - (pu - 2.0 * p + pd) / (h * h)).abs(),
                    ];
                    for (w, e) in worst.iter_mut().zip(errs) {
                        *w = w.max(e);
                    }
                }
            }
        }
    }
    worst
}

// ---------------------------------------------------------------- networks

/// Makes `net` output exactly `values` for every input.
pub fn make_constant(net: &mut Mlp, values: &[f64]) {
    let sizes = &net.spec.layer_sizes;
    let (n_in, n_out) = (sizes[sizes.len() - 2], sizes[sizes.len() - 1]);
    assert_eq!(values.len(), n_out);
    let len = net.params.len();
    net.params[len - n_out - n_in * n_out..len - n_out].fill(0.0);
    net.params[len - n_out..].copy_from_slice(values);
}

pub fn inv_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn set_gpd_head(nets: &mut AgentNets, sigma: f64, eps: f64) {
    make_constant(&mut nets.gpd_head, &[inv_softplus(sigma), logit(eps)]);
}

/// Relative error with a small absolute floor for near-zero gradients.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs().max(numeric.abs()) + 1e-4)
}

/// Worst relative error between backprop and central differences of a random
/// linear functional of the outputs, over `trials` random nets and inputs.
/// Large nets are probed on a random subset of 40 parameters per trial.
pub fn network_gradient_error(spec: &MlpSpec, trials: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let mut net = Mlp::init(spec.clone(), 1.0, &mut rng);
        for p in net.params.iter_mut() {
            *p += rng.random_range(-0.1..0.1);
        }
        let x: Vec<f64> = (0..spec.input_size()).map(|_| rng.random_range(-2.0..2.0)).collect();
        let up: Vec<f64> = (0..spec.output_size()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |net: &Mlp, x: &[f64]| -> f64 { net.forward(x).unwrap().iter().zip(&up).map(|(y, u)| y * u).sum() };
        let g = net.gradients(&x, &up).unwrap();
        let h = 1e-5;
        let probes: Vec<usize> = if net.params.len() <= 40 {
            (0..net.params.len()).collect()
        } else {
            (0..40).map(|_| rng.random_range(0..net.params.len())).collect()
        };
        for i in probes {
            let orig = net.params[i];
            net.params[i] = orig + h;
            let lp = loss(&net, &x);
            net.params[i] = orig - h;
            let lm = loss(&net, &x);
            net.params[i] = orig;
            worst = worst.max(rel_err(g.params[i], (lp - lm) / (2.0 * h)));
        }
        for i in 0..x.len() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[i] += h;
            xm[i] -= h;
            worst = worst.max(rel_err(g.input[i], (loss(&net, &xp) - loss(&net, &xm)) / (2.0 * h)));
        }
    }
    worst
}

/// Agent networks with unit-scale random weights everywhere, so the composed
/// gradients are not dominated by the small output initialization.
pub fn random_nets(cfg: &AgentConfig, rng: &mut ChaCha8Rng) -> AgentNets {
    let mut nets = AgentNets::new(cfg, rng).unwrap();
    nets.critic = Mlp::init(nets.critic.spec.clone(), 1.0, rng);
    nets.actor = Mlp::init(nets.actor.spec.clone(), 1.0, rng);
    nets.gpd_head = Mlp::init(nets.gpd_head.spec.clone(), 1.0, rng);
    nets.target_critic = nets.critic.clone();
    nets
}

pub fn random_state(rng: &mut ChaCha8Rng) -> [f64; STATE_DIM] {
    [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)]
}

/// Worst relative error of the actor gradient (risk of the critic's quantiles
/// at the actor's action) against central differences, alternating VaR and
/// CVaR objectives across trials.
pub fn actor_path_error(trials: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for kind in [RiskKind::Var, RiskKind::Cvar].into_iter().cycle().take(trials) {
        let cfg = AgentConfig {
            n_quantiles: 20,
            hidden: vec![6, 6],
            risk: RiskMeasure { kind, alpha: 0.9 },
            ..AgentConfig::default()
        };
        let mut nets = random_nets(&cfg, &mut rng);
        let states: Vec<_> = (0..3).map(|_| random_state(&mut rng)).collect();
        let (grads, obj) = nets.actor_gradient(&cfg, &states).unwrap();
        let objective = |nets: &AgentNets| -> f64 {
            states
                .iter()
                .map(|s| cfg.risk.evaluate(&nets.quantiles(s, nets.action(s).unwrap()).unwrap()))
                .sum::<f64>()
                / states.len() as f64
        };
        assert!((obj - objective(&nets)).abs() < 1e-12, "reported objective");
        let h = 1e-6;
        for i in 0..nets.actor.params.len() {
            let orig = nets.actor.params[i];
            nets.actor.params[i] = orig + h;
            let op = objective(&nets);
            nets.actor.params[i] = orig - h;
            let om = objective(&nets);
            nets.actor.params[i] = orig;
            worst = worst.max(rel_err(grads[i], (op - om) / (2.0 * h)));
        }
    }
    worst
}

/// Worst relative error of the GPD-head log-likelihood gradient against
/// central differences through the head network.
pub fn tail_path_error(trials: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = AgentConfig {
        n_quantiles: 20,
        hidden: vec![6, 6],
        ..AgentConfig::default()
    };
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let mut nets = random_nets(&cfg, &mut rng);
        let s = random_state(&mut rng);
        let a: f64 = rng.random_range(0.0..1.0);
        let truth = GpdParams::new(rng.random_range(0.3..2.0), rng.random_range(0.05..0.8)).unwrap();
        let xs = gpd::sample(&mut rng, &truth, 8).unwrap();
        let (grads, _, ll0) = nets.gpd_head_gradient(&s, a, &xs).unwrap();
        let loglik = |nets: &AgentNets| gpd::log_likelihood(&xs, &nets.gpd_params(&s, a).unwrap()).unwrap();
        assert!((ll0 - loglik(&nets)).abs() < 1e-12, "reported log-likelihood");
        let h = 1e-6;
        for i in 0..nets.gpd_head.params.len() {
            let orig = nets.gpd_head.params[i];
            nets.gpd_head.params[i] = orig + h;
            let lp = loglik(&nets);
            nets.gpd_head.params[i] = orig - h;
            let lm = loglik(&nets);
            nets.gpd_head.params[i] = orig;
            worst = worst.max(rel_err(grads[i], (lp - lm) / (2.0 * h)));
        }
    }
    worst
}

/// Worst relative error of the analytic log-likelihood gradient over a
/// parameter grid, each point with a fresh sample of 50 draws.
pub fn loglik_gradient_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for sigma in [0.5, 1.0, 2.0] {
        for eps in [0.1, 0.5, 0.9] {
            let p = GpdParams::new(sigma, eps).unwrap();
            let xs = gpd::sample(&mut rng, &p, 50).unwrap();
            let (gs, ge) = gpd::log_likelihood_grad(&xs, &p).unwrap();
            let h = 1e-6;
            let ll = |s: f64, e: f64| gpd_loglik(&xs, s, e);
            let fs = (ll(sigma + h, eps) - ll(sigma - h, eps)) / (2.0 * h);
            let fe = (ll(sigma, eps + h) - ll(sigma, eps - h)) / (2.0 * h);
            worst = worst.max(rel_err(gs, fs)).max(rel_err(ge, fe));
        }
    }
    worst
}

// ---------------------------------------------------------------- book audit

/// Worst relative residuals over `n_steps` randomized steps:
/// `[post-hedge gamma, post-rebalance delta, reward decomposition, cash]`.
pub fn audit_book(n_steps: usize, seed: u64) -> [f64; 4] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = [0.0f64; 4];
    let mut audited = 0;
    let rel = |got: f64, want: f64, scale: f64| (got - want).abs() / scale.max(1e-12);
    while audited < n_steps {
        let m = MarketParams {
            vol: rng.random_range(0.1..0.8),
            mu: rng.random_range(-0.2..0.2),
            r: rng.random_range(0.0..0.05),
            q: rng.random_range(0.0..0.03),
            kappa: rng.random_range(0.0..0.05),
            poisson_intensity: rng.random_range(0.5..3.0),
            ..MarketParams::default()
        };
        let mut env = HedgingEnv::with_seed(m.clone(), rng.random()).unwrap();
        loop {
            let pre = env.portfolio().clone();
            let (s, t) = (env.price(), env.step_index());
            let a: f64 = rng.random_range(0.0..=1.0);
            let out = env.step(a);
            audited += 1;
            let rec = &out.record;
            let ttm = |mat: usize, step: usize| (mat as f64 - step as f64) * m.dt;
            let value = |o: &OptionContract, px: f64, step: usize| {
                bsm_price(px, o.strike, m.r, m.q, m.vol, ttm(o.maturity_step, step))
            };
            let gamma_of = |o: &OptionContract| o.position * bsm_gamma(s, o.strike, m.r, m.q, m.vol, ttm(o.maturity_step, t));

            let g_pre: f64 = pre.open_options.iter().map(gamma_of).sum();
            let g_scale: f64 = pre.open_options.iter().map(|o| gamma_of(o).abs()).sum();
            assert!(rel(rec.gamma_pre, g_pre, g_scale) < 1e-9, "recorded pre-hedge gamma");
            worst[0] = worst[0].max(rel(rec.gamma_post, (1.0 - a) * g_pre, g_scale));

            let mut held: Vec<OptionContract> = pre.open_options.clone();
            if out.hedge_units != 0.0 {
                held.push(OptionContract {
                    strike: s,
                    maturity_step: t + m.hedge_maturity_days,
                    position: out.hedge_units,
                    is_hedge: true,
                });
                let v = value(held.last().unwrap(), s, t);
                assert!(rel(out.hedge_unit_value, v, v) < 1e-12, "hedge traded at fair value");
            }
            let asset = pre.asset_position + rec.delta_rebalance;
            let d_scale: f64 = held
                .iter()
                .map(|o| (o.position * bsm_delta(s, o.strike, m.r, m.q, m.vol, ttm(o.maturity_step, t))).abs())
                .sum::<f64>()
                + asset.abs();
            worst[1] = worst[1].max(out.delta_post_rebalance.abs() / d_scale.max(1e-12));

            let cost = m.kappa * (out.hedge_units * out.hedge_unit_value).abs();
            let s1 = out.price_next;
            let mut mtm = asset * (s1 - s);
            let mut scale = asset.abs() * (s1 + s) + cost;
            for o in &held {
                let (v0, v1) = (value(o, s, t), value(o, s1, t + 1));
                mtm += o.position * (v1 - v0);
                scale += o.position.abs() * (v0 + v1);
            }
            worst[2] = worst[2].max(rel(out.reward, mtm - cost, scale));

            let post = env.portfolio();
            let n_kept = held.iter().filter(|o| o.maturity_step > t + 1).count();
            let settled: f64 = held
                .iter()
                .filter(|o| o.maturity_step <= t + 1)
                .map(|o| o.position * (s1 - o.strike).max(0.0))
                .sum();
            let clients = &post.open_options[n_kept..];
            assert_eq!(clients.len(), out.clients_arrived);
            let client_cash: f64 = clients.iter().map(|o| o.position * value(o, s1, t + 1)).sum();
            let expected_cash =
                pre.cash - out.hedge_units * out.hedge_unit_value - cost - rec.delta_rebalance * s + settled - client_cash;
            let cash_scale = pre.cash.abs()
                + (out.hedge_units * out.hedge_unit_value).abs()
                + (rec.delta_rebalance * s).abs()
                + settled.abs()
                + client_cash.abs();
            worst[3] = worst[3].max(rel(post.cash, expected_cash, cash_scale));
            assert!(s1 > 0.0);

            if out.done {
                break;
            }
        }
    }
    worst
}
