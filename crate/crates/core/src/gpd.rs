//! Generalized Pareto Distribution (GPD) for threshold exceedances.
//!
//! The distribution has CDF
//!
//! ```text
//! H(x) = 1 - (1 + ε x / σ)^(-1/ε)    ε != 0
//! H(x) = 1 - exp(-x / σ)             ε == 0
//! ```
//!
//! on `x >= 0` (and `x <= -σ/ε` when `ε < 0`). In the agent the GPD models the
//! distance `u - X` of a return `X` below a threshold `u`, so every function
//! here works on nonnegative exceedances.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Below this `|ε|` the exponential branch is used.
pub const EXP_BRANCH_TOL: f64 = 1e-8;

/// Scale `sigma > 0` and shape `epsilon` of a GPD.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpdParams {
    pub sigma: f64,
    pub epsilon: f64,
}

impl GpdParams {
    pub fn new(sigma: f64, epsilon: f64) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::InvalidParam {
                name: "sigma",
                value: sigma,
                reason: "scale must be finite and > 0",
            });
        }
        if !epsilon.is_finite() {
            return Err(Error::InvalidParam {
                name: "epsilon",
                value: epsilon,
                reason: "shape must be finite",
            });
        }
        Ok(Self { sigma, epsilon })
    }

    #[inline]
    fn is_exponential(&self) -> bool {
        self.epsilon.abs() < EXP_BRANCH_TOL
    }

    /// Right end of the support, `-σ/ε` for `ε < 0`, otherwise infinite.
    pub fn upper_support(&self) -> f64 {
        if self.epsilon < 0.0 && !self.is_exponential() {
            -self.sigma / self.epsilon
        } else {
            f64::INFINITY
        }
    }

    /// `σ / (1 - ε)`, finite only for `ε < 1`.
    pub fn mean(&self) -> Option<f64> {
        (self.epsilon < 1.0).then(|| self.sigma / (1.0 - self.epsilon))
    }

    fn check_support(&self, x: f64) -> Result<()> {
        if !(x >= 0.0) || x > self.upper_support() {
            return Err(Error::OutOfSupport { value: x });
        }
        Ok(())
    }
}

pub fn cdf(x: f64, p: &GpdParams) -> Result<f64> {
    p.check_support(x)?;
    let z = x / p.sigma;
    if p.is_exponential() {
        return Ok(-(-z).exp_m1());
    }
    // 1 - (1 + εz)^(-1/ε) = -expm1(-ln1p(εz)/ε)
    let h = -(-(p.epsilon * z).ln_1p() / p.epsilon).exp_m1();
    Ok(h.clamp(0.0, 1.0))
}

/// Inverse CDF on `[0, 1)`.
pub fn quantile(pr: f64, p: &GpdParams) -> Result<f64> {
    if !(0.0..1.0).contains(&pr) {
        return Err(Error::Probability(pr));
    }
    let log_surv = (-pr).ln_1p();
    if p.is_exponential() {
        return Ok(-p.sigma * log_surv);
    }
    Ok(p.sigma / p.epsilon * (-p.epsilon * log_surv).exp_m1())
}

/// Draws `m` i.i.d. exceedances by inverse-CDF transform of uniforms.
pub fn sample<R: Rng + ?Sized>(rng: &mut R, p: &GpdParams, m: usize) -> Result<Vec<f64>> {
    if m == 0 {
        return Err(Error::Empty("gpd sample count"));
    }
    (0..m).map(|_| quantile(rng.random::<f64>(), p)).collect()
}

#[inline]
fn log1p_term(x: f64, p: &GpdParams) -> Result<f64> {
    if !(x >= 0.0) {
        return Err(Error::OutOfSupport { value: x });
    }
    let t = p.epsilon * x / p.sigma;
    if !(1.0 + t > 0.0) {
        return Err(Error::OutOfSupport { value: x });
    }
    Ok(t.ln_1p())
}

/// Summed log-density of `xs`.
pub fn log_likelihood(xs: &[f64], p: &GpdParams) -> Result<f64> {
    let ln_sigma = p.sigma.ln();
    let mut total = 0.0;
    if p.is_exponential() {
        for &x in xs {
            if !(x >= 0.0) {
                return Err(Error::OutOfSupport { value: x });
            }
            total += -ln_sigma - x / p.sigma;
        }
        return Ok(total);
    }
    let k = 1.0 / p.epsilon + 1.0;
    for &x in xs {
        total += -ln_sigma - k * log1p_term(x, p)?;
    }
    Ok(total)
}

/// Partial derivatives `(d/dσ, d/dε)` of [`log_likelihood`].
pub fn log_likelihood_grad(xs: &[f64], p: &GpdParams) -> Result<(f64, f64)> {
    let (s, e) = (p.sigma, p.epsilon);
    let mut d_sigma = 0.0;
    let mut d_eps = 0.0;
    if p.is_exponential() {
        for &x in xs {
            if !(x >= 0.0) {
                return Err(Error::OutOfSupport { value: x });
            }
            let z = x / s;
            d_sigma += -1.0 / s + z / s;
            d_eps += 0.5 * z * z - z;
        }
        return Ok((d_sigma, d_eps));
    }
    for &x in xs {
        let l = log1p_term(x, p)?;
        let a = 1.0 + e * x / s;
        d_sigma += -1.0 / s + (1.0 + e) * x / (s * s * a);
        d_eps += l / (e * e) - (1.0 / e + 1.0) * (x / s) / a;
    }
    Ok((d_sigma, d_eps))
}

/// Settings for [`fit_mle`].
#[derive(Debug, Clone, Copy)]
pub struct MleOptions {
    pub init: GpdParams,
    pub max_iter: usize,
    /// Stop once the per-sample gradient norm falls below this.
    pub grad_tol: f64,
}

impl Default for MleOptions {
    fn default() -> Self {
        Self {
            init: GpdParams {
                sigma: 1.0,
                epsilon: 0.1,
            },
            max_iter: 2000,
            grad_tol: 1e-9,
        }
    }
}

/// Maximum-likelihood fit by gradient ascent with backtracking, in the
/// coordinates `(ln σ, ε)`.
pub fn fit_mle(xs: &[f64], opts: MleOptions) -> Result<GpdParams> {
    if xs.is_empty() {
        return Err(Error::Empty("gpd fit data"));
    }
    let n = xs.len() as f64;
    let objective = |ls: f64, e: f64| -> f64 {
        let p = GpdParams {
            sigma: ls.exp(),
            epsilon: e,
        };
        log_likelihood(xs, &p).map_or(f64::NEG_INFINITY, |v| v / n)
    };

    let mut ls = opts.init.sigma.ln();
    let mut e = opts.init.epsilon;
    let mut f = objective(ls, e);
    if !f.is_finite() {
        return Err(Error::OutOfSupport {
            value: xs.iter().cloned().fold(f64::NAN, f64::max),
        });
    }
    let mut step: f64 = 1.0;
    for _ in 0..opts.max_iter {
        let p = GpdParams {
            sigma: ls.exp(),
            epsilon: e,
        };
        let (gs, ge) = log_likelihood_grad(xs, &p)?;
        let (g_ls, g_e) = (gs * p.sigma / n, ge / n);
        let gnorm2 = g_ls * g_ls + g_e * g_e;
        if gnorm2.sqrt() < opts.grad_tol {
            break;
        }
        // Armijo backtracking.
        let mut accepted = false;
        step = (step * 2.0).min(10.0);
        while step > 1e-14 {
            let (nls, ne) = (ls + step * g_ls, e + step * g_e);
            let nf = objective(nls, ne);
            if nf >= f + 1e-4 * step * gnorm2 {
                ls = nls;
                e = ne;
                f = nf;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    GpdParams::new(ls.exp(), e)
}
