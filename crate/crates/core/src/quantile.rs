//! Quantile representation of a return distribution, the pinball loss, and
//! the VaR / CVaR / threshold read-outs built on it.
//!
//! Quantile values are stored in output order and are not required to be
//! monotone; every read-out sorts a copy first.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `N` quantile values at the levels `τ_n = n / N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileDistribution {
    values: Vec<f64>,
}

impl QuantileDistribution {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::ShapeMismatch {
                what: "quantile distribution (need at least 2 values)",
                expected: 2,
                got: values.len(),
            });
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn level(&self, n: usize) -> f64 {
        level(n, self.values.len())
    }

    pub fn sorted(&self) -> Vec<f64> {
        sorted(&self.values)
    }

    pub fn var(&self, alpha: f64) -> f64 {
        var_alpha(&self.values, alpha)
    }

    pub fn cvar(&self, alpha: f64) -> f64 {
        cvar_alpha(&self.values, alpha)
    }

    pub fn threshold(&self, beta: f64) -> f64 {
        threshold(&self.values, beta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RiskKind {
    Var,
    Cvar,
}

/// A VaR or CVaR at confidence `alpha`. Serialized as e.g. `"CVaR95"`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct RiskMeasure {
    pub kind: RiskKind,
    pub alpha: f64,
}

impl RiskMeasure {
    pub fn new(kind: RiskKind, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::InvalidParam {
                name: "alpha",
                value: alpha,
                reason: "risk confidence must lie in (0, 1)",
            });
        }
        Ok(Self { kind, alpha })
    }

    pub fn evaluate(&self, values: &[f64]) -> f64 {
        match self.kind {
            RiskKind::Var => var_alpha(values, self.alpha),
            RiskKind::Cvar => cvar_alpha(values, self.alpha),
        }
    }

    /// Weights `w` over the (unsorted) outputs with `evaluate(values) = Σ w_i values_i`.
    /// This is the gradient of the risk measure with respect to each quantile.
    pub fn weights(&self, values: &[f64]) -> Vec<f64> {
        let order = argsort(values);
        let k = level_index(1.0 - self.alpha, values.len());
        let mut w = vec![0.0; values.len()];
        match self.kind {
            RiskKind::Var => w[order[k]] = 1.0,
            RiskKind::Cvar => {
                let share = 1.0 / (k + 1) as f64;
                for &i in &order[..=k] {
                    w[i] = share;
                }
            }
        }
        w
    }
}

impl fmt::Display for RiskMeasure {
    /// Formats as e.g. `CVaR95`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self.kind {
            RiskKind::Var => "VaR",
            RiskKind::Cvar => "CVaR",
        };
        let pct = self.alpha * 100.0;
        if (pct - pct.round()).abs() < 1e-9 {
            write!(f, "{name}{}", pct.round() as i64)
        } else {
            write!(f, "{name}{pct}")
        }
    }
}

impl FromStr for RiskMeasure {
    type Err = Error;

    /// Parses `VaR95`, `cvar99`, `CVaR97.5`.
    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        let (kind, rest) = if let Some(r) = lower.strip_prefix("cvar") {
            (RiskKind::Cvar, r)
        } else if let Some(r) = lower.strip_prefix("var") {
            (RiskKind::Var, r)
        } else {
            return Err(Error::config("risk", format!("unknown risk measure `{s}`")));
        };
        let pct: f64 = rest
            .parse()
            .map_err(|_| Error::config("risk", format!("bad confidence in `{s}`")))?;
        RiskMeasure::new(kind, pct / 100.0)
    }
}

impl TryFrom<String> for RiskMeasure {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<RiskMeasure> for String {
    fn from(r: RiskMeasure) -> String {
        r.to_string()
    }
}

#[inline]
pub fn level(n: usize, count: usize) -> f64 {
    n as f64 / count as f64
}

/// Sorted position for probability level `p` on an `n`-point grid:
/// `round(p * n)` clamped to `[0, n - 1]`.
#[inline]
pub fn level_index(p: f64, n: usize) -> usize {
    let idx = (p * n as f64).round();
    if idx <= 0.0 {
        0
    } else {
        (idx as usize).min(n - 1)
    }
}

pub fn sorted(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

pub fn argsort(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    idx
}

/// `ρ_τ(e) = e (τ - 1{e < 0})`.
#[inline]
pub fn pinball(e: f64, tau: f64) -> f64 {
    if e < 0.0 {
        e * (tau - 1.0)
    } else {
        e * tau
    }
}

/// Value at level `1 - alpha` of the sorted quantiles.
pub fn var_alpha(values: &[f64], alpha: f64) -> f64 {
    let s = sorted(values);
    s[level_index(1.0 - alpha, s.len())]
}

/// Mean of the sorted quantiles up to and including the VaR position.
pub fn cvar_alpha(values: &[f64], alpha: f64) -> f64 {
    let s = sorted(values);
    let k = level_index(1.0 - alpha, s.len());
    s[..=k].iter().sum::<f64>() / (k + 1) as f64
}

/// Body/tail threshold `u`: the sorted quantile at level `1 - beta`.
pub fn threshold(values: &[f64], beta: f64) -> f64 {
    let s = sorted(values);
    s[level_index(1.0 - beta, s.len())]
}

/// How the body and tail sample averages are combined in the QR loss.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TailWeighting {
    /// Body average plus tail average, each with weight one.
    #[default]
    Verbatim,
    /// Pooled average over all samples, so each part is weighted by its
    /// share of the sample count (ablation only).
    MassProportional,
}

/// Two-part quantile-regression loss and its gradient w.r.t. each prediction.
///
/// `loss = Σ_n [ mean_l ρ_{τ_n}(z_l - θ_n) + mean_k ρ_{τ_n}(z_k - θ_n) ]`
/// with `τ_n = n / N`. An empty part contributes nothing. The gradient of a
/// zero residual is taken as 0.
pub fn qr_loss_two_part(
    pred: &[f64],
    z_body: &[f64],
    z_tail: &[f64],
    weighting: TailWeighting,
) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; pred.len()];
    let loss = qr_loss_two_part_into(pred, z_body, z_tail, weighting, &mut grad);
    (loss, grad)
}

/// As [`qr_loss_two_part`], writing the gradient into `grad`.
pub fn qr_loss_two_part_into(
    pred: &[f64],
    z_body: &[f64],
    z_tail: &[f64],
    weighting: TailWeighting,
    grad: &mut [f64],
) -> f64 {
    let (wb, wt) = match weighting {
        TailWeighting::Verbatim => (
            if z_body.is_empty() { 0.0 } else { 1.0 / z_body.len() as f64 },
            if z_tail.is_empty() { 0.0 } else { 1.0 / z_tail.len() as f64 },
        ),
        TailWeighting::MassProportional => {
            let total = (z_body.len() + z_tail.len()).max(1) as f64;
            (1.0 / total, 1.0 / total)
        }
    };
    let count = pred.len();
    let mut loss = 0.0;
    for (n, (&theta, g)) in pred.iter().zip(grad.iter_mut()).enumerate() {
        let tau = level(n, count);
        let part = |zs: &[f64], w: f64| {
            let mut l = 0.0;
            let mut d = 0.0;
            for &z in zs {
                let e = z - theta;
                l += pinball(e, tau);
                // Zero at the kink, which lies in the subdifferential.
                if e < 0.0 {
                    d += 1.0 - tau;
                } else if e > 0.0 {
                    d -= tau;
                }
            }
            (l * w, d * w)
        };
        let (lb, db) = part(z_body, wb);
        let (lt, dt) = part(z_tail, wt);
        loss += lb + lt;
        *g = db + dt;
    }
    loss
}
