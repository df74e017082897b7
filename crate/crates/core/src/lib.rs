//! Extreme-value distributional actor-critic for option gamma hedging.
//!
//! The crate is split into a GPD toolkit ([`gpd`]), quantile and risk
//! utilities ([`quantile`]), a small differentiable MLP ([`nn`]), the hedging
//! simulator ([`market`]), the agent ([`agent`]) and run orchestration
//! ([`harness`]).

pub mod agent;
pub mod error;
pub mod gpd;
pub mod harness;
pub mod market;
pub mod nn;
pub mod quantile;

pub use agent::{Agent, AgentConfig, Checkpoint, FrozenPolicy, TrainMetrics};
pub use error::{Error, Result};
pub use gpd::GpdParams;
pub use harness::{EvalReport, ReportFormat, RunConfig};
pub use market::{ConstantPolicy, HedgingEnv, MarketParams, Policy, StepRecord};
pub use quantile::{RiskKind, RiskMeasure, TailWeighting};
