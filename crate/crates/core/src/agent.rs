//! Distributional actor-critic whose Bellman target mixes a quantile body
//! with a Generalized Pareto tail.
//!
//! One training step, in order:
//!
//! 1. act with exploration noise and store the transition;
//! 2. for each transition in a replay minibatch, build target samples: the
//!    threshold `u` is the target critic's quantile at level `1 - β`; the tail
//!    draws `M_Tail` GPD exceedances from the GPD head and places them at
//!    `u - x`; the body draws `M_Body = round(M_Tail β / (1 - β))` values
//!    uniformly from the target quantiles at or above `u`. Every sample is
//!    shifted by the Bellman map `z = R + γ y`;
//! 3. one descent step on the two-part QR loss for the critic;
//! 4. one ascent step for the actor on VaR or CVaR of the critic's quantiles,
//!    differentiating through the critic's action input;
//! 5. one maximum-likelihood ascent step for the GPD head, fitted to the
//!    critic's quantiles below `u` at one replayed state;
//! 6. hard copy of the critic into the target critic.
//!
//! In baseline mode the target is the plain quantile target
//! `{R + γ φ_n}` and step 5 is skipped.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gpd::{self, GpdParams};
use crate::market::{HedgingEnv, Policy};
use crate::nn::{clip_grad_norm, Adam, Mlp, MlpSpec, OutputHead};
use crate::quantile::{self, level_index, RiskKind, RiskMeasure, TailWeighting};

pub const STATE_DIM: usize = 3;
const CRITIC_INPUT: usize = STATE_DIM + 1;
const OUTPUT_INIT_SCALE: f64 = 3e-3;
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgentConfig {
    pub n_quantiles: usize,
    pub m_tail: usize,
    /// Body proportion of the target mixture.
    pub beta: f64,
    /// Objective the actor ascends.
    pub risk: RiskMeasure,
    pub gamma: f64,
    pub hidden: Vec<usize>,
    pub critic_lr: f64,
    pub actor_lr: f64,
    pub gpd_lr: f64,
    pub replay_capacity: usize,
    pub batch_size: usize,
    /// Updates start once the buffer holds this many transitions (and at
    /// least one batch).
    pub warmup_steps: usize,
    /// Plain quantile target, no GPD tail.
    pub baseline_mode: bool,
    pub tail_weighting: TailWeighting,
    pub exploration_std: f64,
    pub exploration_std_final: f64,
    pub exploration_anneal_steps: u64,
    pub target_sync_period: u64,
    /// Per-network gradient norm cap; 0 disables.
    pub max_grad_norm: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            n_quantiles: 100,
            m_tail: 5,
            beta: 0.95,
            risk: RiskMeasure {
                kind: RiskKind::Cvar,
                alpha: 0.95,
            },
            gamma: 1.0,
            hidden: vec![64, 64, 64],
            critic_lr: 1e-4,
            actor_lr: 1e-5,
            gpd_lr: 1e-4,
            replay_capacity: 100_000,
            batch_size: 64,
            warmup_steps: 64,
            baseline_mode: false,
            tail_weighting: TailWeighting::Verbatim,
            exploration_std: 0.1,
            exploration_std_final: 0.01,
            exploration_anneal_steps: 10_000,
            target_sync_period: 1,
            max_grad_norm: 0.0,
        }
    }
}

impl AgentConfig {
    /// `round(M_Tail β / (1 - β))`.
    pub fn m_body(&self) -> usize {
        (self.m_tail as f64 * self.beta / (1.0 - self.beta)).round() as usize
    }

    /// Number of quantile levels below the threshold, `round((1 - β) N)`.
    pub fn n_tail(&self) -> usize {
        level_index(1.0 - self.beta, self.n_quantiles)
    }

    pub fn n_body(&self) -> usize {
        self.n_quantiles - self.n_tail()
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, field: &str, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::config(format!("agent.{field}"), msg))
            }
        };
        check(self.n_quantiles >= 2, "n_quantiles", "must be >= 2")?;
        check(self.m_tail >= 1, "m_tail", "must be >= 1")?;
        check(self.beta > 0.0 && self.beta < 1.0, "beta", "must lie in (0, 1)")?;
        check(self.m_body() >= 1, "beta", "M_Body = round(M_Tail*beta/(1-beta)) must be >= 1")?;
        check(
            self.beta * self.n_quantiles as f64 >= 1.0 && self.n_body() >= 1,
            "beta",
            "beta * n_quantiles < 1 leaves no body quantiles",
        )?;
        check((0.0..=1.0).contains(&self.gamma), "gamma", "must lie in [0, 1]")?;
        check(
            !self.hidden.is_empty() && !self.hidden.contains(&0),
            "hidden",
            "need at least one hidden layer, all sizes >= 1",
        )?;
        for (name, lr) in [
            ("critic_lr", self.critic_lr),
            ("actor_lr", self.actor_lr),
            ("gpd_lr", self.gpd_lr),
        ] {
            check(lr > 0.0 && lr.is_finite(), name, "must be > 0")?;
        }
        check(self.replay_capacity >= 1, "replay_capacity", "must be >= 1")?;
        check(self.batch_size >= 1, "batch_size", "must be >= 1")?;
        check(
            self.exploration_std >= 0.0 && self.exploration_std_final >= 0.0,
            "exploration_std",
            "must be >= 0",
        )?;
        check(self.target_sync_period >= 1, "target_sync_period", "must be >= 1")?;
        check(self.max_grad_norm >= 0.0, "max_grad_norm", "must be >= 0")?;
        Ok(())
    }

    /// Short content hash identifying a compatible checkpoint.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&bytes);
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    fn exploration_std_at(&self, step: u64) -> f64 {
        if self.exploration_anneal_steps == 0 {
            return self.exploration_std_final;
        }
        let f = (step as f64 / self.exploration_anneal_steps as f64).min(1.0);
        self.exploration_std + (self.exploration_std_final - self.exploration_std) * f
    }
}

/// One environment transition. States are raw observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub s: [f64; STATE_DIM],
    pub a: f64,
    pub r: f64,
    pub s_next: [f64; STATE_DIM],
    /// Noise-free actor action at `s_next` when the transition was stored.
    pub a_next: f64,
    pub done: bool,
}

/// Fixed-capacity ring of transitions with uniform sampling.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    next: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            items: Vec::with_capacity(capacity.min(1 << 16)),
            next: 0,
        }
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn get(&self, i: usize) -> &Transition {
        &self.items[i]
    }

    /// `n` indices drawn uniformly with replacement.
    pub fn sample_indices<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Vec<usize> {
        (0..n).map(|_| rng.random_range(0..self.items.len())).collect()
    }
}

/// Running per-feature mean and variance (Welford) used to standardize
/// observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateNormalizer {
    count: u64,
    mean: [f64; STATE_DIM],
    m2: [f64; STATE_DIM],
}

impl Default for StateNormalizer {
    fn default() -> Self {
        Self {
            count: 0,
            mean: [0.0; STATE_DIM],
            m2: [0.0; STATE_DIM],
        }
    }
}

impl StateNormalizer {
    pub fn update(&mut self, s: &[f64; STATE_DIM]) {
        self.count += 1;
        let n = self.count as f64;
        for i in 0..STATE_DIM {
            let d = s[i] - self.mean[i];
            self.mean[i] += d / n;
            self.m2[i] += d * (s[i] - self.mean[i]);
        }
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn normalize(&self, s: &[f64; STATE_DIM]) -> [f64; STATE_DIM] {
        let mut out = *s;
        if self.count < 2 {
            for (o, m) in out.iter_mut().zip(&self.mean) {
                *o -= m;
            }
            return out;
        }
        let n = (self.count - 1) as f64;
        for i in 0..STATE_DIM {
            let sd = (self.m2[i] / n).sqrt().max(1e-8);
            out[i] = (s[i] - self.mean[i]) / sd;
        }
        out
    }
}

#[inline]
fn critic_input(s: &[f64; STATE_DIM], a: f64) -> [f64; CRITIC_INPUT] {
    [s[0], s[1], s[2], a]
}

/// Target samples for one transition.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetSamples {
    pub body: Vec<f64>,
    pub tail: Vec<f64>,
    /// Threshold `u` at `(s', a')`; `None` for terminal or baseline targets.
    pub threshold: Option<f64>,
    pub gpd: Option<GpdParams>,
}

/// Outcome of one GPD-head update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TailUpdate {
    Updated {
        params: GpdParams,
        log_likelihood: f64,
        n_points: usize,
    },
    Skipped,
}

/// Mixture target from already-sorted target quantiles `sorted_next` at `(s', a')`.
///
/// Tail: `y_k = u - x_k` with `x_k ~ GPD(p)`. Body: `M_Body` draws with
/// replacement from `sorted_next[n_tail..]`, the levels `j/N + 1 - β`.
pub fn mixture_samples<R: Rng + ?Sized>(
    reward: f64,
    gamma: f64,
    sorted_next: &[f64],
    p: &GpdParams,
    cfg: &AgentConfig,
    rng: &mut R,
) -> Result<TargetSamples> {
    let n_tail = cfg.n_tail();
    let u = sorted_next[n_tail];
    let body_levels = &sorted_next[n_tail..];
    if body_levels.is_empty() {
        return Err(Error::config("agent.beta", "empty body level set"));
    }
    let tail = gpd::sample(rng, p, cfg.m_tail)?
        .into_iter()
        .map(|x| reward + gamma * (u - x))
        .collect();
    let body = (0..cfg.m_body())
        .map(|_| reward + gamma * body_levels.choose(rng).copied().unwrap())
        .collect();
    Ok(TargetSamples {
        body,
        tail,
        threshold: Some(u),
        gpd: Some(*p),
    })
}

/// Critic, target critic, actor, and GPD head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentNets {
    /// `(s, a) -> N` quantiles.
    pub critic: Mlp,
    /// Lagged copy of `critic` that defines the target body.
    pub target_critic: Mlp,
    /// `s -> a ∈ (0, 1)`.
    pub actor: Mlp,
    /// `(s, a) -> (σ > 0, ε ∈ (0, 1))`.
    pub gpd_head: Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Optimizers {
    pub critic: Adam,
    pub actor: Adam,
    pub gpd: Adam,
}

impl AgentNets {
    pub fn new<R: Rng + ?Sized>(cfg: &AgentConfig, rng: &mut R) -> Result<Self> {
        let critic_spec = MlpSpec::with_hidden(CRITIC_INPUT, &cfg.hidden, cfg.n_quantiles, OutputHead::Identity)?;
        let actor_spec = MlpSpec::with_hidden(STATE_DIM, &cfg.hidden, 1, OutputHead::UnitInterval)?;
        let head_spec = MlpSpec::with_heads(
            CRITIC_INPUT,
            &cfg.hidden,
            vec![OutputHead::Positive, OutputHead::UnitInterval],
        )?;
        let critic = Mlp::init(critic_spec, OUTPUT_INIT_SCALE, rng);
        let actor = Mlp::init(actor_spec, OUTPUT_INIT_SCALE, rng);
        let gpd_head = Mlp::init(head_spec, OUTPUT_INIT_SCALE, rng);
        Ok(Self {
            target_critic: critic.clone(),
            critic,
            actor,
            gpd_head,
        })
    }

    pub fn action(&self, s_norm: &[f64; STATE_DIM]) -> Result<f64> {
        Ok(self.actor.forward(s_norm)?[0])
    }

    pub fn quantiles(&self, s_norm: &[f64; STATE_DIM], a: f64) -> Result<Vec<f64>> {
        self.critic.forward(&critic_input(s_norm, a))
    }

    pub fn target_quantiles(&self, s_norm: &[f64; STATE_DIM], a: f64) -> Result<Vec<f64>> {
        self.target_critic.forward(&critic_input(s_norm, a))
    }

    pub fn gpd_params(&self, s_norm: &[f64; STATE_DIM], a: f64) -> Result<GpdParams> {
        let out = self.gpd_head.forward(&critic_input(s_norm, a))?;
        GpdParams::new(out[0], out[1])
    }

    /// Target samples for a transition whose states are already normalized.
    pub fn sample_target<R: Rng + ?Sized>(
        &self,
        cfg: &AgentConfig,
        r: f64,
        s_next: &[f64; STATE_DIM],
        done: bool,
        rng: &mut R,
    ) -> Result<TargetSamples> {
        if done {
            let (nb, nt) = if cfg.baseline_mode {
                (cfg.n_quantiles, 0)
            } else {
                (cfg.m_body(), cfg.m_tail)
            };
            return Ok(TargetSamples {
                body: vec![r; nb],
                tail: vec![r; nt],
                threshold: None,
                gpd: None,
            });
        }
        let a_next = self.action(s_next)?;
        let phi = self.target_quantiles(s_next, a_next)?;
        if cfg.baseline_mode {
            return Ok(TargetSamples {
                body: phi.iter().map(|&y| r + cfg.gamma * y).collect(),
                tail: Vec::new(),
                threshold: None,
                gpd: None,
            });
        }
        let p = self.gpd_params(s_next, a_next)?;
        mixture_samples(r, cfg.gamma, &quantile::sorted(&phi), &p, cfg, rng)
    }

    /// Critic descent step on the batch-mean two-part QR loss. Returns the loss.
    pub fn critic_update<R: Rng + ?Sized>(
        &mut self,
        opt: &mut Adam,
        cfg: &AgentConfig,
        batch: &[NormTransition],
        rng: &mut R,
        step: u64,
    ) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Empty("critic batch"));
        }
        let scale = 1.0 / batch.len() as f64;
        let mut grads = vec![0.0; self.critic.params.len()];
        let mut dtheta = vec![0.0; cfg.n_quantiles];
        let mut loss = 0.0;
        for t in batch {
            let targets = self.sample_target(cfg, t.r, &t.s_next, t.done, rng)?;
            let trace = self.critic.forward_trace(&critic_input(&t.s, t.a))?;
            loss += quantile::qr_loss_two_part_into(
                &trace.output,
                &targets.body,
                &targets.tail,
                cfg.tail_weighting,
                &mut dtheta,
            ) * scale;
            dtheta.iter_mut().for_each(|g| *g *= scale);
            self.critic.backward(&trace, &dtheta, Some(&mut grads))?;
        }
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            log::error!("critic loss {loss} non-finite at step {step}; update aborted");
            return Err(Error::NonFinite {
                what: "critic loss",
                value: loss,
                step,
            });
        }
        if cfg.max_grad_norm > 0.0 {
            clip_grad_norm(&mut grads, cfg.max_grad_norm);
        }
        opt.step(&mut self.critic.params, &grads)?;
        Ok(loss)
    }

    /// Gradient of the mean risk objective w.r.t. the actor parameters, and
    /// the objective itself. The critic is not modified.
    pub fn actor_gradient(&self, cfg: &AgentConfig, states: &[[f64; STATE_DIM]]) -> Result<(Vec<f64>, f64)> {
        if states.is_empty() {
            return Err(Error::Empty("actor batch"));
        }
        let scale = 1.0 / states.len() as f64;
        let mut grads = vec![0.0; self.actor.params.len()];
        let mut objective = 0.0;
        for s in states {
            let a_trace = self.actor.forward_trace(s)?;
            let a = a_trace.output[0];
            let c_trace = self.critic.forward_trace(&critic_input(s, a))?;
            let w = cfg.risk.weights(&c_trace.output);
            objective += w.iter().zip(&c_trace.output).map(|(w, q)| w * q).sum::<f64>() * scale;
            let d_input = self.critic.backward(&c_trace, &w, None)?;
            self.actor
                .backward(&a_trace, &[d_input[STATE_DIM] * scale], Some(&mut grads))?;
        }
        Ok((grads, objective))
    }

    /// Actor ascent step on the risk measure. Returns the objective before the step.
    pub fn actor_update(&mut self, opt: &mut Adam, cfg: &AgentConfig, states: &[[f64; STATE_DIM]]) -> Result<f64> {
        let (mut grads, objective) = self.actor_gradient(cfg, states)?;
        grads.iter_mut().for_each(|g| *g = -*g);
        if cfg.max_grad_norm > 0.0 {
            clip_grad_norm(&mut grads, cfg.max_grad_norm);
        }
        opt.step(&mut self.actor.params, &grads)?;
        Ok(objective)
    }

    /// Exceedances `u - θ_i` of the critic's sorted quantiles below the
    /// threshold at `(s, π(s))`, over the first `n_tail` levels. The threshold
    /// comes from the target critic.
    pub fn tail_exceedances(&self, cfg: &AgentConfig, s: &[f64; STATE_DIM]) -> Result<(f64, Vec<f64>)> {
        let a = self.action(s)?;
        let theta = quantile::sorted(&self.quantiles(s, a)?);
        let u = quantile::threshold(&self.target_quantiles(s, a)?, cfg.beta);
        let xs = theta[..cfg.n_tail()]
            .iter()
            .filter(|&&t| t < u)
            .map(|&t| u - t)
            .filter(|&x| x > 0.0)
            .collect();
        Ok((a, xs))
    }

    /// Gradient of the summed GPD log-likelihood of `xs` w.r.t. the head
    /// parameters at input `(s, a)`.
    pub fn gpd_head_gradient(&self, s: &[f64; STATE_DIM], a: f64, xs: &[f64]) -> Result<(Vec<f64>, GpdParams, f64)> {
        let trace = self.gpd_head.forward_trace(&critic_input(s, a))?;
        let p = GpdParams::new(trace.output[0], trace.output[1])?;
        let ll = gpd::log_likelihood(xs, &p)?;
        let (ds, de) = gpd::log_likelihood_grad(xs, &p)?;
        let mut grads = vec![0.0; self.gpd_head.params.len()];
        self.gpd_head.backward(&trace, &[ds, de], Some(&mut grads))?;
        Ok((grads, p, ll))
    }

    /// One MLE ascent step of the GPD head on the critic's sub-threshold
    /// quantiles at `s`. Skipped when fewer than two exceedances exist.
    pub fn tail_update(&mut self, opt: &mut Adam, cfg: &AgentConfig, s: &[f64; STATE_DIM]) -> Result<TailUpdate> {
        let (a, xs) = self.tail_exceedances(cfg, s)?;
        self.tail_update_on(opt, cfg, s, a, &xs)
    }

    /// As [`tail_update`](Self::tail_update) with explicit exceedances.
    pub fn tail_update_on(
        &mut self,
        opt: &mut Adam,
        cfg: &AgentConfig,
        s: &[f64; STATE_DIM],
        a: f64,
        xs: &[f64],
    ) -> Result<TailUpdate> {
        if xs.len() < 2 {
            log::debug!("tail update skipped: {} exceedances", xs.len());
            return Ok(TailUpdate::Skipped);
        }
        let (mut grads, params, log_likelihood) = self.gpd_head_gradient(s, a, xs)?;
        grads.iter_mut().for_each(|g| *g = -*g);
        if cfg.max_grad_norm > 0.0 {
            clip_grad_norm(&mut grads, cfg.max_grad_norm);
        }
        opt.step(&mut self.gpd_head.params, &grads)?;
        Ok(TailUpdate::Updated {
            params,
            log_likelihood,
            n_points: xs.len(),
        })
    }

    /// Hard copy `w' <- w`.
    pub fn target_sync(&mut self) {
        self.target_critic.params.copy_from_slice(&self.critic.params);
    }
}

/// A transition with both states standardized.
#[derive(Debug, Clone, PartialEq)]
pub struct NormTransition {
    pub s: [f64; STATE_DIM],
    pub a: f64,
    pub r: f64,
    pub s_next: [f64; STATE_DIM],
    pub done: bool,
}

/// Per-step training diagnostics. `None` before updates start, and for the
/// tail columns in baseline mode or when the tail update was skipped.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainMetrics {
    pub step: u64,
    pub reward: f64,
    pub qr_loss: Option<f64>,
    pub actor_objective: Option<f64>,
    pub gpd_sigma: Option<f64>,
    pub gpd_eps: Option<f64>,
    pub tail_update_skips: u64,
}

/// A serializable training snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config_hash: String,
    pub config: AgentConfig,
    pub steps: u64,
    pub nets: AgentNets,
    pub optimizers: Optimizers,
    pub normalizer: StateNormalizer,
}

/// Noise-free actor plus frozen observation statistics.
#[derive(Debug, Clone)]
pub struct FrozenPolicy {
    actor: Mlp,
    normalizer: StateNormalizer,
}

impl FrozenPolicy {
    pub fn from_checkpoint(ck: &Checkpoint) -> Self {
        Self {
            actor: ck.nets.actor.clone(),
            normalizer: ck.normalizer.clone(),
        }
    }
}

impl Policy for FrozenPolicy {
    fn action(&self, obs: &[f64; STATE_DIM]) -> f64 {
        let s = self.normalizer.normalize(obs);
        self.actor.forward(&s).map(|o| o[0]).unwrap_or(0.0)
    }
}

pub struct Agent {
    pub cfg: AgentConfig,
    pub nets: AgentNets,
    pub optimizers: Optimizers,
    pub normalizer: StateNormalizer,
    buffer: ReplayBuffer,
    rng: ChaCha8Rng,
    steps: u64,
    tail_skips: u64,
}

impl Agent {
    pub fn new(cfg: AgentConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nets = AgentNets::new(&cfg, &mut rng)?;
        let optimizers = Optimizers {
            critic: Adam::new(nets.critic.params.len(), cfg.critic_lr),
            actor: Adam::new(nets.actor.params.len(), cfg.actor_lr),
            gpd: Adam::new(nets.gpd_head.params.len(), cfg.gpd_lr),
        };
        Ok(Self {
            buffer: ReplayBuffer::new(cfg.replay_capacity),
            cfg,
            nets,
            optimizers,
            normalizer: StateNormalizer::default(),
            rng,
            steps: 0,
            tail_skips: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            config_hash: self.cfg.hash(),
            config: self.cfg.clone(),
            steps: self.steps,
            nets: self.nets.clone(),
            optimizers: self.optimizers.clone(),
            normalizer: self.normalizer.clone(),
        }
    }

    pub fn policy(&self) -> FrozenPolicy {
        FrozenPolicy {
            actor: self.nets.actor.clone(),
            normalizer: self.normalizer.clone(),
        }
    }

    fn normalized(&self, t: &Transition) -> NormTransition {
        NormTransition {
            s: self.normalizer.normalize(&t.s),
            a: t.a,
            r: t.r,
            s_next: self.normalizer.normalize(&t.s_next),
            done: t.done,
        }
    }

    /// Acts once in `env` with exploration noise and, once the buffer is warm,
    /// runs one critic, actor, tail, and target-sync update.
    pub fn train_step(&mut self, env: &mut HedgingEnv) -> Result<TrainMetrics> {
        let s = env.observation();
        self.normalizer.update(&s);
        let a_det = self.nets.action(&self.normalizer.normalize(&s))?;
        let std = self.cfg.exploration_std_at(self.steps);
        let noise = if std > 0.0 {
            Normal::new(0.0, std).expect("std checked").sample(&mut self.rng)
        } else {
            0.0
        };
        let a = (a_det + noise).clamp(0.0, 1.0);
        let out = env.step(a);
        let a_next = self.nets.action(&self.normalizer.normalize(&out.observation))?;
        self.buffer.push(Transition {
            s,
            a,
            r: out.reward,
            s_next: out.observation,
            a_next,
            done: out.done,
        });
        if out.done {
            env.reset();
        }
        self.steps += 1;

        let mut metrics = TrainMetrics {
            step: self.steps,
            reward: out.reward,
            qr_loss: None,
            actor_objective: None,
            gpd_sigma: None,
            gpd_eps: None,
            tail_update_skips: self.tail_skips,
        };
        if self.buffer.len() >= self.cfg.warmup_steps.max(self.cfg.batch_size) {
            let idx = self.buffer.sample_indices(&mut self.rng, self.cfg.batch_size);
            let batch: Vec<NormTransition> = idx.iter().map(|&i| self.normalized(self.buffer.get(i))).collect();
            metrics.qr_loss = Some(self.nets.critic_update(
                &mut self.optimizers.critic,
                &self.cfg,
                &batch,
                &mut self.rng,
                self.steps,
            )?);

            let states: Vec<[f64; STATE_DIM]> = batch.iter().map(|t| t.s).collect();
            metrics.actor_objective = Some(self.nets.actor_update(&mut self.optimizers.actor, &self.cfg, &states)?);

            if !self.cfg.baseline_mode {
                let i = self.rng.random_range(0..self.buffer.len());
                let s2 = self.normalizer.normalize(&self.buffer.get(i).s);
                match self.nets.tail_update(&mut self.optimizers.gpd, &self.cfg, &s2)? {
                    TailUpdate::Updated { params, .. } => {
                        metrics.gpd_sigma = Some(params.sigma);
                        metrics.gpd_eps = Some(params.epsilon);
                    }
                    TailUpdate::Skipped => self.tail_skips += 1,
                }
                metrics.tail_update_skips = self.tail_skips;
            }
        }
        if self.steps % self.cfg.target_sync_period == 0 {
            self.nets.target_sync();
        }
        Ok(metrics)
    }
}

impl Checkpoint {
    pub fn validate_against(&self, cfg: &AgentConfig) -> Result<()> {
        if self.format_version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {} (expected {CHECKPOINT_VERSION})",
                self.format_version
            )));
        }
        if self.config_hash != self.config.hash() {
            return Err(Error::Checkpoint("stored config does not match its hash".into()));
        }
        if self.config_hash != cfg.hash() {
            return Err(Error::Checkpoint(format!(
                "checkpoint config hash {} differs from run config hash {}",
                self.config_hash,
                cfg.hash()
            )));
        }
        Ok(())
    }
}
