//! The training loop: parallel rollouts, replay bookkeeping, the P3O update
//! and its baselines, seeding, and per-iteration metrics.

use std::collections::VecDeque;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::envs::{Env, EnvSpec, EnvState};
use crate::error::{Error, Result};
use crate::gradient::{
    combined_update, CoefficientOverrides, Learner, Phase, ReplayAdvantages, StepTelemetry, UpdateRule,
    UpdateSettings,
};
use crate::numcore::{Activation, MlpSpec, OptimizerState, ParamVector};
use crate::policy::{
    entropy, policy_distribution, sample, ActionDistribution, KlDirection, PolicyHead, PolicySnapshot, PolicySpec,
};
use crate::replay::{ReplayBuffer, Trajectory, Transition};

/// Episodes in the trailing return window.
pub const RETURN_WINDOW: usize = 100;

/// Environment variable capping rollout threads.
pub const THREADS_ENV_VAR: &str = "P3O_NUM_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    #[default]
    P3o,
    OnPolicyOnly,
    /// P3O with `fixed_lambda` and/or `fixed_c` replacing the adaptive values.
    FixedCoeffP3o,
    /// One step along `(1 - nu) * on-policy + nu * off-policy` per iteration.
    IpgFixedNu,
}

/// Experiment configuration. Defaults follow the Atari hyper-parameter table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub algorithm: Algorithm,
    pub env: EnvSpec,
    /// Rollouts per iteration (K).
    pub num_envs: usize,
    /// Steps per rollout (T).
    pub rollout_steps: usize,
    pub gamma: f64,
    pub tau: f64,
    /// When false, advantages use `tau = 1` (plain bootstrapped returns).
    pub gae: bool,
    /// Poisson mean of off-policy updates per iteration.
    pub m: f64,
    /// Replay capacity in transitions.
    pub buffer_capacity: usize,
    /// Transitions stored before the off-policy phase starts.
    pub burn_in: u64,
    pub minibatch_segments: usize,
    pub policy_learning_rate: f64,
    pub value_learning_rate: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub clip_norm: f64,
    pub total_steps: u64,
    pub seeds: Vec<u64>,
    pub hidden_sizes: Vec<usize>,
    pub fixed_lambda: Option<f64>,
    pub fixed_c: Option<f64>,
    pub nu: Option<f64>,
    pub kl_direction: KlDirection,
    pub replay_advantages: ReplayAdvantages,
    pub normalize_advantages: bool,
    /// Write wall-clock milliseconds into the metrics; off keeps output reproducible.
    pub record_wall_time: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::P3o,
            env: EnvSpec::default(),
            num_envs: 16,
            rollout_steps: 16,
            gamma: 0.99,
            tau: 0.95,
            gae: true,
            m: 2.0,
            buffer_capacity: 50_000,
            burn_in: 15_000,
            minibatch_segments: 6,
            policy_learning_rate: 7e-4,
            value_learning_rate: 7e-4,
            entropy_coef: 0.01,
            value_coef: 0.5,
            clip_norm: 0.5,
            total_steps: 200_000,
            seeds: vec![0, 1, 2],
            hidden_sizes: vec![32, 32],
            fixed_lambda: None,
            fixed_c: None,
            nu: None,
            kl_direction: KlDirection::default(),
            replay_advantages: ReplayAdvantages::default(),
            normalize_advantages: true,
            record_wall_time: false,
        }
    }
}

fn invalid(key: &str, message: impl std::fmt::Display) -> Error {
    Error::Config(format!("{key}: {message}"))
}

impl RunConfig {
    /// Continuous-control preset from the MuJoCo hyper-parameter table.
    pub fn mujoco_defaults() -> Self {
        Self {
            env: EnvSpec::point_mass(2),
            num_envs: 2,
            rollout_steps: 64,
            m: 3.0,
            buffer_capacity: 5_000,
            burn_in: 2_500,
            minibatch_segments: 15,
            entropy_coef: 0.0,
            policy_learning_rate: 3e-4,
            value_learning_rate: 3e-4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |key: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(invalid(key, format!("must be positive and finite, got {v}")))
            }
        };
        let non_negative = |key: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(invalid(key, format!("must be non-negative and finite, got {v}")))
            }
        };
        let unit = |key: &str, v: f64| {
            if (0.0..1.0).contains(&v) {
                Ok(())
            } else {
                Err(invalid(key, format!("must lie in [0, 1), got {v}")))
            }
        };
        self.env.validate().map_err(|e| invalid("env", e))?;
        if self.num_envs == 0 {
            return Err(invalid("num_envs", "must be at least 1"));
        }
        if self.rollout_steps == 0 {
            return Err(invalid("rollout_steps", "must be at least 1"));
        }
        unit("gamma", self.gamma)?;
        unit("tau", self.tau)?;
        non_negative("m", self.m)?;
        if self.m > 100.0 {
            return Err(invalid("m", format!("must be at most 100, got {}", self.m)));
        }
        if self.buffer_capacity < self.rollout_steps {
            return Err(invalid("buffer_capacity", "must hold at least one rollout"));
        }
        if self.minibatch_segments == 0 {
            return Err(invalid("minibatch_segments", "must be at least 1"));
        }
        positive("policy_learning_rate", self.policy_learning_rate)?;
        positive("value_learning_rate", self.value_learning_rate)?;
        non_negative("entropy_coef", self.entropy_coef)?;
        non_negative("value_coef", self.value_coef)?;
        positive("clip_norm", self.clip_norm)?;
        if self.total_steps == 0 {
            return Err(invalid("total_steps", "must be at least 1"));
        }
        if self.seeds.is_empty() {
            return Err(invalid("seeds", "must list at least one seed"));
        }
        if self.hidden_sizes.contains(&0) {
            return Err(invalid("hidden_sizes", "layers must be non-empty"));
        }
        let fixed = self.algorithm == Algorithm::FixedCoeffP3o;
        let ipg = self.algorithm == Algorithm::IpgFixedNu;
        for (key, value, legal) in [
            ("fixed_lambda", self.fixed_lambda, fixed),
            ("fixed_c", self.fixed_c, fixed),
            ("nu", self.nu, ipg),
        ] {
            if value.is_some() && !legal {
                return Err(invalid(key, format!("not allowed with algorithm {:?}", self.algorithm)));
            }
        }
        if fixed && self.fixed_lambda.is_none() && self.fixed_c.is_none() {
            return Err(invalid("fixed_lambda", "fixed_coeff_p3o needs fixed_lambda or fixed_c"));
        }
        if let Some(l) = self.fixed_lambda {
            if !(0.0..=1.0).contains(&l) {
                return Err(invalid("fixed_lambda", format!("must lie in [0, 1], got {l}")));
            }
        }
        if let Some(c) = self.fixed_c {
            positive("fixed_c", c)?;
        }
        match (ipg, self.nu) {
            (true, None) => return Err(invalid("nu", "ipg_fixed_nu needs nu")),
            (true, Some(nu)) if !(0.0..=1.0).contains(&nu) => {
                return Err(invalid("nu", format!("must lie in [0, 1], got {nu}")))
            }
            _ => {}
        }
        Ok(())
    }

    fn effective_tau(&self) -> f64 {
        if self.gae {
            self.tau
        } else {
            1.0
        }
    }

    pub fn update_settings(&self) -> UpdateSettings {
        let rule = match self.algorithm {
            Algorithm::P3o => UpdateRule::P3o { coefficients: CoefficientOverrides::ADAPTIVE },
            Algorithm::FixedCoeffP3o => UpdateRule::P3o {
                coefficients: CoefficientOverrides { lambda: self.fixed_lambda, c: self.fixed_c },
            },
            Algorithm::OnPolicyOnly => UpdateRule::OnPolicyOnly,
            Algorithm::IpgFixedNu => UpdateRule::IpgFixedNu { nu: self.nu.unwrap_or(0.0) },
        };
        UpdateSettings {
            rule,
            gamma: self.gamma,
            tau: self.effective_tau(),
            entropy_coef: self.entropy_coef,
            value_coef: self.value_coef,
            poisson_mean: self.m,
            minibatch_segments: self.minibatch_segments,
            burn_in: self.burn_in,
            kl_direction: self.kl_direction,
            replay_advantages: self.replay_advantages,
            normalize_advantages: self.normalize_advantages,
        }
    }

    pub fn policy_spec(&self, env: &Env) -> Result<PolicySpec> {
        match env.action_head() {
            PolicyHead::Categorical { n_actions } => PolicySpec::categorical(env.obs_dim(), &self.hidden_sizes, n_actions),
            PolicyHead::Gaussian { action_dim } => PolicySpec::gaussian(env.obs_dim(), &self.hidden_sizes, action_dim),
        }
    }

    pub fn value_spec(&self, env: &Env) -> Result<MlpSpec> {
        let mut sizes = vec![env.obs_dim()];
        sizes.extend_from_slice(&self.hidden_sizes);
        sizes.push(1);
        MlpSpec::new(sizes, Activation::Tanh)
    }

    /// Freshly initialized learner for `env`.
    pub fn init_learner<R: Rng + ?Sized>(&self, env: &Env, rng: &mut R) -> Result<Learner> {
        let policy_spec = self.policy_spec(env)?;
        let value_spec = self.value_spec(env)?;
        let policy_params = policy_spec.init_params(rng);
        let value_params = value_spec.init_params(rng, 1.0);
        Ok(Learner {
            policy_opt: OptimizerState::new(policy_params.len(), self.policy_learning_rate, self.clip_norm)?,
            value_opt: OptimizerState::new(value_params.len(), self.value_learning_rate, self.clip_norm)?,
            policy_spec,
            value_spec,
            policy_params,
            value_params,
        })
    }
}

/// One row of training telemetry. Off-policy quantities average the
/// iteration's off-policy steps and are NaN when none ran, except that
/// fixed coefficients are always reported.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iteration: u64,
    pub env_steps: u64,
    /// Mean undiscounted return of the last [`RETURN_WINDOW`] finished episodes.
    pub return_mean: f64,
    pub ess: f64,
    pub lambda: f64,
    pub c: f64,
    pub kl_mean: f64,
    /// Policy entropy over `ln |A|` for discrete actions; raw entropy otherwise.
    pub entropy_norm: f64,
    pub clip_fraction: f64,
    pub wall_ms: f64,
    pub episodes_completed: u64,
    pub off_policy_updates: u32,
}

/// Outcome of [`run_training`]. A numeric failure ends the run early;
/// `records` then hold the iterations that completed.
#[derive(Debug)]
pub struct TrainingRun {
    pub records: Vec<MetricsRecord>,
    /// Every policy step, tagged with its iteration.
    pub steps: Vec<(u64, StepTelemetry)>,
    pub learner: Learner,
    pub buffer: ReplayBuffer,
    pub error: Option<Error>,
}

impl TrainingRun {
    pub fn completed(&self) -> bool {
        self.error.is_none()
    }
}

/// Independent RNG streams derived from one seed.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const INIT_STREAM: u64 = 0;
const UPDATE_STREAM: u64 = 1;
const ENV_STREAM_BASE: u64 = 2;

struct Worker {
    rng: ChaCha8Rng,
    state: EnvState,
    episode_return: f64,
}

struct Rollout {
    segment: Trajectory,
    finished_returns: Vec<f64>,
}

impl Worker {
    fn rollout(&mut self, env: &Env, spec: &PolicySpec, params: &ParamVector, steps: usize) -> Result<Rollout> {
        let mut transitions = Vec::with_capacity(steps);
        let mut finished_returns = Vec::new();
        for _ in 0..steps {
            let dist = policy_distribution(spec, params, &self.state.observation)?;
            let action = sample(&dist, &mut self.rng);
            let (next, reward) = env.step(&self.state, &action, &mut self.rng)?;
            self.episode_return += reward;
            transitions.push(Transition {
                state: self.state.observation.clone(),
                behavior: PolicySnapshot::record(dist, &action)?,
                action,
                reward,
                next_state: next.observation.clone(),
                terminal: next.terminal,
                truncated: next.truncated,
                collected_advantage: 0.0,
                collected_return: 0.0,
            });
            if next.done() {
                finished_returns.push(self.episode_return);
                self.episode_return = 0.0;
                self.state = env.reset(&mut self.rng);
            } else {
                self.state = next;
            }
        }
        Ok(Rollout { segment: Trajectory(transitions), finished_returns })
    }
}

/// Rollout threads: `P3O_NUM_THREADS` if set, else available cores.
pub fn rollout_threads() -> usize {
    std::env::var(THREADS_ENV_VAR)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

fn normalized_entropy(head: PolicyHead, entropy: f64) -> f64 {
    match head {
        PolicyHead::Categorical { n_actions } if n_actions > 1 => entropy / (n_actions as f64).ln(),
        PolicyHead::Categorical { .. } => 0.0,
        PolicyHead::Gaussian { .. } => entropy,
    }
}

fn mean_of(steps: &[StepTelemetry], f: impl Fn(&StepTelemetry) -> f64) -> f64 {
    if steps.is_empty() {
        f64::NAN
    } else {
        steps.iter().map(f).sum::<f64>() / steps.len() as f64
    }
}

/// Trains with `config` and `seed` until `total_steps` environment steps
/// are consumed. Deterministic in (config, seed) regardless of thread count.
pub fn run_training(config: &RunConfig, seed: u64) -> Result<TrainingRun> {
    config.validate()?;
    let env = config.env.build()?;
    let learner = config.init_learner(&env, &mut stream_rng(seed, INIT_STREAM))?;
    let buffer = ReplayBuffer::new(config.buffer_capacity)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(rollout_threads().min(config.num_envs))
        .build()
        .map_err(|e| Error::State(format!("rollout thread pool: {e}")))?;
    let mut run = TrainingRun { records: Vec::new(), steps: Vec::new(), learner, buffer, error: None };
    if let Err(e) = pool.install(|| train_loop(config, seed, &env, &mut run)) {
        run.error = Some(e);
    }
    Ok(run)
}

fn train_loop(config: &RunConfig, seed: u64, env: &Env, run: &mut TrainingRun) -> Result<()> {
    let settings = config.update_settings();
    let uses_replay = config.algorithm != Algorithm::OnPolicyOnly;
    let mut update_rng = stream_rng(seed, UPDATE_STREAM);
    let mut workers: Vec<Worker> = (0..config.num_envs)
        .map(|k| {
            let mut rng = stream_rng(seed, ENV_STREAM_BASE + k as u64);
            let state = env.reset(&mut rng);
            Worker { rng, state, episode_return: 0.0 }
        })
        .collect();
    let mut window: VecDeque<f64> = VecDeque::with_capacity(RETURN_WINDOW);
    let mut episodes_completed = 0u64;
    let mut env_steps = 0u64;
    let mut iteration = 0u64;
    let (fixed_lambda, fixed_c) = match settings.rule {
        UpdateRule::P3o { coefficients } => (coefficients.lambda, coefficients.c),
        _ => (None, None),
    };

    while env_steps < config.total_steps {
        let started = Instant::now();
        iteration += 1;
        let learner = &run.learner;
        let rollouts: Vec<Rollout> = workers
            .par_iter_mut()
            .map(|w| w.rollout(env, &learner.policy_spec, &learner.policy_params, config.rollout_steps))
            .collect::<Result<_>>()?;

        let mut on_batch = Vec::with_capacity(rollouts.len());
        for Rollout { mut segment, finished_returns } in rollouts {
            let set = learner.segment_advantages(segment.transitions(), settings.gamma, settings.tau)?;
            for ((t, adv), ret) in segment.0.iter_mut().zip(set.advantages).zip(set.targets) {
                t.collected_advantage = adv;
                t.collected_return = ret;
            }
            for r in finished_returns {
                if window.len() == RETURN_WINDOW {
                    window.pop_front();
                }
                window.push_back(r);
                episodes_completed += 1;
            }
            env_steps += segment.len() as u64;
            on_batch.push(segment);
        }
        if uses_replay {
            for segment in &on_batch {
                run.buffer.append(segment.clone())?;
            }
        }

        let report = combined_update(&mut run.learner, &on_batch, &run.buffer, &settings, &mut update_rng)?;
        let (on_steps, off_steps): (Vec<StepTelemetry>, Vec<StepTelemetry>) =
            report.steps.iter().partition(|s| s.phase == Phase::OnPolicy);
        let entropy_mean = mean_of(&on_steps, |s| s.telemetry.entropy_mean);
        run.records.push(MetricsRecord {
            iteration,
            env_steps,
            return_mean: if window.is_empty() {
                f64::NAN
            } else {
                window.iter().sum::<f64>() / window.len() as f64
            },
            ess: mean_of(&off_steps, |s| s.telemetry.ess),
            lambda: fixed_lambda.unwrap_or_else(|| mean_of(&off_steps, |s| s.telemetry.lambda)),
            c: fixed_c.unwrap_or_else(|| mean_of(&off_steps, |s| s.telemetry.c)),
            kl_mean: mean_of(&off_steps, |s| s.telemetry.kl_mean),
            entropy_norm: normalized_entropy(run.learner.policy_spec.head, entropy_mean),
            clip_fraction: mean_of(&off_steps, |s| s.telemetry.clip_fraction),
            wall_ms: if config.record_wall_time {
                started.elapsed().as_secs_f64() * 1e3
            } else {
                0.0
            },
            episodes_completed,
            off_policy_updates: report.off_policy_updates,
        });
        run.steps.extend(report.steps.into_iter().map(|s| (iteration, s)));
    }
    Ok(())
}

/// Environment steps at the first record whose trailing return reaches
/// `threshold` with a full return window.
pub fn steps_to_threshold(records: &[MetricsRecord], threshold: f64) -> Option<u64> {
    records
        .iter()
        .find(|r| r.episodes_completed >= RETURN_WINDOW as u64 && r.return_mean >= threshold)
        .map(|r| r.env_steps)
}

/// Something that picks an action distribution from an environment state.
pub trait Policy {
    fn distribution(&self, state: &EnvState) -> Result<ActionDistribution>;
}

/// A parameterized policy network.
pub struct NetworkPolicy<'a> {
    pub spec: &'a PolicySpec,
    pub params: &'a ParamVector,
}

impl Policy for NetworkPolicy<'_> {
    fn distribution(&self, state: &EnvState) -> Result<ActionDistribution> {
        policy_distribution(self.spec, self.params, &state.observation)
    }
}

/// One distribution per discrete state.
pub struct TablePolicy<'a>(pub &'a [ActionDistribution]);

impl Policy for TablePolicy<'_> {
    fn distribution(&self, state: &EnvState) -> Result<ActionDistribution> {
        let cell = state
            .cell()
            .ok_or_else(|| Error::Unsupported("tabular policy on a continuous environment".into()))?;
        self.0
            .get(cell)
            .cloned()
            .ok_or_else(|| Error::Input(format!("no distribution for state {cell}")))
    }
}

/// Mean and population std of undiscounted returns over `episodes`
/// stochastic episodes.
pub fn evaluate_policy<P: Policy + ?Sized, R: Rng + ?Sized>(
    env: &Env,
    policy: &P,
    episodes: usize,
    rng: &mut R,
) -> Result<(f64, f64)> {
    if episodes == 0 {
        return Err(Error::Input("evaluation needs at least one episode".into()));
    }
    let mut returns = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let mut state = env.reset(rng);
        let mut total = 0.0;
        while !state.done() {
            let action = sample(&policy.distribution(&state)?, rng);
            let (next, reward) = env.step(&state, &action, rng)?;
            total += reward;
            state = next;
        }
        returns.push(total);
    }
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

/// Mean policy entropy over the given states.
pub fn mean_entropy(spec: &PolicySpec, params: &ParamVector, states: &[Vec<f64>]) -> Result<f64> {
    if states.is_empty() {
        return Err(Error::Input("no states".into()));
    }
    let mut total = 0.0;
    for s in states {
        total += entropy(&policy_distribution(spec, params, s)?);
    }
    Ok(total / states.len() as f64)
}
