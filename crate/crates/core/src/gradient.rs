//! The three gradient terms of P3O, the two-phase update that applies them,
//! and the bias diagnostics.
//!
//! Sign convention: every [`GradientEstimate`] holds the gradient of a
//! surrogate objective to be *maximized*. The optimizer minimizes, so the
//! update step feeds it the negated estimate.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::advantage::{normalize_advantages, segment_advantages, value_loss_and_grad, AdvantageSet, SegmentStep};
use crate::error::{Error, Result};
use crate::numcore::{mlp_forward, MlpSpec, OptimizerState, ParamVector};
use crate::policy::{entropy, log_prob, snapshot_log_prob, Action, ActionDistribution, KlDirection, PolicyEval, PolicySpec};
use crate::replay::{MiniBatch, ReplayBuffer, Trajectory, Transition};
use crate::weighting::{adaptive_coefficients, clip_ratio, is_ratio, AdaptiveCoefficients, WeightVector};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradientTelemetry {
    pub ess: f64,
    pub kl_mean: f64,
    pub entropy_mean: f64,
    pub lambda: f64,
    pub c: f64,
    pub clip_fraction: f64,
}

impl GradientTelemetry {
    fn on_policy(entropy_mean: f64) -> Self {
        Self {
            ess: 1.0,
            kl_mean: 0.0,
            entropy_mean,
            lambda: 0.0,
            c: 1.0,
            clip_fraction: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientEstimate {
    pub grad: ParamVector,
    pub telemetry: GradientTelemetry,
}

fn check_aligned(n: usize, advantages: &[f64]) -> Result<()> {
    if n == 0 {
        return Err(Error::Input("empty batch".into()));
    }
    if advantages.len() != n {
        return Err(Error::Input(format!(
            "{} transitions but {} advantages",
            n,
            advantages.len()
        )));
    }
    Ok(())
}

/// `mean(A * grad log pi(a|s)) + entropy_coef * mean(grad H(pi(.|s)))`.
pub fn on_policy_gradient(
    spec: &PolicySpec,
    params: &ParamVector,
    batch: &[&Transition],
    advantages: &[f64],
    entropy_coef: f64,
) -> Result<GradientEstimate> {
    check_aligned(batch.len(), advantages)?;
    let n = batch.len() as f64;
    let mut grad = ParamVector::zeros(spec.param_count());
    let mut entropy_sum = 0.0;
    for (t, adv) in batch.iter().zip(advantages) {
        let eval = PolicyEval::new(spec, params, &t.state)?;
        eval.accumulate_grad_log_prob(&t.action, adv / n, &mut grad)?;
        if entropy_coef != 0.0 {
            eval.accumulate_grad_entropy(entropy_coef / n, &mut grad)?;
        }
        entropy_sum += entropy(&eval.dist);
    }
    Ok(GradientEstimate {
        grad,
        telemetry: GradientTelemetry::on_policy(entropy_sum / n),
    })
}

/// Importance ratios `pi_theta(a|s) / beta(a|s)` of the batch's stored actions,
/// and the number that saturated. The numerator uses the same floored
/// log-probability as the stored snapshot, so identical policies give exactly 1.
pub fn batch_ratios(spec: &PolicySpec, params: &ParamVector, batch: &[&Transition]) -> Result<(WeightVector, usize)> {
    let mut saturated = 0;
    let mut ratios = Vec::with_capacity(batch.len());
    for t in batch {
        let eval = PolicyEval::new(spec, params, &t.state)?;
        let r = is_ratio(snapshot_log_prob(&eval.dist, &t.action)?, t.behavior.log_prob)?;
        saturated += r.saturated as usize;
        ratios.push(r.value);
    }
    Ok((WeightVector::new(ratios)?, saturated))
}

/// `mean(min(rho, c) * A * grad log pi(a|s))` with the truncated ratio held fixed.
pub fn off_policy_gradient(
    spec: &PolicySpec,
    params: &ParamVector,
    batch: &[&Transition],
    advantages: &[f64],
    coeffs: &AdaptiveCoefficients,
) -> Result<GradientEstimate> {
    check_aligned(batch.len(), advantages)?;
    if !(coeffs.c > 0.0) {
        return Err(Error::Input(format!("clip threshold must be positive, got {}", coeffs.c)));
    }
    let n = batch.len() as f64;
    let mut grad = ParamVector::zeros(spec.param_count());
    let (mut clipped, mut entropy_sum) = (0usize, 0.0);
    for (t, adv) in batch.iter().zip(advantages) {
        let eval = PolicyEval::new(spec, params, &t.state)?;
        let rho = is_ratio(snapshot_log_prob(&eval.dist, &t.action)?, t.behavior.log_prob)?.value;
        if rho > coeffs.c {
            clipped += 1;
        }
        eval.accumulate_grad_log_prob(&t.action, clip_ratio(rho, coeffs.c) * adv / n, &mut grad)?;
        entropy_sum += entropy(&eval.dist);
    }
    Ok(GradientEstimate {
        grad,
        telemetry: GradientTelemetry {
            ess: coeffs.ess,
            kl_mean: 0.0,
            entropy_mean: entropy_sum / n,
            lambda: coeffs.lambda,
            c: coeffs.c,
            clip_fraction: clipped as f64 / n,
        },
    })
}

/// Mean exact KL between the stored behavior distributions and the current policy.
pub fn mean_kl(spec: &PolicySpec, params: &ParamVector, batch: &[&Transition], direction: KlDirection) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let mut total = 0.0;
    for t in batch {
        let eval = PolicyEval::new(spec, params, &t.state)?;
        total += direction.kl(&t.behavior.dist, &eval.dist)?;
    }
    Ok(total / batch.len() as f64)
}

/// `-lambda * mean(grad KL)` over the batch's states.
pub fn kl_penalty_gradient(
    spec: &PolicySpec,
    params: &ParamVector,
    batch: &[&Transition],
    lambda: f64,
    direction: KlDirection,
) -> Result<GradientEstimate> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Input(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let n = batch.len() as f64;
    let mut grad = ParamVector::zeros(spec.param_count());
    let (mut kl_sum, mut entropy_sum) = (0.0, 0.0);
    for t in batch {
        let eval = PolicyEval::new(spec, params, &t.state)?;
        kl_sum += direction.kl(&t.behavior.dist, &eval.dist)?;
        entropy_sum += entropy(&eval.dist);
        if lambda != 0.0 {
            eval.accumulate_grad_kl(&t.behavior.dist, direction, -lambda / n, &mut grad)?;
        }
    }
    Ok(GradientEstimate {
        grad,
        telemetry: GradientTelemetry {
            ess: f64::NAN,
            kl_mean: kl_sum / n,
            entropy_mean: entropy_sum / n,
            lambda,
            c: f64::NAN,
            clip_fraction: 0.0,
        },
    })
}

/// One state of the on-policy batch paired with the behavior distribution
/// it is compared against.
#[derive(Debug, Clone)]
pub struct AcerPoint {
    pub target: ActionDistribution,
    pub behavior: ActionDistribution,
    /// Action taken; used as the only candidate for continuous actions.
    pub action: Action,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AcerCorrection {
    pub nonzero_fraction: f64,
    pub mean_factor: f64,
}

/// Evaluates the bias-correction factor `(1 - c / rho)_+` of the on-policy
/// term of ACER for every (state, candidate action) pair. Discrete spaces use
/// every action as a candidate. Diagnostic only.
pub fn acer_correction_diagnostic(points: &[AcerPoint], c: f64) -> Result<AcerCorrection> {
    if !(c > 0.0) {
        return Err(Error::Input(format!("c must be positive, got {c}")));
    }
    let (mut count, mut nonzero, mut total) = (0usize, 0usize, 0.0);
    let mut visit = |rho: f64| {
        let factor = (1.0 - c / rho).max(0.0);
        count += 1;
        nonzero += (factor > 0.0) as usize;
        total += factor;
    };
    for p in points {
        match p.target.n_actions() {
            Some(n) => {
                for a in 0..n {
                    let action = Action::Discrete(a);
                    visit(is_ratio(log_prob(&p.target, &action)?, log_prob(&p.behavior, &action)?)?.value);
                }
            }
            None => visit(is_ratio(log_prob(&p.target, &p.action)?, log_prob(&p.behavior, &p.action)?)?.value),
        }
    }
    if count == 0 {
        return Err(Error::Input("no diagnostic points".into()));
    }
    Ok(AcerCorrection {
        nonzero_fraction: nonzero as f64 / count as f64,
        mean_factor: total / count as f64,
    })
}

/// The two terms of the P3O bias when every ratio exceeds `c`:
/// `-ESS * E_beta[A grad log pi]` and `(1 - ESS) * E_s sum_{a in A} grad log pi(a|s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasDecomposition {
    pub biased_term: ParamVector,
    pub entropy_like_term: ParamVector,
    pub biased_term_norm: f64,
    pub entropy_like_term_norm: f64,
    pub biased_coefficient: f64,
    pub entropy_like_coefficient: f64,
    /// Whether every ratio exceeded `c`, the regime where the decomposition is exact.
    pub all_clipped: bool,
}

pub fn bias_decomposition(
    spec: &PolicySpec,
    params: &ParamVector,
    batch: &[&Transition],
    advantages: &[f64],
    coeffs: &AdaptiveCoefficients,
) -> Result<BiasDecomposition> {
    check_aligned(batch.len(), advantages)?;
    let n = batch.len() as f64;
    let mut biased = ParamVector::zeros(spec.param_count());
    let mut entropy_like = ParamVector::zeros(spec.param_count());
    let mut all_clipped = true;
    for (t, adv) in batch.iter().zip(advantages) {
        let eval = PolicyEval::new(spec, params, &t.state)?;
        let rho = is_ratio(snapshot_log_prob(&eval.dist, &t.action)?, t.behavior.log_prob)?.value;
        all_clipped &= rho > coeffs.c;
        eval.accumulate_grad_log_prob(&t.action, -coeffs.ess * adv / n, &mut biased)?;
        match eval.dist.n_actions() {
            Some(k) => {
                for a in 0..k {
                    eval.accumulate_grad_log_prob(&Action::Discrete(a), (1.0 - coeffs.ess) / n, &mut entropy_like)?;
                }
            }
            None => eval.accumulate_grad_log_prob(&t.action, (1.0 - coeffs.ess) / n, &mut entropy_like)?,
        }
    }
    Ok(BiasDecomposition {
        biased_term_norm: biased.norm(),
        entropy_like_term_norm: entropy_like.norm(),
        biased_term: biased,
        entropy_like_term: entropy_like,
        biased_coefficient: coeffs.ess,
        entropy_like_coefficient: 1.0 - coeffs.ess,
        all_clipped,
    })
}

/// Draws from Poisson(`mean`) by sequential inversion of the CDF.
pub fn poisson<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> u32 {
    let u: f64 = rng.random();
    let mut k = 0u32;
    let mut p = (-mean).exp();
    let mut cdf = p;
    while u > cdf && p > 0.0 {
        k += 1;
        p *= mean / k as f64;
        cdf += p;
    }
    k
}

/// Constants that replace the adaptive rule. `None` keeps the adaptive
/// value (`c = ESS`, `lambda = 1 - ESS`, recomputed for each mini-batch).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CoefficientOverrides {
    pub lambda: Option<f64>,
    pub c: Option<f64>,
}

impl CoefficientOverrides {
    pub const ADAPTIVE: Self = Self { lambda: None, c: None };

    pub fn resolve(&self, ratios: &WeightVector) -> AdaptiveCoefficients {
        let measured = adaptive_coefficients(ratios);
        AdaptiveCoefficients {
            lambda: self.lambda.unwrap_or(measured.lambda),
            c: self.c.unwrap_or(measured.c),
            ess: measured.ess,
        }
    }
}

/// Update rule variants sharing [`combined_update`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UpdateRule {
    /// On-policy step, then Poisson-many off-policy + KL steps.
    P3o { coefficients: CoefficientOverrides },
    OnPolicyOnly,
    /// One step along `(1 - nu) * on-policy + nu * off-policy` gradients.
    IpgFixedNu { nu: f64 },
}

/// Which advantages replayed segments use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplayAdvantages {
    /// GAE recomputed with the current value function.
    #[default]
    Recompute,
    /// Advantages stored at collection time.
    Stored,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpdateSettings {
    pub rule: UpdateRule,
    pub gamma: f64,
    pub tau: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub poisson_mean: f64,
    pub minibatch_segments: usize,
    pub burn_in: u64,
    pub kl_direction: KlDirection,
    pub replay_advantages: ReplayAdvantages,
    pub normalize_advantages: bool,
}

/// Policy and value function with their optimizer states.
#[derive(Debug, Clone, PartialEq)]
pub struct Learner {
    pub policy_spec: PolicySpec,
    pub value_spec: MlpSpec,
    pub policy_params: ParamVector,
    pub value_params: ParamVector,
    pub policy_opt: OptimizerState,
    pub value_opt: OptimizerState,
}

impl Learner {
    pub fn value(&self, state: &[f64]) -> Result<f64> {
        Ok(mlp_forward(&self.value_spec, &self.value_params, state)?[0])
    }

    /// GAE advantages and value targets for one segment under the current value function.
    pub fn segment_advantages(&self, segment: &[Transition], gamma: f64, tau: f64) -> Result<AdvantageSet> {
        let steps = segment
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let ends = t.terminal || t.truncated || i + 1 == segment.len();
                Ok(SegmentStep {
                    reward: t.reward,
                    value: self.value(&t.state)?,
                    next_value: if ends && !t.terminal { self.value(&t.next_state)? } else { 0.0 },
                    terminal: t.terminal,
                    truncated: t.truncated,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        segment_advantages(&steps, gamma, tau)
    }

    fn step_policy(&mut self, ascent: &ParamVector) -> Result<()> {
        self.policy_opt.apply(&mut self.policy_params, &ascent.scaled(-1.0))
    }

    fn step_value(&mut self, states: &[Vec<f64>], targets: &[f64], coef: f64) -> Result<()> {
        let (_, grad) = value_loss_and_grad(&self.value_spec, &self.value_params, states, targets)?;
        self.value_opt.apply(&mut self.value_params, &grad.scaled(coef))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    OnPolicy,
    OffPolicy,
}

/// Telemetry of one optimizer step on the policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepTelemetry {
    pub phase: Phase,
    pub telemetry: GradientTelemetry,
    /// Whether a KL gradient was evaluated in this step.
    pub kl_gradient: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct UpdateReport {
    /// Poisson draw for this iteration (0 when the buffer was cold or the rule has no off-policy phase).
    pub off_policy_updates: u32,
    pub steps: Vec<StepTelemetry>,
}

struct PreparedBatch<'a> {
    transitions: Vec<&'a Transition>,
    advantages: Vec<f64>,
    states: Vec<Vec<f64>>,
    targets: Vec<f64>,
}

fn prepare_replay<'a>(
    learner: &Learner,
    minibatch: &'a MiniBatch,
    settings: &UpdateSettings,
) -> Result<PreparedBatch<'a>> {
    let mut advantages = Vec::new();
    let mut targets = Vec::new();
    for segment in &minibatch.segments {
        match settings.replay_advantages {
            ReplayAdvantages::Recompute => {
                let set = learner.segment_advantages(segment.transitions(), settings.gamma, settings.tau)?;
                advantages.extend(set.advantages);
                targets.extend(set.targets);
            }
            ReplayAdvantages::Stored => {
                advantages.extend(segment.transitions().iter().map(|t| t.collected_advantage));
                targets.extend(segment.transitions().iter().map(|t| t.collected_return));
            }
        }
    }
    if settings.normalize_advantages {
        advantages = normalize_advantages(&advantages);
    }
    let transitions: Vec<&Transition> = minibatch.transitions().collect();
    Ok(PreparedBatch {
        states: transitions.iter().map(|t| t.state.clone()).collect(),
        transitions,
        advantages,
        targets,
    })
}

fn prepare_on_policy(on_batch: &[Trajectory], normalize: bool) -> Result<PreparedBatch<'_>> {
    let transitions: Vec<&Transition> = on_batch.iter().flat_map(|t| t.transitions()).collect();
    if transitions.is_empty() {
        return Err(Error::Input("empty on-policy batch".into()));
    }
    let mut advantages: Vec<f64> = transitions.iter().map(|t| t.collected_advantage).collect();
    if normalize {
        advantages = normalize_advantages(&advantages);
    }
    Ok(PreparedBatch {
        states: transitions.iter().map(|t| t.state.clone()).collect(),
        targets: transitions.iter().map(|t| t.collected_return).collect(),
        transitions,
        advantages,
    })
}

/// One iteration's learning updates.
///
/// `on_batch` must be freshly collected by the current policy with
/// `collected_advantage` / `collected_return` filled in. The on-policy step
/// runs first; then, if the buffer is warm, `xi ~ Poisson(m)` off-policy + KL
/// steps follow, each on a fresh mini-batch with freshly computed
/// coefficients. The value function takes one step per phase. On any error
/// the learner is restored to its state before the call.
pub fn combined_update<R: Rng + ?Sized>(
    learner: &mut Learner,
    on_batch: &[Trajectory],
    replay: &ReplayBuffer,
    settings: &UpdateSettings,
    rng: &mut R,
) -> Result<UpdateReport> {
    let snapshot = learner.clone();
    let result = run_update(learner, on_batch, replay, settings, rng);
    if result.is_err() {
        *learner = snapshot;
    }
    result
}

fn run_update<R: Rng + ?Sized>(
    learner: &mut Learner,
    on_batch: &[Trajectory],
    replay: &ReplayBuffer,
    settings: &UpdateSettings,
    rng: &mut R,
) -> Result<UpdateReport> {
    let mut report = UpdateReport::default();
    let on = prepare_on_policy(on_batch, settings.normalize_advantages)?;
    let on_grad = on_policy_gradient(
        &learner.policy_spec,
        &learner.policy_params,
        &on.transitions,
        &on.advantages,
        settings.entropy_coef,
    )?;

    match settings.rule {
        UpdateRule::OnPolicyOnly => {
            learner.step_policy(&on_grad.grad)?;
            learner.step_value(&on.states, &on.targets, settings.value_coef)?;
            report.steps.push(StepTelemetry {
                phase: Phase::OnPolicy,
                telemetry: on_grad.telemetry,
                kl_gradient: false,
            });
        }
        UpdateRule::IpgFixedNu { nu } => {
            let mut grad = on_grad.grad.clone();
            let mut off_telemetry = None;
            if replay.is_warm(settings.burn_in) && !replay.is_empty() {
                let minibatch = replay.sample_minibatch(settings.minibatch_segments, rng)?;
                let off = prepare_replay(learner, &minibatch, settings)?;
                let (ratios, _) = batch_ratios(&learner.policy_spec, &learner.policy_params, &off.transitions)?;
                let mut coeffs = adaptive_coefficients(&ratios);
                coeffs.c = 1.0;
                coeffs.lambda = 0.0;
                let off_grad = off_policy_gradient(
                    &learner.policy_spec,
                    &learner.policy_params,
                    &off.transitions,
                    &off.advantages,
                    &coeffs,
                )?;
                grad.scale(1.0 - nu);
                grad.add_scaled(&off_grad.grad, nu);
                off_telemetry = Some(off_grad.telemetry);
                report.off_policy_updates = 1;
            }
            learner.step_policy(&grad)?;
            learner.step_value(&on.states, &on.targets, settings.value_coef)?;
            // One optimizer step; both gradient families are reported.
            report.steps.push(StepTelemetry {
                phase: Phase::OnPolicy,
                telemetry: on_grad.telemetry,
                kl_gradient: false,
            });
            if let Some(telemetry) = off_telemetry {
                report.steps.push(StepTelemetry {
                    phase: Phase::OffPolicy,
                    telemetry,
                    kl_gradient: false,
                });
            }
        }
        UpdateRule::P3o { coefficients } => {
            learner.step_policy(&on_grad.grad)?;
            learner.step_value(&on.states, &on.targets, settings.value_coef)?;
            report.steps.push(StepTelemetry {
                phase: Phase::OnPolicy,
                telemetry: on_grad.telemetry,
                kl_gradient: false,
            });
            if !replay.is_warm(settings.burn_in) || replay.is_empty() {
                return Ok(report);
            }
            let xi = poisson(settings.poisson_mean, rng);
            report.off_policy_updates = xi;
            for _ in 0..xi {
                let minibatch = replay.sample_minibatch(settings.minibatch_segments, rng)?;
                let off = prepare_replay(learner, &minibatch, settings)?;
                let (ratios, _) = batch_ratios(&learner.policy_spec, &learner.policy_params, &off.transitions)?;
                let coeffs = coefficients.resolve(&ratios);
                let mut step = off_policy_gradient(
                    &learner.policy_spec,
                    &learner.policy_params,
                    &off.transitions,
                    &off.advantages,
                    &coeffs,
                )?;
                let kl_gradient = coeffs.lambda != 0.0;
                step.telemetry.kl_mean = if kl_gradient {
                    let kl = kl_penalty_gradient(
                        &learner.policy_spec,
                        &learner.policy_params,
                        &off.transitions,
                        coeffs.lambda,
                        settings.kl_direction,
                    )?;
                    step.grad.add_scaled(&kl.grad, 1.0);
                    kl.telemetry.kl_mean
                } else {
                    mean_kl(&learner.policy_spec, &learner.policy_params, &off.transitions, settings.kl_direction)?
                };
                learner.step_policy(&step.grad)?;
                learner.step_value(&off.states, &off.targets, settings.value_coef)?;
                report.steps.push(StepTelemetry {
                    phase: Phase::OffPolicy,
                    telemetry: step.telemetry,
                    kl_gradient,
                });
            }
        }
    }
    Ok(report)
}
