//! Stochastic policies: a categorical softmax head over discrete actions and
//! a diagonal Gaussian head with state-independent log standard deviations.

use std::f64::consts::{E, PI};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{mlp_backward_cached, mlp_forward_cached, Activation, MlpSpec, ParamVector};

/// Floor applied inside `ln` when reading probabilities back from disk.
pub const SNAPSHOT_PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Discrete(usize),
    Continuous(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionDistribution {
    Categorical { probs: Vec<f64> },
    Gaussian { mean: Vec<f64>, std: Vec<f64> },
}

impl ActionDistribution {
    pub fn categorical(probs: Vec<f64>) -> Result<Self> {
        let d = ActionDistribution::Categorical { probs };
        d.validate()?;
        Ok(d)
    }

    pub fn gaussian(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        let d = ActionDistribution::Gaussian { mean, std };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ActionDistribution::Categorical { probs } => {
                if probs.is_empty() {
                    return Err(Error::Input("empty categorical distribution".into()));
                }
                if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
                    return Err(Error::Numeric(format!("invalid probabilities {probs:?}")));
                }
                let total: f64 = probs.iter().sum();
                if (total - 1.0).abs() > 1e-12 {
                    return Err(Error::Numeric(format!("probabilities sum to {total}")));
                }
            }
            ActionDistribution::Gaussian { mean, std } => {
                if mean.len() != std.len() || mean.is_empty() {
                    return Err(Error::Input("mean and std lengths differ".into()));
                }
                if mean.iter().any(|m| !m.is_finite())
                    || std.iter().any(|s| !s.is_finite() || *s <= 0.0)
                {
                    return Err(Error::Numeric("invalid Gaussian parameters".into()));
                }
            }
        }
        Ok(())
    }

    /// Number of discrete actions, or `None` for continuous distributions.
    pub fn n_actions(&self) -> Option<usize> {
        match self {
            ActionDistribution::Categorical { probs } => Some(probs.len()),
            ActionDistribution::Gaussian { .. } => None,
        }
    }

    fn same_space(&self, other: &ActionDistribution) -> bool {
        match (self, other) {
            (
                ActionDistribution::Categorical { probs: a },
                ActionDistribution::Categorical { probs: b },
            ) => a.len() == b.len(),
            (
                ActionDistribution::Gaussian { mean: a, .. },
                ActionDistribution::Gaussian { mean: b, .. },
            ) => a.len() == b.len(),
            _ => false,
        }
    }
}

/// A behavior distribution recorded at collection time together with the
/// log-probability of the action actually taken.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySnapshot {
    pub dist: ActionDistribution,
    pub log_prob: f64,
}

impl PolicySnapshot {
    pub fn record(dist: ActionDistribution, action: &Action) -> Result<Self> {
        let log_prob = log_prob(&dist, action)?;
        Ok(Self { dist, log_prob })
    }

    /// Checks that the stored log-probability matches the distribution.
    pub fn check_consistent(&self, action: &Action) -> Result<()> {
        let expected = snapshot_log_prob(&self.dist, action)?;
        if (expected - self.log_prob).abs() > 1e-9 {
            return Err(Error::Input(format!(
                "snapshot log-prob {} disagrees with its distribution ({expected})",
                self.log_prob
            )));
        }
        Ok(())
    }
}

/// Log-probability with the on-disk probability floor applied.
pub fn snapshot_log_prob(dist: &ActionDistribution, action: &Action) -> Result<f64> {
    match (dist, action) {
        (ActionDistribution::Categorical { probs }, Action::Discrete(a)) => probs
            .get(*a)
            .map(|p| p.max(SNAPSHOT_PROB_FLOOR).ln())
            .ok_or_else(|| Error::Input(format!("action {a} out of range"))),
        _ => log_prob(dist, action),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicyHead {
    Categorical { n_actions: usize },
    Gaussian { action_dim: usize },
}

/// Network plus head. For Gaussian heads the network outputs the mean and
/// `action_dim` log-std parameters follow the network parameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicySpec {
    pub network: MlpSpec,
    pub head: PolicyHead,
}

impl PolicySpec {
    pub fn categorical(obs_dim: usize, hidden: &[usize], n_actions: usize) -> Result<Self> {
        let mut sizes = vec![obs_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(n_actions);
        Ok(Self {
            network: MlpSpec::new(sizes, Activation::Tanh)?,
            head: PolicyHead::Categorical { n_actions },
        })
    }

    pub fn gaussian(obs_dim: usize, hidden: &[usize], action_dim: usize) -> Result<Self> {
        let mut sizes = vec![obs_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(action_dim);
        Ok(Self {
            network: MlpSpec::new(sizes, Activation::Tanh)?,
            head: PolicyHead::Gaussian { action_dim },
        })
    }

    pub fn obs_dim(&self) -> usize {
        self.network.input_dim()
    }

    pub fn param_count(&self) -> usize {
        self.network.param_count()
            + match self.head {
                PolicyHead::Categorical { .. } => 0,
                PolicyHead::Gaussian { action_dim } => action_dim,
            }
    }

    /// Near-uniform initial policy: output gain 0.01, log-std 0.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamVector {
        let mut values = self.network.init_params(rng, 0.01).into_vec();
        values.resize(self.param_count(), 0.0);
        ParamVector::new(values).expect("initialization is finite")
    }

    fn split<'a>(&self, params: &'a ParamVector) -> Result<(&'a [f64], &'a [f64])> {
        if params.len() != self.param_count() {
            return Err(Error::Config(format!(
                "policy expects {} parameters, got {}",
                self.param_count(),
                params.len()
            )));
        }
        Ok(params.as_slice().split_at(self.network.param_count()))
    }

    fn check_action(&self, action: &Action) -> Result<()> {
        match (self.head, action) {
            (PolicyHead::Categorical { n_actions }, Action::Discrete(a)) if *a < n_actions => Ok(()),
            (PolicyHead::Categorical { n_actions }, Action::Discrete(a)) => Err(Error::Input(
                format!("action {a} out of range for {n_actions} actions"),
            )),
            (PolicyHead::Gaussian { action_dim }, Action::Continuous(v)) if v.len() == action_dim => {
                Ok(())
            }
            _ => Err(Error::Input("action does not match the policy's action space".into())),
        }
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Log-softmax computed stably; used where `ln(softmax)` would lose precision.
fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

/// A policy evaluated at one state, retaining what the backward pass needs.
pub struct PolicyEval<'a> {
    spec: &'a PolicySpec,
    params: &'a ParamVector,
    cache: crate::numcore::ForwardCache,
    pub dist: ActionDistribution,
    log_probs: Option<Vec<f64>>,
}

impl<'a> PolicyEval<'a> {
    pub fn new(spec: &'a PolicySpec, params: &'a ParamVector, state: &[f64]) -> Result<Self> {
        let (net, log_std) = spec.split(params)?;
        let cache = mlp_forward_cached(&spec.network, net, state)?;
        let out = cache.output();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("policy network produced a non-finite output".into()));
        }
        let (dist, log_probs) = match spec.head {
            PolicyHead::Categorical { .. } => {
                let probs = softmax(out);
                (
                    ActionDistribution::Categorical { probs },
                    Some(log_softmax(out)),
                )
            }
            PolicyHead::Gaussian { .. } => {
                let std: Vec<f64> = log_std.iter().map(|s| s.exp()).collect();
                if std.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
                    return Err(Error::Numeric("policy std is not positive and finite".into()));
                }
                (
                    ActionDistribution::Gaussian {
                        mean: out.to_vec(),
                        std,
                    },
                    None,
                )
            }
        };
        Ok(Self {
            spec,
            params,
            cache,
            dist,
            log_probs,
        })
    }

    pub fn log_prob(&self, action: &Action) -> Result<f64> {
        self.spec.check_action(action)?;
        match (&self.log_probs, action) {
            (Some(lp), Action::Discrete(a)) => Ok(lp[*a]),
            _ => log_prob(&self.dist, action),
        }
    }

    /// Accumulates `scale * d(head scalar)/d params` into `grad`, where the
    /// head scalar's derivative with respect to the network output is
    /// `d_out` and with respect to the log-std parameters is `d_log_std`.
    fn accumulate(
        &self,
        d_out: &[f64],
        d_log_std: Option<&[f64]>,
        scale: f64,
        grad: &mut ParamVector,
    ) -> Result<()> {
        let n_net = self.spec.network.param_count();
        let scaled: Vec<f64> = d_out.iter().map(|v| v * scale).collect();
        let (net_params, _) = self.spec.split(self.params)?;
        let (net_grad, std_grad) = grad.as_mut_slice().split_at_mut(n_net);
        mlp_backward_cached(&self.spec.network, net_params, &self.cache, &scaled, net_grad)?;
        if let Some(d) = d_log_std {
            for (g, v) in std_grad.iter_mut().zip(d) {
                *g += scale * v;
            }
        }
        Ok(())
    }

    /// `grad += scale * d log pi(action | s) / d params`.
    pub fn accumulate_grad_log_prob(&self, action: &Action, scale: f64, grad: &mut ParamVector) -> Result<()> {
        self.spec.check_action(action)?;
        match (&self.dist, action) {
            (ActionDistribution::Categorical { probs }, Action::Discrete(a)) => {
                let d: Vec<f64> = probs
                    .iter()
                    .enumerate()
                    .map(|(j, p)| if j == *a { 1.0 - p } else { -p })
                    .collect();
                self.accumulate(&d, None, scale, grad)
            }
            (ActionDistribution::Gaussian { mean, std }, Action::Continuous(x)) => {
                let z: Vec<f64> = x.iter().zip(mean).zip(std).map(|((x, m), s)| (x - m) / s).collect();
                let d_mean: Vec<f64> = z.iter().zip(std).map(|(z, s)| z / s).collect();
                let d_log_std: Vec<f64> = z.iter().map(|z| z * z - 1.0).collect();
                self.accumulate(&d_mean, Some(&d_log_std), scale, grad)
            }
            _ => unreachable!("checked above"),
        }
    }

    /// `grad += scale * d entropy / d params`.
    pub fn accumulate_grad_entropy(&self, scale: f64, grad: &mut ParamVector) -> Result<()> {
        match &self.dist {
            ActionDistribution::Categorical { probs } => {
                let lp = self.log_probs.as_ref().unwrap();
                let h = entropy(&self.dist);
                let d: Vec<f64> = probs.iter().zip(lp).map(|(p, l)| -p * (l + h)).collect();
                self.accumulate(&d, None, scale, grad)
            }
            ActionDistribution::Gaussian { mean, .. } => {
                let zeros = vec![0.0; mean.len()];
                let ones = vec![1.0; mean.len()];
                self.accumulate(&zeros, Some(&ones), scale, grad)
            }
        }
    }

    /// `grad += scale * d KL / d params` for the KL between `behavior` and this policy.
    pub fn accumulate_grad_kl(
        &self,
        behavior: &ActionDistribution,
        direction: KlDirection,
        scale: f64,
        grad: &mut ParamVector,
    ) -> Result<()> {
        if !behavior.same_space(&self.dist) {
            return Err(Error::Input("behavior distribution is over a different action space".into()));
        }
        match (&self.dist, behavior) {
            (ActionDistribution::Categorical { probs }, ActionDistribution::Categorical { probs: beta }) => {
                let d: Vec<f64> = match direction {
                    // sum_a beta (log beta - log pi): d/dz = pi - beta
                    KlDirection::BehaviorToTarget => {
                        probs.iter().zip(beta).map(|(p, b)| p - b).collect()
                    }
                    // sum_a pi (log pi - log beta): d/dz_j = pi_j (log pi_j - log beta_j - KL)
                    KlDirection::TargetToBehavior => {
                        let lp = self.log_probs.as_ref().unwrap();
                        let log_ratio: Vec<f64> = lp
                            .iter()
                            .zip(beta)
                            .map(|(l, b)| if *b > 0.0 { l - b.ln() } else { f64::INFINITY })
                            .collect();
                        if probs.iter().zip(&log_ratio).any(|(p, r)| *p > 0.0 && !r.is_finite()) {
                            return Err(Error::Numeric("target puts mass outside the behavior support".into()));
                        }
                        let kl: f64 = probs.iter().zip(&log_ratio).map(|(p, r)| p * r).sum();
                        probs.iter().zip(&log_ratio).map(|(p, r)| p * (r - kl)).collect()
                    }
                };
                self.accumulate(&d, None, scale, grad)
            }
            (
                ActionDistribution::Gaussian { mean, std },
                ActionDistribution::Gaussian { mean: mb, std: sb },
            ) => {
                let (d_mean, d_log_std): (Vec<f64>, Vec<f64>) = match direction {
                    KlDirection::BehaviorToTarget => mean
                        .iter()
                        .zip(std)
                        .zip(mb.iter().zip(sb))
                        .map(|((m, s), (m_b, s_b))| {
                            let var = s * s;
                            ((m - m_b) / var, 1.0 - (s_b * s_b + (m_b - m).powi(2)) / var)
                        })
                        .unzip(),
                    KlDirection::TargetToBehavior => mean
                        .iter()
                        .zip(std)
                        .zip(mb.iter().zip(sb))
                        .map(|((m, s), (m_b, s_b))| {
                            let var_b = s_b * s_b;
                            ((m - m_b) / var_b, s * s / var_b - 1.0)
                        })
                        .unzip(),
                };
                self.accumulate(&d_mean, Some(&d_log_std), scale, grad)
            }
            _ => unreachable!("checked above"),
        }
    }
}

/// Which ordering of the KL penalty to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `KL(behavior || target)`.
    #[default]
    BehaviorToTarget,
    /// `KL(target || behavior)`.
    TargetToBehavior,
}

impl KlDirection {
    /// KL between a behavior distribution and the target in this ordering.
    pub fn kl(self, behavior: &ActionDistribution, target: &ActionDistribution) -> Result<f64> {
        match self {
            KlDirection::BehaviorToTarget => kl_exact(behavior, target),
            KlDirection::TargetToBehavior => kl_exact(target, behavior),
        }
    }
}

pub fn policy_distribution(spec: &PolicySpec, params: &ParamVector, state: &[f64]) -> Result<ActionDistribution> {
    Ok(PolicyEval::new(spec, params, state)?.dist)
}

pub fn log_prob(dist: &ActionDistribution, action: &Action) -> Result<f64> {
    match (dist, action) {
        (ActionDistribution::Categorical { probs }, Action::Discrete(a)) => probs
            .get(*a)
            .map(|p| p.ln())
            .ok_or_else(|| Error::Input(format!("action {a} out of range for {} actions", probs.len()))),
        (ActionDistribution::Gaussian { mean, std }, Action::Continuous(x)) if x.len() == mean.len() => Ok(x
            .iter()
            .zip(mean)
            .zip(std)
            .map(|((x, m), s)| {
                let z = (x - m) / s;
                -0.5 * z * z - s.ln() - 0.5 * (2.0 * PI).ln()
            })
            .sum()),
        _ => Err(Error::Input("action does not match the distribution".into())),
    }
}

/// `d log pi_theta(action | state) / d theta`.
pub fn grad_log_prob(spec: &PolicySpec, params: &ParamVector, state: &[f64], action: &Action) -> Result<ParamVector> {
    let eval = PolicyEval::new(spec, params, state)?;
    let mut grad = ParamVector::zeros(spec.param_count());
    eval.accumulate_grad_log_prob(action, 1.0, &mut grad)?;
    Ok(grad)
}

/// Shannon entropy in nats, or Gaussian differential entropy.
pub fn entropy(dist: &ActionDistribution) -> f64 {
    match dist {
        ActionDistribution::Categorical { probs } => probs
            .iter()
            .filter(|p| **p > 0.0)
            .map(|p| -p * p.ln())
            .sum(),
        ActionDistribution::Gaussian { std, .. } => std
            .iter()
            .map(|s| 0.5 * (2.0 * PI * E * s * s).ln())
            .sum(),
    }
}

pub fn grad_entropy(spec: &PolicySpec, params: &ParamVector, state: &[f64]) -> Result<ParamVector> {
    let eval = PolicyEval::new(spec, params, state)?;
    let mut grad = ParamVector::zeros(spec.param_count());
    eval.accumulate_grad_entropy(1.0, &mut grad)?;
    Ok(grad)
}

/// `KL(p || q)`, computed exactly.
pub fn kl_exact(p: &ActionDistribution, q: &ActionDistribution) -> Result<f64> {
    if !p.same_space(q) {
        return Err(Error::Input("KL between different action spaces".into()));
    }
    match (p, q) {
        (ActionDistribution::Categorical { probs: pp }, ActionDistribution::Categorical { probs: qp }) => {
            let mut total = 0.0;
            for (a, b) in pp.iter().zip(qp) {
                if *a > 0.0 {
                    if *b <= 0.0 {
                        return Err(Error::Numeric("q has zero mass where p is positive".into()));
                    }
                    total += a * (a.ln() - b.ln());
                }
            }
            Ok(total.max(0.0))
        }
        (
            ActionDistribution::Gaussian { mean: m1, std: s1 },
            ActionDistribution::Gaussian { mean: m2, std: s2 },
        ) => Ok(m1
            .iter()
            .zip(s1)
            .zip(m2.iter().zip(s2))
            .map(|((m1, s1), (m2, s2))| (s2 / s1).ln() + (s1 * s1 + (m1 - m2).powi(2)) / (2.0 * s2 * s2) - 0.5)
            .sum::<f64>()
            .max(0.0)),
        _ => unreachable!("checked above"),
    }
}

/// `d KL / d theta` where the target distribution is `pi_theta(. | state)`.
/// The default ordering is `KL(behavior || pi_theta)`.
pub fn grad_kl(
    spec: &PolicySpec,
    params: &ParamVector,
    state: &[f64],
    behavior: &ActionDistribution,
    direction: KlDirection,
) -> Result<ParamVector> {
    let eval = PolicyEval::new(spec, params, state)?;
    let mut grad = ParamVector::zeros(spec.param_count());
    eval.accumulate_grad_kl(behavior, direction, 1.0, &mut grad)?;
    Ok(grad)
}

/// Inverse-CDF sampling for categorical, `mean + std * N(0, 1)` for Gaussian.
pub fn sample<R: Rng + ?Sized>(dist: &ActionDistribution, rng: &mut R) -> Action {
    match dist {
        ActionDistribution::Categorical { probs } => {
            let u: f64 = rng.random();
            let mut cumulative = 0.0;
            for (a, p) in probs.iter().enumerate() {
                cumulative += p;
                if u < cumulative {
                    return Action::Discrete(a);
                }
            }
            // u landed in the rounding gap above the last cumulative sum
            Action::Discrete(probs.iter().rposition(|p| *p > 0.0).unwrap_or(probs.len() - 1))
        }
        ActionDistribution::Gaussian { mean, std } => Action::Continuous(
            mean.iter()
                .zip(std)
                .map(|(m, s)| {
                    let z: f64 = rng.sample(StandardNormal);
                    m + s * z
                })
                .collect(),
        ),
    }
}
