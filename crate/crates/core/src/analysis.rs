//! Exact computations on tabular MDPs: discounted state visitation, the
//! bound on the gap between two policies' visitation distributions, and
//! dynamic programming used as an optimality oracle.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;

use crate::envs::TabularMDP;
use crate::error::{Error, Result};
use crate::policy::{ActionDistribution, KlDirection};

/// A per-state tabular policy.
pub type TabularPolicy = [ActionDistribution];

/// Unnormalized discounted visitation `d(s) = sum_t gamma^t P(s_t = s)`;
/// total mass `1 / (1 - gamma)`.
#[derive(Debug, Clone, PartialEq)]
pub struct VisitationVector(pub Vec<f64>);

impl VisitationVector {
    pub fn mass(&self) -> f64 {
        self.0.iter().sum()
    }

    pub fn l1_distance(&self, other: &VisitationVector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| (a - b).abs()).sum()
    }
}

fn probs_of(dist: &ActionDistribution, n_actions: usize) -> Result<&[f64]> {
    match dist {
        ActionDistribution::Categorical { probs } if probs.len() == n_actions => Ok(probs),
        _ => Err(Error::Input(format!(
            "tabular policies need categorical distributions over {n_actions} actions"
        ))),
    }
}

/// State-to-state transition matrix `P_pi[s][s']` under `policy`.
pub fn policy_transition_matrix(mdp: &TabularMDP, policy: &TabularPolicy) -> Result<DMatrix<f64>> {
    let n = mdp.n_states();
    if policy.len() != n {
        return Err(Error::Input(format!("policy covers {} of {n} states", policy.len())));
    }
    let mut p = DMatrix::zeros(n, n);
    for s in 0..n {
        let probs = probs_of(&policy[s], mdp.n_actions())?;
        for (a, pa) in probs.iter().enumerate() {
            for (s_next, pt) in mdp.transitions[s][a].iter().enumerate() {
                p[(s, s_next)] += pa * pt;
            }
        }
    }
    Ok(p)
}

/// Solves `(I - gamma P_pi^T) d = d0`.
pub fn discounted_visitation(mdp: &TabularMDP, policy: &TabularPolicy) -> Result<VisitationVector> {
    mdp.validate()?;
    let n = mdp.n_states();
    let p = policy_transition_matrix(mdp, policy)?;
    let system = DMatrix::identity(n, n) - p.transpose() * mdp.gamma;
    let d = system
        .lu()
        .solve(&DVector::from_column_slice(&mdp.initial))
        .ok_or_else(|| Error::Numeric("visitation system is singular".into()))?;
    Ok(VisitationVector(d.iter().map(|v| v.max(0.0)).collect()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lemma1Report {
    /// `|d_target - d_behavior|_1` on unnormalized visitation vectors.
    pub lhs: f64,
    /// `2 gamma / (1 - gamma)^2 * sqrt(max_s KL(behavior || target))`.
    pub rhs: f64,
    /// Same bound with `KL(target || behavior)`; recorded, not asserted.
    pub rhs_reversed: f64,
    pub holds: bool,
}

/// Slack allowed on top of the bound for floating-point error.
pub const LEMMA1_SLACK: f64 = 1e-9;

/// Checks the visitation-gap bound between a target and a behavior policy.
pub fn lemma1_check(mdp: &TabularMDP, target: &TabularPolicy, behavior: &TabularPolicy) -> Result<Lemma1Report> {
    let d_target = discounted_visitation(mdp, target)?;
    let d_behavior = discounted_visitation(mdp, behavior)?;
    let lhs = d_target.l1_distance(&d_behavior);
    let max_kl = |dir: KlDirection| -> Result<f64> {
        target
            .iter()
            .zip(behavior)
            .map(|(t, b)| dir.kl(b, t))
            .try_fold(0.0f64, |m, kl| Ok(m.max(kl?)))
    };
    let scale = 2.0 * mdp.gamma / (1.0 - mdp.gamma).powi(2);
    let rhs = scale * max_kl(KlDirection::BehaviorToTarget)?.sqrt();
    let rhs_reversed = scale * max_kl(KlDirection::TargetToBehavior)?.sqrt();
    Ok(Lemma1Report {
        lhs,
        rhs,
        rhs_reversed,
        holds: lhs <= rhs + LEMMA1_SLACK,
    })
}

/// Random MDP with Dirichlet(1) transition rows, uniform rewards in `[-1, 1]`,
/// and a Dirichlet(1) initial distribution.
pub fn random_mdp<R: Rng + ?Sized>(n_states: usize, n_actions: usize, gamma: f64, rng: &mut R) -> TabularMDP {
    let mut simplex = |n: usize| {
        let w: Vec<f64> = (0..n).map(|_| -rng.random::<f64>().max(f64::MIN_POSITIVE).ln()).collect();
        let total: f64 = w.iter().sum();
        w.into_iter().map(|v| v / total).collect::<Vec<f64>>()
    };
    let transitions = (0..n_states)
        .map(|_| (0..n_actions).map(|_| simplex(n_states)).collect())
        .collect();
    let initial = simplex(n_states);
    let rewards = (0..n_states)
        .map(|_| (0..n_actions).map(|_| rng.random_range(-1.0..=1.0)).collect())
        .collect();
    TabularMDP {
        transitions,
        rewards,
        initial,
        gamma,
    }
}

/// Per-state softmax of Gaussian logits with standard deviation `temperature`.
pub fn random_softmax_policy<R: Rng + ?Sized>(
    n_states: usize,
    n_actions: usize,
    temperature: f64,
    rng: &mut R,
) -> Vec<ActionDistribution> {
    (0..n_states)
        .map(|_| {
            let logits: Vec<f64> = (0..n_actions)
                .map(|_| temperature * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
            let total: f64 = e.iter().sum();
            ActionDistribution::Categorical {
                probs: e.into_iter().map(|v| v / total).collect(),
            }
        })
        .collect()
}

/// Discount factors used for randomized bound checks.
pub const LEMMA1_GAMMAS: [f64; 3] = [0.8, 0.9, 0.95];

/// One randomized bound check.
#[derive(Debug, Clone, PartialEq)]
pub struct Lemma1Trial {
    pub seed: u64,
    pub gamma: f64,
    pub n_states: usize,
    pub n_actions: usize,
    pub report: Lemma1Report,
}

/// Draws an MDP with 2..=10 states and 2..=4 actions, a discount from
/// [`LEMMA1_GAMMAS`], and two softmax policies at a random temperature in
/// `[0.1, 3]`, then checks the bound.
pub fn random_lemma1_trial(seed: u64) -> Result<Lemma1Trial> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n_states = rng.random_range(2..=10);
    let n_actions = rng.random_range(2..=4);
    let gamma = LEMMA1_GAMMAS[rng.random_range(0..LEMMA1_GAMMAS.len())];
    let mdp = random_mdp(n_states, n_actions, gamma, &mut rng);
    let temperature = rng.random_range(0.1..=3.0);
    let target = random_softmax_policy(n_states, n_actions, temperature, &mut rng);
    let behavior = random_softmax_policy(n_states, n_actions, temperature, &mut rng);
    Ok(Lemma1Trial {
        seed,
        gamma,
        n_states,
        n_actions,
        report: lemma1_check(&mdp, &target, &behavior)?,
    })
}

/// Optimal discounted values and a greedy policy by value iteration.
pub fn value_iteration(mdp: &TabularMDP, tolerance: f64) -> Result<(Vec<f64>, Vec<usize>)> {
    mdp.validate()?;
    let (n, k) = (mdp.n_states(), mdp.n_actions());
    let mut v = vec![0.0; n];
    let q = |v: &[f64], s: usize, a: usize| -> f64 {
        mdp.rewards[s][a] + mdp.gamma * mdp.transitions[s][a].iter().zip(v).map(|(p, x)| p * x).sum::<f64>()
    };
    loop {
        let next: Vec<f64> = (0..n)
            .map(|s| (0..k).map(|a| q(&v, s, a)).fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let delta = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = next;
        if delta < tolerance {
            break;
        }
    }
    let greedy = (0..n)
        .map(|s| {
            (0..k)
                .max_by(|&a, &b| q(&v, s, a).partial_cmp(&q(&v, s, b)).unwrap().then(b.cmp(&a)))
                .unwrap()
        })
        .collect();
    Ok((v, greedy))
}

/// Best expected undiscounted return over `horizon` steps from the initial
/// distribution, by backward induction.
pub fn finite_horizon_optimal_return(mdp: &TabularMDP, horizon: usize) -> f64 {
    let (n, k) = (mdp.n_states(), mdp.n_actions());
    let mut v = vec![0.0; n];
    for _ in 0..horizon {
        v = (0..n)
            .map(|s| {
                (0..k)
                    .map(|a| mdp.rewards[s][a] + mdp.transitions[s][a].iter().zip(&v).map(|(p, x)| p * x).sum::<f64>())
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
    }
    mdp.initial.iter().zip(&v).map(|(p, x)| p * x).sum()
}

/// Expected undiscounted return of `policy` over `horizon` steps.
pub fn finite_horizon_policy_return(mdp: &TabularMDP, policy: &TabularPolicy, horizon: usize) -> Result<f64> {
    let (n, k) = (mdp.n_states(), mdp.n_actions());
    if policy.len() != n {
        return Err(Error::Input("policy does not cover every state".into()));
    }
    let mut v = vec![0.0; n];
    for _ in 0..horizon {
        let mut next = vec![0.0; n];
        for s in 0..n {
            let probs = probs_of(&policy[s], k)?;
            next[s] = (0..k)
                .map(|a| {
                    probs[a] * (mdp.rewards[s][a] + mdp.transitions[s][a].iter().zip(&v).map(|(p, x)| p * x).sum::<f64>())
                })
                .sum();
        }
        v = next;
    }
    Ok(mdp.initial.iter().zip(&v).map(|(p, x)| p * x).sum())
}
