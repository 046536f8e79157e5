//! Discounted returns, TD residuals, generalized advantage estimation, and
//! value-function regression.

use crate::error::{Error, Result};
use crate::numcore::{mlp_backward_cached, mlp_forward_cached, MlpSpec, ParamVector};

/// Per-step value predictions plus the value of the state after the last step
/// (0 when the trajectory ended in a true terminal state).
#[derive(Debug, Clone, PartialEq)]
pub struct ValueEstimate {
    pub values: Vec<f64>,
    pub bootstrap: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdvantageSet {
    pub advantages: Vec<f64>,
    /// Regression targets for the value function (`advantage + value`).
    pub targets: Vec<f64>,
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::Input(format!("gamma must lie in [0, 1), got {gamma}")));
    }
    Ok(())
}

/// `G_t = r_t + gamma * G_{t+1}` with `G_T = bootstrap`.
pub fn discounted_returns(rewards: &[f64], gamma: f64, bootstrap: f64) -> Result<Vec<f64>> {
    check_gamma(gamma)?;
    let mut out = vec![0.0; rewards.len()];
    let mut running = bootstrap;
    for (t, r) in rewards.iter().enumerate().rev() {
        running = r + gamma * running;
        out[t] = running;
    }
    Ok(out)
}

/// `delta_t = r_t + gamma * v(s_{t+1}) - v(s_t)`, with the bootstrap value
/// standing in for `v(s_T)`.
pub fn td_residuals(rewards: &[f64], values: &ValueEstimate, gamma: f64) -> Result<Vec<f64>> {
    check_gamma(gamma)?;
    if rewards.len() != values.values.len() {
        return Err(Error::Input(format!(
            "{} rewards but {} values",
            rewards.len(),
            values.values.len()
        )));
    }
    let v = &values.values;
    Ok((0..rewards.len())
        .map(|t| {
            let next = if t + 1 < v.len() { v[t + 1] } else { values.bootstrap };
            rewards[t] + gamma * next - v[t]
        })
        .collect())
}

/// `A_t = sum_l (gamma * tau)^l delta_{t+l}`.
pub fn gae(deltas: &[f64], gamma: f64, tau: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Input(format!("tau must lie in [0, 1], got {tau}")));
    }
    let decay = gamma * tau;
    let mut out = vec![0.0; deltas.len()];
    let mut running = 0.0;
    for (t, d) in deltas.iter().enumerate().rev() {
        running = d + decay * running;
        out[t] = running;
    }
    Ok(out)
}

/// Step of a rollout segment as seen by [`segment_advantages`].
#[derive(Debug, Clone, Copy)]
pub struct SegmentStep {
    pub reward: f64,
    pub value: f64,
    /// Value of the successor state, used only where an episode piece ends.
    pub next_value: f64,
    pub terminal: bool,
    /// Episode cut here by a time limit.
    pub truncated: bool,
}

/// GAE over a fixed-length segment that may span several episodes.
///
/// The segment is cut at every episode boundary. Each piece is bootstrapped
/// with 0 after a true terminal and with the successor's value otherwise
/// (time-limit truncation or the end of the segment).
pub fn segment_advantages(steps: &[SegmentStep], gamma: f64, tau: f64) -> Result<AdvantageSet> {
    let mut out = AdvantageSet::default();
    let mut start = 0;
    for end in 0..steps.len() {
        let last = &steps[end];
        if !(last.terminal || last.truncated || end + 1 == steps.len()) {
            continue;
        }
        let piece = &steps[start..=end];
        let rewards: Vec<f64> = piece.iter().map(|s| s.reward).collect();
        let estimate = ValueEstimate {
            values: piece.iter().map(|s| s.value).collect(),
            bootstrap: if last.terminal { 0.0 } else { last.next_value },
        };
        let deltas = td_residuals(&rewards, &estimate, gamma)?;
        let adv = gae(&deltas, gamma, tau)?;
        out.targets.extend(adv.iter().zip(&estimate.values).map(|(a, v)| a + v));
        out.advantages.extend(adv);
        start = end + 1;
    }
    Ok(out)
}

/// `0.5 * mean((v(s) - target)^2)` and its exact parameter gradient.
pub fn value_loss_and_grad(
    spec: &MlpSpec,
    params: &ParamVector,
    states: &[Vec<f64>],
    targets: &[f64],
) -> Result<(f64, ParamVector)> {
    if states.len() != targets.len() {
        return Err(Error::Input(format!(
            "{} states but {} targets",
            states.len(),
            targets.len()
        )));
    }
    if let Some(t) = targets.iter().find(|t| !t.is_finite()) {
        return Err(Error::Input(format!("non-finite value target {t}")));
    }
    if spec.output_dim() != 1 {
        return Err(Error::Config("value network must have a scalar output".into()));
    }
    let n = states.len().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; spec.param_count()];
    for (s, target) in states.iter().zip(targets) {
        let cache = mlp_forward_cached(spec, params.as_slice(), s)?;
        let err = cache.output()[0] - target;
        loss += 0.5 * err * err / n;
        mlp_backward_cached(spec, params.as_slice(), &cache, &[err / n], &mut grad)?;
    }
    Ok((loss, ParamVector::new(grad)?))
}

/// Standardizes to zero mean and unit population standard deviation; when the
/// standard deviation is below `1e-8` only the mean is removed.
pub fn normalize_advantages(adv: &[f64]) -> Vec<f64> {
    if adv.is_empty() {
        return Vec::new();
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let std = (adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
    if std < 1e-8 {
        adv.iter().map(|a| a - mean).collect()
    } else {
        adv.iter().map(|a| (a - mean) / std).collect()
    }
}
