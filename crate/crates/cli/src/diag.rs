//! Diagnostic experiments behind `p3o diag`.

use std::io::{self, Write};

use p3o_core::analysis::{random_lemma1_trial, Lemma1Trial};
use p3o_core::envs::EnvSpec;
use p3o_core::gradient::{acer_correction_diagnostic, batch_ratios, bias_decomposition, AcerCorrection, AcerPoint};
use p3o_core::policy::{policy_distribution, sample, PolicySnapshot, PolicySpec};
use p3o_core::replay::Transition;
use p3o_core::trainer::{run_training, stream_rng, RunConfig};
use p3o_core::weighting::{adaptive_coefficients, median_drift_ess};
use p3o_core::{ParamVector, Result};
use rand::Rng;

use crate::output::format_float;

pub fn lemma1_trials(trials: u64, first_seed: u64) -> Result<Vec<Lemma1Trial>> {
    (first_seed..first_seed + trials).map(random_lemma1_trial).collect()
}

pub fn write_lemma1_csv<W: Write>(trials: &[Lemma1Trial], mut out: W) -> io::Result<()> {
    writeln!(out, "seed,gamma,lhs,rhs,holds")?;
    for t in trials {
        writeln!(
            out,
            "{},{},{},{},{}",
            t.seed,
            format_float(t.gamma),
            format_float(t.report.lhs),
            format_float(t.report.rhs),
            t.report.holds
        )?;
    }
    Ok(())
}

pub const DRIFT_SEPARATIONS: [f64; 4] = [0.0, 0.5, 1.0, 2.0];

/// `(separation, median ESS)` for unit-variance Gaussians.
pub fn ess_drift(separations: &[f64], samples: usize, seeds: u64) -> Result<Vec<(f64, f64)>> {
    separations
        .iter()
        .map(|&d| Ok((d, median_drift_ess(d, 1.0, samples, seeds)?)))
        .collect()
}

pub fn write_drift_csv<W: Write>(rows: &[(f64, f64)], mut out: W) -> io::Result<()> {
    writeln!(out, "separation,median_ess")?;
    for (d, e) in rows {
        writeln!(out, "{},{}", format_float(*d), format_float(*e))?;
    }
    Ok(())
}

pub fn is_non_increasing(rows: &[(f64, f64)]) -> bool {
    rows.windows(2).all(|w| w[1].1 <= w[0].1)
}

/// Training run used for the ACER correction diagnostic: the 5-chain,
/// trained well past the return threshold.
pub fn acer_fixture_config() -> RunConfig {
    RunConfig {
        env: EnvSpec::chain(5),
        total_steps: 30_000,
        burn_in: 2_000,
        buffer_capacity: 10_000,
        seeds: vec![0],
        ..RunConfig::default()
    }
}

/// Trains `config` and pairs the final policy with the behavior snapshots of
/// the last iteration's rollouts, which are at most `1 + xi` updates old.
pub fn acer_points(config: &RunConfig, seed: u64) -> Result<Vec<AcerPoint>> {
    let run = run_training(config, seed)?;
    if let Some(e) = run.error {
        return Err(e);
    }
    let learner = &run.learner;
    let n = run.buffer.n_segments();
    let recent = run.buffer.segments().skip(n.saturating_sub(config.num_envs));
    let mut points = Vec::new();
    for segment in recent {
        for t in segment.transitions() {
            points.push(AcerPoint {
                target: policy_distribution(&learner.policy_spec, &learner.policy_params, &t.state)?,
                behavior: t.behavior.dist.clone(),
                action: t.action.clone(),
            });
        }
    }
    Ok(points)
}

pub fn acer_rows(points: &[AcerPoint], thresholds: &[f64]) -> Result<Vec<(f64, AcerCorrection)>> {
    thresholds
        .iter()
        .map(|&c| Ok((c, acer_correction_diagnostic(points, c)?)))
        .collect()
}

pub fn write_acer_csv<W: Write>(rows: &[(f64, AcerCorrection)], mut out: W) -> io::Result<()> {
    writeln!(out, "c,nonzero_fraction,mean_factor")?;
    for (c, r) in rows {
        writeln!(out, "{},{},{}", format_float(*c), format_float(r.nonzero_fraction), format_float(r.mean_factor))?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiasRow {
    pub trial: u64,
    pub ess: f64,
    pub biased_coefficient: f64,
    pub entropy_like_coefficient: f64,
    pub biased_norm: f64,
    pub entropy_like_norm: f64,
    pub all_clipped: bool,
}

/// Random linear softmax target/behavior pairs on a 3-feature, 3-action
/// problem. Behavior parameters are the target's plus noise of a random
/// width in `[0, 3)`, so the trials cover a range of ESS values.
pub fn bias_trials(trials: u64, seed: u64, batch: usize) -> Result<Vec<BiasRow>> {
    let spec = PolicySpec::categorical(3, &[], 3)?;
    let mut rng = stream_rng(seed, 0);
    let mut rows = Vec::new();
    for trial in 0..trials {
        let spread = rng.random_range(0.0..3.0);
        let target: Vec<f64> = (0..spec.param_count()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let behavior: Vec<f64> = target.iter().map(|v| v + spread * rng.random_range(-1.0..1.0)).collect();
        let (target, behavior) = (ParamVector::new(target)?, ParamVector::new(behavior)?);
        let transitions = (0..batch)
            .map(|_| {
                let state: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
                let dist = policy_distribution(&spec, &behavior, &state)?;
                let action = sample(&dist, &mut rng);
                Ok(Transition {
                    next_state: state.clone(),
                    state,
                    behavior: PolicySnapshot::record(dist, &action)?,
                    action,
                    reward: 0.0,
                    terminal: false,
                    truncated: false,
                    collected_advantage: 0.0,
                    collected_return: 0.0,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Transition> = transitions.iter().collect();
        let advantages: Vec<f64> = (0..batch).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (ratios, _) = batch_ratios(&spec, &target, &refs)?;
        let coeffs = adaptive_coefficients(&ratios);
        let d = bias_decomposition(&spec, &target, &refs, &advantages, &coeffs)?;
        rows.push(BiasRow {
            trial,
            ess: coeffs.ess,
            biased_coefficient: d.biased_coefficient,
            entropy_like_coefficient: d.entropy_like_coefficient,
            biased_norm: d.biased_term_norm,
            entropy_like_norm: d.entropy_like_term_norm,
            all_clipped: d.all_clipped,
        });
    }
    Ok(rows)
}

pub fn write_bias_csv<W: Write>(rows: &[BiasRow], mut out: W) -> io::Result<()> {
    writeln!(out, "trial,ess,biased_coefficient,entropy_like_coefficient,biased_norm,entropy_like_norm,all_clipped")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.trial,
            format_float(r.ess),
            format_float(r.biased_coefficient),
            format_float(r.entropy_like_coefficient),
            format_float(r.biased_norm),
            format_float(r.entropy_like_norm),
            r.all_clipped
        )?;
    }
    Ok(())
}
