//! Acceptance suite: one PASS/FAIL line per criterion, every tolerance pinned here.
//!
//! Criteria listed in `KNOWN_UNATTAINABLE` still run and still print FAIL when
//! they fail, but do not change the exit status. Each has a written analysis
//! in the project's decision notes.

use std::path::Path;
use std::time::{Duration, Instant};

use p3o_cli::commands::{cmd_train, TrainArgs};
use p3o_cli::config::{parse_config_str, render_config};
use p3o_cli::diag;
use p3o_core::advantage::value_loss_and_grad;
use p3o_core::analysis::{finite_horizon_optimal_return, random_lemma1_trial, LEMMA1_GAMMAS};
use p3o_core::envs::EnvSpec;
use p3o_core::gradient::{
    acer_correction_diagnostic, batch_ratios, bias_decomposition, kl_penalty_gradient, off_policy_gradient,
    on_policy_gradient, poisson, Phase,
};
use p3o_core::numcore::{finite_difference_gradient, max_relative_error, mlp_backward, mlp_forward, GRADIENT_CHECK_FLOOR};
use p3o_core::policy::{entropy, grad_kl, grad_log_prob, log_prob, policy_distribution, sample, PolicySnapshot};
use p3o_core::trainer::{run_training, steps_to_threshold, stream_rng, Algorithm, MetricsRecord, RunConfig};
use p3o_core::weighting::{adaptive_coefficients, ess, AdaptiveCoefficients};
use p3o_core::{Activation, KlDirection, MlpSpec, ParamVector, PolicySpec, ReplayBuffer, Transition, WeightVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const KNOWN_UNATTAINABLE: &[u32] = &[8];

// Criterion 1
const FD_STEP: f64 = 1e-6;
const FD_REL_TOL: f64 = 1e-5;
const FD_INSTANCES: usize = 100;
const FD_BUDGET: Duration = Duration::from_secs(60);
// Criterion 2
const ESS_TOL: f64 = 1e-12;
// Criterion 3
const COEFF_SUM_TOL: f64 = 1e-15;
const IDENTICAL_POLICY_TOL: f64 = 1e-10;
// Criterion 4
const LEMMA1_TRIALS: u64 = 200;
const LEMMA1_BUDGET: Duration = Duration::from_secs(30);
// Criterion 5
const ACER_HIGH_C: f64 = 10.0;
const ACER_HIGH_C_MAX: f64 = 0.01;
const ACER_LOW_C: f64 = 0.1;
const ACER_LOW_C_MIN: f64 = 0.5;
const ACER_MAX_AGE: u32 = 50;
// Criterion 6
const BIAS_TINY_ESS: f64 = 1e-12;
const BIAS_NORM_TOL: f64 = 1e-8;
// Criteria 7 and 8
const TREND_SEEDS: u64 = 10;
const THRESHOLD_FRACTION: f64 = 0.95;
const TREND_BUDGET: Duration = Duration::from_secs(15 * 60);
// Criterion 9
const POISSON_MEAN: f64 = 2.0;
const POISSON_DRAWS: usize = 10_000;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome { passed, detail: detail.into() }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Runs one training per seed on its own thread.
fn train_seeds(config: &RunConfig, seeds: u64) -> Vec<Vec<MetricsRecord>> {
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..seeds)
            .map(|seed| scope.spawn(move || run_training(config, seed).expect("valid config")))
            .collect();
        handles
            .into_iter()
            .map(|h| {
                let run = h.join().expect("training thread");
                assert!(run.completed(), "run stopped early: {:?}", run.error);
                run.records
            })
            .collect()
    })
}

fn random_params(n: usize, rng: &mut ChaCha8Rng) -> ParamVector {
    ParamVector::new((0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn random_state(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn behavior_batch(spec: &PolicySpec, behavior: &ParamVector, n: usize, rng: &mut ChaCha8Rng) -> Vec<Transition> {
    (0..n)
        .map(|_| {
            let state = random_state(spec.obs_dim(), rng);
            let dist = policy_distribution(spec, behavior, &state).unwrap();
            let action = sample(&dist, rng);
            Transition {
                next_state: state.clone(),
                state,
                behavior: PolicySnapshot::record(dist, &action).unwrap(),
                action,
                reward: 0.0,
                terminal: false,
                truncated: false,
                collected_advantage: 0.0,
                collected_return: 0.0,
            }
        })
        .collect()
}

fn check_gradient(worst: &mut f64, analytic: &ParamVector, params: &ParamVector, f: impl FnMut(&ParamVector) -> f64) {
    let numeric = finite_difference_gradient(params, FD_STEP, f);
    *worst = worst.max(max_relative_error(analytic, &numeric, GRADIENT_CHECK_FLOOR));
}

fn criterion_1() -> Outcome {
    let started = Instant::now();
    let mut rng = stream_rng(1, 0);
    let specs = [
        PolicySpec::categorical(3, &[4], 3).unwrap(),
        PolicySpec::gaussian(3, &[4], 2).unwrap(),
    ];
    let value_spec = MlpSpec::new(vec![3, 4, 1], Activation::Tanh).unwrap();
    let relu_spec = MlpSpec::new(vec![3, 5, 2], Activation::Relu).unwrap();
    let mut worst = [0.0f64; 7];
    for i in 0..FD_INSTANCES {
        let spec = &specs[i % specs.len()];
        let params = random_params(spec.param_count(), &mut rng);
        let other = random_params(spec.param_count(), &mut rng);
        let state = random_state(3, &mut rng);

        let net = if i % 2 == 0 { &spec.network } else { &relu_spec };
        let net_params = random_params(net.param_count(), &mut rng);
        let out_grad = random_state(net.output_dim(), &mut rng);
        let g = mlp_backward(net, &net_params, &state, &out_grad).unwrap();
        check_gradient(&mut worst[0], &g, &net_params, |p| {
            mlp_forward(net, p, &state).unwrap().iter().zip(&out_grad).map(|(a, b)| a * b).sum()
        });

        let action = sample(&policy_distribution(spec, &params, &state).unwrap(), &mut rng);
        let g = grad_log_prob(spec, &params, &state, &action).unwrap();
        check_gradient(&mut worst[1], &g, &params, |p| {
            log_prob(&policy_distribution(spec, p, &state).unwrap(), &action).unwrap()
        });

        let behavior = policy_distribution(spec, &other, &state).unwrap();
        for direction in [KlDirection::BehaviorToTarget, KlDirection::TargetToBehavior] {
            let g = grad_kl(spec, &params, &state, &behavior, direction).unwrap();
            check_gradient(&mut worst[2], &g, &params, |p| {
                direction.kl(&behavior, &policy_distribution(spec, p, &state).unwrap()).unwrap()
            });
        }

        let vparams = random_params(value_spec.param_count(), &mut rng);
        let states: Vec<Vec<f64>> = (0..6).map(|_| random_state(3, &mut rng)).collect();
        let targets: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
        let (_, g) = value_loss_and_grad(&value_spec, &vparams, &states, &targets).unwrap();
        check_gradient(&mut worst[3], &g, &vparams, |p| {
            let sq: f64 = states
                .iter()
                .zip(&targets)
                .map(|(s, t)| (mlp_forward(&value_spec, p, s).unwrap()[0] - t).powi(2))
                .sum();
            0.5 * sq / states.len() as f64
        });

        // Surrogates for the three update terms.
        let batch = behavior_batch(spec, &other, 8, &mut rng);
        let refs: Vec<&Transition> = batch.iter().collect();
        let adv: Vec<f64> = (0..batch.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = batch.len() as f64;
        let alpha = 0.01;
        let g = on_policy_gradient(spec, &params, &refs, &adv, alpha).unwrap();
        check_gradient(&mut worst[4], &g.grad, &params, |p| {
            batch
                .iter()
                .zip(&adv)
                .map(|(t, a)| {
                    let d = policy_distribution(spec, p, &t.state).unwrap();
                    a * log_prob(&d, &t.action).unwrap() + alpha * entropy(&d)
                })
                .sum::<f64>()
                / n
        });

        let (ratios, _) = batch_ratios(spec, &params, &refs).unwrap();
        let coeffs = adaptive_coefficients(&ratios);
        let fixed: Vec<f64> = ratios.as_slice().iter().map(|r| r.min(coeffs.c)).collect();
        let g = off_policy_gradient(spec, &params, &refs, &adv, &coeffs).unwrap();
        check_gradient(&mut worst[5], &g.grad, &params, |p| {
            batch
                .iter()
                .zip(&adv)
                .zip(&fixed)
                .map(|((t, a), w)| w * a * log_prob(&policy_distribution(spec, p, &t.state).unwrap(), &t.action).unwrap())
                .sum::<f64>()
                / n
        });

        let g = kl_penalty_gradient(spec, &params, &refs, coeffs.lambda, KlDirection::BehaviorToTarget).unwrap();
        check_gradient(&mut worst[6], &g.grad, &params, |p| {
            -coeffs.lambda
                * batch
                    .iter()
                    .map(|t| {
                        KlDirection::BehaviorToTarget
                            .kl(&t.behavior.dist, &policy_distribution(spec, p, &t.state).unwrap())
                            .unwrap()
                    })
                    .sum::<f64>()
                / n
        });
    }
    let elapsed = started.elapsed();
    let max = worst.iter().cloned().fold(0.0, f64::max);
    outcome(
        max < FD_REL_TOL && elapsed < FD_BUDGET,
        format!(
            "{FD_INSTANCES} instances per operation; worst relative error mlp {:.1e}, log-prob {:.1e}, kl {:.1e}, value {:.1e}, on-policy {:.1e}, off-policy {:.1e}, kl-penalty {:.1e} (tol {FD_REL_TOL:.0e}); {:.1}s",
            worst[0], worst[1], worst[2], worst[3], worst[4], worst[5], worst[6],
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_2() -> Outcome {
    let mut rng = stream_rng(2, 0);
    let mut ok = true;
    let mut worst_scale = 0.0f64;
    for _ in 0..1_000 {
        let n = rng.random_range(1..64);
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(-8.0f64..8.0).exp()).collect();
        let e = ess(&WeightVector::new(w.clone()).unwrap());
        ok &= e >= 1.0 / n as f64 && e <= 1.0;
        let k = rng.random_range(-20.0f64..20.0).exp();
        let scaled = ess(&WeightVector::new(w.iter().map(|x| x * k).collect()).unwrap());
        worst_scale = worst_scale.max((scaled - e).abs());
    }
    let equal = ess(&WeightVector::new(vec![0.37; 17]).unwrap());
    let hand = ess(&WeightVector::new(vec![1.0, 3.0]).unwrap());
    let passed = ok && worst_scale < ESS_TOL && (equal - 1.0).abs() < ESS_TOL && (hand - 0.8).abs() < ESS_TOL;
    outcome(
        passed,
        format!("bounds held: {ok}; scale drift {worst_scale:.1e}; equal weights {equal}; [1,3] -> {hand}"),
    )
}

fn chain_trend_config() -> RunConfig {
    RunConfig {
        env: EnvSpec::chain(5),
        total_steps: 30_000,
        burn_in: 2_000,
        buffer_capacity: 10_000,
        ..RunConfig::default()
    }
}

fn grid_trend_config() -> RunConfig {
    RunConfig {
        env: EnvSpec::gridworld(4, 4),
        total_steps: 40_000,
        ..chain_trend_config()
    }
}

fn criterion_3() -> Outcome {
    let run = run_training(&chain_trend_config(), 0).unwrap();
    let off: Vec<_> = run.steps.iter().filter(|(_, s)| s.phase == Phase::OffPolicy).collect();
    let worst_sum = off
        .iter()
        .map(|(_, s)| (s.telemetry.lambda + s.telemetry.c - 1.0).abs())
        .fold(0.0, f64::max);

    let mut rng = stream_rng(3, 0);
    let spec = PolicySpec::categorical(3, &[4], 3).unwrap();
    let params = random_params(spec.param_count(), &mut rng);
    let batch = behavior_batch(&spec, &params, 32, &mut rng);
    let refs: Vec<&Transition> = batch.iter().collect();
    let adv: Vec<f64> = (0..batch.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let (ratios, _) = batch_ratios(&spec, &params, &refs).unwrap();
    let coeffs = adaptive_coefficients(&ratios);
    let off_grad = off_policy_gradient(&spec, &params, &refs, &adv, &coeffs).unwrap();
    // Unclipped policy gradient, mean(A grad log pi), summed independently.
    let mut reference = ParamVector::zeros(spec.param_count());
    for (t, a) in batch.iter().zip(&adv) {
        reference.add_scaled(&grad_log_prob(&spec, &params, &t.state, &t.action).unwrap(), a / batch.len() as f64);
    }
    let mut diff = off_grad.grad.clone();
    diff.add_scaled(&reference, -1.0);
    let max_diff = diff.as_slice().iter().map(|v| v.abs()).fold(0.0, f64::max);
    let passed = !off.is_empty()
        && worst_sum <= COEFF_SUM_TOL
        && coeffs.lambda == 0.0
        && coeffs.c == 1.0
        && max_diff < IDENTICAL_POLICY_TOL;
    outcome(
        passed,
        format!(
            "{} off-policy steps, max |lambda + c - 1| = {worst_sum:.1e}; identical policies give lambda {}, c {}, max deviation from unclipped gradient {max_diff:.1e}",
            off.len(),
            coeffs.lambda,
            coeffs.c
        ),
    )
}

fn criterion_4() -> Outcome {
    let started = Instant::now();
    let trials: Vec<_> = (0..LEMMA1_TRIALS).map(|s| random_lemma1_trial(s).unwrap()).collect();
    let elapsed = started.elapsed();
    let violations = trials.iter().filter(|t| !t.report.holds).count();
    let in_scope = trials
        .iter()
        .all(|t| t.n_states <= 10 && t.n_actions <= 4 && LEMMA1_GAMMAS.contains(&t.gamma));
    let tightest = trials
        .iter()
        .map(|t| t.report.lhs / t.report.rhs.max(f64::MIN_POSITIVE))
        .fold(0.0, f64::max);
    outcome(
        violations == 0 && in_scope && elapsed < LEMMA1_BUDGET,
        format!(
            "{LEMMA1_TRIALS} random MDPs, {violations} violations, largest lhs/rhs {tightest:.3}; {:.2}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_5() -> Outcome {
    let config = diag::acer_fixture_config();
    let run = run_training(&config, 0).unwrap();
    let age = run.records.last().map_or(0, |r| r.off_policy_updates + 1);
    let points = diag::acer_points(&config, 0).unwrap();
    let high = acer_correction_diagnostic(&points, ACER_HIGH_C).unwrap();
    let low = acer_correction_diagnostic(&points, ACER_LOW_C).unwrap();
    let final_return = run.records.last().map_or(f64::NAN, |r| r.return_mean);
    outcome(
        high.nonzero_fraction < ACER_HIGH_C_MAX && low.nonzero_fraction > ACER_LOW_C_MIN && age <= ACER_MAX_AGE,
        format!(
            "trained chain (trailing return {final_return:.3}), snapshots {age} updates old, {} points; nonzero fraction c={ACER_HIGH_C}: {}, c={ACER_LOW_C}: {}",
            points.len(),
            high.nonzero_fraction,
            low.nonzero_fraction
        ),
    )
}

fn criterion_6() -> Outcome {
    let mut rng = stream_rng(6, 0);
    let spec = PolicySpec::categorical(3, &[], 4).unwrap();
    let params = random_params(spec.param_count(), &mut rng);
    let batch = behavior_batch(&spec, &params, 32, &mut rng);
    let refs: Vec<&Transition> = batch.iter().collect();
    let adv: Vec<f64> = (0..batch.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let (ratios, _) = batch_ratios(&spec, &params, &refs).unwrap();
    let at_one = bias_decomposition(&spec, &params, &refs, &adv, &adaptive_coefficients(&ratios)).unwrap();

    // Uniform target (zero parameters) against a far-away behavior.
    let uniform = ParamVector::zeros(spec.param_count());
    let far = ParamVector::new(params.as_slice().iter().map(|v| 6.0 * v).collect()).unwrap();
    let batch = behavior_batch(&spec, &far, 32, &mut rng);
    let refs: Vec<&Transition> = batch.iter().collect();
    let tiny = AdaptiveCoefficients::from_ess(BIAS_TINY_ESS).unwrap();
    let at_zero = bias_decomposition(&spec, &uniform, &refs, &adv, &tiny).unwrap();
    let passed = at_one.entropy_like_coefficient == 0.0
        && at_one.entropy_like_term_norm == 0.0
        && at_zero.biased_term_norm < BIAS_NORM_TOL
        && at_zero.entropy_like_term_norm < BIAS_NORM_TOL;
    outcome(
        passed,
        format!(
            "ESS=1: (1-ESS) term norm {}; ESS={BIAS_TINY_ESS:.0e} with uniform target: norms {:.1e} and {:.1e}",
            at_one.entropy_like_term_norm, at_zero.biased_term_norm, at_zero.entropy_like_term_norm
        ),
    )
}

fn threshold_for(config: &RunConfig) -> f64 {
    let env = config.env.build().unwrap();
    THRESHOLD_FRACTION * finite_horizon_optimal_return(&env.export_tabular(config.gamma).unwrap(), env.horizon())
}

/// Median steps to threshold (unreached seeds count as infinite) and hits.
fn threshold_stats(runs: &[Vec<MetricsRecord>], threshold: f64) -> (f64, usize) {
    let mut steps: Vec<f64> = runs
        .iter()
        .map(|r| steps_to_threshold(r, threshold).map_or(f64::INFINITY, |s| s as f64))
        .collect();
    let hits = steps.iter().filter(|s| s.is_finite()).count();
    (median(&mut steps), hits)
}

fn criterion_7() -> Outcome {
    let started = Instant::now();
    let mut passed = true;
    let mut parts = Vec::new();
    for (name, base) in [("5-chain", chain_trend_config()), ("4x4 grid", grid_trend_config())] {
        let threshold = threshold_for(&base);
        let p3o = train_seeds(&base, TREND_SEEDS);
        let on = train_seeds(&RunConfig { algorithm: Algorithm::OnPolicyOnly, ..base.clone() }, TREND_SEEDS);
        let (p_med, p_hits) = threshold_stats(&p3o, threshold);
        let (o_med, o_hits) = threshold_stats(&on, threshold);
        passed &= p_med <= o_med && p_hits >= o_hits;
        parts.push(format!(
            "{name}: median steps p3o {p_med} ({p_hits}/{TREND_SEEDS}) vs on-policy {o_med} ({o_hits}/{TREND_SEEDS})"
        ));
    }
    let elapsed = started.elapsed();
    outcome(
        passed && elapsed < TREND_BUDGET,
        format!("{}; {:.0}s", parts.join("; "), elapsed.as_secs_f64()),
    )
}

fn criterion_8() -> Outcome {
    let base = RunConfig { total_steps: 8_000, ..chain_trend_config() };
    let final_returns = |config: &RunConfig| -> Vec<f64> {
        train_seeds(config, TREND_SEEDS)
            .iter()
            .map(|r| r.last().map_or(f64::NAN, |m| m.return_mean))
            .collect()
    };
    let adaptive = median(&mut final_returns(&base));
    let fixed = median(&mut final_returns(&RunConfig {
        algorithm: Algorithm::FixedCoeffP3o,
        fixed_lambda: Some(0.0),
        ..base.clone()
    }));
    outcome(
        fixed < adaptive,
        format!("median trailing return at {} steps: fixed lambda=0 {fixed:.4}, adaptive {adaptive:.4}", base.total_steps),
    )
}

fn criterion_9() -> Outcome {
    let mut rng = stream_rng(9, 0);
    let draws: Vec<u32> = (0..POISSON_DRAWS).map(|_| poisson(POISSON_MEAN, &mut rng)).collect();
    let direct_mean = draws.iter().map(|&k| k as f64).sum::<f64>() / POISSON_DRAWS as f64;
    let sigma = (POISSON_MEAN / POISSON_DRAWS as f64).sqrt();

    // 10^4 training iterations with a warm buffer from the start.
    let tiny = RunConfig {
        env: EnvSpec::chain(5),
        num_envs: 1,
        rollout_steps: 4,
        total_steps: 4 * POISSON_DRAWS as u64,
        burn_in: 0,
        buffer_capacity: 400,
        minibatch_segments: 1,
        hidden_sizes: vec![4],
        m: POISSON_MEAN,
        ..RunConfig::default()
    };
    let run = run_training(&tiny, 0).unwrap();
    let counts: Vec<f64> = run.records.iter().map(|r| r.off_policy_updates as f64).collect();
    let loop_mean = counts.iter().sum::<f64>() / counts.len() as f64;
    let poisson_ok = counts.len() == POISSON_DRAWS
        && (direct_mean - POISSON_MEAN).abs() < 3.0 * sigma
        && (loop_mean - POISSON_MEAN).abs() < 3.0 * sigma;

    // K*T = 16 transitions per iteration; the gate opens at the iteration
    // that brings the total to the burn-in count.
    let gate = |burn_in: u64| -> Option<u64> {
        let config = RunConfig {
            num_envs: 2,
            rollout_steps: 8,
            total_steps: 96,
            burn_in,
            buffer_capacity: 1_000,
            m: 20.0,
            hidden_sizes: vec![4],
            ..RunConfig::default()
        };
        let run = run_training(&config, 0).unwrap();
        run.steps.iter().find(|(_, s)| s.phase == Phase::OffPolicy).map(|(i, _)| *i)
    };
    let mut buffer = ReplayBuffer::new(100).unwrap();
    let mut buffer_gate = true;
    for k in 1..=48u64 {
        let t = diag_transition();
        buffer.append(p3o_core::Trajectory(vec![t])).unwrap();
        buffer_gate &= buffer.is_warm(48) == (k >= 48);
    }
    let (open_48, open_49) = (gate(48), gate(49));
    let gate_ok = buffer_gate && open_48 == Some(3) && open_49 == Some(4);

    let bits = |records: &[MetricsRecord]| -> Vec<u64> {
        records
            .iter()
            .flat_map(|r| {
                [r.return_mean, r.ess, r.lambda, r.c, r.kl_mean, r.entropy_norm, r.clip_fraction]
                    .map(f64::to_bits)
                    .into_iter()
                    .chain([r.env_steps, r.iteration])
            })
            .collect()
    };
    let base = RunConfig { hidden_sizes: vec![8], ..chain_trend_config() };
    let base = RunConfig { total_steps: 6_000, ..base };
    let zero_m = run_training(&RunConfig { m: 0.0, ..base.clone() }, 4).unwrap();
    let on = run_training(&RunConfig { algorithm: Algorithm::OnPolicyOnly, ..base }, 4).unwrap();
    let identical = zero_m.learner.policy_params == on.learner.policy_params
        && zero_m.learner.value_params == on.learner.value_params
        && bits(&zero_m.records) == bits(&on.records);

    outcome(
        poisson_ok && gate_ok && identical,
        format!(
            "Poisson mean direct {direct_mean:.4}, per iteration {loop_mean:.4} over {} iterations (3 sigma = {:.4}); gate opens at iteration {open_48:?} for burn-in 48 and {open_49:?} for 49; m=0 identical to on-policy: {identical}",
            counts.len(),
            3.0 * sigma
        ),
    )
}

fn diag_transition() -> Transition {
    let dist = p3o_core::ActionDistribution::categorical(vec![0.5, 0.5]).unwrap();
    let action = p3o_core::Action::Discrete(0);
    Transition {
        state: vec![0.0],
        next_state: vec![0.0],
        behavior: PolicySnapshot::record(dist, &action).unwrap(),
        action,
        reward: 0.0,
        terminal: false,
        truncated: false,
        collected_advantage: 0.0,
        collected_return: 0.0,
    }
}

fn train_to(dir: &Path, config_path: &Path) -> Vec<u8> {
    let args = TrainArgs {
        config: config_path.to_path_buf(),
        output: dir.to_path_buf(),
        seed: None,
        no_gae: false,
        lambda: None,
        c: None,
        m: None,
        nu: None,
        plot: false,
    };
    cmd_train(&args).unwrap();
    let mut bytes = Vec::new();
    for seed in [0, 1] {
        bytes.extend(std::fs::read(dir.join(format!("seed_{seed}.csv"))).unwrap());
    }
    bytes
}

fn criterion_10() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let config = RunConfig {
        env: EnvSpec::chain(5),
        total_steps: 4_000,
        burn_in: 1_000,
        buffer_capacity: 4_000,
        seeds: vec![0, 1],
        gamma: 0.1 + 0.2 + 0.6,
        fixed_lambda: Some(1.0 / 3.0),
        algorithm: Algorithm::FixedCoeffP3o,
        ..RunConfig::default()
    };
    let text = render_config(&config);
    let config_path = tmp.path().join("config.json");
    std::fs::write(&config_path, &text).unwrap();
    let first = train_to(&tmp.path().join("a"), &config_path);
    let second = train_to(&tmp.path().join("b"), &config_path);
    let byte_identical = !first.is_empty() && first == second;

    let parsed = parse_config_str(&text).unwrap();
    let round_trip = parsed == config && render_config(&parsed) == text;
    let rejected = parse_config_str(r#"{"gamma": 0.9, "burnin": 10}"#).is_err()
        && parse_config_str(r#"{"env": {"kind": "chain", "size": 5}}"#).is_err();
    outcome(
        byte_identical && round_trip && rejected,
        format!(
            "CSV reruns byte-identical: {byte_identical} ({} bytes); config round-trip lossless: {round_trip}; unknown keys rejected: {rejected}",
            first.len()
        ),
    )
}

fn main() {
    // Seeds already run in parallel in the trend criteria.
    std::env::set_var(p3o_core::trainer::THREADS_ENV_VAR, "1");
    let criteria: [(u32, &str, fn() -> Outcome); 10] = [
        (1, "gradient correctness", criterion_1),
        (2, "ESS contract", criterion_2),
        (3, "adaptive rule", criterion_3),
        (4, "visitation-gap bound", criterion_4),
        (5, "ACER correction factor", criterion_5),
        (6, "bias decomposition limits", criterion_6),
        (7, "sample-efficiency trend", criterion_7),
        (8, "fixed lambda=0 vs adaptive", criterion_8),
        (9, "update-loop mechanics", criterion_9),
        (10, "determinism and I/O", criterion_10),
    ];
    let filter: Option<u32> = std::env::args().skip(1).find_map(|a| a.parse().ok());
    let mut unexpected = 0;
    for (id, name, check) in criteria {
        if filter.is_some_and(|f| f != id) {
            continue;
        }
        let started = Instant::now();
        let result = check();
        let status = match (result.passed, KNOWN_UNATTAINABLE.contains(&id)) {
            (true, _) => "PASS",
            (false, true) => "FAIL (known)",
            (false, false) => {
                unexpected += 1;
                "FAIL"
            }
        };
        println!(
            "criterion {id:>2} {status}: {name}: {} [{:.1}s]",
            result.detail,
            started.elapsed().as_secs_f64()
        );
    }
    if unexpected > 0 {
        eprintln!("{unexpected} criteria failed");
        std::process::exit(1);
    }
}
