//! Argument definitions and subcommand implementations.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use p3o_core::analysis::finite_horizon_optimal_return;
use p3o_core::envs::EnvSpec;
use p3o_core::trainer::{evaluate_policy, run_training, steps_to_threshold, stream_rng, Algorithm, NetworkPolicy, RunConfig};

use crate::config::{parse_config, render_config, ConfigError};
use crate::diag;
use crate::output::{write_metrics_csv, ParamsFile, RunSummary, SeedSummary};
use crate::plot;

#[derive(Debug, Parser)]
#[command(name = "p3o", version, about = "Policy-on policy-off policy optimization experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one run per seed and write metrics, parameters, and a summary.
    Train(TrainArgs),
    /// Evaluate saved parameters with stochastic episodes.
    Eval(EvalArgs),
    /// Run a diagnostic and emit its CSV.
    #[command(subcommand)]
    Diag(DiagCommand),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(short, long)]
    pub config: PathBuf,
    #[arg(short, long)]
    pub output: PathBuf,
    /// Train only this seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Use plain bootstrapped returns instead of GAE.
    #[arg(long)]
    pub no_gae: bool,
    /// Fix the KL coefficient (switches p3o to fixed_coeff_p3o).
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Fix the clipping threshold (switches p3o to fixed_coeff_p3o).
    #[arg(long)]
    pub c: Option<f64>,
    /// Poisson mean of off-policy updates per iteration.
    #[arg(long)]
    pub m: Option<f64>,
    /// Interpolation weight (switches to ipg_fixed_nu).
    #[arg(long)]
    pub nu: Option<f64>,
    /// Also write SVG plots.
    #[arg(long)]
    pub plot: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(short, long)]
    pub config: PathBuf,
    #[arg(long)]
    pub params: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub episodes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Subcommand)]
pub enum DiagCommand {
    /// Bias-correction factor of ACER's on-policy term on a trained chain policy.
    AcerCorrection {
        /// Truncation thresholds to evaluate.
        #[arg(long = "c", default_values_t = [0.1, 1.0, 10.0])]
        thresholds: Vec<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Norms of the two bias terms on random policy pairs.
    Bias {
        #[arg(long, default_value_t = 100)]
        trials: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        batch: usize,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Visitation-gap bound on random tabular MDPs.
    Lemma1 {
        #[arg(long, default_value_t = 200)]
        trials: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Median ESS as two Gaussians drift apart.
    EssDrift {
        #[arg(long, value_delimiter = ',', default_values_t = diag::DRIFT_SEPARATIONS)]
        separations: Vec<f64>,
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Core(#[from] p3o_core::Error),
    #[error("{context}: {source}")]
    Io { context: String, source: io::Error },
    #[error("{0}")]
    Failed(String),
}

fn io_context(context: impl Into<String>) -> impl FnOnce(io::Error) -> CliError {
    let context = context.into();
    move |source| CliError::Io { context, source }
}

/// Applies command-line overrides and revalidates.
pub fn apply_overrides(mut config: RunConfig, args: &TrainArgs) -> Result<RunConfig, CliError> {
    if let Some(seed) = args.seed {
        config.seeds = vec![seed];
    }
    if args.no_gae {
        config.gae = false;
    }
    if let Some(m) = args.m {
        config.m = m;
    }
    if args.lambda.is_some() || args.c.is_some() {
        if config.algorithm == Algorithm::P3o {
            config.algorithm = Algorithm::FixedCoeffP3o;
        }
        config.fixed_lambda = args.lambda.or(config.fixed_lambda);
        config.fixed_c = args.c.or(config.fixed_c);
    }
    if let Some(nu) = args.nu {
        config.algorithm = Algorithm::IpgFixedNu;
        config.nu = Some(nu);
    }
    config.validate().map_err(|e| ConfigError::Invariant(e.to_string()))?;
    Ok(config)
}

fn optimal_return(env: &EnvSpec, gamma: f64) -> Result<Option<f64>, CliError> {
    if matches!(env, EnvSpec::PointMass { .. }) {
        return Ok(None);
    }
    let built = env.build()?;
    Ok(Some(finite_horizon_optimal_return(&built.export_tabular(gamma)?, built.horizon())))
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> io::Result<()>) -> Result<(), CliError> {
    let file = File::create(path).map_err(io_context(format!("create {}", path.display())))?;
    let mut writer = BufWriter::new(file);
    f(&mut writer)
        .and_then(|_| writer.flush())
        .map_err(io_context(format!("write {}", path.display())))
}

pub fn cmd_train(args: &TrainArgs) -> Result<RunSummary, CliError> {
    let config = apply_overrides(parse_config(&args.config)?, args)?;
    fs::create_dir_all(&args.output).map_err(io_context(format!("create {}", args.output.display())))?;
    write_file(&args.output.join("config.json"), |w| w.write_all(render_config(&config).as_bytes()))?;
    let optimal = optimal_return(&config.env, config.gamma)?;
    let threshold = optimal.map(|o| 0.95 * o);

    let mut seeds = Vec::new();
    for &seed in &config.seeds {
        let run = run_training(&config, seed)?;
        write_file(&args.output.join(format!("seed_{seed}.csv")), |w| write_metrics_csv(&run.records, w))?;
        let params = ParamsFile::new(
            seed,
            run.learner.policy_spec.clone(),
            run.learner.value_spec.clone(),
            run.learner.policy_params.clone(),
            run.learner.value_params.clone(),
        );
        write_file(&args.output.join(format!("seed_{seed}_params.json")), |w| {
            serde_json::to_writer(&mut *w, &params).map_err(io::Error::other)?;
            w.write_all(b"\n")
        })?;
        if args.plot {
            write_file(&args.output.join(format!("seed_{seed}_return.svg")), |w| {
                w.write_all(plot::return_chart(&run.records).as_bytes())
            })?;
            write_file(&args.output.join(format!("seed_{seed}_telemetry.svg")), |w| {
                w.write_all(plot::telemetry_chart(&run.records).as_bytes())
            })?;
        }
        let last = run.records.last();
        seeds.push(SeedSummary {
            seed,
            completed: run.completed(),
            error: run.error.as_ref().map(|e| e.to_string()),
            iterations: last.map_or(0, |r| r.iteration),
            env_steps: last.map_or(0, |r| r.env_steps),
            final_return_mean: last.map_or(f64::NAN, |r| r.return_mean),
            steps_to_threshold: threshold.and_then(|t| steps_to_threshold(&run.records, t)),
        });
    }
    let summary = RunSummary { optimal_return: optimal, threshold, seeds };
    write_file(&args.output.join("summary.json"), |w| {
        serde_json::to_writer_pretty(&mut *w, &summary).map_err(io::Error::other)?;
        w.write_all(b"\n")
    })?;
    if let Some(failed) = summary.seeds.iter().find(|s| !s.completed) {
        return Err(CliError::Failed(format!(
            "seed {} stopped early: {}",
            failed.seed,
            failed.error.as_deref().unwrap_or("unknown error")
        )));
    }
    Ok(summary)
}

pub fn read_params(path: &Path) -> Result<ParamsFile, CliError> {
    let text = fs::read_to_string(path).map_err(io_context(format!("read {}", path.display())))?;
    let params: ParamsFile = serde_json::from_str(&text)
        .map_err(|e| CliError::Failed(format!("params file {}: {e}", path.display())))?;
    params.check().map_err(CliError::Failed)?;
    Ok(params)
}

pub fn cmd_eval(args: &EvalArgs) -> Result<(f64, f64), CliError> {
    let config = parse_config(&args.config)?;
    let params = read_params(&args.params)?;
    let env = config.env.build()?;
    if params.policy_spec != config.policy_spec(&env)? {
        return Err(CliError::Failed("params do not match the configured environment and network".into()));
    }
    let policy = NetworkPolicy { spec: &params.policy_spec, params: &params.policy_params };
    Ok(evaluate_policy(&env, &policy, args.episodes, &mut stream_rng(args.seed, 0))?)
}

fn emit(output: &Option<PathBuf>, f: impl FnOnce(&mut dyn Write) -> io::Result<()>) -> Result<(), CliError> {
    match output {
        Some(path) => write_file(path, |w| f(w)),
        None => {
            let stdout = io::stdout();
            let mut lock = stdout.lock();
            f(&mut lock).map_err(io_context("write stdout"))
        }
    }
}

pub fn cmd_diag(command: &DiagCommand) -> Result<(), CliError> {
    match command {
        DiagCommand::AcerCorrection { thresholds, seed, output } => {
            let points = diag::acer_points(&diag::acer_fixture_config(), *seed)?;
            let rows = diag::acer_rows(&points, thresholds)?;
            emit(output, |w| diag::write_acer_csv(&rows, w))
        }
        DiagCommand::Bias { trials, seed, batch, output } => {
            let rows = diag::bias_trials(*trials, *seed, *batch)?;
            emit(output, |w| diag::write_bias_csv(&rows, w))
        }
        DiagCommand::Lemma1 { trials, seed, output } => {
            let rows = diag::lemma1_trials(*trials, *seed)?;
            emit(output, |w| diag::write_lemma1_csv(&rows, w))?;
            match rows.iter().filter(|t| !t.report.holds).count() {
                0 => Ok(()),
                n => Err(CliError::Failed(format!("bound violated in {n} of {} trials", rows.len()))),
            }
        }
        DiagCommand::EssDrift { separations, samples, seeds, output } => {
            let rows = diag::ess_drift(separations, *samples, *seeds)?;
            emit(output, |w| diag::write_drift_csv(&rows, w))?;
            let mut sorted = rows.clone();
            sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
            if diag::is_non_increasing(&sorted) {
                Ok(())
            } else {
                Err(CliError::Failed("median ESS increased with separation".into()))
            }
        }
    }
}

/// Runs a parsed command, printing results to stdout.
pub fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Train(args) => {
            let summary = cmd_train(args)?;
            for s in &summary.seeds {
                println!(
                    "seed {}: {} env steps, final return {:.4}",
                    s.seed, s.env_steps, s.final_return_mean
                );
            }
            Ok(())
        }
        Command::Eval(args) => {
            let (mean, std) = cmd_eval(args)?;
            println!("mean_return {mean}\nstd_return {std}");
            Ok(())
        }
        Command::Diag(command) => cmd_diag(command),
    }
}
