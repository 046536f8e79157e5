//! Metrics CSV, parameter files, and the run summary.

use std::io::{self, Write};

use p3o_core::numcore::{MlpSpec, ParamVector};
use p3o_core::policy::PolicySpec;
use p3o_core::trainer::MetricsRecord;
use serde::{Deserialize, Serialize};

pub const CSV_HEADER: &str = "iteration,env_steps,return_mean,ess,lambda,c,kl_mean,entropy_norm,clip_fraction,wall_ms";

/// 17 significant digits.
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_metrics_csv<W: Write>(records: &[MetricsRecord], mut out: W) -> io::Result<()> {
    out.write_all(CSV_HEADER.as_bytes())?;
    out.write_all(b"\n")?;
    for r in records {
        let floats = [r.return_mean, r.ess, r.lambda, r.c, r.kl_mean, r.entropy_norm, r.clip_fraction, r.wall_ms];
        let mut line = format!("{},{}", r.iteration, r.env_steps);
        for v in floats {
            line.push(',');
            line.push_str(&format_float(v));
        }
        line.push('\n');
        out.write_all(line.as_bytes())?;
    }
    Ok(())
}

pub const PARAMS_FORMAT: &str = "p3o-params";
pub const PARAMS_VERSION: u32 = 1;

/// Trained networks as written by `train` and read by `eval`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsFile {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub policy_spec: PolicySpec,
    pub value_spec: MlpSpec,
    pub policy_params: ParamVector,
    pub value_params: ParamVector,
}

impl ParamsFile {
    pub fn new(seed: u64, policy_spec: PolicySpec, value_spec: MlpSpec, policy: ParamVector, value: ParamVector) -> Self {
        Self {
            format: PARAMS_FORMAT.into(),
            version: PARAMS_VERSION,
            seed,
            policy_spec,
            value_spec,
            policy_params: policy,
            value_params: value,
        }
    }

    pub fn check(&self) -> Result<(), String> {
        if self.format != PARAMS_FORMAT || self.version != PARAMS_VERSION {
            return Err(format!("unsupported params file {} v{}", self.format, self.version));
        }
        if self.policy_params.len() != self.policy_spec.param_count() {
            return Err("policy parameter count does not match its spec".into());
        }
        if self.value_params.len() != self.value_spec.param_count() {
            return Err("value parameter count does not match its spec".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub completed: bool,
    pub error: Option<String>,
    pub iterations: u64,
    pub env_steps: u64,
    pub final_return_mean: f64,
    pub steps_to_threshold: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    /// Optimal finite-horizon return of the environment, when it is finite-state.
    pub optimal_return: Option<f64>,
    /// 95% of `optimal_return`.
    pub threshold: Option<f64>,
    pub seeds: Vec<SeedSummary>,
}
