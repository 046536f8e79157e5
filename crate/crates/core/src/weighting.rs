//! Importance ratios, truncation, and the normalized effective sample size
//! that drives the adaptive clipping threshold and KL coefficient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ratios above this value saturate.
pub const RATIO_CAP: f64 = 1e6;
/// Ratios never drop below this value, so weights stay strictly positive.
pub const RATIO_FLOOR: f64 = 1e-12;

/// An importance ratio and whether it hit [`RATIO_CAP`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IsRatio {
    pub value: f64,
    pub saturated: bool,
}

/// `exp(target_logprob - behavior_logprob)`, saturated to
/// `[RATIO_FLOOR, RATIO_CAP]`.
pub fn is_ratio(target_logprob: f64, behavior_logprob: f64) -> Result<IsRatio> {
    if !target_logprob.is_finite() && target_logprob != f64::NEG_INFINITY {
        return Err(Error::Numeric(format!("target log-prob {target_logprob}")));
    }
    if !behavior_logprob.is_finite() {
        return Err(Error::Numeric(format!("behavior log-prob {behavior_logprob}")));
    }
    let raw = (target_logprob - behavior_logprob).exp();
    if raw > RATIO_CAP {
        Ok(IsRatio {
            value: RATIO_CAP,
            saturated: true,
        })
    } else {
        Ok(IsRatio {
            value: raw.max(RATIO_FLOOR),
            saturated: false,
        })
    }
}

/// `min(rho, c)`.
pub fn clip_ratio(rho: f64, c: f64) -> f64 {
    rho.min(c)
}

/// Strictly positive, finite per-transition weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Input("empty weight vector".into()));
        }
        if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
            return Err(Error::Input(format!("weights must be finite and positive, got {w}")));
        }
        Ok(Self(weights))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Normalized effective sample size `(sum w)^2 / (N * sum w^2)`, in `[1/N, 1]`.
///
/// Weights are rescaled by their maximum first so the squares cannot overflow;
/// the statistic is scale invariant.
pub fn ess(weights: &WeightVector) -> f64 {
    let w = weights.as_slice();
    let max = w.iter().cloned().fold(0.0, f64::max);
    let (sum, sum_sq) = w.iter().fold((0.0, 0.0), |(s, q), &x| {
        let y = x / max;
        (s + y, q + y * y)
    });
    let n = w.len() as f64;
    (sum * sum / (n * sum_sq)).clamp(1.0 / n, 1.0)
}

/// Clipping threshold and KL coefficient for one mini-batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveCoefficients {
    pub lambda: f64,
    pub c: f64,
    pub ess: f64,
}

impl AdaptiveCoefficients {
    /// `lambda = 1 - ess`, `c = ess`.
    pub fn from_ess(ess: f64) -> Result<Self> {
        if !(ess > 0.0 && ess <= 1.0) {
            return Err(Error::Input(format!("ESS must lie in (0, 1], got {ess}")));
        }
        Ok(Self {
            lambda: 1.0 - ess,
            c: ess,
            ess,
        })
    }
}

pub fn adaptive_coefficients(weights: &WeightVector) -> AdaptiveCoefficients {
    AdaptiveCoefficients::from_ess(ess(weights)).expect("ess lies in [1/N, 1]")
}

/// Mean of `-ln(rho)` over the batch. For ratios of actions sampled from the
/// behavior policy this estimates `KL(behavior || target)`.
pub fn sampled_kl_telemetry(ratios: &WeightVector) -> f64 {
    let r = ratios.as_slice();
    -r.iter().map(|x| x.ln()).sum::<f64>() / r.len() as f64
}

/// ESS of `n_samples` ratios `N(x; separation, sigma) / N(x; 0, sigma)` with
/// `x` drawn from the behavior density `N(0, sigma)`.
pub fn gaussian_drift_ess<R: Rng + ?Sized>(separation: f64, sigma: f64, n_samples: usize, rng: &mut R) -> Result<f64> {
    if !(sigma > 0.0) || !separation.is_finite() || n_samples == 0 {
        return Err(Error::Input("need sigma > 0, finite separation, and samples".into()));
    }
    let behavior = Normal::new(0.0, sigma).map_err(|e| Error::Input(e.to_string()))?;
    let ratios = (0..n_samples)
        .map(|_| {
            let x: f64 = behavior.sample(rng);
            let log_ratio = (2.0 * x * separation - separation * separation) / (2.0 * sigma * sigma);
            is_ratio(log_ratio, 0.0).map(|r| r.value)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ess(&WeightVector::new(ratios)?))
}

/// Median of the drift ESS over `seeds` independent draws.
pub fn median_drift_ess(separation: f64, sigma: f64, n_samples: usize, seeds: u64) -> Result<f64> {
    let mut values = (0..seeds)
        .map(|seed| gaussian_drift_ess(separation, sigma, n_samples, &mut ChaCha8Rng::seed_from_u64(seed)))
        .collect::<Result<Vec<_>>>()?;
    if values.is_empty() {
        return Err(Error::Input("need at least one seed".into()));
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Ok(if n % 2 == 1 { values[n / 2] } else { 0.5 * (values[n / 2 - 1] + values[n / 2]) })
}
