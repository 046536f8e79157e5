//! Policy-on policy-off policy optimization (P3O) at desk scale.
//!
//! The crate interleaves on-policy policy-gradient steps with clipped
//! off-policy steps drawn from a replay buffer. A KL penalty keeps the target
//! policy close to the stored behavior policies, and both the clipping
//! threshold `c` and the KL coefficient `lambda` are derived from the
//! normalized effective sample size of each replay mini-batch
//! (`c = ESS`, `lambda = 1 - ESS`).
//!
//! Module map:
//!
//! * [`numcore`]: flat parameter vectors, a small MLP, and the clipped Adam step.
//! * [`policy`]: categorical and diagonal-Gaussian policies.
//! * [`weighting`]: importance ratios, clipping, ESS, adaptive coefficients.
//! * [`advantage`]: returns, TD residuals, GAE, value regression.
//! * [`replay`]: FIFO segment buffer with behavior snapshots.
//! * [`gradient`]: the three gradient terms plus bias diagnostics.
//! * [`envs`]: chain, gridworld, and point-mass environments.
//! * [`analysis`]: exact discounted visitation and the state-distribution gap bound.
//! * [`trainer`]: the training loop and baselines.

pub mod advantage;
pub mod analysis;
pub mod envs;
pub mod error;
pub mod gradient;
pub mod numcore;
pub mod policy;
pub mod replay;
pub mod trainer;
pub mod weighting;

pub use error::{Error, Result};
pub use numcore::{Activation, MlpSpec, OptimizerState, ParamVector};
pub use policy::{Action, ActionDistribution, KlDirection, PolicySnapshot, PolicySpec};
pub use replay::{ReplayBuffer, Trajectory, Transition};
pub use weighting::{AdaptiveCoefficients, WeightVector};
