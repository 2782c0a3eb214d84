//! Accelerated stochastic diffusion sampling with a midpoint score
//! correction, plus the DDPM and probability-flow baselines it is compared
//! against, closed-form Gaussian propagation and sweep tooling.

pub mod analytic;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod rng;
pub mod samplers;
pub mod schedule;
pub mod score;
pub mod targets;

pub use analytic::{analytic_report, gaussian_kl, propagate, AnalyticReport, GaussianLaw};
pub use error::{Error, Result};
pub use harness::{fit_slope, run_sweep, ExperimentConfig, SlopeFit, SweepReport, SweepRow};
pub use rng::RandomStream;
pub use samplers::{run_batch, SamplerKind, TrajectoryBatch};
pub use schedule::{Schedule, ScheduleParams};
pub use score::{ScoreConfig, ScoreFunction, ScoreMode, ScoreModel};
pub use targets::{GaussianMixture, MarginalLaw};
