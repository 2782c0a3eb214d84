//! Score access for the samplers: exact mixture scores, or exact scores with
//! a controlled perturbation whose per-step L² error `ε_t` is known.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::rng::RandomStream;
use crate::schedule::Schedule;
use crate::targets::{forward_marginal, sample_forward, GaussianMixture, MarginalLaw};

/// Anything the samplers can query for `s_t(x)`, `1 ≤ t ≤ T`.
pub trait ScoreFunction: Sync {
    fn dim(&self) -> usize;
    fn horizon(&self) -> usize;
    fn score(&self, t: usize, x: &DVector<f64>) -> Result<DVector<f64>>;
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScoreMode {
    Exact,
    /// `s_t = s*_t + δ_t u_t` for fixed unit vectors `u_t`.
    Offset {
        delta: Vec<f64>,
        directions: Vec<DVector<f64>>,
    },
    /// `s_t = (1 + ρ) s*_t`.
    Relative {
        rho: f64,
    },
}

/// An affine score `s(x) = -M x + v`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineScore {
    pub precision: DMatrix<f64>,
    pub shift: DVector<f64>,
}

impl AffineScore {
    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.shift - &self.precision * x
    }
}

#[derive(Debug, Clone)]
pub struct ScoreModel {
    mode: ScoreMode,
    target: GaussianMixture,
    schedule: Schedule,
    /// `p_{X_t}` for `t = 1..=T`
    marginals: Vec<MarginalLaw>,
}

impl ScoreModel {
    fn with_mode(target: &GaussianMixture, schedule: &Schedule, mode: ScoreMode) -> Result<Self> {
        check_dim(schedule.dim(), target.dim())?;
        let marginals = (1..=schedule.horizon())
            .map(|t| forward_marginal(target, schedule, t))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            mode,
            target: target.clone(),
            schedule: schedule.clone(),
            marginals,
        })
    }

    pub fn exact(target: &GaussianMixture, schedule: &Schedule) -> Result<Self> {
        Self::with_mode(target, schedule, ScoreMode::Exact)
    }

    /// Offset perturbation along `e₁` at every step.
    pub fn offset(target: &GaussianMixture, schedule: &Schedule, delta: Vec<f64>) -> Result<Self> {
        let mut e1 = DVector::zeros(target.dim());
        e1[0] = 1.0;
        let directions = vec![e1; schedule.horizon()];
        Self::offset_with_directions(target, schedule, delta, directions)
    }

    pub fn offset_with_directions(
        target: &GaussianMixture,
        schedule: &Schedule,
        delta: Vec<f64>,
        directions: Vec<DVector<f64>>,
    ) -> Result<Self> {
        let horizon = schedule.horizon();
        if delta.len() != horizon || directions.len() != horizon {
            return Err(Error::InvalidParams(format!(
                "offset needs {horizon} magnitudes and directions, got {} and {}",
                delta.len(),
                directions.len()
            )));
        }
        if let Some(d) = delta.iter().find(|d| !(d.is_finite() && **d >= 0.0)) {
            return Err(Error::InvalidParams(format!(
                "offset magnitude {d} must be non-negative"
            )));
        }
        for u in &directions {
            check_dim(target.dim(), u.len())?;
            let norm = u.norm();
            if (norm - 1.0).abs() > 1e-9 {
                return Err(Error::NotUnitVector { norm });
            }
        }
        Self::with_mode(target, schedule, ScoreMode::Offset { delta, directions })
    }

    pub fn relative(target: &GaussianMixture, schedule: &Schedule, rho: f64) -> Result<Self> {
        if !rho.is_finite() {
            return Err(Error::InvalidParams(format!(
                "rho must be finite, got {rho}"
            )));
        }
        Self::with_mode(target, schedule, ScoreMode::Relative { rho })
    }

    pub fn mode(&self) -> &ScoreMode {
        &self.mode
    }

    pub fn target(&self) -> &GaussianMixture {
        &self.target
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    pub fn marginal(&self, t: usize) -> Result<&MarginalLaw> {
        self.check_step(t)?;
        Ok(&self.marginals[t - 1])
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if (1..=self.marginals.len()).contains(&t) {
            Ok(())
        } else {
            Err(Error::IndexOutOfRange {
                t,
                lo: 1,
                hi: self.marginals.len(),
            })
        }
    }

    pub fn evaluate(&self, t: usize, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_step(t)?;
        let exact = self.marginals[t - 1].score(x)?;
        Ok(match &self.mode {
            ScoreMode::Exact => exact,
            ScoreMode::Offset { delta, directions } => exact + &directions[t - 1] * delta[t - 1],
            ScoreMode::Relative { rho } => exact * (1.0 + rho),
        })
    }

    /// Affine form of `s_t` when the target is a single Gaussian.
    pub fn affine(&self, t: usize) -> Result<Option<AffineScore>> {
        self.check_step(t)?;
        let law = self.marginals[t - 1].mixture();
        if !law.is_gaussian() {
            return Ok(None);
        }
        let mean = law.means().next().expect("one component");
        let cov = law.covariances().next().expect("one component");
        let precision = cov
            .clone()
            .cholesky()
            .ok_or(Error::SingularCovariance)?
            .inverse();
        let shift = &precision * mean;
        let exact = AffineScore { precision, shift };
        Ok(Some(match &self.mode {
            ScoreMode::Exact => exact,
            ScoreMode::Offset { delta, directions } => AffineScore {
                shift: exact.shift + &directions[t - 1] * delta[t - 1],
                precision: exact.precision,
            },
            ScoreMode::Relative { rho } => AffineScore {
                precision: exact.precision * (1.0 + rho),
                shift: exact.shift * (1.0 + rho),
            },
        }))
    }

    /// `ε_score = sqrt((1/T) Σ_t ε_t²)` with the per-step errors.
    ///
    /// Offset mode is exact. Relative mode estimates `E‖s*_t(X_t)‖²` from
    /// `mc_samples` forward draws per step.
    pub fn eps_score(&self, mc_samples: usize, stream: &mut RandomStream) -> Result<EpsScore> {
        let horizon = self.marginals.len();
        match &self.mode {
            ScoreMode::Exact => Ok(EpsScore::from_steps(vec![0.0; horizon], 0.0)),
            ScoreMode::Offset { delta, .. } => Ok(EpsScore::from_steps(delta.clone(), 0.0)),
            ScoreMode::Relative { rho } => {
                if mc_samples == 0 {
                    return Err(Error::TooFewSamples { got: 0, min: 1 });
                }
                let mut per_step = Vec::with_capacity(horizon);
                let mut var_sum = 0.0;
                for (i, law) in self.marginals.iter().enumerate() {
                    let xs =
                        sample_forward(&self.target, &self.schedule, i + 1, mc_samples, stream)?;
                    let sq: Vec<f64> = xs
                        .row_iter()
                        .map(|r| law.score(&r.transpose()).map(|s| s.norm_squared()))
                        .collect::<Result<_>>()?;
                    let n = sq.len() as f64;
                    let mean = sq.iter().sum::<f64>() / n;
                    let var = if sq.len() > 1 {
                        sq.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
                    } else {
                        0.0
                    };
                    per_step.push(rho.abs() * mean.sqrt());
                    var_sum += rho.powi(4) * var / n;
                }
                let mut eps = EpsScore::from_steps(per_step, 0.0);
                // delta method on sqrt of the step average
                if eps.value > 0.0 {
                    eps.stderr = var_sum.sqrt() / horizon as f64 / (2.0 * eps.value);
                }
                Ok(eps)
            }
        }
    }
}

impl ScoreFunction for ScoreModel {
    fn dim(&self) -> usize {
        self.target.dim()
    }

    fn horizon(&self) -> usize {
        self.marginals.len()
    }

    fn score(&self, t: usize, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.evaluate(t, x)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpsScore {
    pub value: f64,
    pub per_step: Vec<f64>,
    /// Monte Carlo standard error of `value`; zero when exact.
    pub stderr: f64,
}

impl EpsScore {
    fn from_steps(per_step: Vec<f64>, stderr: f64) -> Self {
        let first = per_step.first().copied().unwrap_or(0.0).abs();
        let value = if per_step.iter().all(|e| e.abs() == first) {
            first
        } else {
            (per_step.iter().map(|e| e * e).sum::<f64>() / per_step.len() as f64).sqrt()
        };
        Self {
            value,
            per_step,
            stderr,
        }
    }
}

/// Scalar or per-step offset magnitudes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DeltaSpec {
    Constant(f64),
    PerStep(Vec<f64>),
}

impl DeltaSpec {
    pub fn expand(&self, horizon: usize) -> Result<Vec<f64>> {
        match self {
            DeltaSpec::Constant(d) => Ok(vec![*d; horizon]),
            DeltaSpec::PerStep(v) if v.len() == horizon => Ok(v.clone()),
            DeltaSpec::PerStep(v) => Err(Error::ConfigInvalid(format!(
                "per-step delta has {} entries, horizon is {horizon}",
                v.len()
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreModeKind {
    Exact,
    Offset,
    Relative,
}

/// `{ "mode": "exact"|"offset"|"relative", "delta": f | [f...], "rho": f }`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreConfig {
    pub mode: ScoreModeKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<DeltaSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self {
            mode: ScoreModeKind::Exact,
            delta: None,
            rho: None,
        }
    }
}

impl ScoreConfig {
    pub fn build(&self, target: &GaussianMixture, schedule: &Schedule) -> Result<ScoreModel> {
        match self.mode {
            ScoreModeKind::Exact => ScoreModel::exact(target, schedule),
            ScoreModeKind::Offset => {
                let delta = self
                    .delta
                    .as_ref()
                    .ok_or_else(|| Error::ConfigInvalid("offset mode needs delta".into()))?
                    .expand(schedule.horizon())?;
                ScoreModel::offset(target, schedule, delta)
            }
            ScoreModeKind::Relative => {
                let rho = self
                    .rho
                    .ok_or_else(|| Error::ConfigInvalid("relative mode needs rho".into()))?;
                ScoreModel::relative(target, schedule, rho)
            }
        }
    }
}
