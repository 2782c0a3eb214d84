//! Gaussian-mixture targets and their forward-process marginals.
//!
//! Under `X_t = √ᾱ_t X₀ + √(1-ᾱ_t) W̄_t` a mixture stays a mixture with the
//! same weights: component means scale by `√ᾱ_t` and covariances become
//! `ᾱ_t Σ_i + (1-ᾱ_t) I`. Densities, scores and projected CDFs are therefore
//! available in closed form at every step.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{check_dim, Error, Result};
use crate::rng::RandomStream;
use crate::schedule::Schedule;

/// Exponent bounding the admissible second moment, `E‖X₀‖² < T^C_R`.
pub const SECOND_MOMENT_EXPONENT: f64 = 10.0;

const WEIGHT_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone)]
struct Component {
    weight: f64,
    log_weight: f64,
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    lower: DMatrix<f64>,
    precision: DMatrix<f64>,
    /// `-½ (d ln 2π + ln det Σ)`
    log_norm: f64,
}

impl Component {
    fn new(weight: f64, mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(Error::InvalidTarget(format!(
                "covariance is {}x{}, expected {d}x{d}",
                cov.nrows(),
                cov.ncols()
            )));
        }
        let cov = (&cov + cov.transpose()) * 0.5;
        let chol = Cholesky::new(cov.clone()).ok_or(Error::SingularCovariance)?;
        let log_det = 2.0
            * chol
                .l_dirty()
                .diagonal()
                .iter()
                .map(|v| v.ln())
                .sum::<f64>();
        let precision = chol.inverse();
        Ok(Self {
            weight,
            log_weight: weight.ln(),
            mean,
            cov,
            lower: chol.l(),
            precision,
            log_norm: -0.5 * (d as f64 * (2.0 * PI).ln() + log_det),
        })
    }
}

#[derive(Debug, Clone)]
pub struct GaussianMixture {
    dim: usize,
    components: Vec<Component>,
}

impl GaussianMixture {
    pub fn new(
        weights: Vec<f64>,
        means: Vec<DVector<f64>>,
        covs: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidTarget(
                "mixture needs at least one component".into(),
            ));
        }
        if weights.len() != means.len() || weights.len() != covs.len() {
            return Err(Error::InvalidTarget(format!(
                "{} weights, {} means, {} covariances",
                weights.len(),
                means.len(),
                covs.len()
            )));
        }
        if let Some(w) = weights.iter().find(|w| w.is_nan() || **w <= 0.0) {
            return Err(Error::InvalidTarget(format!("weight {w} is not positive")));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_TOLERANCE {
            return Err(Error::InvalidTarget(format!(
                "weights sum to {total}, not 1"
            )));
        }
        let dim = means[0].len();
        if dim == 0 {
            return Err(Error::InvalidTarget("dimension must be at least 1".into()));
        }
        let components = weights
            .into_iter()
            .zip(means)
            .zip(covs)
            .map(|((w, m), c)| {
                check_dim(dim, m.len())?;
                Component::new(w, m, c)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { dim, components })
    }

    pub fn gaussian(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        Self::new(vec![1.0], vec![mean], vec![cov])
    }

    pub fn standard_normal(dim: usize) -> Self {
        Self::gaussian(DVector::zeros(dim), DMatrix::identity(dim, dim))
            .expect("identity covariance is positive definite")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn is_gaussian(&self) -> bool {
        self.components.len() == 1
    }

    pub fn weights(&self) -> impl Iterator<Item = f64> + '_ {
        self.components.iter().map(|c| c.weight)
    }

    pub fn means(&self) -> impl Iterator<Item = &DVector<f64>> + '_ {
        self.components.iter().map(|c| &c.mean)
    }

    pub fn covariances(&self) -> impl Iterator<Item = &DMatrix<f64>> + '_ {
        self.components.iter().map(|c| &c.cov)
    }

    /// Overall mean and covariance of the mixture.
    pub fn moments(&self) -> (DVector<f64>, DMatrix<f64>) {
        let d = self.dim;
        let mut mean = DVector::zeros(d);
        let mut second = DMatrix::zeros(d, d);
        for c in &self.components {
            mean += &c.mean * c.weight;
            second += (&c.cov + &c.mean * c.mean.transpose()) * c.weight;
        }
        let cov = second - &mean * mean.transpose();
        (mean, cov)
    }

    /// `E‖X‖² = Σ w_i (‖μ_i‖² + tr Σ_i)`.
    pub fn second_moment(&self) -> f64 {
        self.components
            .iter()
            .map(|c| c.weight * (c.mean.norm_squared() + c.cov.trace()))
            .sum()
    }

    /// Checks `E‖X₀‖² < T^C_R` for horizon `horizon`.
    pub fn validate_second_moment(&self, horizon: usize) -> Result<()> {
        let bound = (horizon as f64).powf(SECOND_MOMENT_EXPONENT);
        let m2 = self.second_moment();
        if m2.is_finite() && m2 < bound {
            Ok(())
        } else {
            Err(Error::InvalidTarget(format!(
                "second moment {m2} exceeds T^{SECOND_MOMENT_EXPONENT} = {bound}"
            )))
        }
    }

    /// Law of `√ab X + √(1-ab) W` for `X` from this mixture and independent `W ~ N(0, I)`.
    pub fn noised(&self, alpha_bar: f64) -> Result<Self> {
        let d = self.dim;
        let scale = alpha_bar.sqrt();
        let noise = DMatrix::<f64>::identity(d, d) * (1.0 - alpha_bar);
        let components = self
            .components
            .iter()
            .map(|c| Component::new(c.weight, &c.mean * scale, &c.cov * alpha_bar + &noise))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { dim: d, components })
    }

    /// Per-component log joint terms `ln w_i + ln N(x; m_i, C_i)` and the
    /// precision-weighted residuals `C_i^{-1}(x - m_i)`.
    fn component_terms(&self, x: &DVector<f64>) -> (Vec<f64>, Vec<DVector<f64>>) {
        self.components
            .iter()
            .map(|c| {
                let diff = x - &c.mean;
                let pd = &c.precision * &diff;
                (c.log_weight + c.log_norm - 0.5 * diff.dot(&pd), pd)
            })
            .unzip()
    }

    pub fn log_density(&self, x: &DVector<f64>) -> Result<f64> {
        check_dim(self.dim, x.len())?;
        let (logs, _) = self.component_terms(x);
        Ok(log_sum_exp(&logs))
    }

    /// `∇ log p(x) = -Σ_i r_i(x) C_i^{-1}(x - m_i)` with posterior responsibilities `r_i`.
    pub fn score(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(self.dim, x.len())?;
        if let [c] = self.components.as_slice() {
            return Ok(-(&c.precision * (x - &c.mean)));
        }
        let (logs, residuals) = self.component_terms(x);
        let norm = log_sum_exp(&logs);
        let mut out = DVector::zeros(self.dim);
        for (l, pd) in logs.iter().zip(&residuals) {
            let r = (l - norm).exp();
            if r > 0.0 {
                out.axpy(-r, pd, 1.0);
            }
        }
        Ok(out)
    }

    pub fn sample(&self, stream: &mut RandomStream) -> DVector<f64> {
        let u = stream.uniform();
        let mut acc = 0.0;
        let mut chosen = self.components.last().expect("non-empty mixture");
        for c in &self.components {
            acc += c.weight;
            if u < acc {
                chosen = c;
                break;
            }
        }
        let z = stream.normal_vector(self.dim);
        &chosen.mean + &chosen.lower * z
    }

    pub fn sample_n(&self, n: usize, stream: &mut RandomStream) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(n, self.dim);
        for i in 0..n {
            let x = self.sample(stream);
            out.row_mut(i).copy_from(&x.transpose());
        }
        out
    }

    /// CDF at `q` of the projection `uᵀX`, a 1-D mixture with means `uᵀm_i`
    /// and variances `uᵀC_i u`.
    pub fn projected_cdf(&self, direction: &DVector<f64>, q: f64) -> Result<f64> {
        check_dim(self.dim, direction.len())?;
        let norm = direction.norm();
        if (norm - 1.0).abs() > 1e-9 {
            return Err(Error::NotUnitVector { norm });
        }
        if q == f64::INFINITY {
            return Ok(1.0);
        }
        if q == f64::NEG_INFINITY {
            return Ok(0.0);
        }
        Ok(self.projection(direction).cdf(q))
    }

    /// 1-D mixture of `uᵀX`, for evaluating many CDF points along one direction.
    pub fn projection(&self, direction: &DVector<f64>) -> ProjectedMixture {
        ProjectedMixture {
            components: self
                .components
                .iter()
                .map(|c| {
                    let var = (&c.cov * direction).dot(direction);
                    (c.weight, direction.dot(&c.mean), var.max(0.0).sqrt())
                })
                .collect(),
        }
    }
}

/// Weights, means and standard deviations of a 1-D Gaussian mixture.
#[derive(Debug, Clone)]
pub struct ProjectedMixture {
    components: Vec<(f64, f64, f64)>,
}

impl ProjectedMixture {
    pub fn cdf(&self, q: f64) -> f64 {
        let p: f64 = self
            .components
            .iter()
            .map(|&(w, m, s)| w * normal_cdf((q - m) / s))
            .sum();
        p.clamp(0.0, 1.0)
    }
}

pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Forward marginal `p_{X_t}` of a target under a schedule.
#[derive(Debug, Clone)]
pub struct MarginalLaw {
    t: usize,
    alpha_bar: f64,
    mixture: GaussianMixture,
}

impl MarginalLaw {
    pub fn step(&self) -> usize {
        self.t
    }

    pub fn alpha_bar(&self) -> f64 {
        self.alpha_bar
    }

    pub fn mixture(&self) -> &GaussianMixture {
        &self.mixture
    }

    pub fn dim(&self) -> usize {
        self.mixture.dim()
    }

    pub fn log_density(&self, x: &DVector<f64>) -> Result<f64> {
        self.mixture.log_density(x)
    }

    pub fn score(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.mixture.score(x)
    }

    pub fn projected_cdf(&self, direction: &DVector<f64>, q: f64) -> Result<f64> {
        self.mixture.projected_cdf(direction, q)
    }

    /// `n` draws from this marginal, one per row.
    pub fn sample(&self, n: usize, stream: &mut RandomStream) -> DMatrix<f64> {
        self.mixture.sample_n(n, stream)
    }
}

pub fn forward_marginal(target: &GaussianMixture, s: &Schedule, t: usize) -> Result<MarginalLaw> {
    if t > s.horizon() {
        return Err(Error::IndexOutOfRange {
            t,
            lo: 0,
            hi: s.horizon(),
        });
    }
    check_dim(s.dim(), target.dim())?;
    if t == 0 {
        return Ok(MarginalLaw {
            t,
            alpha_bar: 1.0,
            mixture: target.clone(),
        });
    }
    let alpha_bar = s.alpha_bar(t);
    Ok(MarginalLaw {
        t,
        alpha_bar,
        mixture: target.noised(alpha_bar)?,
    })
}

pub fn sample_target(
    target: &GaussianMixture,
    n: usize,
    stream: &mut RandomStream,
) -> DMatrix<f64> {
    target.sample_n(n, stream)
}

/// Draws `X_t = √ᾱ_t X₀ + √(1-ᾱ_t) W̄` with `X₀` from the target, one per row.
pub fn sample_forward(
    target: &GaussianMixture,
    s: &Schedule,
    t: usize,
    n: usize,
    stream: &mut RandomStream,
) -> Result<DMatrix<f64>> {
    if t > s.horizon() {
        return Err(Error::IndexOutOfRange {
            t,
            lo: 0,
            hi: s.horizon(),
        });
    }
    let ab = s.alpha_bar(t);
    let (signal, noise) = (ab.sqrt(), (1.0 - ab).sqrt());
    let d = target.dim();
    let mut out = DMatrix::zeros(n, d);
    for i in 0..n {
        let x0 = target.sample(stream);
        let w = stream.normal_vector(d);
        let xt = x0 * signal + w * noise;
        out.row_mut(i).copy_from(&xt.transpose());
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComponentSpec {
    pub weight: f64,
    pub mean: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cov: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cov_scale: Option<f64>,
}

/// On-disk target description.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TargetSpec {
    pub d: usize,
    pub components: Vec<ComponentSpec>,
}

impl TargetSpec {
    pub fn into_mixture(self) -> Result<GaussianMixture> {
        let d = self.d;
        let mut weights = Vec::new();
        let mut means = Vec::new();
        let mut covs = Vec::new();
        for (i, c) in self.components.into_iter().enumerate() {
            if c.mean.len() != d {
                return Err(Error::InvalidTarget(format!(
                    "component {i}: mean has length {}, expected {d}",
                    c.mean.len()
                )));
            }
            let cov = match (c.cov, c.cov_scale) {
                (Some(rows), None) => {
                    if rows.len() != d || rows.iter().any(|r| r.len() != d) {
                        return Err(Error::InvalidTarget(format!(
                            "component {i}: covariance must be {d}x{d}"
                        )));
                    }
                    DMatrix::from_fn(d, d, |r, k| rows[r][k])
                }
                (None, Some(scale)) => DMatrix::identity(d, d) * scale,
                (None, None) => DMatrix::identity(d, d),
                (Some(_), Some(_)) => {
                    return Err(Error::InvalidTarget(format!(
                        "component {i}: give either cov or cov_scale, not both"
                    )))
                }
            };
            weights.push(c.weight);
            means.push(DVector::from_vec(c.mean));
            covs.push(cov);
        }
        GaussianMixture::new(weights, means, covs)
    }
}

impl GaussianMixture {
    pub fn from_json_str(json: &str) -> Result<Self> {
        let spec: TargetSpec =
            serde_json::from_str(json).map_err(|e| Error::InvalidTarget(e.to_string()))?;
        spec.into_mixture()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let fail = |reason: String| Error::TargetLoadFailed {
            path: path.to_path_buf(),
            reason,
        };
        let text = std::fs::read_to_string(path).map_err(|e| fail(e.to_string()))?;
        Self::from_json_str(&text).map_err(|e| fail(e.to_string()))
    }
}
