//! Empirical distances between a batch of sampler outputs and an analytic law.
//!
//! `sliced_tv` averages 1-D Kolmogorov distances over random projections.
//! The Kolmogorov distance lower-bounds 1-D TV, which in turn lower-bounds
//! the full TV, so this metric can only under-report error.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::analytic::{gaussian_kl, GaussianLaw};
use crate::error::{check_dim, Error, Result};
use crate::rng::RandomStream;
use crate::samplers::TrajectoryBatch;
use crate::targets::MarginalLaw;

pub const MIN_SLICED_SAMPLES: usize = 1000;
pub const DEFAULT_DIRECTIONS: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct SlicedTv {
    pub mean: f64,
    pub per_direction: Vec<(DVector<f64>, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub sliced_tv: f64,
    pub moment_kl: f64,
    pub per_direction: Vec<(DVector<f64>, f64)>,
    pub n: usize,
    pub n_dirs: usize,
}

/// Kolmogorov distance between the empirical CDF of `values` and `cdf`.
pub fn kolmogorov_distance(values: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
    values.sort_unstable_by(f64::total_cmp);
    let n = values.len() as f64;
    values
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            let above = (i as f64 + 1.0) / n - f;
            let below = f - i as f64 / n;
            above.max(below)
        })
        .fold(0.0, f64::max)
}

/// Sliced Kolmogorov distance of rows of `samples` against `law`.
pub fn sliced_tv_samples(
    samples: &DMatrix<f64>,
    law: &MarginalLaw,
    n_dirs: usize,
    stream: &mut RandomStream,
) -> Result<SlicedTv> {
    let directions: Vec<DVector<f64>> =
        (0..n_dirs).map(|_| stream.unit_vector(law.dim())).collect();
    sliced_tv_along(samples, law, directions)
}

/// Sliced Kolmogorov distance along explicit unit directions.
pub fn sliced_tv_along(
    samples: &DMatrix<f64>,
    law: &MarginalLaw,
    directions: Vec<DVector<f64>>,
) -> Result<SlicedTv> {
    let n = samples.nrows();
    if n < MIN_SLICED_SAMPLES {
        return Err(Error::TooFewSamples {
            got: n,
            min: MIN_SLICED_SAMPLES,
        });
    }
    if directions.is_empty() {
        return Err(Error::InvalidParams("need at least one direction".into()));
    }
    check_dim(law.dim(), samples.ncols())?;
    for u in &directions {
        check_dim(law.dim(), u.len())?;
        let norm = u.norm();
        if (norm - 1.0).abs() > 1e-9 {
            return Err(Error::NotUnitVector { norm });
        }
    }
    let per_direction: Vec<(DVector<f64>, f64)> = directions
        .into_par_iter()
        .map(|u| {
            let mut proj: Vec<f64> = (samples * &u).iter().copied().collect();
            let projected = law.mixture().projection(&u);
            let dist = kolmogorov_distance(&mut proj, |q| projected.cdf(q));
            (u, dist)
        })
        .collect();
    let mean = per_direction.iter().map(|(_, v)| v).sum::<f64>() / per_direction.len() as f64;
    Ok(SlicedTv {
        mean: mean.clamp(0.0, 1.0),
        per_direction,
    })
}

pub fn sliced_tv(
    batch: &TrajectoryBatch,
    law: &MarginalLaw,
    n_dirs: usize,
    stream: &mut RandomStream,
) -> Result<SlicedTv> {
    sliced_tv_samples(&batch.outputs, law, n_dirs, stream)
}

/// Sample mean and unbiased sample covariance, as a Gaussian.
pub fn fit_gaussian(samples: &DMatrix<f64>) -> Result<GaussianLaw> {
    let n = samples.nrows();
    let d = samples.ncols();
    if n <= d + 1 {
        return Err(Error::TooFewSamples { got: n, min: d + 2 });
    }
    let mean: DVector<f64> = samples.row_mean().transpose();
    let mut centered = samples.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    let cov = (&cov + cov.transpose()) * 0.5;
    if cov.clone().cholesky().is_none() {
        return Err(Error::DegenerateCovariance);
    }
    GaussianLaw::new(mean, cov)
}

/// `KL(law ‖ fitted)` between moment-matched Gaussians of `law` and the samples.
pub fn moment_kl_samples(samples: &DMatrix<f64>, law: &MarginalLaw) -> Result<f64> {
    check_dim(law.dim(), samples.ncols())?;
    let fitted = fit_gaussian(samples)?;
    gaussian_kl(&GaussianLaw::moment_match(law.mixture()), &fitted)
}

pub fn moment_kl(batch: &TrajectoryBatch, law: &MarginalLaw) -> Result<f64> {
    moment_kl_samples(&batch.outputs, law)
}

pub fn evaluate(
    batch: &TrajectoryBatch,
    law: &MarginalLaw,
    n_dirs: usize,
    stream: &mut RandomStream,
) -> Result<MetricReport> {
    let sliced = sliced_tv(batch, law, n_dirs, stream)?;
    Ok(MetricReport {
        sliced_tv: sliced.mean,
        moment_kl: moment_kl(batch, law)?,
        per_direction: sliced.per_direction,
        n: batch.len(),
        n_dirs,
    })
}
