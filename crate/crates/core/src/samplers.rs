//! Reverse-time samplers.
//!
//! All samplers start from `Y_T ~ N(0, I_d)`, step `t = T, ..., 2` and stop at
//! `t = 1`. The accelerated sampler takes a half DDPM step to a midpoint,
//! then corrects the score with the clipped difference
//! `α_t^{3/2} s_{t-1}(Y_mid) - s_t(Y_t + (1-α_t) Z_mid)`.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::rng::RandomStream;
use crate::schedule::Schedule;
use crate::score::ScoreFunction;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Accelerated,
    AcceleratedNoclip,
    Ddpm,
    Ode,
}

impl SamplerKind {
    pub const ALL: [SamplerKind; 4] = [
        SamplerKind::Accelerated,
        SamplerKind::AcceleratedNoclip,
        SamplerKind::Ddpm,
        SamplerKind::Ode,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SamplerKind::Accelerated => "accelerated",
            SamplerKind::AcceleratedNoclip => "accelerated_noclip",
            SamplerKind::Ddpm => "ddpm",
            SamplerKind::Ode => "ode",
        }
    }

    /// The variant whose law the affine oracle can propagate.
    pub fn without_clip(self) -> Self {
        match self {
            SamplerKind::Accelerated => SamplerKind::AcceleratedNoclip,
            k => k,
        }
    }
}

impl fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SamplerKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::ConfigInvalid(format!("unknown sampler {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub y_prev: DVector<f64>,
    /// The correction was zeroed by the clip.
    pub clipped: bool,
}

fn check_step_inputs<S: ScoreFunction + ?Sized>(
    s: &Schedule,
    model: &S,
    t: usize,
    vectors: &[&DVector<f64>],
) -> Result<()> {
    s.check_step(t)?;
    check_dim(s.dim(), model.dim())?;
    for v in vectors {
        check_dim(s.dim(), v.len())?;
    }
    Ok(())
}

/// One accelerated step from `Y_t = y` to `Y_{t-1}` with caller-supplied noise.
///
/// `z_mid` enters both the midpoint and the shifted argument of the second
/// `s_t` evaluation.
pub fn accelerated_step<S: ScoreFunction + ?Sized>(
    s: &Schedule,
    model: &S,
    t: usize,
    y: &DVector<f64>,
    z_mid: &DVector<f64>,
    z: &DVector<f64>,
    use_clip: bool,
) -> Result<StepOutcome> {
    check_step_inputs(s, model, t, &[y, z_mid, z])?;
    let a = s.alpha(t);
    let h = 1.0 - a;
    let inv_sqrt = 1.0 / a.sqrt();

    let score_y = model.score(t, y)?;
    let y_mid = (y + &score_y * (h / (2.0 * a))) * inv_sqrt + z_mid * h;
    let shifted = y + z_mid * h;
    let g_raw = model.score(t - 1, &y_mid)? * a.powf(1.5) - model.score(t, &shifted)?;

    let (g, clipped) = if use_clip {
        let g = s.clip(t, &g_raw)?;
        let clipped = g != g_raw;
        (g, clipped)
    } else {
        (g_raw, false)
    };

    let y_prev = (y + (score_y + g * a) * h + z * s.sigma(t)) * inv_sqrt;
    Ok(StepOutcome { y_prev, clipped })
}

/// `Y_{t-1} = (Y_t + (1-α_t) s_t(Y_t)) / √α_t + √(1-α_t) Z`.
pub fn ddpm_step<S: ScoreFunction + ?Sized>(
    s: &Schedule,
    model: &S,
    t: usize,
    y: &DVector<f64>,
    z: &DVector<f64>,
) -> Result<DVector<f64>> {
    check_step_inputs(s, model, t, &[y, z])?;
    let a = s.alpha(t);
    let h = 1.0 - a;
    Ok((y + model.score(t, y)? * h) / a.sqrt() + z * h.sqrt())
}

/// Exponential-Euler step of the probability flow ODE,
/// `Y_{t-1} = (Y_t + ((1-α_t)/2) s_t(Y_t)) / √α_t`.
pub fn ode_step<S: ScoreFunction + ?Sized>(
    s: &Schedule,
    model: &S,
    t: usize,
    y: &DVector<f64>,
) -> Result<DVector<f64>> {
    check_step_inputs(s, model, t, &[y])?;
    let a = s.alpha(t);
    Ok((y + model.score(t, y)? * (0.5 * (1.0 - a))) / a.sqrt())
}

/// `n` sampler outputs `Y_1`, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBatch {
    pub kind: SamplerKind,
    pub outputs: DMatrix<f64>,
    /// Steps at which the clip zeroed a nonzero correction, over all trajectories.
    pub clip_activations: u64,
    pub seed: u64,
    pub horizon: usize,
}

impl TrajectoryBatch {
    pub fn len(&self) -> usize {
        self.outputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.outputs.ncols()
    }

    /// Fraction of all `n (T-1)` steps at which the clip fired.
    pub fn clip_rate(&self) -> f64 {
        let steps = self.len() as f64 * (self.horizon as f64 - 1.0);
        if steps > 0.0 {
            self.clip_activations as f64 / steps
        } else {
            0.0
        }
    }
}

/// Runs trajectory `index` with its own stream `(seed, index)`.
///
/// Draw order: `Y_T`, then per step `z_mid` (accelerated variants only) and `z`
/// (stochastic variants only).
pub fn run_trajectory<S: ScoreFunction + ?Sized>(
    kind: SamplerKind,
    s: &Schedule,
    model: &S,
    seed: u64,
    index: u64,
) -> Result<(DVector<f64>, u64)> {
    let d = s.dim();
    let mut stream = RandomStream::child(seed, index);
    let mut y = stream.normal_vector(d);
    let mut clips = 0;
    for t in (2..=s.horizon()).rev() {
        y = match kind {
            SamplerKind::Accelerated | SamplerKind::AcceleratedNoclip => {
                let z_mid = stream.normal_vector(d);
                let z = stream.normal_vector(d);
                let out = accelerated_step(
                    s,
                    model,
                    t,
                    &y,
                    &z_mid,
                    &z,
                    kind == SamplerKind::Accelerated,
                )?;
                clips += out.clipped as u64;
                out.y_prev
            }
            SamplerKind::Ddpm => {
                let z = stream.normal_vector(d);
                ddpm_step(s, model, t, &y, &z)?
            }
            SamplerKind::Ode => ode_step(s, model, t, &y)?,
        };
    }
    Ok((y, clips))
}

/// Runs `n` independent trajectories on the current rayon pool.
///
/// The result depends only on `(kind, s, model, n, seed)`, not on the number of
/// worker threads.
pub fn run_batch<S: ScoreFunction + ?Sized>(
    kind: SamplerKind,
    s: &Schedule,
    model: &S,
    n: usize,
    seed: u64,
) -> Result<TrajectoryBatch> {
    if n == 0 {
        return Err(Error::TooFewSamples { got: 0, min: 1 });
    }
    check_dim(s.dim(), model.dim())?;
    let rows: Vec<(DVector<f64>, u64)> = (0..n as u64)
        .into_par_iter()
        .map(|i| run_trajectory(kind, s, model, seed, i))
        .collect::<Result<_>>()?;

    let d = s.dim();
    let mut outputs = DMatrix::zeros(n, d);
    let mut clip_activations = 0;
    for (i, (y, clips)) in rows.iter().enumerate() {
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParams(format!("trajectory {i} diverged")));
        }
        outputs.row_mut(i).copy_from(&y.transpose());
        clip_activations += clips;
    }
    Ok(TrajectoryBatch {
        kind,
        outputs,
        clip_activations,
        seed,
        horizon: s.horizon(),
    })
}

/// [`run_batch`] on a dedicated pool of `jobs` threads.
pub fn run_batch_with_jobs<S: ScoreFunction + ?Sized>(
    kind: SamplerKind,
    s: &Schedule,
    model: &S,
    n: usize,
    seed: u64,
    jobs: usize,
) -> Result<TrajectoryBatch> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::ConfigInvalid(e.to_string()))?;
    pool.install(|| run_batch(kind, s, model, n, seed))
}
