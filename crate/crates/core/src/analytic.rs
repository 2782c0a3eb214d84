//! Exact laws of the sampler outputs for single-Gaussian targets.
//!
//! With a Gaussian target every marginal score is affine, `s_t(x) = -M_t x + v_t`,
//! so each clip-free step is an affine map of `(Y_t, Z_mid, Z_t)`:
//!
//! ```text
//! Y_{t-1} = A Y_t + B Z_mid + D Z_t + b
//! ```
//!
//! Starting from `N(0, I)` the law of `Y_1` follows by pushing the mean and
//! covariance through these maps.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::samplers::SamplerKind;
use crate::schedule::Schedule;
use crate::score::{AffineScore, ScoreModel};
use crate::targets::GaussianMixture;

const SYMMETRY_TOLERANCE: f64 = 1e-12;
const EIGEN_TOLERANCE: f64 = -1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianLaw {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

impl GaussianLaw {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: cov.nrows(),
            });
        }
        let scale = cov.amax().max(1.0);
        if (&cov - cov.transpose()).amax() > SYMMETRY_TOLERANCE * scale {
            return Err(Error::InvalidParams("covariance is not symmetric".into()));
        }
        let min_eig = cov.clone().symmetric_eigenvalues().min();
        if min_eig < EIGEN_TOLERANCE * scale {
            return Err(Error::InvalidParams(format!(
                "covariance has eigenvalue {min_eig} < 0"
            )));
        }
        Ok(Self { mean, cov })
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: DVector::zeros(dim),
            cov: DMatrix::identity(dim, dim),
        }
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Gaussian with the same first two moments as `mixture`.
    pub fn moment_match(mixture: &GaussianMixture) -> Self {
        let (mean, cov) = mixture.moments();
        Self {
            mean,
            cov: symmetrize(cov),
        }
    }

    /// Target law of the single-Gaussian mixture; `None` for true mixtures.
    pub fn from_mixture(mixture: &GaussianMixture) -> Option<Self> {
        mixture.is_gaussian().then(|| Self::moment_match(mixture))
    }

    /// `N(√ᾱ_t μ, ᾱ_t Σ + (1-ᾱ_t) I)`.
    pub fn noised(&self, alpha_bar: f64) -> Self {
        let d = self.dim();
        Self {
            mean: &self.mean * alpha_bar.sqrt(),
            cov: &self.cov * alpha_bar + DMatrix::identity(d, d) * (1.0 - alpha_bar),
        }
    }
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

/// `Y_{t-1} = A Y_t + B Z_mid + D Z_t + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineStep {
    pub state: DMatrix<f64>,
    pub mid_noise: DMatrix<f64>,
    pub step_noise: DMatrix<f64>,
    pub offset: DVector<f64>,
}

impl AffineStep {
    pub fn apply(&self, law: &GaussianLaw) -> GaussianLaw {
        let a = &self.state;
        let mean = a * &law.mean + &self.offset;
        let cov = a * &law.cov * a.transpose()
            + &self.mid_noise * self.mid_noise.transpose()
            + &self.step_noise * self.step_noise.transpose();
        GaussianLaw {
            mean,
            cov: symmetrize(cov),
        }
    }
}

/// Exact affine score of the target's forward marginal at step `t`.
pub fn exact_affine_score(target: &GaussianLaw, s: &Schedule, t: usize) -> Result<AffineScore> {
    let marginal = target.noised(s.alpha_bar(t));
    let precision = marginal
        .cov
        .cholesky()
        .ok_or(Error::SingularCovariance)?
        .inverse();
    let shift = &precision * &marginal.mean;
    Ok(AffineScore { precision, shift })
}

/// Composes one step of `kind` given the affine scores at `t` and `t - 1`.
pub fn affine_step_from_scores(
    s: &Schedule,
    t: usize,
    kind: SamplerKind,
    score_t: &AffineScore,
    score_prev: &AffineScore,
) -> Result<AffineStep> {
    s.check_step(t)?;
    let d = s.dim();
    check_dim(d, score_t.shift.len())?;
    let eye = DMatrix::<f64>::identity(d, d);
    let zero = DMatrix::<f64>::zeros(d, d);
    let a = s.alpha(t);
    let h = 1.0 - a;
    let inv_sqrt = 1.0 / a.sqrt();
    let (m, v) = (&score_t.precision, &score_t.shift);

    match kind {
        SamplerKind::Accelerated => Err(Error::UnsupportedKind(kind)),
        SamplerKind::Ddpm => Ok(AffineStep {
            state: (&eye - m * h) * inv_sqrt,
            mid_noise: zero,
            step_noise: eye * h.sqrt(),
            offset: v * (h * inv_sqrt),
        }),
        SamplerKind::Ode => Ok(AffineStep {
            state: (&eye - m * (0.5 * h)) * inv_sqrt,
            mid_noise: zero.clone(),
            step_noise: zero,
            offset: v * (0.5 * h * inv_sqrt),
        }),
        SamplerKind::AcceleratedNoclip => {
            let (m_prev, v_prev) = (&score_prev.precision, &score_prev.shift);
            let w = a.powf(1.5);
            // Y_mid = A_mid Y + h Z_mid + b_mid
            let a_mid = (&eye - m * (h / (2.0 * a))) * inv_sqrt;
            let b_mid = v * (h / (2.0 * a) * inv_sqrt);
            // g = w s_{t-1}(Y_mid) - s_t(Y + h Z_mid) = A_g Y + B_g Z_mid + b_g
            let a_g = m - m_prev * &a_mid * w;
            let b_g = (m - m_prev * w) * h;
            let b_g_shift = (v_prev - m_prev * &b_mid) * w - v;
            // Y_{t-1} = (Y + h (s_t(Y) + α g) + σ Z) / √α
            Ok(AffineStep {
                state: (&eye - m * h + a_g * (h * a)) * inv_sqrt,
                mid_noise: b_g * (h * a * inv_sqrt),
                step_noise: eye * (s.sigma(t) * inv_sqrt),
                offset: (v * h + b_g_shift * (h * a)) * inv_sqrt,
            })
        }
    }
}

/// Step coefficients for `kind` with exact scores of a Gaussian target.
pub fn affine_step_coefficients(
    s: &Schedule,
    target: &GaussianLaw,
    t: usize,
    kind: SamplerKind,
) -> Result<AffineStep> {
    check_dim(s.dim(), target.dim())?;
    s.check_step(t)?;
    if kind == SamplerKind::Accelerated {
        return Err(Error::UnsupportedKind(kind));
    }
    let score_t = exact_affine_score(target, s, t)?;
    let score_prev = exact_affine_score(target, s, t - 1)?;
    affine_step_from_scores(s, t, kind, &score_t, &score_prev)
}

fn propagate_with<F>(s: &Schedule, kind: SamplerKind, mut score_at: F) -> Result<GaussianLaw>
where
    F: FnMut(usize) -> Result<AffineScore>,
{
    if kind == SamplerKind::Accelerated {
        return Err(Error::UnsupportedKind(kind));
    }
    let mut law = GaussianLaw::standard(s.dim());
    let mut score_t = score_at(s.horizon())?;
    for t in (2..=s.horizon()).rev() {
        let score_prev = score_at(t - 1)?;
        law = affine_step_from_scores(s, t, kind, &score_t, &score_prev)?.apply(&law);
        score_t = score_prev;
    }
    Ok(law)
}

/// Exact law of `Y_1` under exact scores of a Gaussian target.
pub fn propagate(s: &Schedule, target: &GaussianLaw, kind: SamplerKind) -> Result<GaussianLaw> {
    check_dim(s.dim(), target.dim())?;
    propagate_with(s, kind, |t| exact_affine_score(target, s, t))
}

/// Exact law of `Y_1` under a (possibly perturbed) score model on a Gaussian target.
pub fn propagate_model(s: &Schedule, model: &ScoreModel, kind: SamplerKind) -> Result<GaussianLaw> {
    check_dim(s.dim(), model.target().dim())?;
    propagate_with(s, kind, |t| {
        model.affine(t)?.ok_or_else(|| {
            Error::InvalidTarget("affine propagation needs a single-Gaussian target".into())
        })
    })
}

/// `KL(p ‖ q)` between Gaussians.
pub fn gaussian_kl(p: &GaussianLaw, q: &GaussianLaw) -> Result<f64> {
    check_dim(p.dim(), q.dim())?;
    let d = p.dim() as f64;
    let q_chol = q.cov.clone().cholesky().ok_or(Error::SingularCovariance)?;
    let Some(p_chol) = p.cov.clone().cholesky() else {
        return Ok(f64::INFINITY);
    };
    let log_det = |l: &DMatrix<f64>| 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let trace = q_chol.solve(&p.cov).trace();
    let diff = &q.mean - &p.mean;
    let maha = diff.dot(&q_chol.solve(&diff));
    let kl = 0.5 * (trace + maha - d + log_det(&q_chol.l()) - log_det(&p_chol.l()));
    Ok(kl.max(0.0))
}

/// Pinsker bound `min(1, √(KL/2))` on total variation.
pub fn gaussian_tv_bound(p: &GaussianLaw, q: &GaussianLaw) -> Result<f64> {
    Ok(tv_from_kl(gaussian_kl(p, q)?))
}

pub fn tv_from_kl(kl: f64) -> f64 {
    (kl / 2.0).sqrt().min(1.0)
}

/// Divergences between `p_{X_1}` and the exact law of `Y_1`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticReport {
    pub kind: SamplerKind,
    pub horizon: usize,
    pub dim: usize,
    /// `KL(p_{X_1} ‖ p_{Y_1})`
    pub kl: f64,
    /// `KL(p_{Y_1} ‖ p_{X_1})`
    pub kl_reverse: f64,
    pub tv_bound: f64,
    pub output_law: GaussianLaw,
}

pub fn analytic_report(
    s: &Schedule,
    model: &ScoreModel,
    kind: SamplerKind,
) -> Result<AnalyticReport> {
    let kind = kind.without_clip();
    let target = GaussianLaw::from_mixture(model.target()).ok_or_else(|| {
        Error::InvalidTarget("affine propagation needs a single-Gaussian target".into())
    })?;
    let output_law = propagate_model(s, model, kind)?;
    let reference = target.noised(s.alpha_bar(1));
    let kl = gaussian_kl(&reference, &output_law)?;
    Ok(AnalyticReport {
        kind,
        horizon: s.horizon(),
        dim: s.dim(),
        kl,
        kl_reverse: gaussian_kl(&output_law, &reference)?,
        tv_bound: tv_from_kl(kl),
        output_law,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RandomStream;
    use crate::samplers::accelerated_step;
    use crate::schedule::ScheduleParams;

    fn schedule(horizon: usize, dim: usize) -> Schedule {
        Schedule::build(ScheduleParams::new(horizon, dim)).unwrap()
    }

    fn aniso_target() -> GaussianLaw {
        GaussianLaw::new(
            DVector::from_vec(vec![1.0, -0.5]),
            DMatrix::from_row_slice(2, 2, &[0.25, 0.1, 0.1, 4.0]),
        )
        .unwrap()
    }

    #[test]
    fn ode_stationary_coefficients() {
        let s = schedule(32, 2);
        let target = GaussianLaw::standard(2);
        let step = affine_step_coefficients(&s, &target, 7, SamplerKind::Ode).unwrap();
        let a = s.alpha(7);
        let want = (1.0 - (1.0 - a) / 2.0) / a.sqrt();
        assert!((step.state - DMatrix::identity(2, 2) * want).amax() < 1e-15);
        assert_eq!(step.offset, DVector::zeros(2));
        assert_eq!(step.step_noise, DMatrix::zeros(2, 2));
    }

    #[test]
    fn ddpm_stationary_coefficients() {
        let s = schedule(32, 2);
        let step =
            affine_step_coefficients(&s, &GaussianLaw::standard(2), 7, SamplerKind::Ddpm).unwrap();
        let a = s.alpha(7);
        let eye = DMatrix::<f64>::identity(2, 2);
        assert!((step.state - &eye * a.sqrt()).amax() < 1e-15);
        assert!((step.step_noise - &eye * (1.0 - a).sqrt()).amax() < 1e-15);
        assert_eq!(step.mid_noise, DMatrix::zeros(2, 2));
        assert!(step.offset.amax() < 1e-15);
    }

    #[test]
    fn clipped_kind_is_unsupported() {
        let s = schedule(32, 2);
        let target = GaussianLaw::standard(2);
        assert!(matches!(
            affine_step_coefficients(&s, &target, 7, SamplerKind::Accelerated),
            Err(Error::UnsupportedKind(SamplerKind::Accelerated))
        ));
        assert!(propagate(&s, &target, SamplerKind::Accelerated).is_err());
    }

    /// Least-squares fit of accelerated_step outputs on
    /// (y, z_mid, z, 1); the step is exactly affine so R² ≈ 1.
    #[test]
    fn accelerated_coefficients_match_regression() {
        let horizon = 4;
        let alpha = vec![0.5, 0.9, 0.96, 0.9];
        let mut alpha_bar = Vec::new();
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        let s = Schedule::from_coefficients(
            ScheduleParams::new(horizon, 1).with_constants(1.0, 1.0, 1.0),
            alpha_bar,
            alpha,
        )
        .unwrap();
        let target = GaussianLaw::new(
            DVector::from_element(1, 0.4),
            DMatrix::from_element(1, 1, 2.0),
        )
        .unwrap();
        let mixture =
            GaussianMixture::gaussian(target.mean().clone(), target.cov().clone()).unwrap();
        let model = ScoreModel::exact(&mixture, &s).unwrap();

        let n = 1_000_000;
        let mut stream = RandomStream::new(21);
        let mut xtx = DMatrix::<f64>::zeros(4, 4);
        let mut xty = DVector::<f64>::zeros(4);
        let mut ys = Vec::with_capacity(n);
        let mut rows = Vec::with_capacity(n);
        for _ in 0..n {
            let y = stream.normal_vector(1) * 2.0;
            let zm = stream.normal_vector(1);
            let z = stream.normal_vector(1);
            let out = accelerated_step(&s, &model, 3, &y, &zm, &z, false)
                .unwrap()
                .y_prev[0];
            let row = DVector::from_vec(vec![y[0], zm[0], z[0], 1.0]);
            xtx += &row * row.transpose();
            xty += &row * out;
            ys.push(out);
            rows.push(row);
        }
        let beta = xtx.cholesky().unwrap().solve(&xty);
        let mean_y = ys.iter().sum::<f64>() / n as f64;
        let ss_tot: f64 = ys.iter().map(|v| (v - mean_y).powi(2)).sum();
        let ss_res: f64 = rows
            .iter()
            .zip(&ys)
            .map(|(r, v)| (v - r.dot(&beta)).powi(2))
            .sum();
        assert!(1.0 - ss_res / ss_tot > 1.0 - 1e-10);

        let step =
            affine_step_coefficients(&s, &target, 3, SamplerKind::AcceleratedNoclip).unwrap();
        let coef = [
            step.state[(0, 0)],
            step.mid_noise[(0, 0)],
            step.step_noise[(0, 0)],
            step.offset[0],
        ];
        for (b, c) in beta.iter().zip(coef) {
            assert!((b - c).abs() < 1e-9, "{b} vs {c}");
        }
    }

    #[test]
    fn single_step_horizon_is_one_application() {
        let s = Schedule::build(ScheduleParams::new(2, 2).with_constants(1.0, 0.5, 1.0)).unwrap();
        let target = aniso_target();
        for kind in [
            SamplerKind::AcceleratedNoclip,
            SamplerKind::Ddpm,
            SamplerKind::Ode,
        ] {
            let law = propagate(&s, &target, kind).unwrap();
            let once = affine_step_coefficients(&s, &target, 2, kind)
                .unwrap()
                .apply(&GaussianLaw::standard(2));
            assert_eq!(law, once);
        }
    }

    #[test]
    fn ode_covariance_is_product_of_maps() {
        let s = schedule(32, 2);
        let target = aniso_target();
        let law = propagate(&s, &target, SamplerKind::Ode).unwrap();
        let mut prod = DMatrix::<f64>::identity(2, 2);
        for t in (2..=32).rev() {
            let step = affine_step_coefficients(&s, &target, t, SamplerKind::Ode).unwrap();
            prod = step.state * prod;
        }
        let want = &prod * prod.transpose();
        assert!((law.cov() - want).amax() < 1e-12);
    }

    #[test]
    fn kl_examples() {
        let p = aniso_target();
        assert_eq!(gaussian_kl(&p, &p).unwrap(), 0.0);

        let ab: f64 = 0.5;
        let x0 = DVector::from_vec(vec![1.0, 0.0]);
        let p = GaussianLaw::new(&x0 * ab.sqrt(), DMatrix::identity(2, 2) * (1.0 - ab)).unwrap();
        let kl = gaussian_kl(&p, &GaussianLaw::standard(2)).unwrap();
        let d = 2.0;
        let closed = 0.5 * (d * (1.0 - ab) - d + ab * x0.norm_squared() - d * (1.0 - ab).ln());
        assert!((kl - closed).abs() < 1e-14);
        assert!((kl - 0.443_147_2).abs() < 1e-7);
    }

    #[test]
    fn kl_rejects_singular_reference() {
        let singular = GaussianLaw::new(DVector::zeros(2), DMatrix::zeros(2, 2)).unwrap();
        assert!(matches!(
            gaussian_kl(&GaussianLaw::standard(2), &singular),
            Err(Error::SingularCovariance)
        ));
        assert_eq!(
            gaussian_kl(&singular, &GaussianLaw::standard(2)).unwrap(),
            f64::INFINITY
        );
    }

    #[test]
    fn tv_bound_examples() {
        let p = aniso_target();
        assert_eq!(gaussian_tv_bound(&p, &p).unwrap(), 0.0);
        assert_eq!(tv_from_kl(2.0), 1.0);
        assert!((tv_from_kl(0.08) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn kl_is_nonnegative_and_permutation_invariant() {
        let mut stream = RandomStream::new(31);
        for _ in 0..50 {
            let random_law = |stream: &mut RandomStream| {
                let a = DMatrix::from_fn(3, 3, |_, _| stream.standard_normal());
                let cov = &a * a.transpose() + DMatrix::identity(3, 3) * 0.1;
                GaussianLaw::new(stream.normal_vector(3), symmetrize(cov)).unwrap()
            };
            let p = random_law(&mut stream);
            let q = random_law(&mut stream);
            let kl = gaussian_kl(&p, &q).unwrap();
            assert!(kl >= -1e-10);
            let perm =
                DMatrix::from_row_slice(3, 3, &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
            let permute = |l: &GaussianLaw| {
                GaussianLaw::new(
                    &perm * l.mean(),
                    symmetrize(&perm * l.cov() * perm.transpose()),
                )
                .unwrap()
            };
            let kl_perm = gaussian_kl(&permute(&p), &permute(&q)).unwrap();
            assert!((kl - kl_perm).abs() <= 1e-12 * kl.max(1.0));
        }
    }

    #[test]
    fn gaussian_law_validation() {
        assert!(GaussianLaw::new(
            DVector::zeros(2),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0])
        )
        .is_err());
        assert!(GaussianLaw::new(DVector::zeros(1), DMatrix::from_element(1, 1, -1.0)).is_err());
    }

    #[test]
    fn model_propagation_matches_exact_path() {
        let s = schedule(64, 2);
        let target = aniso_target();
        let mixture =
            GaussianMixture::gaussian(target.mean().clone(), target.cov().clone()).unwrap();
        let model = ScoreModel::exact(&mixture, &s).unwrap();
        for kind in [
            SamplerKind::AcceleratedNoclip,
            SamplerKind::Ddpm,
            SamplerKind::Ode,
        ] {
            let a = propagate(&s, &target, kind).unwrap();
            let b = propagate_model(&s, &model, kind).unwrap();
            assert!((a.mean() - b.mean()).amax() < 1e-12);
            assert!((a.cov() - b.cov()).amax() < 1e-12);
        }
        let report = analytic_report(&s, &model, SamplerKind::Accelerated).unwrap();
        assert_eq!(report.kind, SamplerKind::AcceleratedNoclip);
        assert!(report.kl > 0.0 && report.kl_reverse > 0.0);
    }

    #[test]
    fn offset_increases_analytic_kl() {
        let s = schedule(64, 2);
        let mixture = GaussianMixture::standard_normal(2);
        let kls: Vec<f64> = [0.0, 0.1, 0.3]
            .iter()
            .map(|&d| {
                let model = ScoreModel::offset(&mixture, &s, vec![d; 64]).unwrap();
                analytic_report(&s, &model, SamplerKind::AcceleratedNoclip)
                    .unwrap()
                    .kl
            })
            .collect();
        assert!(kls[0] < kls[1] && kls[1] < kls[2], "{kls:?}");
    }
}
