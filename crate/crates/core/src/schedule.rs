//! Learning-rate schedule and the per-step coefficients derived from it.
//!
//! The cumulative rates are fixed at the terminal step, `ᾱ_T = T^{-C0}`, and
//! filled in backwards through
//!
//! ```text
//! ᾱ_{t-1} = ᾱ_t + C1 · (ln T / T) · ᾱ_t · (1 - ᾱ_t),   t = T, ..., 2
//! ```
//!
//! From these follow `α_t = ᾱ_t / ᾱ_{t-1}`, the step-noise scale
//! `σ_t² = α_t - 1/(3 - 2α_t)` and the clip radius
//! `r_t = C_clip · (1 - α_t) · (d ln T / (1 - ᾱ_t))^{3/2}`.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

pub const DEFAULT_C0: f64 = 4.0;
pub const DEFAULT_C1: f64 = 4.0;
pub const DEFAULT_C_CLIP: f64 = 2.0;

/// `α_t` at or below this makes `σ_t²` non-positive.
const DEGENERATE_ALPHA: f64 = 0.5 + 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub horizon: usize,
    pub c0: f64,
    pub c1: f64,
    pub c_clip: f64,
    pub dim: usize,
}

impl ScheduleParams {
    /// Default constants for horizon `horizon` in dimension `dim`.
    pub fn new(horizon: usize, dim: usize) -> Self {
        Self {
            horizon,
            c0: DEFAULT_C0,
            c1: DEFAULT_C1,
            c_clip: DEFAULT_C_CLIP,
            dim,
        }
    }

    pub fn with_constants(mut self, c0: f64, c1: f64, c_clip: f64) -> Self {
        self.c0 = c0;
        self.c1 = c1;
        self.c_clip = c_clip;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon < 2 {
            return Err(Error::InvalidParams(format!(
                "horizon must be at least 2, got {}",
                self.horizon
            )));
        }
        if self.dim < 1 {
            return Err(Error::InvalidParams("dimension must be at least 1".into()));
        }
        for (name, v) in [("c0", self.c0), ("c1", self.c1), ("c_clip", self.c_clip)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParams(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// `C1 · ln T / T`, the scale every schedule bound is stated in.
    pub fn step_scale(&self) -> f64 {
        let t = self.horizon as f64;
        self.c1 * t.ln() / t
    }
}

/// Immutable schedule for a fixed horizon. Step indices are 1-based.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    params: ScheduleParams,
    alpha_bar: Vec<f64>,
    alpha: Vec<f64>,
    /// `1 - ᾱ_t` and `1 - α_t`, kept separately so they stay accurate when
    /// the rates are within rounding of 1.
    one_minus_alpha_bar: Vec<f64>,
    one_minus_alpha: Vec<f64>,
    sigma: Vec<f64>,
    clip_radius: Vec<f64>,
}

impl Schedule {
    pub fn build(params: ScheduleParams) -> Result<Self> {
        params.validate()?;
        let horizon = params.horizon;
        let scale = params.step_scale();

        let mut alpha_bar = vec![0.0; horizon];
        let mut comp_bar = vec![0.0; horizon];
        alpha_bar[horizon - 1] = (horizon as f64).powf(-params.c0);
        comp_bar[horizon - 1] = 1.0 - alpha_bar[horizon - 1];
        for t in (2..=horizon).rev() {
            let ab = alpha_bar[t - 1];
            let prev = ab + scale * ab * comp_bar[t - 1];
            if prev.is_nan() || prev >= 1.0 {
                return Err(Error::ScheduleDegenerate {
                    t: t - 1,
                    reason: format!("alpha_bar reached {prev}, must stay below 1"),
                });
            }
            alpha_bar[t - 2] = prev;
            comp_bar[t - 2] = comp_bar[t - 1] * (1.0 - scale * ab);
        }

        let mut alpha = vec![0.0; horizon];
        let mut comp = vec![0.0; horizon];
        alpha[0] = alpha_bar[0];
        comp[0] = comp_bar[0];
        for t in 2..=horizon {
            alpha[t - 1] = alpha_bar[t - 1] / alpha_bar[t - 2];
            comp[t - 1] = scale * alpha_bar[t - 1] * comp_bar[t - 1] / alpha_bar[t - 2];
        }
        Self::assemble(params, alpha_bar, alpha, comp_bar, comp)
    }

    /// Assemble a schedule from explicit `ᾱ_1..ᾱ_T` and `α_1..α_T`.
    ///
    /// The two arrays are not required to be consistent with each other, which
    /// lets tests exercise the lemma checks on handcrafted schedules. `σ_t` and
    /// `r_t` are derived from `α_t` and `ᾱ_t` as usual.
    pub fn from_coefficients(
        params: ScheduleParams,
        alpha_bar: Vec<f64>,
        alpha: Vec<f64>,
    ) -> Result<Self> {
        params.validate()?;
        let horizon = params.horizon;
        if alpha_bar.len() != horizon || alpha.len() != horizon {
            return Err(Error::InvalidParams(format!(
                "expected {horizon} coefficients, got alpha_bar={} alpha={}",
                alpha_bar.len(),
                alpha.len()
            )));
        }
        let comp_bar = alpha_bar.iter().map(|ab| 1.0 - ab).collect();
        let comp = alpha.iter().map(|a| 1.0 - a).collect();
        Self::assemble(params, alpha_bar, alpha, comp_bar, comp)
    }

    fn assemble(
        params: ScheduleParams,
        alpha_bar: Vec<f64>,
        alpha: Vec<f64>,
        one_minus_alpha_bar: Vec<f64>,
        one_minus_alpha: Vec<f64>,
    ) -> Result<Self> {
        let horizon = params.horizon;
        let log_t = (horizon as f64).ln();
        let d = params.dim as f64;

        let mut sigma = Vec::with_capacity(horizon - 1);
        let mut clip_radius = Vec::with_capacity(horizon - 1);
        for t in 2..=horizon {
            let a = alpha[t - 1];
            let ab = alpha_bar[t - 1];
            if !(a > DEGENERATE_ALPHA && a < 1.0) {
                return Err(Error::ScheduleDegenerate {
                    t,
                    reason: format!("alpha_t = {a} outside (1/2, 1); C1 ln T / T too large"),
                });
            }
            if !(ab > 0.0 && ab < 1.0) {
                return Err(Error::ScheduleDegenerate {
                    t,
                    reason: format!("alpha_bar_t = {ab} outside (0, 1)"),
                });
            }
            let (ca, cab) = (one_minus_alpha[t - 1], one_minus_alpha_bar[t - 1]);
            sigma.push((ca * (1.0 - 2.0 * ca) / (1.0 + 2.0 * ca)).sqrt());
            clip_radius.push(params.c_clip * ca * (d * log_t / cab).powf(1.5));
        }

        Ok(Self {
            params,
            alpha_bar,
            alpha,
            one_minus_alpha_bar,
            one_minus_alpha,
            sigma,
            clip_radius,
        })
    }

    pub fn params(&self) -> &ScheduleParams {
        &self.params
    }

    pub fn horizon(&self) -> usize {
        self.params.horizon
    }

    pub fn dim(&self) -> usize {
        self.params.dim
    }

    /// `ᾱ_t` for `1 ≤ t ≤ T`; `ᾱ_0 = 1` by convention.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// `1 - ᾱ_t`, with `t = 0` giving 0.
    pub fn one_minus_alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            0.0
        } else {
            self.one_minus_alpha_bar[t - 1]
        }
    }

    pub fn one_minus_alpha(&self, t: usize) -> f64 {
        self.one_minus_alpha[t - 1]
    }

    /// Step-noise standard deviation, defined for `t ≥ 2`.
    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t - 2]
    }

    /// Clip radius, defined for `t ≥ 2`.
    pub fn clip_radius(&self, t: usize) -> f64 {
        self.clip_radius[t - 2]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    /// Errors unless `2 ≤ t ≤ T`, the range on which reverse steps exist.
    pub fn check_step(&self, t: usize) -> Result<()> {
        if (2..=self.horizon()).contains(&t) {
            Ok(())
        } else {
            Err(Error::IndexOutOfRange {
                t,
                lo: 2,
                hi: self.horizon(),
            })
        }
    }

    /// Indicator thresholding: `x` if `‖x‖₂ ≤ r_t`, the zero vector otherwise.
    pub fn clip(&self, t: usize, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(self.dim(), x.len())?;
        self.check_step(t)?;
        if x.norm() <= self.clip_radius(t) {
            Ok(x.clone())
        } else {
            Ok(DVector::zeros(x.len()))
        }
    }

    pub fn lemma_checks(&self) -> CheckReport {
        CheckReport::evaluate(self)
    }
}

/// `σ² = (1-α)(2α-1)/(3-2α)`, algebraically equal to `α - 1/(3-2α)` but
/// without the cancellation near `α = 1`.
pub fn step_noise_variance(alpha: f64) -> f64 {
    (1.0 - alpha) * (2.0 * alpha - 1.0) / (3.0 - 2.0 * alpha)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepCheckRow {
    pub t: usize,
    /// `(1-α_t) - C1 ln T/T`
    pub step_margin: f64,
    /// `(1-α_t)/(1-ᾱ_t) - C1 ln T/T`
    pub relative_margin: f64,
    /// `(1-ᾱ_t)/(1-ᾱ_{t-1}) - (1 + 2 C1 ln T/T)`
    pub ratio_margin: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedCheck {
    pub name: &'static str,
    pub passed: bool,
    /// Largest `lhs - rhs` over all steps; positive means violated.
    pub worst_margin: f64,
}

/// Verdicts for the four schedule inequalities. Margins are `lhs - rhs`,
/// so a check passes when its worst margin is `≤ 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub rows: Vec<StepCheckRow>,
    /// `(1-α_1) - T^{-C1/4}`
    pub alpha_one_margin: f64,
    pub checks: [NamedCheck; 4],
}

impl CheckReport {
    fn evaluate(s: &Schedule) -> Self {
        let scale = s.params.step_scale();
        let horizon = s.horizon();
        let rows: Vec<StepCheckRow> = (2..=horizon)
            .map(|t| {
                let ca = s.one_minus_alpha(t);
                let cab = s.one_minus_alpha_bar(t);
                let cab_prev = s.one_minus_alpha_bar(t - 1);
                StepCheckRow {
                    t,
                    step_margin: ca - scale,
                    relative_margin: ca / cab - scale,
                    ratio_margin: cab / cab_prev - (1.0 + 2.0 * scale),
                }
            })
            .collect();
        let alpha_one_margin = s.one_minus_alpha(1) - (horizon as f64).powf(-s.params.c1 / 4.0);

        let worst =
            |f: fn(&StepCheckRow) -> f64| rows.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
        let check = |name, worst_margin: f64| NamedCheck {
            name,
            passed: worst_margin <= 0.0,
            worst_margin,
        };
        let checks = [
            check("one_minus_alpha", worst(|r| r.step_margin)),
            check("relative_step", worst(|r| r.relative_margin)),
            check("noise_ratio", worst(|r| r.ratio_margin)),
            check("alpha_one", alpha_one_margin),
        ];
        Self {
            rows,
            alpha_one_margin,
            checks,
        }
    }

    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&NamedCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn params(horizon: usize, c0: f64, c1: f64) -> ScheduleParams {
        ScheduleParams::new(horizon, 1).with_constants(c0, c1, 1.0)
    }

    #[test]
    fn terminal_alpha_bar_is_power_of_horizon() {
        let s = Schedule::build(params(10, 2.0, 1.0)).unwrap();
        assert_eq!(s.alpha_bar(10), 0.01);
    }

    #[test]
    fn one_backward_step_matches_hand_value() {
        let s = Schedule::build(params(10, 2.0, 1.0)).unwrap();
        assert!((s.alpha_bar(9) - 0.012_279_56).abs() < 1e-8);
    }

    #[test]
    fn sigma_closed_forms_agree() {
        assert!((step_noise_variance(0.99) - 0.009_607_843).abs() < 1e-9);
        for a in [0.51, 0.6, 0.75, 0.9, 0.96, 0.99] {
            let direct = a - 1.0 / (3.0 - 2.0 * a);
            let factored = step_noise_variance(a);
            assert!(((direct - factored) / factored).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_params() {
        assert!(matches!(
            Schedule::build(params(1, 4.0, 4.0)),
            Err(Error::InvalidParams(_))
        ));
        assert!(matches!(
            Schedule::build(params(16, 0.0, 4.0)),
            Err(Error::InvalidParams(_))
        ));
        assert!(matches!(
            Schedule::build(params(16, 4.0, -1.0)),
            Err(Error::InvalidParams(_))
        ));
        let mut p = params(16, 4.0, 4.0);
        p.dim = 0;
        assert!(matches!(Schedule::build(p), Err(Error::InvalidParams(_))));
    }

    #[test]
    fn large_gain_is_degenerate() {
        // C1 ln 8 / 8 > 1 drives α_t below 1/2
        assert!(matches!(
            Schedule::build(params(8, 4.0, 4.0)),
            Err(Error::ScheduleDegenerate { .. })
        ));
    }

    #[test]
    fn lemma_checks_hold_on_default_grid_except_alpha_one() {
        let s = Schedule::build(params(128, 4.0, 4.0)).unwrap();
        let report = s.lemma_checks();
        assert!(report.check("one_minus_alpha").unwrap().passed);
        assert!(report.check("relative_step").unwrap().passed);
        assert!(report.check("noise_ratio").unwrap().passed);
        // with C1/C0 = 1 the recursion leaves ᾱ_1 ≈ 0.19, far from 1 - 1/T
        assert!(!report.check("alpha_one").unwrap().passed);
    }

    #[test]
    fn alpha_one_bound_holds_with_larger_gain_ratio() {
        let s = Schedule::build(params(128, 4.0, 8.0)).unwrap();
        assert!(s.lemma_checks().all_passed());
    }

    #[test]
    fn overwritten_step_violates_first_check_by_scale() {
        let base = Schedule::build(params(128, 4.0, 4.0)).unwrap();
        let scale = base.params().step_scale();
        let mut alpha = base.alphas().to_vec();
        alpha[1] = 1.0 - 2.0 * scale;
        let s =
            Schedule::from_coefficients(*base.params(), base.alpha_bars().to_vec(), alpha).unwrap();
        let check = s.lemma_checks().check("one_minus_alpha").unwrap().clone();
        assert!(!check.passed);
        assert!((check.worst_margin - scale).abs() < 1e-12);
    }

    #[test]
    fn minimal_horizon_report_has_one_row() {
        let s = Schedule::build(params(2, 1.0, 0.5)).unwrap();
        let report = s.lemma_checks();
        assert_eq!(report.rows.len(), 1);
        assert_eq!(report.rows[0].t, 2);
        assert!(report.alpha_one_margin.is_finite());
    }

    #[test]
    fn clip_examples() {
        let s = Schedule::build(ScheduleParams::new(64, 3)).unwrap();
        let t = 10;
        let r = s.clip_radius(t);
        let zero = DVector::zeros(3);
        assert_eq!(s.clip(t, &zero).unwrap(), zero);

        let dir = DVector::from_vec(vec![1.0, -2.0, 2.0]) / 3.0;
        assert_eq!(s.clip(t, &(&dir * (2.0 * r))).unwrap(), zero);
        let inside = &dir * (0.5 * r);
        assert_eq!(s.clip(t, &inside).unwrap(), inside);
    }

    #[test]
    fn clip_rejects_bad_inputs() {
        let s = Schedule::build(ScheduleParams::new(64, 2)).unwrap();
        assert!(matches!(
            s.clip(3, &DVector::zeros(3)),
            Err(Error::DimensionMismatch {
                expected: 2,
                got: 3
            })
        ));
        assert!(matches!(
            s.clip(1, &DVector::zeros(2)),
            Err(Error::IndexOutOfRange { t: 1, .. })
        ));
        assert!(matches!(
            s.clip(65, &DVector::zeros(2)),
            Err(Error::IndexOutOfRange { t: 65, .. })
        ));
    }

    proptest! {
        #[test]
        fn schedule_invariants(
            horizon in 16usize..600,
            c0 in 0.5f64..6.0,
            c1 in 0.5f64..4.0,
        ) {
            let p = params(horizon, c0, c1);
            let s = match Schedule::build(p) {
                Ok(s) => s,
                Err(Error::ScheduleDegenerate { .. }) => return Ok(()),
                Err(e) => panic!("{e}"),
            };
            let mut product = 1.0;
            for t in 1..=horizon {
                product *= s.alpha(t);
                prop_assert!(((product - s.alpha_bar(t)) / s.alpha_bar(t)).abs() < 1e-10);
            }
            for t in 2..=horizon {
                prop_assert!(s.alpha_bar(t) > 0.0);
                prop_assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
                prop_assert!(s.alpha_bar(t - 1) < 1.0);
                prop_assert!(s.alpha(t) > 0.5 && s.alpha(t) < 1.0);
                prop_assert!(s.sigma(t) > 0.0);
                prop_assert!(s.clip_radius(t) > 0.0);
            }
        }

        #[test]
        fn clip_is_idempotent(xs in proptest::collection::vec(-50.0f64..50.0, 2), t in 2usize..=32) {
            let s = Schedule::build(ScheduleParams::new(32, 2)).unwrap();
            let x = DVector::from_vec(xs);
            let once = s.clip(t, &x).unwrap();
            prop_assert_eq!(s.clip(t, &once).unwrap(), once);
        }
    }
}
