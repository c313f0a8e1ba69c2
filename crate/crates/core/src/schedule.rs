//! Diffusion-rate schedules and the uniform time grid.
//!
//! The forward noising process is `dX = -½β²(t) X dt + β(t) dW` on `[0, T]`.
//! The reverse-time coefficient used by the rollout is `β̄(t) = β(T - t)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Smallest admissible knot value.
pub const BETA_FLOOR: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("time {t} outside [0, {horizon}]")]
    Domain { t: f64, horizon: f64 },
    #[error("non-positive beta {beta} at knot {index}")]
    NonPositiveBeta { index: usize, beta: f64 },
    #[error("beta {beta} at knot {index} is below the floor {BETA_FLOOR}")]
    BelowFloor { index: usize, beta: f64 },
    #[error("knot {index} at t={t} is not strictly after the previous knot")]
    UnorderedKnots { index: usize, t: f64 },
    #[error("horizon not covered: knots span [{first}, {last}] but T = {horizon}")]
    HorizonNotCovered { first: f64, last: f64, horizon: f64 },
    #[error("horizon must be positive and finite, got {0}")]
    BadHorizon(f64),
    #[error("piecewise-linear schedule needs at least two knots, got {0}")]
    TooFewKnots(usize),
    #[error("time step {dt} does not divide horizon {horizon}")]
    GridMismatch { dt: f64, horizon: f64 },
    #[error("time step must be positive and finite, got {0}")]
    BadStep(f64),
}

/// The diffusion rate β on `[0, T]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum BetaSchedule {
    Constant {
        #[serde(default = "unit_beta")]
        beta: f64,
        #[serde(rename = "T")]
        horizon: f64,
    },
    /// Linear interpolation between `(time, beta)` knots.
    PiecewiseLinear {
        knots: Vec<(f64, f64)>,
        #[serde(rename = "T")]
        horizon: f64,
    },
}

impl BetaSchedule {
    pub fn constant(beta: f64, horizon: f64) -> Self {
        BetaSchedule::Constant { beta, horizon }
    }

    pub fn piecewise_linear(knots: Vec<(f64, f64)>, horizon: f64) -> Self {
        BetaSchedule::PiecewiseLinear { knots, horizon }
    }

    pub fn horizon(&self) -> f64 {
        match self {
            BetaSchedule::Constant { horizon, .. } | BetaSchedule::PiecewiseLinear { horizon, .. } => {
                *horizon
            }
        }
    }

    /// Checks positivity, knot ordering and coverage of `[0, T]`.
    pub fn validate(&self) -> Result<(), ScheduleError> {
        let horizon = self.horizon();
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(ScheduleError::BadHorizon(horizon));
        }
        let check_beta = |index: usize, beta: f64| {
            if !(beta > 0.0) {
                Err(ScheduleError::NonPositiveBeta { index, beta })
            } else if beta < BETA_FLOOR || !beta.is_finite() {
                Err(ScheduleError::BelowFloor { index, beta })
            } else {
                Ok(())
            }
        };
        match self {
            BetaSchedule::Constant { beta, .. } => check_beta(0, *beta),
            BetaSchedule::PiecewiseLinear { knots, .. } => {
                if knots.len() < 2 {
                    return Err(ScheduleError::TooFewKnots(knots.len()));
                }
                for (i, &(t, b)) in knots.iter().enumerate() {
                    check_beta(i, b)?;
                    if i > 0 && !(t > knots[i - 1].0) {
                        return Err(ScheduleError::UnorderedKnots { index: i, t });
                    }
                }
                let first = knots[0].0;
                let last = knots[knots.len() - 1].0;
                let tol = 1e-12 * horizon.max(1.0);
                if first.abs() > tol || (last - horizon).abs() > tol {
                    return Err(ScheduleError::HorizonNotCovered {
                        first,
                        last,
                        horizon,
                    });
                }
                Ok(())
            }
        }
    }

    fn check_domain(&self, t: f64) -> Result<(), ScheduleError> {
        let horizon = self.horizon();
        if (0.0..=horizon).contains(&t) {
            Ok(())
        } else {
            Err(ScheduleError::Domain { t, horizon })
        }
    }

    /// β(t).
    pub fn beta_at(&self, t: f64) -> Result<f64, ScheduleError> {
        self.check_domain(t)?;
        Ok(match self {
            BetaSchedule::Constant { beta, .. } => *beta,
            BetaSchedule::PiecewiseLinear { knots, .. } => {
                let (left, right) = segment(knots, t);
                lerp(left, right, t)
            }
        })
    }

    /// β̄(t) = β(T - t).
    pub fn reverse_beta_at(&self, t: f64) -> Result<f64, ScheduleError> {
        self.check_domain(t)?;
        // clamp guards T - t drifting below zero by rounding
        self.beta_at((self.horizon() - t).max(0.0))
    }

    /// ᾱ(t) = ∫₀ᵗ β²(s) ds in closed form.
    pub fn alpha_bar(&self, t: f64) -> Result<f64, ScheduleError> {
        self.check_domain(t)?;
        Ok(match self {
            BetaSchedule::Constant { beta, .. } => beta * beta * t,
            BetaSchedule::PiecewiseLinear { knots, .. } => {
                let mut acc = 0.0;
                for w in knots.windows(2) {
                    let (t0, b0) = w[0];
                    let (t1, b1) = w[1];
                    if t <= t0 {
                        break;
                    }
                    let (end, b_end) = if t >= t1 { (t1, b1) } else { (t, lerp(w[0], w[1], t)) };
                    acc += (end - t0) * (b0 * b0 + b0 * b_end + b_end * b_end) / 3.0;
                }
                acc
            }
        })
    }
}

fn unit_beta() -> f64 {
    1.0
}

fn segment(knots: &[(f64, f64)], t: f64) -> ((f64, f64), (f64, f64)) {
    let idx = knots.partition_point(|&(kt, _)| kt <= t);
    let right = idx.clamp(1, knots.len() - 1);
    (knots[right - 1], knots[right])
}

fn lerp((t0, b0): (f64, f64), (t1, b1): (f64, f64), t: f64) -> f64 {
    let w = ((t - t0) / (t1 - t0)).clamp(0.0, 1.0);
    b0 + w * (b1 - b0)
}

/// Uniform partition `0 = t₀ < … < t_N = T`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub steps: usize,
    pub dt: f64,
    pub horizon: f64,
}

impl TimeGrid {
    /// Builds the grid from a requested step; `dt` must divide `horizon`
    /// up to a relative tolerance of 1e-9.
    pub fn from_step(horizon: f64, dt: f64) -> Result<Self, ScheduleError> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(ScheduleError::BadHorizon(horizon));
        }
        if !(dt.is_finite() && dt > 0.0) {
            return Err(ScheduleError::BadStep(dt));
        }
        let ratio = horizon / dt;
        let steps = ratio.round();
        if steps < 1.0 || (ratio - steps).abs() > 1e-9 * steps {
            return Err(ScheduleError::GridMismatch { dt, horizon });
        }
        Ok(Self::with_steps(horizon, steps as usize))
    }

    pub fn with_steps(horizon: f64, steps: usize) -> Self {
        assert!(steps > 0, "time grid needs at least one step");
        TimeGrid {
            steps,
            dt: horizon / steps as f64,
            horizon,
        }
    }

    /// Node `tᵢ`; the last node is exactly `T`.
    pub fn node(&self, i: usize) -> f64 {
        if i >= self.steps {
            self.horizon
        } else {
            i as f64 * self.dt
        }
    }

    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        (0..=self.steps).map(|i| self.node(i))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn beta_examples() {
        assert_eq!(BetaSchedule::constant(1.0, 3.0).beta_at(1.7).unwrap(), 1.0);
        let s = BetaSchedule::constant(2f64.sqrt(), 3.0);
        assert!((s.beta_at(0.0).unwrap() - 1.414_213_56).abs() < 1e-8);
        let pl = BetaSchedule::piecewise_linear(vec![(0.0, 1.0), (3.0, 2.0)], 3.0);
        assert!((pl.beta_at(1.5).unwrap() - 1.5).abs() < 1e-15);
        assert_eq!(pl.beta_at(3.0).unwrap(), 2.0);
        assert_eq!(pl.beta_at(0.0).unwrap(), 1.0);
    }

    #[test]
    fn beta_domain_error() {
        let s = BetaSchedule::constant(1.0, 3.0);
        assert!(matches!(s.beta_at(-0.1), Err(ScheduleError::Domain { .. })));
        assert!(matches!(s.beta_at(3.1), Err(ScheduleError::Domain { .. })));
        assert!(s.alpha_bar(4.0).is_err());
    }

    fn trapezoid(s: &BetaSchedule, t: f64, h: f64) -> f64 {
        let n = (t / h).round() as usize;
        let h = t / n as f64;
        let f = |u: f64| s.beta_at(u).unwrap().powi(2);
        let mut acc = 0.5 * (f(0.0) + f(t));
        for i in 1..n {
            acc += f(i as f64 * h);
        }
        acc * h
    }

    #[test]
    fn alpha_bar_examples() {
        assert_eq!(BetaSchedule::constant(1.0, 3.0).alpha_bar(3.0).unwrap(), 3.0);
        let s = BetaSchedule::constant(2f64.sqrt(), 3.0);
        assert!((s.alpha_bar(2.0).unwrap() - 4.0).abs() < 1e-14);
        let pl = BetaSchedule::piecewise_linear(vec![(0.0, 1.0), (3.0, 2.0)], 3.0);
        let exact = pl.alpha_bar(3.0).unwrap();
        assert!((exact - 7.0).abs() < 1e-14);
        assert!((trapezoid(&pl, 3.0, 1e-6) - 7.0).abs() < 1e-6);
    }

    #[test]
    fn alpha_bar_matches_trapezoid_on_multi_knot() {
        let pl = BetaSchedule::piecewise_linear(vec![(0.0, 0.5), (1.0, 2.0), (2.5, 1.0), (3.0, 1.2)], 3.0);
        for &t in &[0.3, 1.0, 1.7, 2.9, 3.0] {
            let q = trapezoid(&pl, t, 1e-5);
            assert!((pl.alpha_bar(t).unwrap() - q).abs() < 1e-6, "t={t}");
        }
        assert_eq!(pl.alpha_bar(0.0).unwrap(), 0.0);
    }

    #[test]
    fn validate_examples() {
        assert!(BetaSchedule::constant(1.0, 3.0).validate().is_ok());
        let zero = BetaSchedule::piecewise_linear(vec![(0.0, 1.0), (3.0, 0.0)], 3.0);
        let err = zero.validate().unwrap_err();
        assert!(err.to_string().contains("non-positive beta"), "{err}");
        assert!(err.to_string().contains("knot 1"));
        let short = BetaSchedule::piecewise_linear(vec![(0.0, 1.0), (2.0, 1.0)], 3.0);
        assert!(short.validate().unwrap_err().to_string().contains("horizon not covered"));
        let unordered = BetaSchedule::piecewise_linear(vec![(0.0, 1.0), (2.0, 1.0), (1.0, 1.0), (3.0, 1.0)], 3.0);
        assert!(matches!(unordered.validate(), Err(ScheduleError::UnorderedKnots { index: 2, .. })));
        let tiny = BetaSchedule::constant(1e-9, 3.0);
        assert!(matches!(tiny.validate(), Err(ScheduleError::BelowFloor { .. })));
        assert!(BetaSchedule::constant(1.0, 0.0).validate().is_err());
    }

    #[test]
    fn time_grid() {
        let g = TimeGrid::from_step(3.0, 0.01).unwrap();
        assert_eq!(g.steps, 300);
        assert!((g.steps as f64 * g.dt - 3.0).abs() <= f64::EPSILON * 3.0);
        assert_eq!(g.node(300), 3.0);
        assert_eq!(g.node(0), 0.0);
        let nodes: Vec<f64> = g.nodes().collect();
        assert!(nodes.windows(2).all(|w| w[1] > w[0]));
        assert!(TimeGrid::from_step(3.0, 0.007).is_err());
        assert!(TimeGrid::from_step(3.0, -0.01).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn alpha_bar_nondecreasing(b0 in 0.1f64..3.0, b1 in 0.1f64..3.0, b2 in 0.1f64..3.0, t in 0.0f64..3.0, dt in 0.0f64..0.5) {
                let s = BetaSchedule::piecewise_linear(vec![(0.0, b0), (1.2, b1), (3.0, b2)], 3.0);
                let t2 = (t + dt).min(3.0);
                prop_assert!(s.alpha_bar(t2).unwrap() >= s.alpha_bar(t).unwrap());
            }

            #[test]
            fn derivative_of_alpha_bar_is_beta_squared(b0 in 0.1f64..3.0, b1 in 0.1f64..3.0, t in 0.01f64..2.99) {
                let pl = BetaSchedule::piecewise_linear(vec![(0.0, b0), (3.0, b1)], 3.0);
                let h = 1e-5;
                let fd = (pl.alpha_bar(t + h).unwrap() - pl.alpha_bar(t - h).unwrap()) / (2.0 * h);
                prop_assert!((fd - pl.beta_at(t).unwrap().powi(2)).abs() < 1e-6);
                let c = BetaSchedule::constant(b0, 3.0);
                let fd = (c.alpha_bar(t + h).unwrap() - c.alpha_bar(t - h).unwrap()) / (2.0 * h);
                prop_assert!((fd - b0 * b0).abs() < 1e-9);
            }

            #[test]
            fn reverse_beta_is_mirror(b0 in 0.1f64..3.0, b1 in 0.1f64..3.0, t in 0.0f64..3.0) {
                let s = BetaSchedule::piecewise_linear(vec![(0.0, b0), (3.0, b1)], 3.0);
                prop_assert_eq!(s.reverse_beta_at(t).unwrap(), s.beta_at(3.0 - t).unwrap());
            }
        }
    }
}
