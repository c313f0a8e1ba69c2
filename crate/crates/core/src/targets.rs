//! Unnormalized target densities and the analytic oracles for the built-ins.
//!
//! A target exposes `g(x) = log π(x)` where `π = c·p₀` for an unknown constant
//! `c`. The sampler only ever touches `g` and `∇g`. Built-in targets are
//! diagonal-covariance Gaussian mixtures, for which the diffused density
//! `p(t, ·)` of the forward process stays a mixture with closed-form
//! parameters.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schedule::{BetaSchedule, ScheduleError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TargetError {
    #[error("log density is not finite while probing coordinate {coord} at x = {x:?}")]
    GradientProbe { coord: usize, x: Vec<f64> },
    #[error("no analytic oracle for target '{0}'")]
    UnsupportedOracle(String),
    #[error("invalid target: {0}")]
    Invalid(String),
    #[error("point has dimension {got}, target has dimension {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
}

/// An unnormalized log-density on ℝⁿ.
pub trait Target: Send + Sync {
    fn dim(&self) -> usize;

    /// `log π(x)`, defined up to an additive constant.
    fn log_pi(&self, x: &[f64]) -> f64;

    /// `∇ log π(x)`. Defaults to central finite differences.
    fn grad_log_pi(&self, x: &[f64], out: &mut [f64]) -> Result<(), TargetError> {
        let g = log_pi_grad_fd(self, x)?;
        out.copy_from_slice(&g);
        Ok(())
    }

    /// Writes the row-major Hessian of `log π` into `out` and returns `true`
    /// when an analytic second derivative is available.
    fn hessian_log_pi(&self, _x: &[f64], _out: &mut [f64]) -> bool {
        false
    }

    /// Gradient and (when available) Hessian in one pass.
    fn grad_hessian_log_pi(
        &self,
        x: &[f64],
        grad: &mut [f64],
        hess: &mut [f64],
    ) -> Result<bool, TargetError> {
        self.grad_log_pi(x, grad)?;
        Ok(self.hessian_log_pi(x, hess))
    }

    fn descriptor(&self) -> TargetDescriptor;

    /// The exact law `p₀` as a mixture, for targets with a closed form.
    fn oracle(&self) -> Option<&DiagMixture> {
        None
    }

    /// `log c` where `π = c·p₀`, when known.
    fn log_normalizer(&self) -> Option<f64> {
        None
    }
}

impl fmt::Debug for dyn Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Target({:?})", self.descriptor())
    }
}

/// Central-difference gradient with step `1e-5·max(1, |xᵢ|)` per coordinate.
pub fn log_pi_grad_fd<T: Target + ?Sized>(target: &T, x: &[f64]) -> Result<Vec<f64>, TargetError> {
    let mut probe = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let h = 1e-5 * x[i].abs().max(1.0);
        probe[i] = x[i] + h;
        let up = target.log_pi(&probe);
        probe[i] = x[i] - h;
        let down = target.log_pi(&probe);
        probe[i] = x[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(TargetError::GradientProbe {
                coord: i,
                x: x.to_vec(),
            });
        }
        grad[i] = (up - down) / (2.0 * h);
    }
    Ok(grad)
}

/// Mixture of Gaussians with per-coordinate variances shared by all
/// components. Covers both built-in targets and their diffused marginals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagMixture {
    pub weights: Vec<f64>,
    pub centers: Vec<Vec<f64>>,
    pub variances: Vec<f64>,
}

impl DiagMixture {
    pub fn dim(&self) -> usize {
        self.variances.len()
    }

    fn validate(&self) -> Result<(), TargetError> {
        let n = self.dim();
        if n == 0 {
            return Err(TargetError::Invalid("dimension must be positive".into()));
        }
        if self.weights.is_empty() || self.weights.len() != self.centers.len() {
            return Err(TargetError::Invalid(format!(
                "{} weights for {} centers",
                self.weights.len(),
                self.centers.len()
            )));
        }
        if let Some(k) = self.centers.iter().position(|c| c.len() != n) {
            return Err(TargetError::Invalid(format!("center {k} does not have dimension {n}")));
        }
        if self.centers.iter().flatten().any(|c| !c.is_finite()) {
            return Err(TargetError::Invalid("centers must be finite".into()));
        }
        if let Some(i) = self.variances.iter().position(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(TargetError::Invalid(format!("variance {i} must be positive")));
        }
        if self.weights.iter().any(|&w| !(w >= 0.0 && w.is_finite())) {
            return Err(TargetError::Invalid("weights must be non-negative".into()));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(TargetError::Invalid(format!("weights sum to {total}, expected 1")));
        }
        Ok(())
    }

    fn log_term(&self, k: usize, x: &[f64]) -> f64 {
        let q: f64 = x
            .iter()
            .zip(&self.centers[k])
            .zip(&self.variances)
            .map(|((xi, mi), vi)| (xi - mi) * (xi - mi) / vi)
            .sum();
        self.weights[k].ln() - 0.5 * q
    }

    fn max_log_term(&self, x: &[f64]) -> f64 {
        (0..self.weights.len())
            .map(|k| self.log_term(k, x))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// `log Σₖ wₖ exp(-½ Σᵢ (xᵢ-μₖᵢ)²/vᵢ)`: the density without its
    /// Gaussian normalizer.
    pub fn log_kernel(&self, x: &[f64]) -> f64 {
        let m = self.max_log_term(x);
        if m == f64::NEG_INFINITY {
            return m;
        }
        let s: f64 = (0..self.weights.len())
            .map(|k| (self.log_term(k, x) - m).exp())
            .sum();
        m + s.ln()
    }

    /// `½ Σᵢ log(2π vᵢ)`.
    pub fn log_gaussian_normalizer(&self) -> f64 {
        0.5 * self.variances.iter().map(|v| (2.0 * PI * v).ln()).sum::<f64>()
    }

    /// Normalized log-density.
    pub fn log_density(&self, x: &[f64]) -> f64 {
        self.log_kernel(x) - self.log_gaussian_normalizer()
    }

    /// Responsibility-weighted component scores.
    pub fn score(&self, x: &[f64], out: &mut [f64]) {
        let m = self.max_log_term(x);
        out.iter_mut().for_each(|o| *o = 0.0);
        let mut total = 0.0;
        for k in 0..self.weights.len() {
            let e = (self.log_term(k, x) - m).exp();
            if e == 0.0 {
                continue;
            }
            total += e;
            for (i, o) in out.iter_mut().enumerate() {
                *o -= e * (x[i] - self.centers[k][i]) / self.variances[i];
            }
        }
        out.iter_mut().for_each(|o| *o /= total);
    }

    /// Score and row-major Hessian of the log-density.
    pub fn score_hessian(&self, x: &[f64], grad: &mut [f64], hess: &mut [f64]) {
        let n = self.dim();
        let m = self.max_log_term(x);
        grad.iter_mut().for_each(|g| *g = 0.0);
        hess.iter_mut().for_each(|h| *h = 0.0);
        let mut total = 0.0;
        for k in 0..self.weights.len() {
            let e = (self.log_term(k, x) - m).exp();
            if e == 0.0 {
                continue;
            }
            total += e;
            for i in 0..n {
                let si = -(x[i] - self.centers[k][i]) / self.variances[i];
                grad[i] += e * si;
                for j in 0..n {
                    let sj = -(x[j] - self.centers[k][j]) / self.variances[j];
                    hess[i * n + j] += e * si * sj;
                }
            }
        }
        grad.iter_mut().for_each(|g| *g /= total);
        for i in 0..n {
            for j in 0..n {
                hess[i * n + j] = hess[i * n + j] / total - grad[i] * grad[j];
            }
            hess[i * n + i] -= 1.0 / self.variances[i];
        }
    }

    /// Mixture mean per coordinate.
    pub fn mean(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.dim()];
        for (w, c) in self.weights.iter().zip(&self.centers) {
            for (m, ci) in mean.iter_mut().zip(c) {
                *m += w * ci;
            }
        }
        mean
    }

    /// Marginal variance per coordinate.
    pub fn marginal_variance(&self) -> Vec<f64> {
        let mean = self.mean();
        (0..self.dim())
            .map(|i| {
                let second: f64 = self
                    .weights
                    .iter()
                    .zip(&self.centers)
                    .map(|(w, c)| w * (self.variances[i] + c[i] * c[i]))
                    .sum();
                second - mean[i] * mean[i]
            })
            .collect()
    }

    /// Exact draw: pick a component by weight, then add Gaussian noise.
    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = self.weights.len() - 1;
        for (j, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = j;
                break;
            }
        }
        for (i, o) in out.iter_mut().enumerate() {
            let z: f64 = rng.sample(StandardNormal);
            *o = self.centers[k][i] + self.variances[i].sqrt() * z;
        }
    }
}

/// Diagonal Gaussian `N(μ, diag σ²)`, with `log π = -½ Σ (xᵢ-μᵢ)²/σᵢ²`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianTarget {
    mixture: DiagMixture,
}

impl GaussianTarget {
    pub fn new(mean: Vec<f64>, variance: Vec<f64>) -> Result<Self, TargetError> {
        if mean.len() != variance.len() {
            return Err(TargetError::Invalid(format!(
                "mean has {} entries, variance has {}",
                mean.len(),
                variance.len()
            )));
        }
        let mixture = DiagMixture {
            weights: vec![1.0],
            centers: vec![mean],
            variances: variance,
        };
        mixture.validate()?;
        Ok(GaussianTarget { mixture })
    }

    pub fn standard(dim: usize) -> Self {
        GaussianTarget::new(vec![0.0; dim], vec![1.0; dim]).expect("valid standard normal")
    }

    pub fn mean(&self) -> &[f64] {
        &self.mixture.centers[0]
    }

    pub fn variance(&self) -> &[f64] {
        &self.mixture.variances
    }
}

impl Target for GaussianTarget {
    fn dim(&self) -> usize {
        self.mixture.dim()
    }

    fn log_pi(&self, x: &[f64]) -> f64 {
        -0.5 * x
            .iter()
            .zip(self.mean())
            .zip(self.variance())
            .map(|((xi, mi), vi)| (xi - mi) * (xi - mi) / vi)
            .sum::<f64>()
    }

    fn grad_log_pi(&self, x: &[f64], out: &mut [f64]) -> Result<(), TargetError> {
        for (i, o) in out.iter_mut().enumerate() {
            *o = -(x[i] - self.mean()[i]) / self.variance()[i];
        }
        Ok(())
    }

    fn hessian_log_pi(&self, _x: &[f64], out: &mut [f64]) -> bool {
        let n = self.dim();
        out.iter_mut().for_each(|h| *h = 0.0);
        for i in 0..n {
            out[i * n + i] = -1.0 / self.variance()[i];
        }
        true
    }

    fn grad_hessian_log_pi(
        &self,
        x: &[f64],
        grad: &mut [f64],
        hess: &mut [f64],
    ) -> Result<bool, TargetError> {
        self.grad_log_pi(x, grad)?;
        Ok(self.hessian_log_pi(x, hess))
    }

    fn descriptor(&self) -> TargetDescriptor {
        TargetDescriptor::Gaussian {
            mean: self.mean().to_vec(),
            variance: self.variance().to_vec(),
        }
    }

    fn oracle(&self) -> Option<&DiagMixture> {
        Some(&self.mixture)
    }

    fn log_normalizer(&self) -> Option<f64> {
        Some(self.mixture.log_gaussian_normalizer())
    }
}

/// Gaussian mixture with common isotropic variance, `log π` computed by
/// log-sum-exp of `log wₖ - ½‖x-μₖ‖²/σ²`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureTarget {
    mixture: DiagMixture,
    variance: f64,
}

impl MixtureTarget {
    pub fn new(weights: Vec<f64>, centers: Vec<Vec<f64>>, variance: f64) -> Result<Self, TargetError> {
        let dim = centers.first().map(Vec::len).unwrap_or(0);
        let mixture = DiagMixture {
            weights,
            centers,
            variances: vec![variance; dim],
        };
        mixture.validate()?;
        Ok(MixtureTarget { mixture, variance })
    }

    /// Equal-weight mixture on the 3×3 lattice `{-2, 0, 2}²` with variance 0.3.
    pub fn nine_mode() -> Self {
        let grid = [-2.0, 0.0, 2.0];
        let centers: Vec<Vec<f64>> = grid
            .iter()
            .flat_map(|&a| grid.iter().map(move |&b| vec![a, b]))
            .collect();
        MixtureTarget::new(vec![1.0 / 9.0; 9], centers, 0.3).expect("valid nine-mode mixture")
    }

    pub fn centers(&self) -> &[Vec<f64>] {
        &self.mixture.centers
    }

    pub fn weights(&self) -> &[f64] {
        &self.mixture.weights
    }
}

impl Target for MixtureTarget {
    fn dim(&self) -> usize {
        self.mixture.dim()
    }

    fn log_pi(&self, x: &[f64]) -> f64 {
        self.mixture.log_kernel(x)
    }

    fn grad_log_pi(&self, x: &[f64], out: &mut [f64]) -> Result<(), TargetError> {
        self.mixture.score(x, out);
        Ok(())
    }

    fn hessian_log_pi(&self, x: &[f64], out: &mut [f64]) -> bool {
        let mut g = vec![0.0; self.dim()];
        self.mixture.score_hessian(x, &mut g, out);
        true
    }

    fn grad_hessian_log_pi(
        &self,
        x: &[f64],
        grad: &mut [f64],
        hess: &mut [f64],
    ) -> Result<bool, TargetError> {
        self.mixture.score_hessian(x, grad, hess);
        Ok(true)
    }

    fn descriptor(&self) -> TargetDescriptor {
        TargetDescriptor::Mixture {
            weights: self.mixture.weights.clone(),
            centers: self.mixture.centers.clone(),
            variance: self.variance,
        }
    }

    fn oracle(&self) -> Option<&DiagMixture> {
        Some(&self.mixture)
    }

    fn log_normalizer(&self) -> Option<f64> {
        Some(self.mixture.log_gaussian_normalizer())
    }
}

type ScalarFn = Box<dyn Fn(&[f64]) -> f64 + Send + Sync>;
type VectorFn = Box<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

/// User-supplied target. Without an analytic gradient, `∇g` falls back to
/// finite differences.
pub struct CustomTarget {
    name: String,
    dim: usize,
    log_pi: ScalarFn,
    grad: Option<VectorFn>,
    hessian: Option<VectorFn>,
    log_c: Option<f64>,
}

impl CustomTarget {
    pub fn new(
        name: impl Into<String>,
        dim: usize,
        log_pi: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        CustomTarget {
            name: name.into(),
            dim,
            log_pi: Box::new(log_pi),
            grad: None,
            hessian: None,
            log_c: None,
        }
    }

    pub fn with_gradient(mut self, grad: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.grad = Some(Box::new(grad));
        self
    }

    pub fn with_hessian(mut self, hess: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.hessian = Some(Box::new(hess));
        self
    }

    pub fn with_log_normalizer(mut self, log_c: f64) -> Self {
        self.log_c = Some(log_c);
        self
    }
}

impl Target for CustomTarget {
    fn dim(&self) -> usize {
        self.dim
    }

    fn log_pi(&self, x: &[f64]) -> f64 {
        (self.log_pi)(x)
    }

    fn grad_log_pi(&self, x: &[f64], out: &mut [f64]) -> Result<(), TargetError> {
        match &self.grad {
            Some(g) => {
                g(x, out);
                Ok(())
            }
            None => {
                let g = log_pi_grad_fd(self, x)?;
                out.copy_from_slice(&g);
                Ok(())
            }
        }
    }

    fn hessian_log_pi(&self, x: &[f64], out: &mut [f64]) -> bool {
        match &self.hessian {
            Some(h) => {
                h(x, out);
                true
            }
            None => false,
        }
    }

    fn descriptor(&self) -> TargetDescriptor {
        TargetDescriptor::Custom {
            name: self.name.clone(),
            dim: self.dim,
        }
    }

    fn log_normalizer(&self) -> Option<f64> {
        self.log_c
    }
}

/// Serializable description of a target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum TargetDescriptor {
    Gaussian { mean: Vec<f64>, variance: Vec<f64> },
    Mixture { weights: Vec<f64>, centers: Vec<Vec<f64>>, variance: f64 },
    Custom { name: String, dim: usize },
}

impl TargetDescriptor {
    pub fn dim(&self) -> usize {
        match self {
            TargetDescriptor::Gaussian { mean, .. } => mean.len(),
            TargetDescriptor::Mixture { centers, .. } => centers.first().map(Vec::len).unwrap_or(0),
            TargetDescriptor::Custom { dim, .. } => *dim,
        }
    }

    /// Rebuilds a built-in target. Custom targets cannot be reconstructed
    /// from their descriptor.
    pub fn build(&self) -> Result<Arc<dyn Target>, TargetError> {
        match self {
            TargetDescriptor::Gaussian { mean, variance } => {
                Ok(Arc::new(GaussianTarget::new(mean.clone(), variance.clone())?))
            }
            TargetDescriptor::Mixture {
                weights,
                centers,
                variance,
            } => Ok(Arc::new(MixtureTarget::new(weights.clone(), centers.clone(), *variance)?)),
            TargetDescriptor::Custom { name, .. } => Err(TargetError::UnsupportedOracle(name.clone())),
        }
    }
}

fn require_oracle<T: Target + ?Sized>(target: &T) -> Result<&DiagMixture, TargetError> {
    target
        .oracle()
        .ok_or_else(|| TargetError::UnsupportedOracle(format!("{:?}", target.descriptor())))
}

/// Parameters of the forward-process marginal `p(t, ·)`: centers shrink by
/// `e^{-ᾱ(t)/2}` and variances become `σ² e^{-ᾱ(t)} + 1 - e^{-ᾱ(t)}`.
pub fn diffused_density_params<T: Target + ?Sized>(
    target: &T,
    schedule: &BetaSchedule,
    t: f64,
) -> Result<DiagMixture, TargetError> {
    let base = require_oracle(target)?;
    let alpha = schedule.alpha_bar(t)?;
    let decay = (-0.5 * alpha).exp();
    let keep = (-alpha).exp();
    let noise = -(-alpha).exp_m1();
    Ok(DiagMixture {
        weights: base.weights.clone(),
        centers: base
            .centers
            .iter()
            .map(|c| c.iter().map(|m| m * decay).collect())
            .collect(),
        variances: base.variances.iter().map(|v| v * keep + noise).collect(),
    })
}

/// `∇ₓ log p(t, x)` for a built-in target, `t` in forward time.
pub fn true_score<T: Target + ?Sized>(
    target: &T,
    schedule: &BetaSchedule,
    t: f64,
    x: &[f64],
) -> Result<Vec<f64>, TargetError> {
    if x.len() != target.dim() {
        return Err(TargetError::DimMismatch {
            expected: target.dim(),
            got: x.len(),
        });
    }
    let p = diffused_density_params(target, schedule, t)?;
    let mut out = vec![0.0; x.len()];
    p.score(x, &mut out);
    Ok(out)
}

/// `u(t, x) = log p(T-t, x) - (n/2) ᾱ(T-t) + log c`, with `t` in reverse time.
/// Satisfies `u(T, x) = log π(x)`.
pub fn auxiliary_u<T: Target + ?Sized>(
    target: &T,
    schedule: &BetaSchedule,
    t: f64,
    x: &[f64],
) -> Result<f64, TargetError> {
    let log_c = target
        .log_normalizer()
        .ok_or_else(|| TargetError::UnsupportedOracle(format!("{:?}", target.descriptor())))?;
    auxiliary_u_with_constant(target, schedule, t, x, log_c)
}

/// [`auxiliary_u`] with an explicit `log c`.
pub fn auxiliary_u_with_constant<T: Target + ?Sized>(
    target: &T,
    schedule: &BetaSchedule,
    t: f64,
    x: &[f64],
    log_c: f64,
) -> Result<f64, TargetError> {
    let forward_time = (schedule.horizon() - t).max(0.0);
    let p = diffused_density_params(target, schedule, forward_time)?;
    let n = target.dim() as f64;
    Ok(p.log_density(x) - 0.5 * n * schedule.alpha_bar(forward_time)? + log_c)
}
