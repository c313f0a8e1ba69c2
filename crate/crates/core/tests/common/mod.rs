#![allow(dead_code)]

use std::sync::Arc;

use fbsde_sampler::engine::{rollout, simulate_path, EngineError, Noise, RolloutConfig, ZField};
use fbsde_sampler::nn::MlpParams;
use fbsde_sampler::schedule::{BetaSchedule, TimeGrid};
use fbsde_sampler::targets::{auxiliary_u, true_score, GaussianTarget, MixtureTarget, Target};
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_chacha::ChaCha8Rng;

pub const GRADCHECK_STEP: f64 = 1e-6;
pub const GRADCHECK_TOL: f64 = 1e-5;

/// Outcome of comparing tape gradients with central differences.
#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub params: usize,
    pub max_rel: f64,
    /// `(network, index, tape, finite difference)` of the worst entry.
    pub worst: (&'static str, usize, f64, f64),
}

fn flatten(p: &MlpParams) -> Vec<f64> {
    p.layers.iter().flat_map(|l| l.weights.iter().chain(&l.bias).copied()).collect()
}

fn set_flat(p: &mut MlpParams, idx: usize, value: f64) {
    let mut k = idx;
    for l in &mut p.layers {
        if k < l.weights.len() {
            l.weights[k] = value;
            return;
        }
        k -= l.weights.len();
        if k < l.bias.len() {
            l.bias[k] = value;
            return;
        }
        k -= l.bias.len();
    }
    panic!("parameter index {idx} out of range");
}

/// `|a - b| / max(|a|, |b|)`, zero when both vanish.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// A random small problem: dimension 1 or 2, Gaussian or mixture target,
/// constant or piecewise-linear β, N = 3 steps, random hidden widths.
pub fn random_problem(seed: u64) -> (RolloutConfig, MlpParams, MlpParams, Noise) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=2usize);
    let target: Arc<dyn Target> = if rng.random_bool(0.5) {
        let mean = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let var = (0..n).map(|_| rng.random_range(0.3..2.0)).collect();
        Arc::new(GaussianTarget::new(mean, var).unwrap())
    } else {
        let k = rng.random_range(2..=3usize);
        let centers = (0..k).map(|_| (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.0)).collect();
        let total: f64 = raw.iter().sum();
        Arc::new(MixtureTarget::new(raw.iter().map(|w| w / total).collect(), centers, rng.random_range(0.3..1.0)).unwrap())
    };
    let horizon = rng.random_range(0.5..3.0);
    let schedule = if rng.random_bool(0.5) {
        BetaSchedule::constant(rng.random_range(0.5..1.5), horizon)
    } else {
        BetaSchedule::piecewise_linear(vec![(0.0, rng.random_range(0.5..1.5)), (horizon, rng.random_range(0.5..1.5))], horizon)
    };
    let grid = TimeGrid::with_steps(horizon, 3);
    let batch = 3;
    let cfg = RolloutConfig::new(grid, batch, schedule, target).unwrap();
    let h1 = rng.random_range(2..=6usize);
    let h2 = rng.random_range(2..=6usize);
    let mut init = |out: usize| {
        let mut p = MlpParams::glorot(&[n + 1, h1, h2, out], &mut rng);
        for l in &mut p.layers {
            for b in &mut l.bias {
                *b = rng.random_range(-0.5..0.5);
            }
        }
        p
    };
    let theta_y = init(1);
    let theta_z = init(n);
    let noise = Noise::draw(batch, n, &grid, &mut rng);
    (cfg, theta_y, theta_z, noise)
}

/// Tape gradients of the rollout loss against central differences with
/// step [`GRADCHECK_STEP`], for every parameter of both networks.
pub fn gradcheck(cfg: &RolloutConfig, theta_y: &MlpParams, theta_z: &MlpParams, noise: &Noise) -> GradcheckReport {
    gradcheck_with(cfg, theta_y, theta_z, noise, GRADCHECK_STEP, false)
}

/// As [`gradcheck`] with a chosen step; `fourth_order` uses the five-point
/// stencil.
pub fn gradcheck_with(
    cfg: &RolloutConfig,
    theta_y: &MlpParams,
    theta_z: &MlpParams,
    noise: &Noise,
    step: f64,
    fourth_order: bool,
) -> GradcheckReport {
    let batch = rollout(cfg, theta_y, theta_z, noise.clone()).unwrap();
    let (gy, gz) = batch.gradients().unwrap();
    let loss = |y: &MlpParams, z: &MlpParams| rollout(cfg, y, z, noise.clone()).unwrap().loss();
    let mut report = GradcheckReport {
        params: 0,
        max_rel: 0.0,
        worst: ("", 0, 0.0, 0.0),
    };
    for (name, grads) in [("theta_y", &gy), ("theta_z", &gz)] {
        let base = if name == "theta_y" { theta_y } else { theta_z };
        let flat = flatten(base);
        let ad = flatten(grads);
        for (i, &v) in flat.iter().enumerate() {
            let eval = |value: f64| {
                let mut p = base.clone();
                set_flat(&mut p, i, value);
                if name == "theta_y" {
                    loss(&p, theta_z)
                } else {
                    loss(theta_y, &p)
                }
            };
            let central = |h: f64| eval(v + h) - eval(v - h);
            let fd = if fourth_order {
                (8.0 * central(step) - central(2.0 * step)) / (12.0 * step)
            } else {
                central(step) / (2.0 * step)
            };
            let e = rel_err(ad[i], fd);
            report.params += 1;
            if e > report.max_rel {
                report.max_rel = e;
                report.worst = (name, i, ad[i], fd);
            }
        }
    }
    report
}

/// `Z = β̄(t) ∇ log p(T - t, x)` from the exact diffused density.
pub struct AnalyticZ<'a> {
    pub cfg: &'a RolloutConfig,
}

impl ZField for AnalyticZ<'_> {
    fn z(&mut self, i: usize, t: f64, x: &[f64], out: &mut [f64]) -> Result<(), EngineError> {
        let s = true_score(self.cfg.target.as_ref(), &self.cfg.schedule, self.cfg.grid.horizon - t, x)?;
        let beta = self.cfg.reverse_beta(i);
        for (o, v) in out.iter_mut().zip(s) {
            *o = beta * v;
        }
        Ok(())
    }
}

/// Mean squared terminal residual `Y_N - log π(X_N)` when the scheme is
/// driven by the exact `Y₀ = u(0, X₀)` and `Z`, over `paths` paths of the
/// `N(2, 0.3)` problem with `β ≡ 1, T = 3`.
pub fn analytic_residual(dt: f64, paths: usize, seed: u64) -> f64 {
    let target: Arc<dyn Target> = Arc::new(GaussianTarget::new(vec![2.0], vec![0.3]).unwrap());
    let schedule = BetaSchedule::constant(1.0, 3.0);
    let grid = TimeGrid::from_step(3.0, dt).unwrap();
    let cfg = RolloutConfig::new(grid, 1, schedule.clone(), target.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sd = dt.sqrt();
    let mut total = 0.0;
    for _ in 0..paths {
        let x0 = [rng.sample::<f64, _>(StandardNormal)];
        let y0 = auxiliary_u(target.as_ref(), &schedule, 0.0, &x0).unwrap();
        let mut field = AnalyticZ { cfg: &cfg };
        let (x, y) = simulate_path(&cfg, &mut field, &x0, y0, |dw| {
            for v in dw.iter_mut() {
                *v = sd * rng.sample::<f64, _>(StandardNormal);
            }
        })
        .unwrap();
        let r = y - target.log_pi(&x);
        total += r * r;
    }
    total / paths as f64
}
