//! Euler–Maruyama rollout of the coupled forward-backward system, the
//! terminal-mismatch loss, and the training loop.
//!
//! With reverse time `t ∈ [0, T]` and `β̄(t) = β(T - t)` the discrete scheme is
//!
//! ```text
//! X_{i+1} = X_i + (½β̄ᵢ² X_i + β̄ᵢ Z_i) Δt + β̄ᵢ ΔW_i
//! Y_{i+1} = Y_i + ½‖Z_i‖² Δt + Z_i · ΔW_i
//! Z_i     = ((T - tᵢ)/T) NN_Z(tᵢ, X_i) + (tᵢ/T) β̄ᵢ ∇g(X_i)
//! Y_0     = NN_Y(0, X_0),   X_0 ~ N(0, I)
//! ```
//!
//! and the loss is the mean of `(Y_N - g(X_N))²` over the batch.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use thiserror::Error;

use crate::autodiff::{Mat, Tape, TapeError, Var};
use crate::nn::{standard_sizes, AdamState, MlpParams, MlpVars, NnError};
use crate::rng::{substream, tags};
use crate::schedule::{BetaSchedule, ScheduleError, TimeGrid};
use crate::targets::{Target, TargetError};

/// Rows per independent tape during training. Fixed so that the reduction
/// order, and hence every bit of the result, does not depend on the thread
/// count.
pub const TRAIN_CHUNK_ROWS: usize = 16;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("rollout diverged at time step {step}")]
    Divergence { step: usize },
    #[error("log density is not finite at the terminal state of row {row}")]
    TerminalNonFinite { row: usize },
    #[error("optimizer update of {network} failed: {source}")]
    Optimizer {
        network: &'static str,
        #[source]
        source: NnError,
    },
    #[error(transparent)]
    Target(#[from] TargetError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Error)]
#[error("training aborted at iteration {iteration} (last finite loss {last_loss:?}): {source}; reduce the learning rate or the time step")]
pub struct TrainError {
    pub iteration: usize,
    pub last_loss: Option<f64>,
    #[source]
    pub source: EngineError,
}

/// Everything the rollout needs besides the networks.
#[derive(Clone)]
pub struct RolloutConfig {
    pub grid: TimeGrid,
    pub batch: usize,
    pub schedule: BetaSchedule,
    pub target: Arc<dyn Target>,
    reverse_beta: Vec<f64>,
}

impl std::fmt::Debug for RolloutConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RolloutConfig")
            .field("grid", &self.grid)
            .field("batch", &self.batch)
            .field("schedule", &self.schedule)
            .field("target", &self.target.descriptor())
            .finish()
    }
}

impl RolloutConfig {
    pub fn new(
        grid: TimeGrid,
        batch: usize,
        schedule: BetaSchedule,
        target: Arc<dyn Target>,
    ) -> Result<Self, EngineError> {
        schedule.validate()?;
        if grid.horizon != schedule.horizon() {
            return Err(EngineError::Config(format!(
                "grid horizon {} differs from schedule horizon {}",
                grid.horizon,
                schedule.horizon()
            )));
        }
        if batch == 0 {
            return Err(EngineError::Config("batch size must be at least 1".into()));
        }
        if target.dim() == 0 {
            return Err(EngineError::Config("target dimension must be positive".into()));
        }
        let reverse_beta = grid
            .nodes()
            .map(|t| schedule.reverse_beta_at(t))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(RolloutConfig {
            grid,
            batch,
            schedule,
            target,
            reverse_beta,
        })
    }

    pub fn dim(&self) -> usize {
        self.target.dim()
    }

    /// β̄(tᵢ) at grid node `i`.
    pub fn reverse_beta(&self, i: usize) -> f64 {
        self.reverse_beta[i]
    }

    /// Fresh networks with the standard `[n+1, 11, 11, ·]` layout.
    pub fn init_networks(&self, seed: u64) -> (MlpParams, MlpParams) {
        let mut rng = substream(seed, &[tags::INIT]);
        let n = self.dim();
        let theta_y = MlpParams::glorot(&standard_sizes(n, 1), &mut rng);
        let theta_z = MlpParams::glorot(&standard_sizes(n, n), &mut rng);
        (theta_y, theta_z)
    }
}

/// Weights of the network and of the endpoint score term in `Z` at time `t`.
pub fn z_weights(t: f64, horizon: f64) -> (f64, f64) {
    ((horizon - t) / horizon, t / horizon)
}

/// `Z` at reverse time `t` for a single state, outside the tape.
pub fn z_param(
    t: f64,
    x: &[f64],
    theta_z: &MlpParams,
    target: &dyn Target,
    schedule: &BetaSchedule,
) -> Result<Vec<f64>, EngineError> {
    let beta = schedule.reverse_beta_at(t)?;
    let mut out = vec![0.0; x.len()];
    let mut grad = vec![0.0; x.len()];
    NetworkZ::combine(theta_z, target, schedule.horizon(), t, beta, x, &mut out, &mut grad, &mut Default::default())?;
    Ok(out)
}

/// Initial states and Brownian increments for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Noise {
    pub x0: Mat,
    /// One `rows × n` matrix of `N(0, Δt)` increments per time step.
    pub dw: Vec<Mat>,
}

impl Noise {
    /// Draws `X₀` rows first, then the increments step by step.
    pub fn draw<R: Rng + ?Sized>(rows: usize, dim: usize, grid: &TimeGrid, rng: &mut R) -> Self {
        let mut normal = |len: usize, scale: f64| -> Vec<f64> {
            (0..len)
                .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                .collect()
        };
        let x0 = Mat::from_vec(rows, dim, normal(rows * dim, 1.0));
        let sd = grid.dt.sqrt();
        let dw = (0..grid.steps)
            .map(|_| Mat::from_vec(rows, dim, normal(rows * dim, sd)))
            .collect();
        Noise { x0, dw }
    }

    pub fn rows(&self) -> usize {
        self.x0.rows
    }

    fn slice_rows(&self, start: usize, end: usize) -> Noise {
        let cut = |m: &Mat| Mat::from_vec(end - start, m.cols, m.data[start * m.cols..end * m.cols].to_vec());
        Noise {
            x0: cut(&self.x0),
            dw: self.dw.iter().map(cut).collect(),
        }
    }
}

/// A rollout recorded on a tape, together with its loss node.
pub struct RolloutBatch {
    tape: Tape,
    y_vars: MlpVars,
    z_vars: MlpVars,
    x: Vec<Var>,
    y: Vec<Var>,
    z: Vec<Var>,
    loss: Var,
    pub noise: Noise,
}

impl RolloutBatch {
    pub fn steps(&self) -> usize {
        self.z.len()
    }

    /// `X_i` for all rows (`rows × n`).
    pub fn x(&self, i: usize) -> &Mat {
        self.tape.value(self.x[i])
    }

    /// `Y_i` for all rows (`rows × 1`).
    pub fn y(&self, i: usize) -> &Mat {
        self.tape.value(self.y[i])
    }

    /// `Z_i` for all rows (`rows × n`), `i < N`.
    pub fn z(&self, i: usize) -> &Mat {
        self.tape.value(self.z[i])
    }

    pub fn loss(&self) -> f64 {
        self.tape.value(self.loss).data[0]
    }

    pub fn loss_var(&self) -> Var {
        self.loss
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    /// Gradients of the loss with respect to `(θ_Y, θ_Z)`.
    pub fn gradients(&self) -> Result<(MlpParams, MlpParams), EngineError> {
        let g = self.tape.backward(self.loss)?;
        Ok((self.y_vars.gradients(&self.tape, &g), self.z_vars.gradients(&self.tape, &g)))
    }
}

fn check_networks(cfg: &RolloutConfig, theta_y: &MlpParams, theta_z: &MlpParams) -> Result<(), EngineError> {
    theta_y.validate()?;
    theta_z.validate()?;
    let n = cfg.dim();
    if theta_y.input_dim() != n + 1 || theta_y.output_dim() != 1 {
        return Err(EngineError::Config(format!("Y network has sizes {:?}, expected input {} and output 1", theta_y.sizes(), n + 1)));
    }
    if theta_z.input_dim() != n + 1 || theta_z.output_dim() != n {
        return Err(EngineError::Config(format!("Z network has sizes {:?}, expected input {} and output {n}", theta_z.sizes(), n + 1)));
    }
    Ok(())
}

/// Records `Z_i` for all rows of `x`.
fn record_z(tape: &mut Tape, cfg: &RolloutConfig, z_vars: &MlpVars, i: usize, x: Var) -> Result<Var, EngineError> {
    let t = cfg.grid.node(i);
    let (w_net, w_score) = z_weights(t, cfg.grid.horizon);
    let nn = z_vars.forward(tape, t, x)?;
    if w_score == 0.0 {
        return Ok(tape.scale(nn, w_net));
    }
    let score = record_score(tape, cfg.target.as_ref(), x)?;
    Ok(tape.combine(&[(nn, w_net), (score, w_score * cfg.reverse_beta(i))], None)?)
}

/// `∇g` per row. Differentiable in `x` when the target has an analytic
/// Hessian, otherwise recorded as a constant.
fn record_score(tape: &mut Tape, target: &dyn Target, x: Var) -> Result<Var, EngineError> {
    let xv = tape.value(x);
    let (rows, n) = xv.shape();
    let mut grad = Mat::zeros(rows, n);
    let mut hess = vec![0.0; rows * n * n];
    let mut all_hessians = true;
    for r in 0..rows {
        let has = target.grad_hessian_log_pi(
            xv.row(r),
            &mut grad.data[r * n..(r + 1) * n],
            &mut hess[r * n * n..(r + 1) * n * n],
        )?;
        all_hessians &= has;
    }
    if all_hessians {
        Ok(tape.row_map(x, grad, hess)?)
    } else {
        Ok(tape.constant(grad))
    }
}

/// Records the rollout for `noise` and the loss `(1/denominator) Σ (Y_N - g(X_N))²`.
fn record(
    cfg: &RolloutConfig,
    theta_y: &MlpParams,
    theta_z: &MlpParams,
    noise: Noise,
    denominator: usize,
) -> Result<RolloutBatch, EngineError> {
    let n = cfg.dim();
    let rows = noise.rows();
    if noise.x0.cols != n || noise.dw.len() != cfg.grid.steps || noise.dw.iter().any(|m| m.shape() != (rows, n)) {
        return Err(EngineError::Config("noise shape does not match the grid and target".into()));
    }
    let dt = cfg.grid.dt;
    let mut tape = Tape::new();
    let y_vars = theta_y.register(&mut tape);
    let z_vars = theta_z.register(&mut tape);
    let mut x = tape.constant(noise.x0.clone());
    let mut y = y_vars.forward(&mut tape, 0.0, x)?;
    let mut xs = vec![x];
    let mut ys = vec![y];
    let mut zs = Vec::with_capacity(cfg.grid.steps);
    for (i, dw) in noise.dw.iter().enumerate() {
        let z = record_z(&mut tape, cfg, &z_vars, i, x)?;
        let beta = cfg.reverse_beta(i);
        let mut kick = dw.clone();
        kick.data.iter_mut().for_each(|v| *v *= beta);
        let x_next = tape.combine(&[(x, 1.0 + 0.5 * beta * beta * dt), (z, beta * dt)], Some(&kick))?;
        let z_sq = tape.row_squared_norm(z);
        let z_dw = tape.row_dot(z, dw.clone())?;
        let y_next = tape.combine(&[(y, 1.0), (z_sq, 0.5 * dt), (z_dw, 1.0)], None)?;
        if !tape.value(x_next).is_finite() || !tape.value(y_next).is_finite() {
            return Err(EngineError::Divergence { step: i });
        }
        x = x_next;
        y = y_next;
        xs.push(x);
        ys.push(y);
        zs.push(z);
    }
    let terminal = record_log_pi(&mut tape, cfg.target.as_ref(), x)?;
    let residual = tape.sub(y, terminal)?;
    let loss = tape.scaled_sum_squares(residual, 1.0 / denominator as f64);
    Ok(RolloutBatch {
        tape,
        y_vars,
        z_vars,
        x: xs,
        y: ys,
        z: zs,
        loss,
        noise,
    })
}

fn record_log_pi(tape: &mut Tape, target: &dyn Target, x: Var) -> Result<Var, EngineError> {
    let xv = tape.value(x);
    let (rows, n) = xv.shape();
    let mut values = Mat::zeros(rows, 1);
    let mut jac = vec![0.0; rows * n];
    for r in 0..rows {
        let v = target.log_pi(xv.row(r));
        if !v.is_finite() {
            return Err(EngineError::TerminalNonFinite { row: r });
        }
        values.data[r] = v;
        target.grad_log_pi(xv.row(r), &mut jac[r * n..(r + 1) * n])?;
    }
    Ok(tape.row_map(x, values, jac)?)
}

/// Rolls out the whole batch on one tape. The loss is the mean over rows.
pub fn rollout(
    cfg: &RolloutConfig,
    theta_y: &MlpParams,
    theta_z: &MlpParams,
    noise: Noise,
) -> Result<RolloutBatch, EngineError> {
    check_networks(cfg, theta_y, theta_z)?;
    let rows = noise.rows();
    record(cfg, theta_y, theta_z, noise, rows)
}

/// Loss and parameter gradients for `noise`, split into fixed-size chunks
/// that run in parallel and are reduced in chunk order.
pub fn loss_and_gradients(
    cfg: &RolloutConfig,
    theta_y: &MlpParams,
    theta_z: &MlpParams,
    noise: &Noise,
) -> Result<(f64, MlpParams, MlpParams), EngineError> {
    check_networks(cfg, theta_y, theta_z)?;
    let rows = noise.rows();
    let chunks: Vec<(usize, usize)> = (0..rows)
        .step_by(TRAIN_CHUNK_ROWS)
        .map(|s| (s, (s + TRAIN_CHUNK_ROWS).min(rows)))
        .collect();
    let parts = chunks
        .par_iter()
        .map(|&(s, e)| {
            let batch = record(cfg, theta_y, theta_z, noise.slice_rows(s, e), rows).map_err(|err| match err {
                EngineError::TerminalNonFinite { row } => EngineError::TerminalNonFinite { row: row + s },
                other => other,
            })?;
            let (gy, gz) = batch.gradients()?;
            Ok((batch.loss(), gy, gz))
        })
        .collect::<Vec<Result<_, EngineError>>>();
    let mut loss = 0.0;
    let mut gy = MlpParams::zeros(&theta_y.sizes());
    let mut gz = MlpParams::zeros(&theta_z.sizes());
    for part in parts {
        let (l, a, b) = part?;
        loss += l;
        gy.add_assign(&a);
        gz.add_assign(&b);
    }
    Ok((loss, gy, gz))
}

/// Hyperparameters of the training loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub iterations: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            iterations: 9000,
            lr: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub theta_y: MlpParams,
    pub theta_z: MlpParams,
    pub losses: Vec<f64>,
}

/// Noise for training iteration `k`: one substream per chunk so that rows
/// are reproducible regardless of scheduling.
pub fn training_noise(cfg: &RolloutConfig, seed: u64, iteration: usize) -> Noise {
    let n = cfg.dim();
    let mut x0 = Vec::with_capacity(cfg.batch * n);
    let mut dw: Vec<Vec<f64>> = vec![Vec::with_capacity(cfg.batch * n); cfg.grid.steps];
    for (c, start) in (0..cfg.batch).step_by(TRAIN_CHUNK_ROWS).enumerate() {
        let rows = TRAIN_CHUNK_ROWS.min(cfg.batch - start);
        let mut rng = substream(seed, &[tags::TRAIN, iteration as u64, c as u64]);
        let part = Noise::draw(rows, n, &cfg.grid, &mut rng);
        x0.extend_from_slice(&part.x0.data);
        for (acc, m) in dw.iter_mut().zip(part.dw) {
            acc.extend_from_slice(&m.data);
        }
    }
    Noise {
        x0: Mat::from_vec(cfg.batch, n, x0),
        dw: dw.into_iter().map(|d| Mat::from_vec(cfg.batch, n, d)).collect(),
    }
}

/// Runs `iterations` steps of simultaneous Adam updates on both networks,
/// drawing fresh `X₀` and increments each step. `on_step(k, loss)` is called
/// after every update.
pub fn train(
    cfg: &RolloutConfig,
    opts: &TrainOptions,
    init: Option<(MlpParams, MlpParams)>,
    mut on_step: impl FnMut(usize, f64),
) -> Result<TrainOutcome, TrainError> {
    let abort = |iteration: usize, last_loss: Option<f64>, source: EngineError| TrainError {
        iteration,
        last_loss,
        source,
    };
    if opts.iterations == 0 {
        return Err(abort(0, None, EngineError::Config("at least one iteration is required".into())));
    }
    if !(opts.lr > 0.0 && opts.lr.is_finite()) {
        return Err(abort(0, None, EngineError::Config(format!("learning rate must be positive, got {}", opts.lr))));
    }
    let (mut theta_y, mut theta_z) = init.unwrap_or_else(|| cfg.init_networks(opts.seed));
    check_networks(cfg, &theta_y, &theta_z).map_err(|e| abort(0, None, e))?;
    let mut adam_y = AdamState::new(&theta_y, opts.lr);
    let mut adam_z = AdamState::new(&theta_z, opts.lr);
    let mut losses = Vec::with_capacity(opts.iterations);
    for k in 0..opts.iterations {
        let last = losses.last().copied();
        let noise = training_noise(cfg, opts.seed, k);
        let (loss, gy, gz) = loss_and_gradients(cfg, &theta_y, &theta_z, &noise).map_err(|e| abort(k, last, e))?;
        if !loss.is_finite() {
            return Err(abort(k, last, EngineError::Divergence { step: cfg.grid.steps }));
        }
        // validate both gradients before touching either network
        for (network, g) in [("theta_y", &gy), ("theta_z", &gz)] {
            if let Some((layer, tensor)) = g.first_non_finite() {
                return Err(abort(
                    k,
                    last,
                    EngineError::Optimizer {
                        network,
                        source: NnError::NonFiniteGradient { layer, tensor },
                    },
                ));
            }
        }
        adam_y
            .step(&mut theta_y, &gy)
            .map_err(|source| abort(k, last, EngineError::Optimizer { network: "theta_y", source }))?;
        adam_z
            .step(&mut theta_z, &gz)
            .map_err(|source| abort(k, last, EngineError::Optimizer { network: "theta_z", source }))?;
        losses.push(loss);
        on_step(k, loss);
    }
    Ok(TrainOutcome {
        theta_y,
        theta_z,
        losses,
    })
}

/// Source of `Z` for tape-free simulation.
pub trait ZField {
    fn z(&mut self, i: usize, t: f64, x: &[f64], out: &mut [f64]) -> Result<(), EngineError>;
}

/// `Z` from a trained network.
pub struct NetworkZ<'a> {
    theta_z: &'a MlpParams,
    target: &'a dyn Target,
    horizon: f64,
    reverse_beta: &'a [f64],
    grad: Vec<f64>,
    scratch: crate::nn::ForwardScratch,
}

impl<'a> NetworkZ<'a> {
    pub fn new(cfg: &'a RolloutConfig, theta_z: &'a MlpParams) -> Self {
        NetworkZ {
            theta_z,
            target: cfg.target.as_ref(),
            horizon: cfg.grid.horizon,
            reverse_beta: &cfg.reverse_beta,
            grad: vec![0.0; cfg.dim()],
            scratch: Default::default(),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn combine(
        theta_z: &MlpParams,
        target: &dyn Target,
        horizon: f64,
        t: f64,
        beta: f64,
        x: &[f64],
        out: &mut [f64],
        grad: &mut [f64],
        scratch: &mut crate::nn::ForwardScratch,
    ) -> Result<(), EngineError> {
        let (w_net, w_score) = z_weights(t, horizon);
        theta_z.forward_into(t, x, out, scratch);
        if w_score == 0.0 {
            out.iter_mut().for_each(|o| *o *= w_net);
            return Ok(());
        }
        target.grad_log_pi(x, grad)?;
        let c = w_score * beta;
        for (o, g) in out.iter_mut().zip(grad.iter()) {
            // same association as the tape: 0 + w_net·nn + c·g
            *o = 0.0 + w_net * *o + c * g;
        }
        Ok(())
    }
}

impl ZField for NetworkZ<'_> {
    fn z(&mut self, i: usize, t: f64, x: &[f64], out: &mut [f64]) -> Result<(), EngineError> {
        NetworkZ::combine(
            self.theta_z,
            self.target,
            self.horizon,
            t,
            self.reverse_beta[i],
            x,
            out,
            &mut self.grad,
            &mut self.scratch,
        )
    }
}

/// Tape-free Euler–Maruyama rollout of one path. `increment` fills the
/// `ΔW` for each step. Returns the terminal `X` and `Y`; `Y` starts at `y0`.
pub fn simulate_path(
    cfg: &RolloutConfig,
    field: &mut dyn ZField,
    x0: &[f64],
    y0: f64,
    mut increment: impl FnMut(&mut [f64]),
) -> Result<(Vec<f64>, f64), EngineError> {
    let n = cfg.dim();
    let dt = cfg.grid.dt;
    let mut x = x0.to_vec();
    let mut y = y0;
    let mut z = vec![0.0; n];
    let mut dw = vec![0.0; n];
    for i in 0..cfg.grid.steps {
        let t = cfg.grid.node(i);
        field.z(i, t, &x, &mut z)?;
        increment(&mut dw);
        let beta = cfg.reverse_beta(i);
        let decay = 1.0 + 0.5 * beta * beta * dt;
        let mut zz = 0.0;
        let mut zw = 0.0;
        for j in 0..n {
            zz += z[j] * z[j];
            zw += z[j] * dw[j];
            x[j] = beta * dw[j] + decay * x[j] + beta * dt * z[j];
        }
        y = y + 0.5 * dt * zz + zw;
        if !y.is_finite() || x.iter().any(|v| !v.is_finite()) {
            return Err(EngineError::Divergence { step: i });
        }
    }
    Ok((x, y))
}
