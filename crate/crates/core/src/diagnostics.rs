//! Checks of a trained model against analytic oracles: score differences on
//! a grid, forward-kernel moments, sample statistics, and `Y₀` against the
//! auxiliary function `u(0, ·)`.

use std::io::Write;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::autodiff::Mat;
use crate::engine::{z_param, EngineError};
use crate::rng::{substream, tags};
use crate::sampler::{fmt17, ModelCheckpoint};
use crate::schedule::{BetaSchedule, ScheduleError};
use crate::targets::{auxiliary_u, diffused_density_params, true_score, DiagMixture, Target, TargetError};

const FORWARD_CHUNK_PATHS: usize = 4096;

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error(transparent)]
    Target(#[from] TargetError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error("sample set is empty")]
    Empty,
    #[error("samples have {got} columns but the target has dimension {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("{0}")]
    Invalid(String),
    #[error("forward simulation diverged at step {step}")]
    Divergence { step: usize },
}

/// A regular grid `lo, lo+step, …, hi` on every axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
}

impl GridSpec {
    /// `[-4, 4]` with step 0.1 in one dimension and 0.2 in two.
    pub fn default_for(dim: usize) -> Self {
        GridSpec {
            lo: -4.0,
            hi: 4.0,
            step: if dim <= 1 { 0.1 } else { 0.2 },
        }
    }

    pub fn validate(&self) -> Result<(), DiagnosticsError> {
        if !(self.lo.is_finite() && self.hi.is_finite() && self.lo <= self.hi) {
            return Err(DiagnosticsError::Invalid(format!("grid bounds [{}, {}] are invalid", self.lo, self.hi)));
        }
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(DiagnosticsError::Invalid(format!("grid step must be positive, got {}", self.step)));
        }
        Ok(())
    }

    pub fn axis(&self) -> Vec<f64> {
        let k = ((self.hi - self.lo) / self.step + 1e-9).floor() as usize;
        (0..=k).map(|i| self.lo + i as f64 * self.step).collect()
    }

    /// Cartesian product of the axis in `dim` dimensions, last coordinate
    /// varying fastest. Only one and two dimensions are supported.
    pub fn points(&self, dim: usize) -> Result<Vec<Vec<f64>>, DiagnosticsError> {
        self.validate()?;
        let axis = self.axis();
        match dim {
            1 => Ok(axis.iter().map(|&a| vec![a]).collect()),
            2 => Ok(axis.iter().flat_map(|&a| axis.iter().map(move |&b| vec![a, b])).collect()),
            _ => Err(DiagnosticsError::Invalid(format!("grids are available in 1 or 2 dimensions, not {dim}"))),
        }
    }
}

fn write_row<W: Write>(w: &mut W, fields: &[String]) -> std::io::Result<()> {
    writeln!(w, "{}", fields.join(","))
}

fn x_headers(n: usize) -> Vec<String> {
    (1..=n).map(|j| format!("x{j}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreRow {
    pub t: f64,
    pub x: Vec<f64>,
    pub coord: usize,
    pub estimated: f64,
    #[serde(rename = "true")]
    pub true_score: f64,
    pub diff: f64,
}

/// Largest `|diff|` at one time inside the box `mean ± 3σ` of `p(T - t, ·)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreSummary {
    pub t: f64,
    pub max_abs_diff: f64,
    pub max_abs_diff_near_mass: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreReport {
    pub dim: usize,
    pub rows: Vec<ScoreRow>,
    pub summary: Vec<ScoreSummary>,
}

impl ScoreReport {
    pub fn rows_at(&self, t: f64) -> impl Iterator<Item = &ScoreRow> {
        self.rows.iter().filter(move |r| r.t == t)
    }

    /// Columns `t, x1…xn, coord, estimated, true, diff`.
    pub fn write_csv<W: Write>(&self, w: &mut W, only_t: Option<f64>) -> std::io::Result<()> {
        let mut head = vec!["t".to_string()];
        head.extend(x_headers(self.dim));
        head.extend(["coord", "estimated", "true", "diff"].map(String::from));
        write_row(w, &head)?;
        for r in self.rows.iter().filter(|r| only_t.is_none_or(|t| r.t == t)) {
            let mut f = vec![fmt17(r.t)];
            f.extend(r.x.iter().map(|&v| fmt17(v)));
            f.push((r.coord + 1).to_string());
            f.extend([r.estimated, r.true_score, r.diff].map(fmt17));
            write_row(w, &f)?;
        }
        Ok(())
    }
}

/// Estimated score `z_param(t, x)/β̄(t)` against the exact score of
/// `p(T - t, ·)` on a grid, for each reverse time in `times`.
pub fn score_diff_grid(
    ckpt: &ModelCheckpoint,
    target: &dyn Target,
    times: &[f64],
    grid: &GridSpec,
) -> Result<ScoreReport, DiagnosticsError> {
    let n = target.dim();
    if n != ckpt.dim() {
        return Err(DiagnosticsError::DimMismatch { expected: ckpt.dim(), got: n });
    }
    let schedule = &ckpt.schedule;
    let horizon = schedule.horizon();
    // fail early for targets without an oracle
    diffused_density_params(target, schedule, 0.0)?;
    let points = grid.points(n)?;
    let mut rows = Vec::with_capacity(times.len() * points.len() * n);
    let mut summary = Vec::with_capacity(times.len());
    for &t in times {
        if !(0.0..=horizon).contains(&t) {
            return Err(DiagnosticsError::Invalid(format!("time {t} is outside [0, {horizon}]")));
        }
        let beta = schedule.reverse_beta_at(t)?;
        let p = diffused_density_params(target, schedule, horizon - t)?;
        let (mean, var) = (p.mean(), p.marginal_variance());
        let block = points
            .par_iter()
            .map(|x| {
                let z = z_param(t, x, &ckpt.theta_z, target, schedule)?;
                let truth = true_score(target, schedule, horizon - t, x)?;
                Ok((0..n)
                    .map(|j| {
                        let estimated = z[j] / beta;
                        ScoreRow {
                            t,
                            x: x.clone(),
                            coord: j,
                            estimated,
                            true_score: truth[j],
                            diff: estimated - truth[j],
                        }
                    })
                    .collect::<Vec<_>>())
            })
            .collect::<Result<Vec<_>, DiagnosticsError>>()?;
        let mut max_all = 0.0f64;
        let mut max_near = 0.0f64;
        for r in block.into_iter().flatten() {
            max_all = max_all.max(r.diff.abs());
            let near = r
                .x
                .iter()
                .enumerate()
                .all(|(j, &v)| (v - mean[j]).abs() <= 3.0 * var[j].sqrt());
            if near {
                max_near = max_near.max(r.diff.abs());
            }
            rows.push(r);
        }
        summary.push(ScoreSummary {
            t,
            max_abs_diff: max_all,
            max_abs_diff_near_mass: max_near,
        });
    }
    Ok(ScoreReport { dim: n, rows, summary })
}

/// Empirical against analytic moments of one coordinate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentCheck {
    pub coord: usize,
    pub empirical_mean: f64,
    pub analytic_mean: f64,
    pub mean_se: f64,
    pub mean_z: f64,
    pub empirical_var: f64,
    pub analytic_var: f64,
    pub var_se: f64,
    pub var_z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ForwardReport {
    pub t: f64,
    pub dt: f64,
    pub steps: usize,
    pub paths: usize,
    pub coords: Vec<MomentCheck>,
}

impl ForwardReport {
    pub fn within(&self, k: f64) -> bool {
        self.coords.iter().all(|c| c.mean_z.abs() <= k && c.var_z.abs() <= k)
    }

    pub fn write_csv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        write_row(
            w,
            &[
                "t", "paths", "coord", "empirical_mean", "analytic_mean", "mean_se", "mean_z", "empirical_var",
                "analytic_var", "var_se", "var_z",
            ]
            .map(String::from),
        )?;
        for c in &self.coords {
            let mut f = vec![fmt17(self.t), self.paths.to_string(), (c.coord + 1).to_string()];
            f.extend(
                [c.empirical_mean, c.analytic_mean, c.mean_se, c.mean_z, c.empirical_var, c.analytic_var, c.var_se, c.var_z]
                    .map(fmt17),
            );
            write_row(w, &f)?;
        }
        Ok(())
    }
}

/// Mean, variance, and the standard errors of both, per column.
fn column_moments(data: &[f64], n: usize, col: usize) -> (f64, f64, f64, f64) {
    let m = (data.len() / n) as f64;
    let mean = data.iter().skip(col).step_by(n).sum::<f64>() / m;
    let (mut m2, mut m4) = (0.0, 0.0);
    for v in data.iter().skip(col).step_by(n) {
        let d = (v - mean) * (v - mean);
        m2 += d;
        m4 += d * d;
    }
    let (m2, m4) = (m2 / m, m4 / m);
    let mean_se = (m2 / m).sqrt();
    let var_se = ((m4 - m2 * m2).max(0.0) / m).sqrt();
    (mean, m2, mean_se, var_se)
}

/// Simulates `dX = -½β²X dt + β dW` from exact draws of `π` up to forward
/// time `t` with step `dt` (shortened to divide `t`), and compares the
/// moments at `t` with the diffused closed form.
pub fn forward_check(
    target: &dyn Target,
    schedule: &BetaSchedule,
    t: f64,
    dt: f64,
    paths: usize,
    seed: u64,
) -> Result<ForwardReport, DiagnosticsError> {
    schedule.validate()?;
    let base = target
        .oracle()
        .ok_or_else(|| TargetError::UnsupportedOracle(format!("{:?}", target.descriptor())))?;
    if !(0.0..=schedule.horizon()).contains(&t) {
        return Err(DiagnosticsError::Invalid(format!("time {t} is outside [0, {}]", schedule.horizon())));
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(DiagnosticsError::Invalid(format!("dt must be positive, got {dt}")));
    }
    if paths < 2 {
        return Err(DiagnosticsError::Invalid("at least two paths are required".into()));
    }
    let steps = (t / dt).ceil() as usize;
    let h = if steps == 0 { 0.0 } else { t / steps as f64 };
    let betas = (0..steps)
        .map(|k| schedule.beta_at(k as f64 * h))
        .collect::<Result<Vec<_>, _>>()?;
    let n = target.dim();
    let starts: Vec<usize> = (0..paths).step_by(FORWARD_CHUNK_PATHS).collect();
    let parts = starts
        .par_iter()
        .enumerate()
        .map(|(c, &s)| {
            let rows = FORWARD_CHUNK_PATHS.min(paths - s);
            let mut rng = substream(seed, &[tags::FORWARD, c as u64]);
            let mut out = vec![0.0; rows * n];
            let sd = h.sqrt();
            for x in out.chunks_mut(n) {
                base.sample_into(&mut rng, x);
                for (k, &b) in betas.iter().enumerate() {
                    let decay = 1.0 - 0.5 * b * b * h;
                    for v in x.iter_mut() {
                        let dw: f64 = rng.sample(StandardNormal);
                        *v = decay * *v + b * sd * dw;
                    }
                    if x.iter().any(|v| !v.is_finite()) {
                        return Err(DiagnosticsError::Divergence { step: k });
                    }
                }
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let data: Vec<f64> = parts.concat();
    let p = diffused_density_params(target, schedule, t)?;
    let (amean, avar) = (p.mean(), p.marginal_variance());
    let coords = (0..n)
        .map(|j| {
            let (mean, var, mean_se, var_se) = column_moments(&data, n, j);
            MomentCheck {
                coord: j,
                empirical_mean: mean,
                analytic_mean: amean[j],
                mean_se,
                mean_z: (mean - amean[j]) / mean_se,
                empirical_var: var,
                analytic_var: avar[j],
                var_se,
                var_z: (var - avar[j]) / var_se,
            }
        })
        .collect();
    Ok(ForwardReport {
        t,
        dt: h,
        steps,
        paths,
        coords,
    })
}

/// One-sample Kolmogorov–Smirnov statistic against a 1D CDF.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KsReport {
    pub statistic: f64,
    /// `1.63/√m`, the asymptotic 1% critical value.
    pub critical_1pct: f64,
}

impl KsReport {
    pub fn passes(&self) -> bool {
        self.statistic < self.critical_1pct
    }
}

pub fn ks_statistic(values: &[f64], cdf: impl Fn(f64) -> f64) -> KsReport {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() as f64;
    let mut d = 0.0f64;
    for (i, &x) in v.iter().enumerate() {
        let f = cdf(x);
        d = d.max((i + 1) as f64 / m - f).max(f - i as f64 / m);
    }
    KsReport {
        statistic: d,
        critical_1pct: 1.63 / m.sqrt(),
    }
}

fn mixture_cdf(p: &DiagMixture, x: f64) -> f64 {
    p.weights
        .iter()
        .zip(&p.centers)
        .zip(&p.variances)
        .map(|((w, c), v)| w * Normal::new(c[0], v.sqrt()).expect("validated variance").cdf(x))
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModeStat {
    pub center: Vec<f64>,
    pub count: usize,
    pub mass: f64,
    /// `None` for an empty cluster.
    pub mean: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleStats {
    pub count: usize,
    pub mean: Vec<f64>,
    /// Row-major `n × n`, normalized by `count - 1`.
    pub covariance: Vec<f64>,
    pub ks: Option<KsReport>,
    pub modes: Option<Vec<ModeStat>>,
}

impl SampleStats {
    /// `quantity,index,value` rows.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let n = self.mean.len();
        write_row(w, &["quantity", "index", "value"].map(String::from))?;
        write_row(w, &["count".into(), String::new(), self.count.to_string()])?;
        for (j, m) in self.mean.iter().enumerate() {
            write_row(w, &["mean".into(), (j + 1).to_string(), fmt17(*m)])?;
        }
        for (k, c) in self.covariance.iter().enumerate() {
            write_row(w, &["covariance".into(), format!("{}-{}", k / n + 1, k % n + 1), fmt17(*c)])?;
        }
        if let Some(ks) = &self.ks {
            write_row(w, &["ks_statistic".into(), String::new(), fmt17(ks.statistic)])?;
            write_row(w, &["ks_critical_1pct".into(), String::new(), fmt17(ks.critical_1pct)])?;
        }
        Ok(())
    }

    /// One row per mode: `mode, c1…cn, count, mass, m1…mn`.
    pub fn write_modes_csv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let n = self.mean.len();
        let mut head = vec!["mode".to_string()];
        head.extend((1..=n).map(|j| format!("c{j}")));
        head.extend(["count", "mass"].map(String::from));
        head.extend((1..=n).map(|j| format!("m{j}")));
        write_row(w, &head)?;
        for (k, m) in self.modes.iter().flatten().enumerate() {
            let mut f = vec![(k + 1).to_string()];
            f.extend(m.center.iter().map(|&v| fmt17(v)));
            f.push(m.count.to_string());
            f.push(fmt17(m.mass));
            match &m.mean {
                Some(mean) => f.extend(mean.iter().map(|&v| fmt17(v))),
                None => f.extend(std::iter::repeat_n(String::new(), n)),
            }
            write_row(w, &f)?;
        }
        Ok(())
    }
}

/// Index of the nearest center, first one on ties.
pub fn nearest_center(centers: &[Vec<f64>], x: &[f64]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centers.iter().enumerate() {
        let d: f64 = c.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.1 {
            best = (k, d);
        }
    }
    best.0
}

/// Mean and covariance of `samples`; a KS test in one dimension and a
/// nearest-center mode table for multi-component targets.
pub fn sample_stats(samples: &Mat, target: &dyn Target) -> Result<SampleStats, DiagnosticsError> {
    let (m, n) = samples.shape();
    if m == 0 {
        return Err(DiagnosticsError::Empty);
    }
    if n != target.dim() {
        return Err(DiagnosticsError::DimMismatch {
            expected: target.dim(),
            got: n,
        });
    }
    let mut mean = vec![0.0; n];
    for r in 0..m {
        for (a, v) in mean.iter_mut().zip(samples.row(r)) {
            *a += v;
        }
    }
    mean.iter_mut().for_each(|a| *a /= m as f64);
    let mut covariance = vec![0.0; n * n];
    if m > 1 {
        for r in 0..m {
            let x = samples.row(r);
            for i in 0..n {
                for j in 0..n {
                    covariance[i * n + j] += (x[i] - mean[i]) * (x[j] - mean[j]);
                }
            }
        }
        covariance.iter_mut().for_each(|c| *c /= (m - 1) as f64);
    }
    let oracle = target.oracle();
    let ks = match oracle {
        Some(p) if n == 1 => Some(ks_statistic(&samples.data, |x| mixture_cdf(p, x))),
        _ => None,
    };
    let modes = oracle.filter(|p| p.weights.len() > 1).map(|p| {
        let k = p.centers.len();
        let mut counts = vec![0usize; k];
        let mut sums = vec![vec![0.0; n]; k];
        for r in 0..m {
            let x = samples.row(r);
            let c = nearest_center(&p.centers, x);
            counts[c] += 1;
            sums[c].iter_mut().zip(x).for_each(|(s, v)| *s += v);
        }
        (0..k)
            .map(|c| ModeStat {
                center: p.centers[c].clone(),
                count: counts[c],
                mass: counts[c] as f64 / m as f64,
                mean: (counts[c] > 0).then(|| sums[c].iter().map(|s| s / counts[c] as f64).collect()),
            })
            .collect()
    });
    Ok(SampleStats {
        count: m,
        mean,
        covariance,
        ks,
        modes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct URow {
    pub x: Vec<f64>,
    pub y0: f64,
    pub u: f64,
    pub diff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UReport {
    pub dim: usize,
    pub rows: Vec<URow>,
    pub max_abs_diff: f64,
}

impl UReport {
    pub fn write_csv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let mut head = x_headers(self.dim);
        head.extend(["y0", "u", "diff"].map(String::from));
        write_row(w, &head)?;
        for r in &self.rows {
            let mut f: Vec<String> = r.x.iter().map(|&v| fmt17(v)).collect();
            f.extend([r.y0, r.u, r.diff].map(fmt17));
            write_row(w, &f)?;
        }
        Ok(())
    }
}

/// The trained `Y₀` network against `u(0, ·)` on a grid.
pub fn y0_vs_u(ckpt: &ModelCheckpoint, target: &dyn Target, grid: &GridSpec) -> Result<UReport, DiagnosticsError> {
    let n = target.dim();
    if n != ckpt.dim() {
        return Err(DiagnosticsError::DimMismatch { expected: ckpt.dim(), got: n });
    }
    auxiliary_u(target, &ckpt.schedule, 0.0, &vec![0.0; n])?;
    let rows = grid
        .points(n)?
        .into_par_iter()
        .map(|x| {
            let y0 = ckpt.theta_y.forward(0.0, &x)[0];
            let u = auxiliary_u(target, &ckpt.schedule, 0.0, &x)?;
            Ok(URow { x, y0, u, diff: y0 - u })
        })
        .collect::<Result<Vec<_>, DiagnosticsError>>()?;
    let max_abs_diff = rows.iter().map(|r| r.diff.abs()).fold(0.0, f64::max);
    Ok(UReport { dim: n, rows, max_abs_diff })
}
