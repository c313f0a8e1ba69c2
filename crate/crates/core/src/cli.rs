//! Command-line interface: run configuration, `train`, `sample`, and
//! `diagnose` commands.

use std::ffi::OsString;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::diagnostics::{self, DiagnosticsError, GridSpec};
use crate::engine::{train, EngineError, RolloutConfig, TrainOptions};
use crate::sampler::{self, fmt17, CheckpointError, ModelCheckpoint, SampleError, FORMAT_VERSION, TOOL_VERSION};
use crate::schedule::{BetaSchedule, ScheduleError, TimeGrid};
use crate::targets::{GaussianTarget, MixtureTarget, Target, TargetError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;
pub const EXIT_UNSUPPORTED: i32 = 4;

/// An error with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl CliError {
    fn new(code: i32, message: impl Into<String>) -> Self {
        CliError {
            code,
            message: message.into(),
        }
    }

    fn field(path: &str, message: impl std::fmt::Display) -> Self {
        CliError::new(EXIT_VALIDATION, format!("invalid `{path}`: {message}"))
    }

    fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError::new(EXIT_IO, format!("{}: {e}", path.display()))
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::new(EXIT_VALIDATION, format!("checkpoint: {e}"))
    }
}

impl From<TargetError> for CliError {
    fn from(e: TargetError) -> Self {
        match e {
            TargetError::UnsupportedOracle(name) => CliError::new(
                EXIT_UNSUPPORTED,
                format!("target {name} has no analytic oracle; this diagnostic needs a built-in gaussian or mixture target"),
            ),
            other => CliError::new(EXIT_VALIDATION, other.to_string()),
        }
    }
}

impl From<EngineError> for CliError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::Config(_) | EngineError::Schedule(_) => CliError::new(EXIT_VALIDATION, e.to_string()),
            EngineError::Target(t) => t.into(),
            other => CliError::new(EXIT_DIVERGENCE, other.to_string()),
        }
    }
}

impl From<SampleError> for CliError {
    fn from(e: SampleError) -> Self {
        match e {
            SampleError::Checkpoint(c) => c.into(),
            SampleError::Target(t) => t.into(),
            SampleError::Engine(en) => en.into(),
            other => CliError::new(EXIT_DIVERGENCE, other.to_string()),
        }
    }
}

impl From<DiagnosticsError> for CliError {
    fn from(e: DiagnosticsError) -> Self {
        match e {
            DiagnosticsError::Target(t) => t.into(),
            DiagnosticsError::Engine(en) => en.into(),
            DiagnosticsError::Divergence { .. } => CliError::new(EXIT_DIVERGENCE, e.to_string()),
            other => CliError::new(EXIT_VALIDATION, other.to_string()),
        }
    }
}

/// A number or a list of numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScalarOrList {
    Scalar(f64),
    List(Vec<f64>),
}

impl ScalarOrList {
    fn len(&self) -> Option<usize> {
        match self {
            ScalarOrList::Scalar(_) => None,
            ScalarOrList::List(v) => Some(v.len()),
        }
    }

    fn expand(&self, dim: usize, path: &str) -> Result<Vec<f64>, CliError> {
        match self {
            ScalarOrList::Scalar(v) => Ok(vec![*v; dim]),
            ScalarOrList::List(v) if v.len() == dim => Ok(v.clone()),
            ScalarOrList::List(v) => Err(CliError::field(path, format!("has {} entries, expected {dim}", v.len()))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleBlock {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, rename = "T", skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub knots: Option<Vec<(f64, f64)>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetBlock {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean: Option<ScalarOrList>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variance: Option<ScalarOrList>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub centers: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainBlock {
    #[serde(default, rename = "M", skip_serializing_if = "Option::is_none")]
    pub batch: Option<usize>,
    #[serde(default, rename = "K", skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleBlock {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub count: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsBlock {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub times: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub paths: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub forward_dt: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// The run configuration file. Every key is optional; missing keys take the
/// defaults `β ≡ 1, T = 3, Δt = 0.01, M = 128, K = 9000, lr = 1e-3` and the
/// one-dimensional target `N(2, 0.3)`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub schedule: ScheduleBlock,
    #[serde(default)]
    pub target: TargetBlock,
    #[serde(default)]
    pub train: TrainBlock,
    #[serde(default)]
    pub sample: SampleBlock,
    #[serde(default)]
    pub diagnostics: DiagnosticsBlock,
}

/// A validated configuration with all defaults filled in.
#[derive(Debug, Clone)]
pub struct Resolved {
    /// The configuration as written back to the run directory.
    pub config: RunConfig,
    pub schedule: BetaSchedule,
    pub grid: TimeGrid,
    pub target: Arc<dyn Target>,
    pub batch: usize,
    pub train: TrainOptions,
    pub sample_count: usize,
    pub sample_seed: u64,
    pub times: Vec<f64>,
    pub grid_spec: GridSpec,
    pub paths: usize,
    pub forward_dt: f64,
    pub diagnostics_seed: u64,
}

fn positive(path: &str, v: f64) -> Result<f64, CliError> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(CliError::field(path, format!("must be positive and finite, got {v}")))
    }
}

fn at_least_one(path: &str, v: usize) -> Result<usize, CliError> {
    if v >= 1 {
        Ok(v)
    } else {
        Err(CliError::field(path, "must be at least 1"))
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let de = toml::Deserializer::parse(text).map_err(|e| CliError::new(EXIT_VALIDATION, format!("config: {e}")))?;
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            CliError::field(&path, e.into_inner().message().trim())
        })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::new(EXIT_VALIDATION, format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    fn resolve_schedule(&self) -> Result<(BetaSchedule, ScheduleBlock), CliError> {
        let b = &self.schedule;
        let horizon = positive("schedule.T", b.horizon.unwrap_or(3.0))?;
        let kind = b.kind.clone().unwrap_or_else(|| "constant".into());
        let schedule = match kind.as_str() {
            "constant" => {
                if b.knots.is_some() {
                    return Err(CliError::field("schedule.knots", "only allowed with kind = \"piecewise-linear\""));
                }
                BetaSchedule::constant(positive("schedule.beta", b.beta.unwrap_or(1.0))?, horizon)
            }
            "piecewise-linear" => {
                if b.beta.is_some() {
                    return Err(CliError::field("schedule.beta", "only allowed with kind = \"constant\""));
                }
                let knots = b
                    .knots
                    .clone()
                    .ok_or_else(|| CliError::field("schedule.knots", "required for kind = \"piecewise-linear\""))?;
                BetaSchedule::piecewise_linear(knots, horizon)
            }
            other => {
                return Err(CliError::field(
                    "schedule.kind",
                    format!("unknown kind {other:?}; expected \"constant\" or \"piecewise-linear\""),
                ))
            }
        };
        schedule.validate().map_err(|e| {
            let path = match e {
                ScheduleError::BadHorizon(_) => "schedule.T",
                ScheduleError::NonPositiveBeta { .. } | ScheduleError::BelowFloor { .. } if kind == "constant" => {
                    "schedule.beta"
                }
                _ => "schedule.knots",
            };
            CliError::field(path, e)
        })?;
        let block = match &schedule {
            BetaSchedule::Constant { beta, horizon } => ScheduleBlock {
                kind: Some(kind),
                beta: Some(*beta),
                horizon: Some(*horizon),
                knots: None,
            },
            BetaSchedule::PiecewiseLinear { knots, horizon } => ScheduleBlock {
                kind: Some(kind),
                beta: None,
                horizon: Some(*horizon),
                knots: Some(knots.clone()),
            },
        };
        Ok((schedule, block))
    }

    fn resolve_target(&self) -> Result<(Arc<dyn Target>, TargetBlock), CliError> {
        let b = &self.target;
        let kind = b.kind.clone().unwrap_or_else(|| "gaussian".into());
        let invalid = |path: &str, e: TargetError| CliError::field(path, e);
        match kind.as_str() {
            "gaussian" => {
                if b.weights.is_some() || b.centers.is_some() {
                    return Err(CliError::field("target", "weights and centers are only allowed with kind = \"mixture\""));
                }
                let mean_src = b.mean.clone().unwrap_or(ScalarOrList::Scalar(2.0));
                let var_src = b.variance.clone().unwrap_or(ScalarOrList::Scalar(0.3));
                let dim = b.dim.or(mean_src.len()).or(var_src.len()).unwrap_or(1);
                let dim = at_least_one("target.dim", dim)?;
                let mean = mean_src.expand(dim, "target.mean")?;
                let variance = var_src.expand(dim, "target.variance")?;
                for (i, v) in variance.iter().enumerate() {
                    positive(&format!("target.variance[{i}]"), *v)?;
                }
                if mean.iter().any(|m| !m.is_finite()) {
                    return Err(CliError::field("target.mean", "must be finite"));
                }
                let target = GaussianTarget::new(mean.clone(), variance.clone()).map_err(|e| invalid("target", e))?;
                let block = TargetBlock {
                    kind: Some(kind),
                    dim: Some(dim),
                    mean: Some(ScalarOrList::List(mean)),
                    variance: Some(ScalarOrList::List(variance)),
                    weights: None,
                    centers: None,
                };
                Ok((Arc::new(target), block))
            }
            "mixture" => {
                if b.mean.is_some() {
                    return Err(CliError::field("target.mean", "not allowed with kind = \"mixture\"; use centers"));
                }
                let nine = MixtureTarget::nine_mode();
                let centers = b.centers.clone().unwrap_or_else(|| nine.centers().to_vec());
                if centers.is_empty() {
                    return Err(CliError::field("target.centers", "at least one center is required"));
                }
                let dim = centers[0].len();
                if let Some(d) = b.dim {
                    if d != dim {
                        return Err(CliError::field("target.dim", format!("is {d} but centers have dimension {dim}")));
                    }
                }
                let weights = b.weights.clone().unwrap_or_else(|| vec![1.0 / centers.len() as f64; centers.len()]);
                if weights.len() != centers.len() {
                    return Err(CliError::field(
                        "target.weights",
                        format!("has {} entries for {} centers", weights.len(), centers.len()),
                    ));
                }
                let variance = match b.variance.clone().unwrap_or(ScalarOrList::Scalar(0.3)) {
                    ScalarOrList::Scalar(v) => positive("target.variance", v)?,
                    ScalarOrList::List(_) => {
                        return Err(CliError::field("target.variance", "mixtures take one common variance"));
                    }
                };
                let target = MixtureTarget::new(weights.clone(), centers.clone(), variance).map_err(|e| {
                    let path = match e {
                        TargetError::Invalid(ref m) if m.contains("weight") => "target.weights",
                        _ => "target.centers",
                    };
                    invalid(path, e)
                })?;
                let block = TargetBlock {
                    kind: Some(kind),
                    dim: Some(dim),
                    mean: None,
                    variance: Some(ScalarOrList::Scalar(variance)),
                    weights: Some(weights),
                    centers: Some(centers),
                };
                Ok((Arc::new(target), block))
            }
            "custom" => Err(CliError::field(
                "target.kind",
                "custom targets are defined in code and cannot be configured from a file",
            )),
            other => Err(CliError::field(
                "target.kind",
                format!("unknown kind {other:?}; expected \"gaussian\" or \"mixture\""),
            )),
        }
    }

    /// Validates every block and fills in defaults.
    pub fn resolve(&self) -> Result<Resolved, CliError> {
        let (schedule, schedule_block) = self.resolve_schedule()?;
        let (target, target_block) = self.resolve_target()?;
        let horizon = schedule.horizon();
        let t = &self.train;
        let batch = at_least_one("train.M", t.batch.unwrap_or(128))?;
        let iterations = at_least_one("train.K", t.iterations.unwrap_or(9000))?;
        let dt = positive("train.dt", t.dt.unwrap_or(0.01))?;
        let grid = TimeGrid::from_step(horizon, dt).map_err(|e| CliError::field("train.dt", e))?;
        let lr = positive("train.lr", t.lr.unwrap_or(1e-3))?;
        let seed = t.seed.unwrap_or(0);
        let sample_count = self.sample.count.unwrap_or(100_000);
        let sample_seed = self.sample.seed.unwrap_or(1);
        let d = &self.diagnostics;
        let times = d
            .times
            .clone()
            .unwrap_or_else(|| vec![0.0, horizon / 3.0, 2.0 * horizon / 3.0, horizon]);
        for (i, &x) in times.iter().enumerate() {
            if !(0.0..=horizon).contains(&x) {
                return Err(CliError::field(&format!("diagnostics.times[{i}]"), format!("{x} is outside [0, {horizon}]")));
            }
        }
        let grid_spec = d.grid.unwrap_or_else(|| GridSpec::default_for(target.dim()));
        grid_spec.validate().map_err(|e| CliError::field("diagnostics.grid", e))?;
        let paths = d.paths.unwrap_or(100_000);
        if paths < 2 {
            return Err(CliError::field("diagnostics.paths", "must be at least 2"));
        }
        let forward_dt = positive("diagnostics.forward_dt", d.forward_dt.unwrap_or(1e-3))?;
        let diagnostics_seed = d.seed.unwrap_or(2);
        let config = RunConfig {
            out: self.out.clone(),
            schedule: schedule_block,
            target: target_block,
            train: TrainBlock {
                batch: Some(batch),
                iterations: Some(iterations),
                dt: Some(dt),
                lr: Some(lr),
                seed: Some(seed),
            },
            sample: SampleBlock {
                count: Some(sample_count),
                seed: Some(sample_seed),
            },
            diagnostics: DiagnosticsBlock {
                times: Some(times.clone()),
                grid: Some(grid_spec),
                paths: Some(paths),
                forward_dt: Some(forward_dt),
                seed: Some(diagnostics_seed),
            },
        };
        Ok(Resolved {
            config,
            schedule,
            grid,
            target,
            batch,
            train: TrainOptions { iterations, lr, seed },
            sample_count,
            sample_seed,
            times,
            grid_spec,
            paths,
            forward_dt,
            diagnostics_seed,
        })
    }
}

impl Resolved {
    pub fn to_toml(&self) -> String {
        let body = toml::to_string(&self.config).expect("resolved config is serializable");
        format!("# fbsde-sampler {TOOL_VERSION} resolved configuration\n{body}")
    }
}

#[derive(Debug, Parser)]
#[command(name = "fbsde-sampler", version, about = "Sample unnormalized densities with a Deep BSDE reverse diffusion")]
pub struct Cli {
    /// Worker threads (default: all available cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Which {
    Score,
    Forward,
    Stats,
    U0,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train both networks and write checkpoint.json, loss.csv and resolved-config.toml.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (overrides `out` in the config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Training seed (overrides `train.seed`).
        #[arg(long)]
        seed: Option<u64>,
        /// Suppress progress output.
        #[arg(long)]
        quiet: bool,
    },
    /// Draw samples from a trained checkpoint into samples.csv.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 100_000)]
        count: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Output directory.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Compare a checkpoint against analytic oracles.
    Diagnose {
        #[arg(value_enum)]
        which: Which,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Run config supplying the diagnostics block.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
        /// Reverse times for `score`.
        #[arg(long, value_delimiter = ',')]
        times: Option<Vec<f64>>,
        /// Grid as `lo,hi,step` for `score` and `u0`.
        #[arg(long, value_delimiter = ',', num_args = 3)]
        grid: Option<Vec<f64>>,
        /// Samples CSV for `stats`.
        #[arg(long)]
        samples: Option<PathBuf>,
        /// Paths for `forward`.
        #[arg(long)]
        paths: Option<usize>,
        /// Forward time for `forward` (default: the horizon).
        #[arg(long)]
        time: Option<f64>,
        /// Step size for `forward`.
        #[arg(long)]
        dt: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<fs::File>) -> std::io::Result<()>) -> Result<(), CliError> {
    let file = fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut w = BufWriter::new(file);
    f(&mut w).and_then(|_| w.flush()).map_err(|e| CliError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    write_file(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        w.write_all(b"\n")
    })
}

fn cmd_train(config: &Path, out: Option<PathBuf>, seed: Option<u64>, quiet: bool) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(s) = seed {
        cfg.train.seed = Some(s);
    }
    if let Some(o) = out {
        cfg.out = Some(o);
    }
    let dir = cfg.out.clone().unwrap_or_else(|| PathBuf::from("run"));
    cfg.out = Some(dir.clone());
    let r = cfg.resolve()?;
    create_dir(&dir)?;
    let resolved_path = dir.join("resolved-config.toml");
    fs::write(&resolved_path, r.to_toml()).map_err(|e| CliError::io(&resolved_path, e))?;
    let rollout = RolloutConfig::new(r.grid, r.batch, r.schedule.clone(), r.target.clone())?;
    let every = (r.train.iterations / 20).max(1);
    let total = r.train.iterations;
    let outcome = train(&rollout, &r.train, None, |k, loss| {
        if !quiet && ((k + 1) % every == 0 || k == 0) {
            eprintln!("step {}/{total} loss {loss:.6e}", k + 1);
        }
    })
    .map_err(|e| {
        let code = match e.source {
            EngineError::Config(_) => EXIT_VALIDATION,
            _ => EXIT_DIVERGENCE,
        };
        CliError::new(code, format!("training failed at step {}: {e}", e.iteration + 1))
    })?;
    let ckpt = ModelCheckpoint {
        format_version: FORMAT_VERSION,
        tool_version: TOOL_VERSION.into(),
        theta_y: outcome.theta_y,
        theta_z: outcome.theta_z,
        schedule: r.schedule.clone(),
        grid: r.grid,
        target: r.target.descriptor(),
        seed: r.train.seed,
        iterations: outcome.losses.len(),
        final_loss: outcome.losses.last().copied(),
        lr: r.train.lr,
        batch: r.batch,
    };
    let ckpt_path = dir.join("checkpoint.json");
    ckpt.save(&ckpt_path).map_err(|e| CliError::io(&ckpt_path, e))?;
    write_file(&dir.join("loss.csv"), |w| {
        writeln!(w, "step,loss")?;
        for (k, l) in outcome.losses.iter().enumerate() {
            writeln!(w, "{},{}", k + 1, fmt17(*l))?;
        }
        Ok(())
    })?;
    if !quiet {
        eprintln!("wrote {}", dir.display());
    }
    Ok(())
}

fn cmd_sample(checkpoint: &Path, count: usize, seed: u64, out: &Path) -> Result<(), CliError> {
    let ckpt = ModelCheckpoint::load(checkpoint)?;
    let target = ckpt.build_target()?;
    let result = sampler::sample(&ckpt, target, count, seed)?;
    if !result.rerun_rows.is_empty() {
        eprintln!("reran {} divergent rows: {:?}", result.rerun_rows.len(), result.rerun_rows);
    }
    create_dir(out)?;
    let path = out.join("samples.csv");
    write_file(&path, |w| sampler::write_samples_csv(w, &result.samples).map_err(std::io::Error::other))
}

#[allow(clippy::too_many_arguments)]
fn cmd_diagnose(
    which: Which,
    checkpoint: &Path,
    config: Option<&Path>,
    out: &Path,
    format: Format,
    times: Option<Vec<f64>>,
    grid: Option<Vec<f64>>,
    samples: Option<&Path>,
    paths: Option<usize>,
    time: Option<f64>,
    dt: Option<f64>,
    seed: Option<u64>,
) -> Result<(), CliError> {
    let ckpt = ModelCheckpoint::load(checkpoint)?;
    let target = ckpt.build_target()?;
    let mut cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    // the checkpoint defines the model; only the diagnostics block is taken from the config
    cfg.schedule = ScheduleBlock {
        kind: Some(match ckpt.schedule {
            BetaSchedule::Constant { .. } => "constant".into(),
            BetaSchedule::PiecewiseLinear { .. } => "piecewise-linear".into(),
        }),
        beta: match ckpt.schedule {
            BetaSchedule::Constant { beta, .. } => Some(beta),
            _ => None,
        },
        horizon: Some(ckpt.schedule.horizon()),
        knots: match &ckpt.schedule {
            BetaSchedule::PiecewiseLinear { knots, .. } => Some(knots.clone()),
            _ => None,
        },
    };
    cfg.target = TargetBlock {
        kind: Some("gaussian".into()),
        dim: Some(ckpt.dim()),
        ..Default::default()
    };
    cfg.train = TrainBlock {
        dt: Some(ckpt.grid.dt),
        ..Default::default()
    };
    if let Some(t) = times {
        cfg.diagnostics.times = Some(t);
    }
    if let Some(g) = grid {
        cfg.diagnostics.grid = Some(GridSpec {
            lo: g[0],
            hi: g[1],
            step: g[2],
        });
    }
    if let Some(p) = paths {
        cfg.diagnostics.paths = Some(p);
    }
    if let Some(d) = dt {
        cfg.diagnostics.forward_dt = Some(d);
    }
    if let Some(s) = seed {
        cfg.diagnostics.seed = Some(s);
    }
    let r = cfg.resolve()?;
    let grid_spec = cfg.diagnostics.grid.unwrap_or_else(|| GridSpec::default_for(ckpt.dim()));
    create_dir(out)?;
    match which {
        Which::Score => {
            let report = diagnostics::score_diff_grid(&ckpt, target.as_ref(), &r.times, &grid_spec)?;
            match format {
                Format::Json => write_json(&out.join("score.json"), &report)?,
                Format::Csv => {
                    for &t in &r.times {
                        write_file(&out.join(format!("score_t{t}.csv")), |w| report.write_csv(w, Some(t)))?;
                    }
                }
            }
            for s in &report.summary {
                eprintln!(
                    "t={}: max |diff| {:.3e} overall, {:.3e} within 3 sd of the mass",
                    s.t, s.max_abs_diff, s.max_abs_diff_near_mass
                );
            }
        }
        Which::Forward => {
            let t = time.unwrap_or(ckpt.schedule.horizon());
            let report =
                diagnostics::forward_check(target.as_ref(), &ckpt.schedule, t, r.forward_dt, r.paths, r.diagnostics_seed)?;
            match format {
                Format::Json => write_json(&out.join("forward.json"), &report)?,
                Format::Csv => write_file(&out.join("forward.csv"), |w| report.write_csv(w))?,
            }
        }
        Which::Stats => {
            let path = samples.ok_or_else(|| CliError::new(EXIT_VALIDATION, "`stats` needs --samples PATH"))?;
            let data = sampler::read_samples_csv(path).map_err(|e| CliError::new(EXIT_VALIDATION, e))?;
            let stats = diagnostics::sample_stats(&data, target.as_ref())?;
            match format {
                Format::Json => write_json(&out.join("stats.json"), &stats)?,
                Format::Csv => {
                    write_file(&out.join("stats.csv"), |w| stats.write_csv(w))?;
                    if stats.modes.is_some() {
                        write_file(&out.join("modes.csv"), |w| stats.write_modes_csv(w))?;
                    }
                }
            }
        }
        Which::U0 => {
            let report = diagnostics::y0_vs_u(&ckpt, target.as_ref(), &grid_spec)?;
            match format {
                Format::Json => write_json(&out.join("u0.json"), &report)?,
                Format::Csv => write_file(&out.join("u0.csv"), |w| report.write_csv(w))?,
            }
            eprintln!("max |Y0 - u(0, x)| on the grid: {:.3e}", report.max_abs_diff);
        }
    }
    Ok(())
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Train {
            config,
            out,
            seed,
            quiet,
        } => cmd_train(&config, out, seed, quiet),
        Command::Sample {
            checkpoint,
            count,
            seed,
            out,
        } => cmd_sample(&checkpoint, count, seed, &out),
        Command::Diagnose {
            which,
            checkpoint,
            config,
            out,
            format,
            times,
            grid,
            samples,
            paths,
            time,
            dt,
            seed,
        } => cmd_diagnose(
            which,
            &checkpoint,
            config.as_deref(),
            &out,
            format,
            times,
            grid,
            samples.as_deref(),
            paths,
            time,
            dt,
            seed,
        ),
    }
}

/// Parses `args`, runs the command, and returns the exit code. Errors are
/// reported on stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
        }
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: invalid `--threads`: must be at least 1");
            return EXIT_VALIDATION;
        }
        pool = pool.num_threads(n);
    }
    let pool = match pool.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker threads: {e}");
            return EXIT_IO;
        }
    };
    match pool.install(|| dispatch(cli.command)) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}
