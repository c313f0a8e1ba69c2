//! Checkpoints and inference-time sampling.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Mat;
use crate::engine::{simulate_path, EngineError, NetworkZ, RolloutConfig};
use crate::nn::{MlpParams, NnError};
use crate::rng::{substream, tags};
use crate::schedule::{BetaSchedule, TimeGrid};
use crate::targets::{Target, TargetDescriptor, TargetError};

pub const FORMAT_VERSION: u32 = 1;
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
/// Rows per sampling chunk; each chunk has its own random substream.
pub const SAMPLE_CHUNK_ROWS: usize = 4096;
/// Attempts per divergent row before giving up on it.
const MAX_ROW_ATTEMPTS: u64 = 8;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint parse error at `{field}`: {message}")]
    Parse { field: String, message: String },
    #[error("unsupported checkpoint format_version {found} (supported: {FORMAT_VERSION})")]
    Version { found: u64 },
    #[error("shape error in {network} layer {layer}: {detail}")]
    Shape {
        network: &'static str,
        layer: usize,
        detail: String,
    },
    #[error("invalid checkpoint field `{field}`: {message}")]
    Invalid { field: &'static str, message: String },
}

#[derive(Debug, Error)]
pub enum SampleError {
    #[error("{reruns} divergent rows exceed the rerun cap of {cap}")]
    TooManyReruns { reruns: usize, cap: usize },
    #[error("row {row} diverged on every rerun attempt")]
    RowFailed { row: usize },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Target(#[from] TargetError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// A trained model together with everything needed to reuse it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelCheckpoint {
    pub format_version: u32,
    pub tool_version: String,
    pub theta_y: MlpParams,
    pub theta_z: MlpParams,
    pub schedule: BetaSchedule,
    pub grid: TimeGrid,
    pub target: TargetDescriptor,
    pub seed: u64,
    pub iterations: usize,
    pub final_loss: Option<f64>,
    pub lr: f64,
    pub batch: usize,
}

impl ModelCheckpoint {
    pub fn dim(&self) -> usize {
        self.target.dim()
    }

    /// Structural checks: layer shapes, network/target dimensions, grid.
    pub fn validate(&self) -> Result<(), CheckpointError> {
        if self.format_version != FORMAT_VERSION {
            return Err(CheckpointError::Version {
                found: self.format_version.into(),
            });
        }
        let n = self.dim();
        if n == 0 {
            return Err(CheckpointError::Invalid {
                field: "target",
                message: "dimension is zero".into(),
            });
        }
        for (network, params, out) in [("theta_y", &self.theta_y, 1), ("theta_z", &self.theta_z, n)] {
            params.validate().map_err(|e| match e {
                NnError::Shape { layer, detail } => CheckpointError::Shape { network, layer, detail },
                other => CheckpointError::Shape {
                    network,
                    layer: 0,
                    detail: other.to_string(),
                },
            })?;
            if params.input_dim() != n + 1 {
                return Err(CheckpointError::Shape {
                    network,
                    layer: 0,
                    detail: format!("{} inputs but target dimension {n} needs {}", params.input_dim(), n + 1),
                });
            }
            if params.output_dim() != out {
                return Err(CheckpointError::Shape {
                    network,
                    layer: params.layers.len() - 1,
                    detail: format!("{} outputs, expected {out}", params.output_dim()),
                });
            }
        }
        let g = &self.grid;
        if g.steps == 0 || !(g.dt > 0.0) || ((g.dt * g.steps as f64) - g.horizon).abs() > 1e-9 * g.horizon {
            return Err(CheckpointError::Invalid {
                field: "grid",
                message: format!("{} steps of {} do not span horizon {}", g.steps, g.dt, g.horizon),
            });
        }
        self.schedule.validate().map_err(|e| CheckpointError::Invalid {
            field: "schedule",
            message: e.to_string(),
        })?;
        Ok(())
    }

    /// Pretty-printed JSON. Floats use the shortest representation that
    /// parses back to the same bits.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint is always serializable")
    }

    pub fn from_json(text: &str) -> Result<Self, CheckpointError> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| CheckpointError::Parse {
            field: "<document>".into(),
            message: e.to_string(),
        })?;
        match value.get("format_version").map(|v| v.as_u64()) {
            None => {
                return Err(CheckpointError::Parse {
                    field: "format_version".into(),
                    message: "missing".into(),
                })
            }
            Some(Some(v)) if v == FORMAT_VERSION as u64 => {}
            Some(Some(v)) => return Err(CheckpointError::Version { found: v }),
            Some(None) => {
                return Err(CheckpointError::Parse {
                    field: "format_version".into(),
                    message: "not an unsigned integer".into(),
                })
            }
        }
        let ckpt: ModelCheckpoint = serde_path_to_error::deserialize(value).map_err(|e| CheckpointError::Parse {
            field: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        ckpt.validate()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io = |source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut f = fs::File::create(path).map_err(io)?;
        f.write_all(self.to_json().as_bytes()).map_err(io)?;
        f.write_all(b"\n").map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let text = fs::read_to_string(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    /// Rollout configuration on the training grid.
    pub fn rollout_config(&self, target: Arc<dyn Target>) -> Result<RolloutConfig, SampleError> {
        if target.dim() != self.dim() {
            return Err(CheckpointError::Invalid {
                field: "target",
                message: format!("checkpoint dimension {} but target dimension {}", self.dim(), target.dim()),
            }
            .into());
        }
        Ok(RolloutConfig::new(self.grid, self.batch.max(1), self.schedule.clone(), target)?)
    }

    /// The built-in target named by the descriptor.
    pub fn build_target(&self) -> Result<Arc<dyn Target>, TargetError> {
        self.target.build()
    }
}

/// Samples and the rows that had to be regenerated.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput {
    pub samples: Mat,
    pub rerun_rows: Vec<usize>,
}

/// Largest number of divergent rows tolerated in a run of `count`.
pub fn rerun_cap(count: usize) -> usize {
    count / 1000
}

fn run_row<R: Rng>(cfg: &RolloutConfig, theta_z: &MlpParams, rng: &mut R, out: &mut [f64]) -> Result<(), EngineError> {
    for v in out.iter_mut() {
        *v = rng.sample(StandardNormal);
    }
    let sd = cfg.grid.dt.sqrt();
    let mut field = NetworkZ::new(cfg, theta_z);
    let (x, _) = simulate_path(cfg, &mut field, out, 0.0, |dw| {
        for v in dw.iter_mut() {
            *v = sd * rng.sample::<f64, _>(StandardNormal);
        }
    })?;
    out.copy_from_slice(&x);
    Ok(())
}

/// Draws `count` terminal states `X_N` with the trained `Z` network, starting
/// from `X₀ ~ N(0, I)`. Chunks of [`SAMPLE_CHUNK_ROWS`] run in parallel, each
/// on its own substream, so the result depends only on `seed`.
pub fn sample(
    ckpt: &ModelCheckpoint,
    target: Arc<dyn Target>,
    count: usize,
    seed: u64,
) -> Result<SampleOutput, SampleError> {
    ckpt.validate()?;
    let cfg = ckpt.rollout_config(target)?;
    let n = cfg.dim();
    let chunks: Vec<usize> = (0..count).step_by(SAMPLE_CHUNK_ROWS).collect();
    let parts = chunks
        .par_iter()
        .enumerate()
        .map(|(c, &start)| {
            let rows = SAMPLE_CHUNK_ROWS.min(count - start);
            let mut rng = substream(seed, &[tags::SAMPLE, c as u64]);
            let mut data = vec![0.0; rows * n];
            let mut failed = Vec::new();
            for r in 0..rows {
                match run_row(&cfg, &ckpt.theta_z, &mut rng, &mut data[r * n..(r + 1) * n]) {
                    Ok(()) => {}
                    Err(EngineError::Divergence { .. }) => failed.push(start + r),
                    Err(e) => return Err(e),
                }
            }
            Ok((data, failed))
        })
        .collect::<Vec<Result<_, EngineError>>>();
    let mut data = Vec::with_capacity(count * n);
    let mut rerun_rows = Vec::new();
    for part in parts {
        let (d, f) = part?;
        data.extend(d);
        rerun_rows.extend(f);
    }
    let cap = rerun_cap(count);
    if rerun_rows.len() > cap {
        return Err(SampleError::TooManyReruns {
            reruns: rerun_rows.len(),
            cap,
        });
    }
    for &row in &rerun_rows {
        let out = &mut data[row * n..(row + 1) * n];
        let mut ok = false;
        for attempt in 0..MAX_ROW_ATTEMPTS {
            let mut rng = substream(seed, &[tags::RERUN, row as u64, attempt]);
            match run_row(&cfg, &ckpt.theta_z, &mut rng, out) {
                Ok(()) => {
                    ok = true;
                    break;
                }
                Err(EngineError::Divergence { .. }) => {}
                Err(e) => return Err(e.into()),
            }
        }
        if !ok {
            return Err(SampleError::RowFailed { row });
        }
    }
    Ok(SampleOutput {
        samples: Mat::from_vec(count, n, data),
        rerun_rows,
    })
}

/// Formats a float with 17 significant digits.
pub fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes samples as CSV with header `x1,…,xn`.
pub fn write_samples_csv<W: Write>(out: W, samples: &Mat) -> csv::Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record((1..=samples.cols).map(|j| format!("x{j}")))?;
    for r in 0..samples.rows {
        w.write_record(samples.row(r).iter().map(|&v| fmt17(v)))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a samples CSV written by [`write_samples_csv`].
pub fn read_samples_csv(path: &Path) -> Result<Mat, String> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let cols = rdr.headers().map_err(|e| e.to_string())?.len();
    let mut data = Vec::new();
    let mut rows = 0;
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| format!("row {}: {e}", i + 1))?;
        for field in rec.iter() {
            data.push(field.trim().parse::<f64>().map_err(|e| format!("row {}: {e}", i + 1))?);
        }
        rows += 1;
    }
    Ok(Mat::from_vec(rows, cols, data))
}
