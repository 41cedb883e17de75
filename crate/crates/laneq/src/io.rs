//! Serialized artifacts: checkpoints, metrics logs, trajectory dumps.
//!
//! Checkpoints are JSON with every tensor spelled out as decimal floats.
//! `serde_json` prints the shortest representation that parses back to the
//! identical bits, so save followed by load reproduces a model exactly and
//! two equal models produce byte-identical files.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::model::GcqModel;
use crate::nn::Matrix;
use crate::replay::StoredObs;
use crate::sim::Vehicle;
use crate::{Error, Real, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

/// One named weight or bias matrix in row-major order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorBlob {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

/// A trained model together with the exact configuration that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config_digest: String,
    pub scenario_digest: String,
    /// Canonical configuration text; evaluation defaults to this when no
    /// explicit config is given.
    pub config_text: String,
    /// Gradient steps taken by the run that wrote the file.
    pub trained_steps: u64,
    pub tensors: Vec<TensorBlob>,
}

impl Checkpoint {
    pub fn from_model(model: &GcqModel<Real>, cfg: &RunConfig, trained_steps: u64) -> Self {
        let tensors = model
            .params()
            .into_iter()
            .map(|(name, m)| TensorBlob {
                name: name.to_string(),
                rows: m.rows(),
                cols: m.cols(),
                data: m.data().to_vec(),
            })
            .collect();
        Self {
            version: CHECKPOINT_VERSION,
            config_digest: cfg.config_digest(),
            scenario_digest: cfg.scenario_digest(),
            config_text: cfg.canonical_text(),
            trained_steps,
            tensors,
        }
    }

    /// Rejects non-finite tensors before anything touches the disk.
    pub fn save(&self, path: &Path) -> Result<()> {
        for t in &self.tensors {
            if t.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("checkpoint tensor {}", t.name)));
            }
            if t.data.len() != t.rows * t.cols {
                return Err(Error::Checkpoint(format!(
                    "tensor {} claims {}x{} but holds {} values",
                    t.name,
                    t.rows,
                    t.cols,
                    t.data.len()
                )));
            }
        }
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        let mut out = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut out, self)?;
        out.write_all(b"\n")?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {} (expected {})",
                ckpt.version, CHECKPOINT_VERSION
            )));
        }
        Ok(ckpt)
    }

    /// The configuration embedded at save time.
    pub fn config(&self) -> Result<RunConfig> {
        let cfg: RunConfig =
            toml::from_str(&self.config_text).map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))?;
        Ok(cfg)
    }

    /// Rebuilds the model; every stored tensor must match a parameter by
    /// name and shape, with none missing and none left over.
    pub fn to_model(&self) -> Result<GcqModel<Real>> {
        let feature_dim = self
            .tensors
            .iter()
            .find(|t| t.name == "enc1.w")
            .map(|t| t.rows)
            .ok_or_else(|| Error::Checkpoint("missing tensor enc1.w".to_string()))?;
        let mut model = GcqModel::<Real>::zeros(feature_dim);
        let mut params = model.params_mut();
        if params.len() != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, file holds {}",
                params.len(),
                self.tensors.len()
            )));
        }
        for blob in &self.tensors {
            let slot = params
                .iter_mut()
                .find(|(name, _)| *name == blob.name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor {}", blob.name)))?;
            let m: &mut Matrix<Real> = slot.1;
            if m.shape() != (blob.rows, blob.cols) || blob.data.len() != blob.rows * blob.cols {
                return Err(Error::Checkpoint(format!(
                    "tensor {} has shape {}x{}, expected {}x{}",
                    blob.name,
                    blob.rows,
                    blob.cols,
                    m.rows(),
                    m.cols()
                )));
            }
            *m = Matrix::from_vec(blob.rows, blob.cols, blob.data.clone());
        }
        Ok(model)
    }
}

/// First line of a metrics stream; identifies the run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsHeader {
    pub config_digest: String,
    pub scenario_digest: String,
    pub preset: String,
    pub seed: u64,
}

/// One training episode, appended as a JSON line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: u64,
    pub steps: u64,
    pub reward_total: f64,
    pub reward_intention: f64,
    pub reward_speed: f64,
    pub penalty_collision: f64,
    pub penalty_lane_change: f64,
    pub collisions: u64,
    pub merges_ok: u64,
    pub merges_failed: u64,
    /// Mean optimizer loss over the episode; absent before training starts.
    pub mean_loss: Option<f64>,
    pub epsilon: f64,
    /// Excluded from reproducibility comparisons.
    pub wallclock_s: f64,
}

/// Appends JSON lines; the header goes first, then one line per episode.
pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path, header: &MetricsHeader) -> Result<Self> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        let mut w = Self {
            out: BufWriter::new(File::create(path)?),
        };
        w.write_line(header)?;
        Ok(w)
    }

    pub fn write(&mut self, record: &EpisodeRecord) -> Result<()> {
        self.write_line(record)
    }

    fn write_line<T: Serialize>(&mut self, value: &T) -> Result<()> {
        serde_json::to_writer(&mut self.out, value)?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }
}

/// Drops `wallclock_s` from every line so two runs of the same seed can be
/// compared byte for byte.
pub fn strip_wallclock(jsonl: &str) -> String {
    let mut out = String::new();
    for line in jsonl.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let mut v: serde_json::Value = match serde_json::from_str(line) {
            Ok(v) => v,
            Err(_) => {
                out.push_str(line);
                out.push('\n');
                continue;
            }
        };
        if let Some(obj) = v.as_object_mut() {
            obj.remove("wallclock_s");
        }
        out.push_str(&v.to_string());
        out.push('\n');
    }
    out
}

/// Per-step vehicle state as CSV.
pub struct TrajectoryWriter {
    out: BufWriter<File>,
}

impl TrajectoryWriter {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(b"step,time_s,id,kind,lane,pos,speed\n")?;
        Ok(Self { out })
    }

    pub fn write_step<'a>(
        &mut self,
        step: u64,
        time_s: f64,
        vehicles: impl Iterator<Item = &'a Vehicle>,
    ) -> Result<()> {
        for v in vehicles {
            writeln!(
                self.out,
                "{step},{time_s},{},{},{},{},{}",
                v.id,
                v.kind.label(),
                v.lane,
                v.pos,
                v.speed
            )?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

#[derive(Serialize)]
struct ObsDumpRecord<'a> {
    step: u64,
    #[serde(flatten)]
    obs: &'a StoredObs,
}

/// One JSON line per step holding the trimmed observation.
pub struct ObsDumpWriter {
    out: BufWriter<File>,
}

impl ObsDumpWriter {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        Ok(Self {
            out: BufWriter::new(File::create(path)?),
        })
    }

    pub fn write(&mut self, step: u64, obs: &StoredObs) -> Result<()> {
        serde_json::to_writer(&mut self.out, &ObsDumpRecord { step, obs })?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}
