//! Checkpoint directories: `manifest.json` plus one binary file per matrix.
//!
//! Matrix file layout (all little-endian):
//!
//! | bytes | content |
//! |-------|---------|
//! | 4     | magic `MSLR` |
//! | 4     | `u32` version = 1 |
//! | 4     | `u32` rows |
//! | 4     | `u32` cols |
//! | 8 * rows * cols | `f64` values, row-major |
//!
//! Directories are written to a sibling temp directory and renamed into place.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::{BranchStack, LoraBranch, ModalityId, TaskId};
use crate::matrix::Matrix;
use crate::metrics::StabilitySnapshot;
use crate::model::{Head, MaskPolicy, ModelConfig, ParamId, Placement, TaskEntry, ToyModel};
use crate::optim::{Moments, OptimizerState};

pub const MAGIC: &[u8; 4] = b"MSLR";
pub const MATRIX_VERSION: u32 = 1;
pub const SCHEMA_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

pub fn encode_matrix(m: &Matrix) -> Result<Vec<u8>> {
    let dim = |n: usize| {
        u32::try_from(n).map_err(|_| Error::Format {
            path: PathBuf::new(),
            reason: format!("dimension {n} exceeds u32"),
        })
    };
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * m.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&MATRIX_VERSION.to_le_bytes());
    out.extend_from_slice(&dim(m.rows())?.to_le_bytes());
    out.extend_from_slice(&dim(m.cols())?.to_le_bytes());
    for x in m.as_slice() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_matrix(bytes: &[u8], path: &Path) -> Result<Matrix> {
    let fail = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < HEADER_LEN {
        return Err(fail(format!("file too short ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(fail(format!("bad magic {:?}", &bytes[..4])));
    }
    let word = |k: usize| u32::from_le_bytes(bytes[k..k + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != MATRIX_VERSION {
        return Err(fail(format!("unsupported matrix version {version}")));
    }
    let (rows, cols) = (word(8) as usize, word(12) as usize);
    let payload = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| fail(format!("dimensions {rows}x{cols} overflow")))?;
    if bytes.len() - HEADER_LEN != payload {
        return Err(fail(format!(
            "{rows}x{cols} needs {payload} payload bytes, found {}",
            bytes.len() - HEADER_LEN
        )));
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Matrix::from_vec(rows, cols, data)
}

pub fn write_matrix(path: &Path, m: &Matrix) -> Result<()> {
    fs::write(path, encode_matrix(m)?).map_err(|e| Error::io(path, e))
}

pub fn read_matrix(path: &Path) -> Result<Matrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_matrix(&bytes, path)
}

impl FromStr for ParamId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bad parameter id `{s}`"));
        let parts: Vec<&str> = s.split('.').collect();
        let num = |p: &str, prefix: &str| -> Result<usize> {
            p.strip_prefix(prefix)
                .and_then(|n| n.parse().ok())
                .ok_or_else(bad)
        };
        match parts.as_slice() {
            [l, b, which @ ("a" | "b")] => {
                let layer = num(l, "layer")?;
                let branch = num(b, "branch")?;
                Ok(if *which == "a" {
                    ParamId::BranchA { layer, branch }
                } else {
                    ParamId::BranchB { layer, branch }
                })
            }
            [h, "weight"] => Ok(ParamId::HeadWeight(num(h, "head")?)),
            [h, "bias"] => Ok(ParamId::HeadBias(num(h, "head")?)),
            _ => Err(bad()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    pub layers: usize,
    pub width: usize,
    pub placement: Placement,
    pub layer_files: Vec<LayerEntry>,
    pub tasks: Vec<TaskRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerRecord>,
    #[serde(default)]
    pub snapshots: Vec<SnapshotRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerEntry {
    pub weight: String,
    pub bias: String,
    pub mask: Vec<u8>,
    pub branches: Vec<BranchRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchRecord {
    pub task_id: TaskId,
    pub modality_id: ModalityId,
    pub rank: usize,
    pub scale: f64,
    pub frozen: bool,
    pub a: String,
    pub b: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskRecord {
    pub task_id: TaskId,
    pub modality_id: ModalityId,
    pub classes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<String>,
    pub frozen: bool,
    pub head_weight: String,
    pub head_bias: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerRecord {
    pub step: u64,
    pub moments: Vec<MomentRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MomentRecord {
    pub param: String,
    pub first: String,
    pub second: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SnapshotRecord {
    pub task_id: TaskId,
    pub input_hash: String,
    pub mask_policy: MaskPolicy,
    pub captured_after: usize,
    pub input: String,
    pub logits: String,
}

/// Everything a checkpoint directory holds.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ToyModel,
    pub optimizer: Option<OptimizerState>,
    pub snapshots: Vec<StabilitySnapshot>,
}

pub const MANIFEST: &str = "manifest.json";

/// Writes `model` (and optionally optimizer moments and stability snapshots) to `dir`.
pub fn save_checkpoint(
    dir: &Path,
    model: &ToyModel,
    optimizer: Option<&OptimizerState>,
    snapshots: &[StabilitySnapshot],
) -> Result<()> {
    let name = dir
        .file_name()
        .ok_or_else(|| Error::Config(format!("bad checkpoint path {}", dir.display())))?
        .to_string_lossy()
        .into_owned();
    let parent = dir.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    let tmp = parent.join(format!(".{name}.tmp-{}", std::process::id()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let manifest = write_contents(&tmp, model, optimizer, snapshots)?;
    let json = serde_json::to_string_pretty(&manifest)?;
    let mpath = tmp.join(MANIFEST);
    fs::write(&mpath, json + "\n").map_err(|e| Error::io(&mpath, e))?;

    if dir.exists() {
        let old = parent.join(format!(".{name}.old-{}", std::process::id()));
        fs::rename(dir, &old).map_err(|e| Error::io(dir, e))?;
        fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))?;
        fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
    } else {
        fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

fn write_contents(
    dir: &Path,
    model: &ToyModel,
    optimizer: Option<&OptimizerState>,
    snapshots: &[StabilitySnapshot],
) -> Result<Manifest> {
    let put = |name: String, m: &Matrix| -> Result<String> {
        write_matrix(&dir.join(&name), m)?;
        Ok(name)
    };
    let mut layer_files = Vec::new();
    for (l, stack) in model.layers().iter().enumerate() {
        let mut branches = Vec::new();
        for (k, br) in stack.branches().iter().enumerate() {
            branches.push(BranchRecord {
                task_id: br.task().clone(),
                modality_id: br.modality().clone(),
                rank: br.rank(),
                scale: br.scale(),
                frozen: br.is_frozen(),
                a: put(format!("layer{l}_branch{k}_a.bin"), br.a())?,
                b: put(format!("layer{l}_branch{k}_b.bin"), br.b())?,
            });
        }
        layer_files.push(LayerEntry {
            weight: put(format!("layer{l}_weight.bin"), stack.weight())?,
            bias: put(format!("layer{l}_bias.bin"), stack.bias())?,
            mask: stack.mask().to_vec(),
            branches,
        });
    }
    let mut tasks = Vec::new();
    for (t, task) in model.tasks().iter().enumerate() {
        tasks.push(TaskRecord {
            task_id: task.id.clone(),
            modality_id: task.modality.clone(),
            classes: task.classes,
            data: task.data.clone(),
            frozen: task.head.frozen,
            head_weight: put(format!("head{t}_weight.bin"), &task.head.weight)?,
            head_bias: put(format!("head{t}_bias.bin"), &task.head.bias)?,
        });
    }
    let optimizer = optimizer
        .map(|state| -> Result<OptimizerRecord> {
            let moments = state
                .moments
                .iter()
                .map(|(id, m)| {
                    let key = id.to_string().replace('.', "_");
                    Ok(MomentRecord {
                        param: id.to_string(),
                        first: put(format!("opt_{key}_m.bin"), &m.first)?,
                        second: put(format!("opt_{key}_v.bin"), &m.second)?,
                    })
                })
                .collect::<Result<_>>()?;
            Ok(OptimizerRecord {
                step: state.step,
                moments,
            })
        })
        .transpose()?;
    let snapshots = snapshots
        .iter()
        .enumerate()
        .map(|(k, s)| {
            Ok(SnapshotRecord {
                task_id: s.task_id.clone(),
                input_hash: s.input_hash.clone(),
                mask_policy: s.mask_policy,
                captured_after: s.captured_after,
                input: put(format!("snapshot{k}_input.bin"), &s.input)?,
                logits: put(format!("snapshot{k}_logits.bin"), &s.logits)?,
            })
        })
        .collect::<Result<_>>()?;
    let config = model.config();
    Ok(Manifest {
        schema_version: SCHEMA_VERSION,
        layers: config.layers,
        width: config.width,
        placement: config.placement,
        layer_files,
        tasks,
        optimizer,
        snapshots,
    })
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let mpath = dir.join(MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: mpath.clone(),
        reason: e.to_string(),
    })?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(Error::Format {
            path: mpath,
            reason: format!("unsupported schema version {}", manifest.schema_version),
        });
    }
    Ok(manifest)
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest = read_manifest(dir)?;
    let get = |name: &str| -> Result<Matrix> {
        // Names are bare file names; refuse anything that could escape the directory.
        if name.contains('/') || name.contains('\\') || name.starts_with("..") {
            return Err(Error::Format {
                path: dir.join(MANIFEST),
                reason: format!("bad matrix file name `{name}`"),
            });
        }
        read_matrix(&dir.join(name))
    };
    let config = ModelConfig {
        layers: manifest.layers,
        width: manifest.width,
        placement: manifest.placement,
    };
    let mut layers = Vec::new();
    for entry in &manifest.layer_files {
        let mut branches = Vec::new();
        for rec in &entry.branches {
            let mut br = LoraBranch::new(
                get(&rec.a)?,
                get(&rec.b)?,
                rec.task_id.clone(),
                rec.modality_id.clone(),
                rec.scale,
            )?;
            if br.rank() != rec.rank {
                return Err(Error::Format {
                    path: dir.join(&rec.a),
                    reason: format!(
                        "rank {} does not match manifest rank {}",
                        br.rank(),
                        rec.rank
                    ),
                });
            }
            br.frozen = rec.frozen;
            branches.push(br);
        }
        layers.push(BranchStack::from_parts(
            get(&entry.weight)?,
            get(&entry.bias)?,
            branches,
            entry.mask.clone(),
        )?);
    }
    let mut tasks = Vec::new();
    for rec in &manifest.tasks {
        tasks.push(TaskEntry {
            id: rec.task_id.clone(),
            modality: rec.modality_id.clone(),
            classes: rec.classes,
            data: rec.data.clone(),
            head: Head {
                weight: get(&rec.head_weight)?,
                bias: get(&rec.head_bias)?,
                frozen: rec.frozen,
            },
        });
    }
    let model = ToyModel::from_parts(config, layers, tasks)?;
    let optimizer = manifest
        .optimizer
        .as_ref()
        .map(|rec| -> Result<OptimizerState> {
            let mut state = OptimizerState {
                step: rec.step,
                ..Default::default()
            };
            for m in &rec.moments {
                state.moments.insert(
                    m.param.parse()?,
                    Moments {
                        first: get(&m.first)?,
                        second: get(&m.second)?,
                    },
                );
            }
            Ok(state)
        })
        .transpose()?;
    let snapshots = manifest
        .snapshots
        .iter()
        .map(|rec| {
            Ok(StabilitySnapshot {
                task_id: rec.task_id.clone(),
                input_hash: rec.input_hash.clone(),
                mask_policy: rec.mask_policy,
                captured_after: rec.captured_after,
                input: get(&rec.input)?,
                logits: get(&rec.logits)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Checkpoint {
        model,
        optimizer,
        snapshots,
    })
}
