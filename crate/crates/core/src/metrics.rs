//! Verification and measurement over trained models.

use std::path::Path;

use serde::Serialize;

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::gradcheck::{relative_error, FD_REL_TOL, FD_STEP};
use crate::lora::{ModalityId, TaskId};
use crate::matrix::Matrix;
use crate::model::{MaskPolicy, ToyModel};
use crate::regularizers::{similarity_value, LossConfig, SimilarityOpts};
use crate::taskgen::LabeledDataset;
use crate::trainer::{accuracy, objective, partition_for};

/// Logits of one task on a fixed input, recorded right after the task was learned.
#[derive(Clone, Debug, PartialEq)]
pub struct StabilitySnapshot {
    pub task_id: TaskId,
    pub input_hash: String,
    pub mask_policy: MaskPolicy,
    /// Sequence position of the task after which the snapshot was taken.
    pub captured_after: usize,
    pub input: Matrix,
    pub logits: Matrix,
}

impl StabilitySnapshot {
    pub fn capture(
        model: &ToyModel,
        task: usize,
        input: Matrix,
        policy: MaskPolicy,
        captured_after: usize,
    ) -> Result<Self> {
        let logits = model.logits(&input, task, policy)?;
        Ok(Self {
            task_id: model.tasks()[task].id.clone(),
            input_hash: input.content_hash(),
            mask_policy: policy,
            captured_after,
            input,
            logits,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StabilityEntry {
    pub task_id: TaskId,
    pub captured_after: usize,
    pub max_abs_deviation: f64,
    pub bitwise_equal: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StabilityReport {
    pub mask_policy: MaskPolicy,
    pub entries: Vec<StabilityEntry>,
}

impl StabilityReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.bitwise_equal)
    }

    pub fn max_deviation(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_abs_deviation)
            .fold(0.0, f64::max)
    }
}

/// Recomputes every snapshot's logits under the current model.
pub fn stability_replay(
    model: &ToyModel,
    snapshots: &[StabilitySnapshot],
    policy: MaskPolicy,
) -> Result<StabilityReport> {
    let mut entries = Vec::with_capacity(snapshots.len());
    for snap in snapshots {
        if snap.mask_policy != policy {
            return Err(Error::Precondition(format!(
                "snapshot of `{}` was captured with mask policy {}, not {policy}",
                snap.task_id, snap.mask_policy
            )));
        }
        if snap.input.content_hash() != snap.input_hash {
            return Err(Error::HashMismatch(snap.task_id.0.clone()));
        }
        let task = model.task_index(&snap.task_id)?;
        let now = model.logits(&snap.input, task, policy)?;
        entries.push(StabilityEntry {
            task_id: snap.task_id.clone(),
            captured_after: snap.captured_after,
            max_abs_deviation: now.max_abs_diff(&snap.logits)?,
            bitwise_equal: now.bitwise_eq(&snap.logits),
        });
    }
    Ok(StabilityReport {
        mask_policy: policy,
        entries,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TaskMetrics {
    pub task_id: TaskId,
    pub modality_id: ModalityId,
    pub accuracy: f64,
    pub accuracy_after_training: f64,
    /// `accuracy_after_training - accuracy`.
    pub forgetting: f64,
}

/// Test accuracy now and right after training, per task.
///
/// `tasks` pairs each learned task with its dataset; the test split must be
/// the input its snapshot was taken on. With `parallel` the tasks are
/// evaluated on separate threads.
pub fn accuracy_and_forgetting(
    model: &ToyModel,
    tasks: &[(TaskId, &LabeledDataset)],
    snapshots: &[StabilitySnapshot],
    policy: MaskPolicy,
    parallel: bool,
) -> Result<Vec<TaskMetrics>> {
    let one = |(id, data): &(TaskId, &LabeledDataset)| -> Result<TaskMetrics> {
        let task = model.task_index(id)?;
        let snap = snapshots
            .iter()
            .find(|s| &s.task_id == id && s.mask_policy == policy)
            .ok_or_else(|| Error::Precondition(format!("missing snapshot for task `{id}`")))?;
        let (x, y) = data.test_split();
        if x.content_hash() != snap.input_hash {
            return Err(Error::HashMismatch(id.0.clone()));
        }
        let now = accuracy(&model.logits(&x, task, policy)?, &y);
        let then = accuracy(&snap.logits, &y);
        Ok(TaskMetrics {
            task_id: id.clone(),
            modality_id: model.tasks()[task].modality.clone(),
            accuracy: now,
            accuracy_after_training: then,
            forgetting: then - now,
        })
    };
    if parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = tasks.iter().map(|t| s.spawn(move || one(t))).collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("evaluation thread panicked"))
                .collect()
        })
    } else {
        tasks.iter().map(one).collect()
    }
}

/// Pairwise branch similarity, averaged over placed layers.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SimilarityMatrix {
    pub task_ids: Vec<TaskId>,
    pub values: Vec<Vec<f64>>,
}

impl SimilarityMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i][j]
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| write_err(path, e))?;
        let mut header = vec!["task".to_string()];
        header.extend(self.task_ids.iter().map(|t| t.0.clone()));
        w.write_record(&header)?;
        for (id, row) in self.task_ids.iter().zip(&self.values) {
            let mut rec = vec![id.0.clone()];
            rec.extend(row.iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

pub fn similarity_matrix(model: &ToyModel, opts: SimilarityOpts) -> Result<SimilarityMatrix> {
    let n = model.tasks().len();
    if n == 0 {
        return Err(Error::Precondition(
            "similarity needs at least one learned task".into(),
        ));
    }
    let placed = model.placed_layers();
    let mut values = vec![vec![0.0; n]; n];
    for i in 0..n {
        values[i][i] = 1.0;
        for j in i + 1..n {
            let mut acc = 0.0;
            for &l in placed {
                let br = model.layers()[l].branches();
                acc += similarity_value((br[i].a(), br[i].b()), (br[j].a(), br[j].b()), opts)?;
            }
            let s = acc / placed.len() as f64;
            values[i][j] = s;
            values[j][i] = s;
        }
    }
    Ok(SimilarityMatrix {
        task_ids: model.tasks().iter().map(|t| t.id.clone()).collect(),
        values,
    })
}

/// Mean off-diagonal similarity within and across modalities.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ModalityGap {
    pub same_modality: Option<f64>,
    pub cross_modality: Option<f64>,
}

impl ModalityGap {
    /// `same - cross`, when both are defined.
    pub fn gap(&self) -> Option<f64> {
        Some(self.same_modality? - self.cross_modality?)
    }
}

pub fn modality_gap(model: &ToyModel, sim: &SimilarityMatrix) -> ModalityGap {
    let tasks = model.tasks();
    let (mut same, mut cross) = (Vec::new(), Vec::new());
    for i in 0..tasks.len() {
        for j in i + 1..tasks.len() {
            let v = sim.get(i, j);
            if tasks[i].modality == tasks[j].modality {
                same.push(v);
            } else {
                cross.push(v);
            }
        }
    }
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    ModalityGap {
        same_modality: mean(&same),
        cross_modality: mean(&cross),
    }
}

/// Which loss the gradient-equivalence check differentiates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CeOnly,
    /// Cross-entropy plus weighted CR and orthogonality terms.
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Prop1Report {
    pub layer: usize,
    pub task_id: TaskId,
    pub rank: usize,
    pub loss: LossKind,
    /// `max |dL/dD - dL/dW|`.
    pub max_delta_vs_weight: f64,
    /// `max |dL/dD - G h^T|` with `G` the gradient at the layer's pre-activation.
    pub max_delta_vs_outer: f64,
    /// Max-norm relative error of `dL/dD` against central differences.
    pub fd_relative_error: f64,
    pub tolerance: f64,
    pub fd_tolerance: f64,
    pub passed: bool,
}

/// Checks that the gradient with respect to the open task's dense update at
/// `layer` equals the gradient with respect to the frozen base weight.
///
/// The open task's branch at `layer` is replaced by the dense matrix
/// `D = s * A B` (requires `s = 1`), and three gradients are compared:
/// `dL/dD`, `dL/dW` with `W` made trainable, and central differences of `L`
/// in `D`.
pub fn verify_prop1(
    model: &ToyModel,
    layer: usize,
    loss: LossKind,
    loss_config: &LossConfig,
    x: &Matrix,
    labels: &[usize],
    tolerance: f64,
) -> Result<Prop1Report> {
    let task = model
        .current_task()
        .ok_or_else(|| Error::Precondition("no unfrozen branch to check".into()))?;
    if !model.placed_layers().contains(&layer) {
        return Err(Error::Precondition(format!(
            "layer {layer} carries no branches"
        )));
    }
    let stack = &model.layers()[layer];
    let branch = &stack.branches()[task];
    if branch.is_frozen() {
        return Err(Error::Precondition(format!(
            "layer {layer} has no unfrozen branch"
        )));
    }
    if branch.scale() != 1.0 {
        return Err(Error::Precondition(format!(
            "branch scale must be 1, got {}",
            branch.scale()
        )));
    }
    let d = branch.delta();
    let w = stack.weight().clone();
    let mask = model.mask_for(MaskPolicy::Prefix, task);
    let mut layer_mask = mask.clone();
    layer_mask[task] = 0;
    let partition = partition_for(model, task)?;
    let cfg = match loss {
        LossKind::CeOnly => LossConfig {
            weights: crate::regularizers::LossWeights {
                alpha: 0.0,
                beta: 0.0,
            },
            ..*loss_config
        },
        LossKind::Full => *loss_config,
    };

    // Builds the loss with `D` and `W` on the tape, either one as a parameter.
    let eval = |d: &Matrix,
                d_trainable: bool|
     -> Result<(
        Tape,
        crate::trainer::Objective,
        crate::autodiff::Var,
        crate::autodiff::Var,
    )> {
        let mut tape = Tape::new();
        let mut binding = model.bind(&mut tape);
        let (dv, wv) = if d_trainable {
            (tape.param(d.clone()), tape.constant(w.clone()))
        } else {
            (tape.constant(d.clone()), tape.param(w.clone()))
        };
        let lb = &mut binding.layers[layer];
        lb.weight = wv;
        lb.delta = Some(dv);
        lb.mask = Some(layer_mask.clone());
        let xv = tape.constant(x.clone());
        let obj = objective(
            &mut tape, model, &binding, xv, labels, task, &mask, &partition, &cfg,
        )?;
        let total = if loss == LossKind::CeOnly {
            obj.ce
        } else {
            obj.total
        };
        let obj = crate::trainer::Objective { total, ..obj };
        Ok((tape, obj, dv, wv))
    };

    let (tape, obj, dv, _) = eval(&d, true)?;
    let grads = tape.backward(obj.total)?;
    let g_delta = grads.get(dv);
    let g_pre = grads.get(obj.forward.pre_activations[layer]);
    let h = tape.value(obj.forward.layer_inputs[layer]);
    let outer = g_pre.matmul(&h.transpose())?;

    let (tape_w, obj_w, _, wv) = eval(&d, false)?;
    let g_weight = tape_w.backward(obj_w.total)?.get(wv);

    let mut numeric = Matrix::zeros(d.rows(), d.cols());
    let mut probe = d.clone();
    for k in 0..d.len() {
        let orig = probe.as_slice()[k];
        probe.as_mut_slice()[k] = orig + FD_STEP;
        let (t, o, _, _) = eval(&probe, true)?;
        let plus = t.value(o.total).item();
        probe.as_mut_slice()[k] = orig - FD_STEP;
        let (t, o, _, _) = eval(&probe, true)?;
        let minus = t.value(o.total).item();
        probe.as_mut_slice()[k] = orig;
        numeric.as_mut_slice()[k] = (plus - minus) / (2.0 * FD_STEP);
    }

    let max_delta_vs_weight = g_delta.max_abs_diff(&g_weight)?;
    let max_delta_vs_outer = g_delta.max_abs_diff(&outer)?;
    let fd_relative_error = relative_error(&g_delta, &numeric);
    let passed = max_delta_vs_weight <= tolerance
        && max_delta_vs_outer <= tolerance
        && fd_relative_error < FD_REL_TOL
        && tolerance > 0.0;
    Ok(Prop1Report {
        layer,
        task_id: model.tasks()[task].id.clone(),
        rank: branch.rank(),
        loss,
        max_delta_vs_weight,
        max_delta_vs_outer,
        fd_relative_error,
        tolerance,
        fd_tolerance: FD_REL_TOL,
        passed,
    })
}

/// Writes the last hidden activation of every example of every dataset.
///
/// Columns: `f0..f{d-1},task,modality,split`. Each task is evaluated with the
/// mask `policy` picks for it.
pub fn export_embeddings(
    model: &ToyModel,
    datasets: &[(TaskId, &LabeledDataset)],
    policy: MaskPolicy,
    path: &Path,
) -> Result<usize> {
    let d = model.width();
    let mut w = csv::Writer::from_path(path).map_err(|e| write_err(path, e))?;
    let mut header: Vec<String> = (0..d).map(|i| format!("f{i}")).collect();
    header.extend(["task", "modality", "split"].map(String::from));
    w.write_record(&header)?;
    let mut rows = 0;
    for (id, data) in datasets {
        let task = model.task_index(id)?;
        let modality = &model.tasks()[task].modality;
        let (_, hidden) = model.evaluate(&data.features, task, policy)?;
        let mut split = vec!["train"; data.len()];
        for &i in &data.test {
            split[i] = "test";
        }
        for (col, s) in split.iter().enumerate() {
            let mut rec: Vec<String> = (0..d).map(|i| hidden.get(i, col).to_string()).collect();
            rec.push(id.0.clone());
            rec.push(modality.0.clone());
            rec.push((*s).to_string());
            w.write_record(&rec)?;
            rows += 1;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(rows)
}

/// Writes `sum_i m_i * s_i * A_i B_i` of every layer under its stored mask,
/// one row per entry: `layer,row,col,value`.
pub fn export_delta(model: &ToyModel, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| write_err(path, e))?;
    w.write_record(["layer", "row", "col", "value"])?;
    for (l, stack) in model.layers().iter().enumerate() {
        let delta = stack.merged_delta();
        for i in 0..delta.rows() {
            for j in 0..delta.cols() {
                w.write_record([
                    l.to_string(),
                    i.to_string(),
                    j.to_string(),
                    delta.get(i, j).to_string(),
                ])?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Dataset(format!("{}: {other:?}", path.display())),
    }
}
