//! Sequential training over a task sequence: expand, train, freeze, snapshot.

use std::collections::HashSet;
use std::path::Path;

use serde::Serialize;

use crate::autodiff::{Tape, Var};
use crate::checkpoint::save_checkpoint;
use crate::error::{Error, Result};
use crate::lora::{ModalityId, TaskId};
use crate::matrix::Matrix;
use crate::metrics::{
    self, ModalityGap, SimilarityMatrix, StabilityReport, StabilitySnapshot, TaskMetrics,
};
use crate::model::{ForwardOutput, MaskPolicy, ModelBinding, ModelConfig, ToyModel};
use crate::optim::{lr_at, optimizer_step, AdamWConfig, OptimizerState};
use crate::regularizers::{
    cr_loss, ortho_loss, ortho_value, total_loss, LossConfig, ModalityPartition,
};
use crate::rng::{derive_seed, SplitMix64};
use crate::taskgen::{DatasetRef, LabeledDataset, SynthParams};

pub const DEFAULT_LR: f64 = 1e-2;
pub const DEFAULT_WARMUP_RATIO: f64 = 0.03;
pub const DEFAULT_RANK: usize = 4;
pub const DEFAULT_STEPS: usize = 300;
pub const DEFAULT_BATCH: usize = 32;

// Stream tags for seeds derived from the run seed.
const MODEL_STREAM: u64 = 0x6d6f64656c;
const TASK_STREAM: u64 = 0x7461736b;
const BATCH_STREAM: u64 = 0x6261746368;
const SPLIT_STREAM: u64 = 0x73706c6974;

/// One task of a sequence.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TaskSpec {
    pub id: TaskId,
    pub modality: ModalityId,
    pub data: DatasetRef,
    pub classes: usize,
    pub steps: usize,
    pub batch: usize,
}

impl TaskSpec {
    pub fn synthetic(id: &str, modality: &str, modality_seed: u64, task_seed: u64) -> Self {
        Self {
            id: id.into(),
            modality: modality.into(),
            data: DatasetRef::Synthetic {
                modality_seed,
                task_seed,
                classes: crate::taskgen::DEFAULT_CLASSES,
            },
            classes: crate::taskgen::DEFAULT_CLASSES,
            steps: DEFAULT_STEPS,
            batch: DEFAULT_BATCH,
        }
    }
}

/// The interleaved two-modality sequence `A1, B1, A2, B2`.
pub fn default_sequence() -> Vec<TaskSpec> {
    vec![
        TaskSpec::synthetic("A1", "A", 101, 1),
        TaskSpec::synthetic("B1", "B", 202, 1),
        TaskSpec::synthetic("A2", "A", 101, 2),
        TaskSpec::synthetic("B2", "B", 202, 2),
    ]
}

pub fn validate_sequence(tasks: &[TaskSpec]) -> Result<()> {
    let mut seen = HashSet::new();
    for t in tasks {
        if !seen.insert(&t.id) {
            return Err(Error::DuplicateTask(t.id.0.clone()));
        }
        if t.classes < 2 {
            return Err(Error::Config(format!(
                "task `{}` needs at least 2 classes, got {}",
                t.id, t.classes
            )));
        }
        if t.steps == 0 || t.batch == 0 {
            return Err(Error::Config(format!(
                "task `{}` needs positive steps and batch size",
                t.id
            )));
        }
    }
    Ok(())
}

/// Hyperparameters of a run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub rank: usize,
    pub lora_alpha: f64,
    pub loss: LossConfig,
    pub lr: f64,
    pub warmup_ratio: f64,
    pub adamw: AdamWConfig,
    pub mask_policy: MaskPolicy,
    pub seed: u64,
    pub determinism: bool,
    pub synth: SynthParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            rank: DEFAULT_RANK,
            lora_alpha: DEFAULT_RANK as f64,
            loss: LossConfig::default(),
            lr: DEFAULT_LR,
            warmup_ratio: DEFAULT_WARMUP_RATIO,
            adamw: AdamWConfig::default(),
            mask_policy: MaskPolicy::Prefix,
            seed: 0,
            determinism: true,
            synth: SynthParams::default(),
        }
    }
}

impl RunConfig {
    /// `lora_alpha / rank`.
    pub fn scale(&self) -> f64 {
        self.lora_alpha / self.rank as f64
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.rank == 0 {
            return bad("rank must be at least 1".into());
        }
        if self.rank > self.model.width {
            return bad(format!(
                "rank {} exceeds layer width {}",
                self.rank, self.model.width
            ));
        }
        if !(self.lora_alpha > 0.0 && self.lora_alpha.is_finite()) {
            return bad(format!(
                "lora alpha must be positive, got {}",
                self.lora_alpha
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(0.0..=0.5).contains(&self.warmup_ratio) {
            return bad(format!(
                "warmup ratio must be in [0, 0.5], got {}",
                self.warmup_ratio
            ));
        }
        let (b1, b2) = self.adamw.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return bad(format!(
                "optimizer betas must be in [0, 1), got ({b1}, {b2})"
            ));
        }
        if self.adamw.epsilon.is_nan() || self.adamw.epsilon <= 0.0 {
            return bad(format!(
                "optimizer epsilon must be positive, got {}",
                self.adamw.epsilon
            ));
        }
        if self.adamw.weight_decay != 0.0 {
            return bad("weight decay is fixed at 0".into());
        }
        if self.synth.per_class == 0 {
            return bad("n_per_class must be at least 1".into());
        }
        self.loss.weights.validate()?;
        self.model
            .placement
            .resolve_default(self.model.layers)
            .indices(self.model.layers)?;
        Ok(())
    }

    pub fn build_model(&self) -> Result<ToyModel> {
        ToyModel::new(self.model.clone(), derive_seed(self.seed, MODEL_STREAM))
    }

    /// Split seed used when a CSV dataset is assigned its train/test split.
    pub fn split_seed(&self, position: usize) -> u64 {
        derive_seed(derive_seed(self.seed, SPLIT_STREAM), position as u64)
    }

    pub fn resolve(&self, spec: &TaskSpec, position: usize) -> Result<LabeledDataset> {
        spec.data.resolve(
            self.model.width,
            spec.classes,
            self.synth,
            self.split_seed(position),
        )
    }
}

/// Tape handles of every loss component for one forward.
#[derive(Clone, Debug)]
pub struct Objective {
    pub forward: ForwardOutput,
    pub ce: Var,
    pub cr: Var,
    pub ortho: Var,
    pub total: Var,
}

/// Partition of the tasks learned before `task` by modality.
pub fn partition_for(model: &ToyModel, task: usize) -> Result<ModalityPartition> {
    let tasks = model.tasks();
    let learned: Vec<(TaskId, ModalityId)> = tasks
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != task)
        .map(|(_, t)| (t.id.clone(), t.modality.clone()))
        .collect();
    ModalityPartition::from_learned(tasks[task].id.clone(), &tasks[task].modality, &learned)
}

/// `ce + alpha * cr + beta * ortho` for `task`, with ortho summed over its
/// branches on the placed layers.
#[allow(clippy::too_many_arguments)]
pub fn objective(
    tape: &mut Tape,
    model: &ToyModel,
    binding: &ModelBinding,
    x: Var,
    labels: &[usize],
    task: usize,
    mask: &[u8],
    partition: &ModalityPartition,
    loss: &LossConfig,
) -> Result<Objective> {
    let forward = model.forward(tape, binding, x, task, mask)?;
    let ce = tape.softmax_cross_entropy(forward.logits, labels)?;
    let cr = cr_loss(
        tape,
        model,
        binding,
        partition,
        loss.similarity,
        loss.reduce,
    )?;
    let mut ortho = tape.scalar(0.0);
    for &l in model.placed_layers() {
        let o = ortho_loss(tape, binding.layers[l].branches[task])?;
        ortho = tape.add(ortho, o)?;
    }
    let total = total_loss(tape, ce, cr, ortho, loss.weights)?;
    Ok(Objective {
        forward,
        ce,
        cr,
        ortho,
        total,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TraceRow {
    pub step: usize,
    pub ce: f64,
    pub cr: f64,
    pub ortho: f64,
    pub total: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TaskReport {
    pub task_id: TaskId,
    pub modality_id: ModalityId,
    pub position: usize,
    pub steps: usize,
    pub batch: usize,
    pub trainable_parameters: usize,
    pub final_train_loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    /// Orthogonality residual of the task's branches, summed over placed layers.
    pub final_ortho: f64,
    pub trace: Vec<TraceRow>,
}

/// Fraction of rows whose argmax matches the label. Ties go to the lower class.
pub fn accuracy(logits: &Matrix, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| {
            let row = logits.row(i);
            let mut best = 0;
            for (j, &z) in row.iter().enumerate() {
                if z > row[best] {
                    best = j;
                }
            }
            best == y
        })
        .count();
    hits as f64 / labels.len() as f64
}

/// Trains the open task of `model` for `spec.steps` AdamW steps.
///
/// Only the task's branches and head are updated. On a non-finite loss a
/// diagnostic checkpoint is written under `diagnostics` (when given) and the
/// run aborts.
pub fn train_task(
    model: &mut ToyModel,
    spec: &TaskSpec,
    data: &LabeledDataset,
    partition: &ModalityPartition,
    config: &RunConfig,
    position: usize,
    diagnostics: Option<&Path>,
) -> Result<TaskReport> {
    let task = model.task_index(&spec.id)?;
    if model.current_task() != Some(task) {
        return Err(Error::Precondition(format!(
            "task `{}` is not open for training",
            spec.id
        )));
    }
    for &l in model.placed_layers() {
        let open: Vec<usize> = model.layers()[l]
            .branches()
            .iter()
            .enumerate()
            .filter(|(_, b)| !b.is_frozen())
            .map(|(k, _)| k)
            .collect();
        if open != [task] {
            return Err(Error::Precondition(format!(
                "layer {l} must hold exactly one unfrozen branch, for task `{}`",
                spec.id
            )));
        }
    }
    let (x_train, y_train) = data.train_split();
    let n_train = y_train.len();
    if n_train == 0 {
        return Err(Error::Dataset(format!(
            "task `{}` has an empty train split",
            spec.id
        )));
    }
    let batch = spec.batch.min(n_train);
    let mask = model.mask_for(MaskPolicy::Prefix, task);
    let mut rng = SplitMix64::new(derive_seed(
        derive_seed(config.seed, BATCH_STREAM),
        position as u64,
    ));
    let mut order: Vec<usize> = (0..n_train).collect();
    let mut cursor = n_train;
    let mut state = OptimizerState::new();
    let mut trace = Vec::with_capacity(spec.steps);

    for step in 0..spec.steps {
        let mut idx = Vec::with_capacity(batch);
        while idx.len() < batch {
            if cursor == n_train {
                rng.shuffle(&mut order);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let xb = x_train.select_columns(&idx);
        let yb: Vec<usize> = idx.iter().map(|&i| y_train[i]).collect();

        let mut tape = Tape::new();
        let binding = model.bind(&mut tape);
        let xv = tape.constant(xb);
        let obj = objective(
            &mut tape,
            model,
            &binding,
            xv,
            &yb,
            task,
            &mask,
            partition,
            &config.loss,
        )?;
        let total = tape.value(obj.total).item();
        if !total.is_finite() {
            if let Some(dir) = diagnostics {
                let path = dir.join(format!("diagnostic_task_{position}_step_{step}"));
                save_checkpoint(&path, model, Some(&state), &[])?;
            }
            return Err(Error::NonFiniteLoss {
                task: spec.id.0.clone(),
                step,
            });
        }
        let lr = lr_at(step, spec.steps, config.lr, config.warmup_ratio);
        trace.push(TraceRow {
            step,
            ce: tape.value(obj.ce).item(),
            cr: tape.value(obj.cr).item(),
            ortho: tape.value(obj.ortho).item(),
            total,
            lr,
        });
        let grads = tape.backward(obj.total)?;
        let pairs: Vec<_> = model
            .trainable(&binding)
            .into_iter()
            .map(|(id, v)| (id, grads.get(v)))
            .collect();
        optimizer_step(model, &pairs, &mut state, lr, &config.adamw)?;
    }

    let mut tape = Tape::new();
    let binding = model.bind(&mut tape);
    let xv = tape.constant(x_train);
    let obj = objective(
        &mut tape,
        model,
        &binding,
        xv,
        &y_train,
        task,
        &mask,
        partition,
        &config.loss,
    )?;
    let train_accuracy = accuracy(tape.value(obj.forward.logits), &y_train);
    let (x_test, y_test) = data.test_split();
    let test_logits = model.logits(&x_test, task, config.mask_policy)?;
    let final_ortho = model
        .placed_layers()
        .iter()
        .map(|&l| {
            let br = &model.layers()[l].branches()[task];
            ortho_value(br.a(), br.b())
        })
        .sum();
    Ok(TaskReport {
        task_id: spec.id.clone(),
        modality_id: spec.modality.clone(),
        position,
        steps: spec.steps,
        batch,
        trainable_parameters: model.trainable_parameter_count(),
        final_train_loss: tape.value(obj.total).item(),
        train_accuracy,
        test_accuracy: accuracy(&test_logits, &y_test),
        final_ortho,
        trace,
    })
}

/// Machine-readable summary of one run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunReport {
    pub config: RunConfig,
    pub sequence: Vec<TaskSpec>,
    /// Tasks already present in the model when the run started.
    pub resumed: Vec<TaskId>,
    pub tasks: Vec<TaskReport>,
    pub metrics: Vec<TaskMetrics>,
    pub stability: StabilityReport,
    pub similarity: SimilarityMatrix,
    pub modality_gap: ModalityGap,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub report: RunReport,
    pub snapshots: Vec<StabilitySnapshot>,
}

/// Runs every task of `tasks` not yet learned by `model`, in order.
///
/// `snapshots` carries the stability snapshots of tasks learned before this
/// call (empty for a fresh model). When `checkpoints` is set, the model is
/// saved to `checkpoints/task_<k>` after task `k`.
pub fn run_sequence(
    model: &mut ToyModel,
    tasks: &[TaskSpec],
    config: &RunConfig,
    mut snapshots: Vec<StabilitySnapshot>,
    checkpoints: Option<&Path>,
) -> Result<RunOutcome> {
    config.validate()?;
    validate_sequence(tasks)?;
    if let Some(open) = model.current_task() {
        return Err(Error::Precondition(format!(
            "task `{}` was left unfinished",
            model.tasks()[open].id
        )));
    }
    let learned = model.tasks().len();
    if learned > tasks.len() {
        return Err(Error::Config(format!(
            "model has learned {learned} tasks but the sequence has only {}",
            tasks.len()
        )));
    }
    for (entry, spec) in model.tasks().iter().zip(tasks) {
        if entry.id != spec.id || entry.modality != spec.modality {
            return Err(Error::Config(format!(
                "model task `{}` ({}) does not match sequence task `{}` ({})",
                entry.id, entry.modality, spec.id, spec.modality
            )));
        }
    }
    let datasets: Vec<LabeledDataset> = tasks
        .iter()
        .enumerate()
        .map(|(k, spec)| config.resolve(spec, k))
        .collect::<Result<_>>()?;

    let mut reports = Vec::new();
    for (k, spec) in tasks.iter().enumerate().skip(learned) {
        let task = model.begin_task(
            spec.id.clone(),
            spec.modality.clone(),
            spec.classes,
            Some(spec.data.to_string()),
            config.rank,
            config.scale(),
            derive_seed(config.seed, TASK_STREAM),
        )?;
        let partition = partition_for(model, task)?;
        let report = train_task(
            model,
            spec,
            &datasets[k],
            &partition,
            config,
            k,
            checkpoints,
        )?;
        model.finish_task(&spec.id)?;
        let (x_test, _) = datasets[k].test_split();
        snapshots.push(StabilitySnapshot::capture(
            model,
            task,
            x_test,
            config.mask_policy,
            k,
        )?);
        if let Some(dir) = checkpoints {
            save_checkpoint(&dir.join(format!("task_{k}")), model, None, &snapshots)?;
        }
        reports.push(report);
    }

    let pairs: Vec<(TaskId, &LabeledDataset)> =
        tasks.iter().map(|t| t.id.clone()).zip(&datasets).collect();
    let metrics = metrics::accuracy_and_forgetting(
        model,
        &pairs,
        &snapshots,
        config.mask_policy,
        !config.determinism,
    )?;
    let stability = metrics::stability_replay(model, &snapshots, config.mask_policy)?;
    let similarity = metrics::similarity_matrix(model, config.loss.similarity)?;
    let modality_gap = metrics::modality_gap(model, &similarity);
    Ok(RunOutcome {
        report: RunReport {
            config: config.clone(),
            sequence: tasks.to_vec(),
            resumed: tasks[..learned].iter().map(|t| t.id.clone()).collect(),
            tasks: reports,
            metrics,
            stability,
            similarity,
            modality_gap,
        },
        snapshots,
    })
}

/// Builds a fresh model from `config` and runs the whole sequence.
pub fn run_fresh(
    tasks: &[TaskSpec],
    config: &RunConfig,
    checkpoints: Option<&Path>,
) -> Result<(ToyModel, RunOutcome)> {
    config.validate()?;
    let mut model = config.build_model()?;
    let outcome = run_sequence(&mut model, tasks, config, Vec::new(), checkpoints)?;
    Ok((model, outcome))
}

/// Writes the per-step traces as CSV with columns `step,ce,cr,ortho,total,lr`.
/// Steps are numbered across the whole run, in task order.
pub fn write_trace_csv(path: &Path, reports: &[TaskReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    w.write_record(["step", "ce", "cr", "ortho", "total", "lr"])?;
    let mut global = 0usize;
    for r in reports {
        for row in &r.trace {
            w.write_record([
                global.to_string(),
                row.ce.to_string(),
                row.cr.to_string(),
                row.ortho.to_string(),
                row.total.to_string(),
                row.lr.to_string(),
            ])?;
            global += 1;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Dataset(format!("{}: {other:?}", path.display())),
    }
}
