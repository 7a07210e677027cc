//! Loss terms over LoRA parameters.
//!
//! * similarity `sim(p, q) = exp(-dis(p, q))`, with `dis` a Manhattan
//!   distance over the `A` and `B` factors;
//! * converge loss `sum (1 - sim)` over same-modality branches;
//! * diverge loss `sum sim` over different-modality branches;
//! * CR loss, converge plus diverge, reduced over adapted layers;
//! * orthogonality loss `||A^T A - I||_F^2 + ||B B^T - I||_F^2`;
//! * total loss `ce + alpha * cr + beta * ortho`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::lora::{ModalityId, TaskId};
use crate::matrix::Matrix;
use crate::model::{ModelBinding, ToyModel};

/// Tape handles of one branch's factors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BranchVars {
    pub a: Var,
    pub b: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityOpts {
    /// When true `dis` is the mean of the per-factor mean absolute
    /// differences; when false it is the raw Manhattan distance over the
    /// concatenated `[A, B]` entries.
    pub normalize: bool,
}

impl Default for SimilarityOpts {
    fn default() -> Self {
        Self { normalize: true }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CrReduce {
    #[default]
    Sum,
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 0.01,
        }
    }
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        let w = Self { alpha, beta };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "loss weight {name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Everything the total loss needs besides the tape.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub similarity: SimilarityOpts,
    pub reduce: CrReduce,
}

/// Split of the learned tasks by modality relative to the current task.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityPartition {
    current: TaskId,
    same: Vec<TaskId>,
    different: Vec<TaskId>,
}

impl ModalityPartition {
    pub fn new(current: TaskId, same: Vec<TaskId>, different: Vec<TaskId>) -> Result<Self> {
        if same.contains(&current) || different.contains(&current) {
            return Err(Error::Partition(format!(
                "current task `{current}` appears among learned tasks"
            )));
        }
        if let Some(t) = same.iter().find(|t| different.contains(t)) {
            return Err(Error::Partition(format!(
                "task `{t}` is in both the same- and different-modality sets"
            )));
        }
        Ok(Self {
            current,
            same,
            different,
        })
    }

    /// Partitions `learned` (in learning order) by comparing modalities with `modality`.
    pub fn from_learned(
        current: TaskId,
        modality: &ModalityId,
        learned: &[(TaskId, ModalityId)],
    ) -> Result<Self> {
        let (same, different): (Vec<_>, Vec<_>) = learned.iter().partition(|(_, m)| m == modality);
        Self::new(
            current,
            same.into_iter().map(|(t, _)| t.clone()).collect(),
            different.into_iter().map(|(t, _)| t.clone()).collect(),
        )
    }

    pub fn current(&self) -> &TaskId {
        &self.current
    }

    pub fn same(&self) -> &[TaskId] {
        &self.same
    }

    pub fn different(&self) -> &[TaskId] {
        &self.different
    }

    pub fn learned_len(&self) -> usize {
        self.same.len() + self.different.len()
    }
}

/// `dis(p, q)`; shape mismatch surfaces when ranks differ.
pub fn branch_distance(
    tape: &mut Tape,
    p: BranchVars,
    q: BranchVars,
    opts: SimilarityOpts,
) -> Result<Var> {
    let da = tape.mean_abs_diff(p.a, q.a)?;
    let db = tape.mean_abs_diff(p.b, q.b)?;
    if opts.normalize {
        let s = tape.add(da, db)?;
        Ok(tape.scale(s, 0.5))
    } else {
        let na = tape.value(p.a).len() as f64;
        let nb = tape.value(p.b).len() as f64;
        let sa = tape.scale(da, na);
        let sb = tape.scale(db, nb);
        tape.add(sa, sb)
    }
}

pub fn branch_similarity(
    tape: &mut Tape,
    p: BranchVars,
    q: BranchVars,
    opts: SimilarityOpts,
) -> Result<Var> {
    let dis = branch_distance(tape, p, q, opts)?;
    Ok(tape.exp_neg(dis))
}

pub fn converge_loss(
    tape: &mut Tape,
    current: BranchVars,
    same: &[BranchVars],
    opts: SimilarityOpts,
) -> Result<Var> {
    let mut acc = tape.scalar(0.0);
    for &other in same {
        let sim = branch_similarity(tape, other, current, opts)?;
        let one = tape.scalar(1.0);
        let term = tape.sub(one, sim)?;
        acc = tape.add(acc, term)?;
    }
    Ok(acc)
}

pub fn diverge_loss(
    tape: &mut Tape,
    current: BranchVars,
    different: &[BranchVars],
    opts: SimilarityOpts,
) -> Result<Var> {
    let mut acc = tape.scalar(0.0);
    for &other in different {
        let sim = branch_similarity(tape, other, current, opts)?;
        acc = tape.add(acc, sim)?;
    }
    Ok(acc)
}

/// Branch handles of one adapted layer, grouped for the CR loss.
#[derive(Clone, Debug)]
pub struct LayerBranches {
    pub current: BranchVars,
    pub same: Vec<BranchVars>,
    pub different: Vec<BranchVars>,
}

/// CR loss from pre-grouped layers: per-layer `converge + diverge`, then sum or mean.
pub fn cr_loss_layers(
    tape: &mut Tape,
    layers: &[LayerBranches],
    opts: SimilarityOpts,
    reduce: CrReduce,
) -> Result<Var> {
    let mut acc = tape.scalar(0.0);
    for layer in layers {
        let c = converge_loss(tape, layer.current, &layer.same, opts)?;
        let d = diverge_loss(tape, layer.current, &layer.different, opts)?;
        let both = tape.add(c, d)?;
        acc = tape.add(acc, both)?;
    }
    match reduce {
        CrReduce::Mean if !layers.is_empty() => Ok(tape.scale(acc, 1.0 / layers.len() as f64)),
        _ => Ok(acc),
    }
}

/// Groups a bound model's branches by `partition`, one entry per adapted layer.
pub fn group_layers(
    model: &ToyModel,
    binding: &ModelBinding,
    partition: &ModalityPartition,
) -> Result<Vec<LayerBranches>> {
    let current_idx = model.task_index(partition.current())?;
    let mut learned: Vec<&TaskId> = model
        .tasks()
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != current_idx)
        .map(|(_, t)| &t.id)
        .collect();
    let mut claimed: Vec<&TaskId> = partition
        .same()
        .iter()
        .chain(partition.different())
        .collect();
    learned.sort();
    claimed.sort();
    if learned != claimed {
        return Err(Error::Partition(format!(
            "partition covers {claimed:?} but the model has learned {learned:?}"
        )));
    }
    let lookup = |layer: usize, ids: &[TaskId]| -> Result<Vec<BranchVars>> {
        ids.iter()
            .map(|t| Ok(binding.layers[layer].branches[model.task_index(t)?]))
            .collect()
    };
    model
        .placed_layers()
        .iter()
        .map(|&l| {
            Ok(LayerBranches {
                current: binding.layers[l].branches[current_idx],
                same: lookup(l, partition.same())?,
                different: lookup(l, partition.different())?,
            })
        })
        .collect()
}

/// CR loss of the partition's current task, over every adapted layer of `model`.
pub fn cr_loss(
    tape: &mut Tape,
    model: &ToyModel,
    binding: &ModelBinding,
    partition: &ModalityPartition,
    opts: SimilarityOpts,
    reduce: CrReduce,
) -> Result<Var> {
    let layers = group_layers(model, binding, partition)?;
    cr_loss_layers(tape, &layers, opts, reduce)
}

/// `||A^T A - I_r||_F^2 + ||B B^T - I_r||_F^2`.
pub fn ortho_loss(tape: &mut Tape, branch: BranchVars) -> Result<Var> {
    let rank = tape.shape(branch.a).1;
    let eye = tape.constant(Matrix::identity(rank));
    let at = tape.transpose(branch.a);
    let ata = tape.matmul(at, branch.a)?;
    let ra = tape.sub(ata, eye)?;
    let fa = tape.frobenius_sq(ra);
    let bt = tape.transpose(branch.b);
    let bbt = tape.matmul(branch.b, bt)?;
    let rb = tape.sub(bbt, eye)?;
    let fb = tape.frobenius_sq(rb);
    tape.add(fa, fb)
}

/// Plain-value orthogonality residual of a branch, for reporting.
pub fn ortho_value(a: &Matrix, b: &Matrix) -> f64 {
    let mut tape = Tape::new();
    let vars = BranchVars {
        a: tape.constant(a.clone()),
        b: tape.constant(b.clone()),
    };
    let v = ortho_loss(&mut tape, vars).expect("factor shapes are consistent");
    tape.value(v).item()
}

/// Plain-value similarity of two branches' factors.
pub fn similarity_value(
    p: (&Matrix, &Matrix),
    q: (&Matrix, &Matrix),
    opts: SimilarityOpts,
) -> Result<f64> {
    let mut tape = Tape::new();
    let pv = BranchVars {
        a: tape.constant(p.0.clone()),
        b: tape.constant(p.1.clone()),
    };
    let qv = BranchVars {
        a: tape.constant(q.0.clone()),
        b: tape.constant(q.1.clone()),
    };
    let s = branch_similarity(&mut tape, pv, qv, opts)?;
    Ok(tape.value(s).item())
}

/// `ce + alpha * cr + beta * ortho`.
pub fn total_loss(
    tape: &mut Tape,
    ce: Var,
    cr: Var,
    ortho: Var,
    weights: LossWeights,
) -> Result<Var> {
    let wcr = tape.scale(cr, weights.alpha);
    let wo = tape.scale(ortho, weights.beta);
    let t = tape.add(ce, wcr)?;
    tape.add(t, wo)
}
