//! Multi-branch LoRA over a frozen linear layer.
//!
//! A [`BranchStack`] holds the frozen base weight `W` and bias of one linear
//! layer together with one low-rank branch per learned task. Its output is
//!
//! ```text
//! e = W h + bias + sum_i m_i * scale_i * A_i (B_i h)
//! ```
//!
//! where `m` is a binary mask over branches.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::regularizers::BranchVars;
use crate::rng::SplitMix64;

/// Standard deviation of the normal initialization of `B`.
pub const B_INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TaskId(pub String);

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModalityId(pub String);

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Display for ModalityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for TaskId {
    fn from(s: &str) -> Self {
        TaskId(s.to_string())
    }
}

impl From<&str> for ModalityId {
    fn from(s: &str) -> Self {
        ModalityId(s.to_string())
    }
}

/// One task's low-rank pair: `delta = scale * A B`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraBranch {
    pub(crate) a: Matrix,
    pub(crate) b: Matrix,
    pub(crate) task: TaskId,
    pub(crate) modality: ModalityId,
    pub(crate) frozen: bool,
    pub(crate) scale: f64,
}

impl LoraBranch {
    pub fn new(
        a: Matrix,
        b: Matrix,
        task: TaskId,
        modality: ModalityId,
        scale: f64,
    ) -> Result<Self> {
        if a.cols() != b.rows() {
            return Err(Error::shape("lora_branch", a.shape(), b.shape()));
        }
        if a.cols() == 0 {
            return Err(Error::ZeroRank);
        }
        Ok(Self {
            a,
            b,
            task,
            modality,
            frozen: false,
            scale,
        })
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    pub fn task(&self) -> &TaskId {
        &self.task
    }

    pub fn modality(&self) -> &ModalityId {
        &self.modality
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// `scale * A B` as a dense matrix.
    pub fn delta(&self) -> Matrix {
        self.a
            .matmul(&self.b)
            .expect("branch factors are compatible")
            .scale(self.scale)
    }

    pub fn parameter_count(&self) -> usize {
        self.a.len() + self.b.len()
    }

    pub fn content_hash(&self) -> String {
        format!("{}{}", self.a.content_hash(), self.b.content_hash())
    }

    /// Puts both factors on the tape; frozen branches become constants.
    pub fn bind(&self, tape: &mut Tape) -> BranchVars {
        if self.frozen {
            BranchVars {
                a: tape.constant(self.a.clone()),
                b: tape.constant(self.b.clone()),
            }
        } else {
            BranchVars {
                a: tape.param(self.a.clone()),
                b: tape.param(self.b.clone()),
            }
        }
    }
}

/// Tape handles for one [`BranchStack`].
#[derive(Clone, Debug)]
pub struct LayerBinding {
    pub weight: Var,
    pub bias: Var,
    /// Optional dense matrix added to `W`; used by the gradient-equivalence checker.
    pub delta: Option<Var>,
    /// Replaces the model-wide mask at this layer when set.
    pub mask: Option<Vec<u8>>,
    pub branches: Vec<BranchVars>,
}

/// Frozen base layer plus its ordered task branches and mask.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchStack {
    weight: Matrix,
    bias: Matrix,
    branches: Vec<LoraBranch>,
    mask: Vec<u8>,
}

impl BranchStack {
    pub fn new(weight: Matrix, bias: Matrix) -> Result<Self> {
        if bias.shape() != (weight.rows(), 1) {
            return Err(Error::shape(
                "branch_stack bias",
                weight.shape(),
                bias.shape(),
            ));
        }
        Ok(Self {
            weight,
            bias,
            branches: Vec::new(),
            mask: Vec::new(),
        })
    }

    /// Rebuilds a stack from stored parts, e.g. when loading a checkpoint.
    pub fn from_parts(
        weight: Matrix,
        bias: Matrix,
        branches: Vec<LoraBranch>,
        mask: Vec<u8>,
    ) -> Result<Self> {
        let mut stack = Self::new(weight, bias)?;
        for br in &branches {
            stack.check_branch_shape(br.a.shape(), br.b.shape())?;
        }
        stack.branches = branches;
        stack.set_mask(&mask)?;
        Ok(stack)
    }

    fn check_branch_shape(&self, a: (usize, usize), b: (usize, usize)) -> Result<()> {
        if a.0 != self.weight.rows() || b.1 != self.weight.cols() || a.1 != b.0 {
            return Err(Error::shape("branch vs base weight", a, b));
        }
        Ok(())
    }

    pub fn weight(&self) -> &Matrix {
        &self.weight
    }

    pub fn bias(&self) -> &Matrix {
        &self.bias
    }

    pub fn branches(&self) -> &[LoraBranch] {
        &self.branches
    }

    pub(crate) fn branches_mut(&mut self) -> &mut [LoraBranch] {
        &mut self.branches
    }

    pub fn mask(&self) -> &[u8] {
        &self.mask
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn branch_index(&self, task: &TaskId) -> Result<usize> {
        self.branches
            .iter()
            .position(|b| &b.task == task)
            .ok_or_else(|| Error::UnknownTask(task.0.clone()))
    }

    /// Appends a fresh branch with `A = 0` and `B ~ N(0, 0.02^2)`, mask entry 1.
    pub fn expand_branch(
        &mut self,
        task: TaskId,
        modality: ModalityId,
        rank: usize,
        scale: f64,
        seed: u64,
    ) -> Result<usize> {
        let (d_out, d_in) = self.weight.shape();
        if rank == 0 {
            return Err(Error::ZeroRank);
        }
        if rank > d_out.min(d_in) {
            return Err(Error::RankTooLarge {
                rank,
                rows: d_out,
                cols: d_in,
            });
        }
        if self.branches.iter().any(|b| b.task == task) {
            return Err(Error::DuplicateTask(task.0));
        }
        let mut rng = SplitMix64::new(seed);
        let a = Matrix::zeros(d_out, rank);
        let b = Matrix::from_fn(rank, d_in, |_, _| B_INIT_STD * rng.normal());
        self.branches
            .push(LoraBranch::new(a, b, task, modality, scale)?);
        self.mask.push(1);
        Ok(self.branches.len() - 1)
    }

    /// Marks the branch of `task` frozen. Idempotent.
    pub fn freeze_branch(&mut self, task: &TaskId) -> Result<()> {
        let idx = self.branch_index(task)?;
        self.branches[idx].frozen = true;
        Ok(())
    }

    pub fn set_mask(&mut self, mask: &[u8]) -> Result<()> {
        validate_mask(mask, self.branches.len())?;
        self.mask = mask.to_vec();
        Ok(())
    }

    /// `sum_i m_i * scale_i * A_i B_i`, off the tape.
    pub fn merged_delta(&self) -> Matrix {
        let mut acc = Matrix::zeros(self.weight.rows(), self.weight.cols());
        for (br, &m) in self.branches.iter().zip(&self.mask) {
            if m == 1 {
                acc.add_assign(&br.delta())
                    .expect("branch shape matches base");
            }
        }
        acc
    }

    pub fn trainable_parameter_count(&self) -> usize {
        self.branches
            .iter()
            .filter(|b| !b.frozen)
            .map(LoraBranch::parameter_count)
            .sum()
    }

    /// Base weight and bias become constants; branches follow their frozen flag.
    pub fn bind(&self, tape: &mut Tape) -> LayerBinding {
        LayerBinding {
            weight: tape.constant(self.weight.clone()),
            bias: tape.constant(self.bias.clone()),
            delta: None,
            mask: None,
            branches: self.branches.iter().map(|b| b.bind(tape)).collect(),
        }
    }

    /// Masked forward using the stored mask.
    pub fn forward_masked(&self, tape: &mut Tape, binding: &LayerBinding, h: Var) -> Result<Var> {
        self.forward_with_mask(tape, binding, h, &self.mask)
    }

    /// Masked forward with an explicit mask. Masked-out branches are skipped,
    /// so the result does not depend on branches beyond the active set.
    pub fn forward_with_mask(
        &self,
        tape: &mut Tape,
        binding: &LayerBinding,
        h: Var,
        mask: &[u8],
    ) -> Result<Var> {
        validate_mask(mask, self.branches.len())?;
        if tape.shape(h).0 != self.in_dim() {
            return Err(Error::shape(
                "forward_masked",
                self.weight.shape(),
                tape.shape(h),
            ));
        }
        let mut acc = tape.matmul(binding.weight, h)?;
        if let Some(delta) = binding.delta {
            let dh = tape.matmul(delta, h)?;
            acc = tape.add(acc, dh)?;
        }
        for ((br, vars), &m) in self.branches.iter().zip(&binding.branches).zip(mask) {
            if m == 0 {
                continue;
            }
            let bh = tape.matmul(vars.b, h)?;
            let abh = tape.matmul(vars.a, bh)?;
            let scaled = tape.scale(abh, br.scale);
            acc = tape.add(acc, scaled)?;
        }
        tape.add_column(acc, binding.bias)
    }
}

pub(crate) fn validate_mask(mask: &[u8], branches: usize) -> Result<()> {
    if mask.len() != branches {
        return Err(Error::MaskLength {
            expected: branches,
            got: mask.len(),
        });
    }
    if let Some((index, &value)) = mask.iter().enumerate().find(|(_, &v)| v > 1) {
        return Err(Error::NonBinaryMask { index, value });
    }
    Ok(())
}
