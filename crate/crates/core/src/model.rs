//! Toy L-layer network with LoRA branch stacks and per-task heads.
//!
//! Inputs are `d x N` matrices (one example per column). Each hidden layer is
//! a [`BranchStack`] followed by ReLU; the task head maps the last hidden
//! activation to `N x C` logits.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::lora::{BranchStack, LayerBinding, ModalityId, TaskId};
use crate::matrix::Matrix;
use crate::rng::{derive_seed, SplitMix64};

/// Which hidden layers carry LoRA branches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Placement {
    All,
    /// The first `k` layers.
    Shallow(usize),
    /// The last `k` layers.
    Deep(usize),
}

impl Placement {
    /// Default `k` for the shallow/deep presets: a quarter of the layers, rounded up.
    pub fn default_k(layers: usize) -> usize {
        layers.div_ceil(4)
    }

    pub fn indices(&self, layers: usize) -> Result<Vec<usize>> {
        let check = |k: usize| {
            if k == 0 || k > layers {
                Err(Error::Config(format!(
                    "placement needs 1 <= k <= {layers}, got {k}"
                )))
            } else {
                Ok(k)
            }
        };
        Ok(match *self {
            Placement::All => (0..layers).collect(),
            Placement::Shallow(k) => (0..check(k)?).collect(),
            Placement::Deep(k) => (layers - check(k)?..layers).collect(),
        })
    }
}

impl fmt::Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Placement::All => write!(f, "all"),
            Placement::Shallow(k) => write!(f, "shallow:{k}"),
            Placement::Deep(k) => write!(f, "deep:{k}"),
        }
    }
}

/// Parses `all`, `shallow:k`, `deep:k`. Bare `shallow`/`deep` use `k = 0`
/// as a placeholder, resolved by [`Placement::resolve_default`].
impl FromStr for Placement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (kind, k) = match s.split_once(':') {
            Some((kind, k)) => {
                let k = k
                    .parse::<usize>()
                    .map_err(|_| Error::Config(format!("bad placement count in `{s}`")))?;
                (kind, k)
            }
            None => (s, 0),
        };
        match kind {
            "all" if k == 0 => Ok(Placement::All),
            "shallow" => Ok(Placement::Shallow(k)),
            "deep" => Ok(Placement::Deep(k)),
            _ => Err(Error::Config(format!("unknown placement `{s}`"))),
        }
    }
}

impl Placement {
    pub fn resolve_default(self, layers: usize) -> Self {
        match self {
            Placement::Shallow(0) => Placement::Shallow(Self::default_k(layers)),
            Placement::Deep(0) => Placement::Deep(Self::default_k(layers)),
            p => p,
        }
    }
}

impl Serialize for Placement {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Placement {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// How the inference mask is chosen for a queried task.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskPolicy {
    /// Branches `0..=i`: the training-time forward of task `i`.
    #[default]
    Prefix,
    /// Only branch `i`.
    Single,
    /// Branches `j <= i` learned on the same modality as task `i`.
    Modality,
    /// Every learned branch.
    All,
}

impl fmt::Display for MaskPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            MaskPolicy::Prefix => "prefix",
            MaskPolicy::Single => "single",
            MaskPolicy::Modality => "modality",
            MaskPolicy::All => "all",
        };
        f.write_str(s)
    }
}

impl FromStr for MaskPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prefix" => Ok(MaskPolicy::Prefix),
            "single" => Ok(MaskPolicy::Single),
            "modality" => Ok(MaskPolicy::Modality),
            "all" => Ok(MaskPolicy::All),
            _ => Err(Error::Config(format!("unknown mask policy `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub width: usize,
    pub placement: Placement,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            width: 16,
            placement: Placement::All,
        }
    }
}

/// Output head of one task: `logits = h^T W + b` with `W: d x C`, `b: 1 x C`.
#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub weight: Matrix,
    pub bias: Matrix,
    pub frozen: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskEntry {
    pub id: TaskId,
    pub modality: ModalityId,
    pub classes: usize,
    /// Dataset reference the task was trained on, kept for exports.
    pub data: Option<String>,
    pub head: Head,
}

/// Identifies one trainable matrix of a [`ToyModel`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamId {
    BranchA { layer: usize, branch: usize },
    BranchB { layer: usize, branch: usize },
    HeadWeight(usize),
    HeadBias(usize),
}

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamId::BranchA { layer, branch } => write!(f, "layer{layer}.branch{branch}.a"),
            ParamId::BranchB { layer, branch } => write!(f, "layer{layer}.branch{branch}.b"),
            ParamId::HeadWeight(t) => write!(f, "head{t}.weight"),
            ParamId::HeadBias(t) => write!(f, "head{t}.bias"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct HeadBinding {
    pub weight: Var,
    pub bias: Var,
}

/// Tape handles for every matrix of a model.
#[derive(Clone, Debug)]
pub struct ModelBinding {
    pub layers: Vec<LayerBinding>,
    pub heads: Vec<HeadBinding>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Var,
    /// Input to each hidden layer.
    pub layer_inputs: Vec<Var>,
    /// Output of each hidden layer's linear map, before the activation.
    pub pre_activations: Vec<Var>,
    /// Activation of the last hidden layer.
    pub hidden: Var,
}

/// Frozen base network plus expanding branches and heads.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyModel {
    config: ModelConfig,
    placed: Vec<usize>,
    layers: Vec<BranchStack>,
    tasks: Vec<TaskEntry>,
}

const HEAD_INIT_STD: f64 = 0.01;
const BASE_BIAS_STD: f64 = 0.1;

impl ToyModel {
    /// Random frozen base: He-scaled weights, small normal biases.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        if config.layers == 0 || config.width < 2 {
            return Err(Error::Config(format!(
                "model needs layers >= 1 and width >= 2, got {} and {}",
                config.layers, config.width
            )));
        }
        let config = ModelConfig {
            placement: config.placement.resolve_default(config.layers),
            ..config
        };
        let placed = config.placement.indices(config.layers)?;
        let d = config.width;
        let std = (2.0 / d as f64).sqrt();
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let mut rng = SplitMix64::new(derive_seed(seed, l as u64));
            let w = Matrix::from_fn(d, d, |_, _| std * rng.normal());
            let b = Matrix::from_fn(d, 1, |_, _| BASE_BIAS_STD * rng.normal());
            layers.push(BranchStack::new(w, b)?);
        }
        Ok(Self {
            config,
            placed,
            layers,
            tasks: Vec::new(),
        })
    }

    pub(crate) fn from_parts(
        config: ModelConfig,
        layers: Vec<BranchStack>,
        tasks: Vec<TaskEntry>,
    ) -> Result<Self> {
        let placed = config.placement.indices(config.layers)?;
        if layers.len() != config.layers {
            return Err(Error::Config(format!(
                "expected {} layers, found {}",
                config.layers,
                layers.len()
            )));
        }
        for (l, stack) in layers.iter().enumerate() {
            let expected = if placed.contains(&l) { tasks.len() } else { 0 };
            if stack.branches().len() != expected {
                return Err(Error::Config(format!(
                    "layer {l} holds {} branches, expected {expected}",
                    stack.branches().len()
                )));
            }
        }
        Ok(Self {
            config,
            placed,
            layers,
            tasks,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn width(&self) -> usize {
        self.config.width
    }

    pub fn placed_layers(&self) -> &[usize] {
        &self.placed
    }

    pub fn layers(&self) -> &[BranchStack] {
        &self.layers
    }

    pub fn layer_mut(&mut self, l: usize) -> &mut BranchStack {
        &mut self.layers[l]
    }

    pub fn tasks(&self) -> &[TaskEntry] {
        &self.tasks
    }

    pub fn task_index(&self, id: &TaskId) -> Result<usize> {
        self.tasks
            .iter()
            .position(|t| &t.id == id)
            .ok_or_else(|| Error::UnknownTask(id.0.clone()))
    }

    /// Index of the task still being trained, if any.
    pub fn current_task(&self) -> Option<usize> {
        self.tasks.iter().rposition(|t| !t.head.frozen)
    }

    /// Registers a task: new head plus one fresh branch on every placed layer.
    #[allow(clippy::too_many_arguments)]
    pub fn begin_task(
        &mut self,
        id: TaskId,
        modality: ModalityId,
        classes: usize,
        data: Option<String>,
        rank: usize,
        scale: f64,
        seed: u64,
    ) -> Result<usize> {
        if self.tasks.iter().any(|t| t.id == id) {
            return Err(Error::DuplicateTask(id.0));
        }
        if let Some(open) = self.current_task() {
            return Err(Error::Precondition(format!(
                "task `{}` is still being trained",
                self.tasks[open].id
            )));
        }
        if classes < 2 {
            return Err(Error::Config(format!(
                "task `{id}` needs at least 2 classes, got {classes}"
            )));
        }
        let d = self.config.width;
        if rank == 0 {
            return Err(Error::ZeroRank);
        }
        if rank > d {
            return Err(Error::RankTooLarge {
                rank,
                rows: d,
                cols: d,
            });
        }
        let k = self.tasks.len() as u64;
        let task_seed = derive_seed(seed, k);
        for &l in &self.placed {
            self.layers[l].expand_branch(
                id.clone(),
                modality.clone(),
                rank,
                scale,
                derive_seed(task_seed, l as u64),
            )?;
        }
        let mut rng = SplitMix64::new(derive_seed(task_seed, u64::MAX));
        let head = Head {
            weight: Matrix::from_fn(d, classes, |_, _| HEAD_INIT_STD * rng.normal()),
            bias: Matrix::zeros(1, classes),
            frozen: false,
        };
        self.tasks.push(TaskEntry {
            id,
            modality,
            classes,
            data,
            head,
        });
        Ok(self.tasks.len() - 1)
    }

    /// Freezes the task's branches on every placed layer and its head.
    pub fn finish_task(&mut self, id: &TaskId) -> Result<()> {
        let idx = self.task_index(id)?;
        for &l in &self.placed {
            self.layers[l].freeze_branch(id)?;
        }
        self.tasks[idx].head.frozen = true;
        Ok(())
    }

    pub fn mask_for(&self, policy: MaskPolicy, task: usize) -> Vec<u8> {
        let modality = &self.tasks[task].modality;
        (0..self.tasks.len())
            .map(|j| {
                let on = match policy {
                    MaskPolicy::Prefix => j <= task,
                    MaskPolicy::Single => j == task,
                    MaskPolicy::Modality => j <= task && &self.tasks[j].modality == modality,
                    MaskPolicy::All => true,
                };
                u8::from(on)
            })
            .collect()
    }

    /// Writes `mask` into every placed stack.
    pub fn set_mask(&mut self, mask: &[u8]) -> Result<()> {
        for &l in &self.placed {
            self.layers[l].set_mask(mask)?;
        }
        Ok(())
    }

    /// Base weights become constants; branches and heads are parameters unless frozen.
    pub fn bind(&self, tape: &mut Tape) -> ModelBinding {
        let layers = self.layers.iter().map(|s| s.bind(tape)).collect();
        let heads = self
            .tasks
            .iter()
            .map(|t| {
                let leaf = |tape: &mut Tape, m: &Matrix| {
                    if t.head.frozen {
                        tape.constant(m.clone())
                    } else {
                        tape.param(m.clone())
                    }
                };
                HeadBinding {
                    weight: leaf(tape, &t.head.weight),
                    bias: leaf(tape, &t.head.bias),
                }
            })
            .collect();
        ModelBinding { layers, heads }
    }

    /// Forward through all hidden layers and the head of `task`, with an explicit mask.
    pub fn forward(
        &self,
        tape: &mut Tape,
        binding: &ModelBinding,
        x: Var,
        task: usize,
        mask: &[u8],
    ) -> Result<ForwardOutput> {
        if task >= self.tasks.len() {
            return Err(Error::UnknownTask(format!("#{task}")));
        }
        if tape.shape(x).0 != self.config.width {
            return Err(Error::shape(
                "model_forward",
                (self.config.width, self.config.width),
                tape.shape(x),
            ));
        }
        let no_mask: [u8; 0] = [];
        let mut h = x;
        let mut layer_inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        for (l, stack) in self.layers.iter().enumerate() {
            layer_inputs.push(h);
            let m: &[u8] = match &binding.layers[l].mask {
                Some(over) => over,
                None if stack.branches().is_empty() => &no_mask,
                None => mask,
            };
            let e = stack.forward_with_mask(tape, &binding.layers[l], h, m)?;
            pre_activations.push(e);
            h = tape.relu(e);
        }
        let head = &binding.heads[task];
        let ht = tape.transpose(h);
        let z = tape.matmul(ht, head.weight)?;
        let logits = tape.add_row(z, head.bias)?;
        Ok(ForwardOutput {
            logits,
            layer_inputs,
            pre_activations,
            hidden: h,
        })
    }

    /// Forward for task `id` with the mask chosen by `policy`.
    pub fn model_forward(
        &self,
        tape: &mut Tape,
        binding: &ModelBinding,
        x: Var,
        id: &TaskId,
        policy: MaskPolicy,
    ) -> Result<ForwardOutput> {
        let task = self.task_index(id)?;
        let mask = self.mask_for(policy, task);
        self.forward(tape, binding, x, task, &mask)
    }

    /// Plain evaluation: logits (`N x C`) and last hidden activation (`d x N`).
    pub fn evaluate(
        &self,
        x: &Matrix,
        task: usize,
        policy: MaskPolicy,
    ) -> Result<(Matrix, Matrix)> {
        let mut tape = Tape::new();
        let binding = self.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let mask = self.mask_for(policy, task);
        let out = self.forward(&mut tape, &binding, xv, task, &mask)?;
        Ok((
            tape.value(out.logits).clone(),
            tape.value(out.hidden).clone(),
        ))
    }

    pub fn logits(&self, x: &Matrix, task: usize, policy: MaskPolicy) -> Result<Matrix> {
        Ok(self.evaluate(x, task, policy)?.0)
    }

    /// Trainable matrices and their tape handles, in a fixed order.
    pub fn trainable(&self, binding: &ModelBinding) -> Vec<(ParamId, Var)> {
        let mut out = Vec::new();
        for &l in &self.placed {
            for (k, br) in self.layers[l].branches().iter().enumerate() {
                if !br.is_frozen() {
                    let vars = binding.layers[l].branches[k];
                    out.push((
                        ParamId::BranchA {
                            layer: l,
                            branch: k,
                        },
                        vars.a,
                    ));
                    out.push((
                        ParamId::BranchB {
                            layer: l,
                            branch: k,
                        },
                        vars.b,
                    ));
                }
            }
        }
        for (t, task) in self.tasks.iter().enumerate() {
            if !task.head.frozen {
                out.push((ParamId::HeadWeight(t), binding.heads[t].weight));
                out.push((ParamId::HeadBias(t), binding.heads[t].bias));
            }
        }
        out
    }

    pub fn trainable_parameter_count(&self) -> usize {
        let branches: usize = self
            .layers
            .iter()
            .map(BranchStack::trainable_parameter_count)
            .sum();
        let heads: usize = self
            .tasks
            .iter()
            .filter(|t| !t.head.frozen)
            .map(|t| t.head.weight.len() + t.head.bias.len())
            .sum();
        branches + heads
    }

    pub fn param(&self, id: ParamId) -> &Matrix {
        match id {
            ParamId::BranchA { layer, branch } => self.layers[layer].branches()[branch].a(),
            ParamId::BranchB { layer, branch } => self.layers[layer].branches()[branch].b(),
            ParamId::HeadWeight(t) => &self.tasks[t].head.weight,
            ParamId::HeadBias(t) => &self.tasks[t].head.bias,
        }
    }

    /// Mutable access to a trainable matrix; frozen matrices are refused.
    pub fn param_mut(&mut self, id: ParamId) -> Result<&mut Matrix> {
        let frozen_err = || Error::Precondition(format!("parameter {id} is frozen"));
        match id {
            ParamId::BranchA { layer, branch } | ParamId::BranchB { layer, branch } => {
                let br = &mut self.layers[layer].branches_mut()[branch];
                if br.frozen {
                    return Err(frozen_err());
                }
                Ok(if matches!(id, ParamId::BranchA { .. }) {
                    &mut br.a
                } else {
                    &mut br.b
                })
            }
            ParamId::HeadWeight(t) | ParamId::HeadBias(t) => {
                let head = &mut self.tasks[t].head;
                if head.frozen {
                    return Err(frozen_err());
                }
                Ok(if matches!(id, ParamId::HeadWeight(_)) {
                    &mut head.weight
                } else {
                    &mut head.bias
                })
            }
        }
    }

    /// Hash over the base network and every frozen branch and head.
    pub fn frozen_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for stack in &self.layers {
            h.update(stack.weight().content_hash());
            h.update(stack.bias().content_hash());
            for br in stack.branches().iter().filter(|b| b.is_frozen()) {
                h.update(br.content_hash());
            }
        }
        for t in self.tasks.iter().filter(|t| t.head.frozen) {
            h.update(t.head.weight.content_hash());
            h.update(t.head.bias.content_hash());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}
