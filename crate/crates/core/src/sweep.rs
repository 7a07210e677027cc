//! Ablation sweeps: one full sequence run per value of a single axis.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use crate::config::Experiment;
use crate::error::{Error, Result};
use crate::model::Placement;
use crate::regularizers::LossWeights;
use crate::trainer::{run_fresh, TaskSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    /// Values `r` (alpha = r) or `r-alpha`.
    Rank,
    /// Values `alpha:beta`.
    Weights,
    /// Values `all`, `shallow[:k]`, `deep[:k]`.
    Placement,
    /// Values are task-id permutations joined by `/`.
    Order,
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepAxis::Rank => "rank",
            SweepAxis::Weights => "weights",
            SweepAxis::Placement => "placement",
            SweepAxis::Order => "order",
        })
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rank" => Ok(SweepAxis::Rank),
            "weights" => Ok(SweepAxis::Weights),
            "placement" => Ok(SweepAxis::Placement),
            "order" => Ok(SweepAxis::Order),
            _ => Err(Error::Config(format!("unknown sweep axis `{s}`"))),
        }
    }
}

/// Applies one axis value to a copy of `base`.
pub fn apply_value(base: &Experiment, axis: SweepAxis, value: &str) -> Result<Experiment> {
    let bad = |why: &str| Error::Config(format!("bad {axis} value `{value}`: {why}"));
    let mut e = base.clone();
    match axis {
        SweepAxis::Rank => {
            let (r, a) = match value.split_once('-') {
                Some((r, a)) => (r, Some(a)),
                None => (value, None),
            };
            let rank: usize = r
                .trim()
                .parse()
                .map_err(|_| bad("expected an integer rank"))?;
            let alpha = match a {
                Some(a) => a
                    .trim()
                    .parse()
                    .map_err(|_| bad("expected a numeric alpha"))?,
                None => rank as f64,
            };
            e.run.rank = rank;
            e.run.lora_alpha = alpha;
        }
        SweepAxis::Weights => {
            let (a, b) = value
                .split_once(':')
                .ok_or_else(|| bad("expected alpha:beta"))?;
            let a: f64 = a.trim().parse().map_err(|_| bad("alpha is not a number"))?;
            let b: f64 = b.trim().parse().map_err(|_| bad("beta is not a number"))?;
            e.run.loss.weights = LossWeights::new(a, b)?;
        }
        SweepAxis::Placement => {
            let p: Placement = value.parse()?;
            e.run.model.placement = p.resolve_default(e.run.model.layers);
        }
        SweepAxis::Order => {
            let ids: Vec<&str> = value.split('/').map(str::trim).collect();
            let mut seq: Vec<TaskSpec> = Vec::with_capacity(ids.len());
            for id in &ids {
                let spec = base
                    .sequence
                    .iter()
                    .find(|t| t.id.0 == *id)
                    .ok_or_else(|| bad(&format!("task `{id}` is not in the sequence")))?;
                seq.push(spec.clone());
            }
            if seq.len() != base.sequence.len() {
                return Err(bad("an order must list every task exactly once"));
            }
            crate::trainer::validate_sequence(&seq)?;
            e.sequence = seq;
        }
    }
    Ok(e)
}

/// One line of the comparison table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub value: String,
    pub status: String,
    pub error: String,
    pub rank: usize,
    pub lora_alpha: f64,
    pub alpha: f64,
    pub beta: f64,
    pub placement: String,
    pub order: String,
    pub trainable_parameters: Option<usize>,
    pub mean_accuracy: Option<f64>,
    pub min_accuracy: Option<f64>,
    pub max_forgetting: Option<f64>,
    pub same_modality_sim: Option<f64>,
    pub cross_modality_sim: Option<f64>,
    pub modality_gap: Option<f64>,
    pub last_branch_ortho: Option<f64>,
    pub stability_exact: Option<bool>,
    /// `task=accuracy` pairs joined by `;`, in sequence order.
    pub per_task_accuracy: String,
}

impl SweepRow {
    fn settings(axis: SweepAxis, value: &str, e: &Experiment) -> Self {
        Self {
            axis,
            value: value.to_string(),
            status: String::new(),
            error: String::new(),
            rank: e.run.rank,
            lora_alpha: e.run.lora_alpha,
            alpha: e.run.loss.weights.alpha,
            beta: e.run.loss.weights.beta,
            placement: e.run.model.placement.to_string(),
            order: e
                .sequence
                .iter()
                .map(|t| t.id.0.as_str())
                .collect::<Vec<_>>()
                .join("/"),
            trainable_parameters: None,
            mean_accuracy: None,
            min_accuracy: None,
            max_forgetting: None,
            same_modality_sim: None,
            cross_modality_sim: None,
            modality_gap: None,
            last_branch_ortho: None,
            stability_exact: None,
            per_task_accuracy: String::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepReport {
    pub axis: SweepAxis,
    pub parallel: bool,
    pub warning: Option<String>,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| r.status != "ok").count()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Dataset(format!("{other:?}")),
        })?;
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn run_one(axis: SweepAxis, value: &str, e: &Experiment) -> SweepRow {
    let mut row = SweepRow::settings(axis, value, e);
    match run_fresh(&e.sequence, &e.run, None) {
        Ok((_, outcome)) => {
            let r = &outcome.report;
            let acc: Vec<f64> = r.metrics.iter().map(|m| m.accuracy).collect();
            row.status = "ok".into();
            row.trainable_parameters = r.tasks.last().map(|t| t.trainable_parameters);
            row.mean_accuracy = Some(acc.iter().sum::<f64>() / acc.len() as f64);
            row.min_accuracy = acc.iter().copied().reduce(f64::min);
            row.max_forgetting = r.metrics.iter().map(|m| m.forgetting).reduce(f64::max);
            row.same_modality_sim = r.modality_gap.same_modality;
            row.cross_modality_sim = r.modality_gap.cross_modality;
            row.modality_gap = r.modality_gap.gap();
            row.last_branch_ortho = r.tasks.last().map(|t| t.final_ortho);
            row.stability_exact = Some(r.stability.passed());
            row.per_task_accuracy = r
                .metrics
                .iter()
                .map(|m| format!("{}={}", m.task_id, m.accuracy))
                .collect::<Vec<_>>()
                .join(";");
        }
        Err(err) => {
            row.status = "failed".into();
            row.error = err.to_string();
        }
    }
    row
}

/// Runs one sequence per value. Individual run failures are recorded in
/// their row; only unparseable values abort the sweep.
pub fn run_sweep(
    base: &Experiment,
    axis: SweepAxis,
    values: &[String],
    parallel: bool,
) -> Result<SweepReport> {
    if values.is_empty() {
        return Err(Error::Config(format!(
            "sweep over {axis} needs at least one value"
        )));
    }
    let runs: Vec<(String, Experiment)> = values
        .iter()
        .map(|v| Ok((v.clone(), apply_value(base, axis, v)?)))
        .collect::<Result<_>>()?;
    let rows = if parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = runs
                .iter()
                .map(|(v, e)| s.spawn(move || run_one(axis, v, e)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("sweep worker panicked"))
                .collect()
        })
    } else {
        runs.iter().map(|(v, e)| run_one(axis, v, e)).collect()
    };
    Ok(SweepReport {
        axis,
        parallel,
        warning: parallel.then(|| {
            "runs executed in parallel; each run is still seeded independently".to_string()
        }),
        rows,
    })
}

/// Every permutation of `ids`, in lexicographic order of positions.
pub fn permutations(ids: &[String]) -> Vec<String> {
    fn go(rest: &mut Vec<String>, acc: &mut Vec<String>, out: &mut Vec<String>) {
        if rest.is_empty() {
            out.push(acc.join("/"));
            return;
        }
        for i in 0..rest.len() {
            let x = rest.remove(i);
            acc.push(x.clone());
            go(rest, acc, out);
            acc.pop();
            rest.insert(i, x);
        }
    }
    let mut out = Vec::new();
    go(&mut ids.to_vec(), &mut Vec::new(), &mut out);
    out
}
