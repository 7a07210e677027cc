//! `mslora`: train, verify, sweep and export.
//!
//! Exit codes: 0 success, 1 configuration error, 2 runtime error,
//! 3 verification failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use mslora::checkpoint::{load_checkpoint, Checkpoint, MANIFEST};
use mslora::config::Experiment;
use mslora::gradcheck;
use mslora::lora::TaskId;
use mslora::metrics::{self, LossKind};
use mslora::model::{MaskPolicy, ParamId, ToyModel};
use mslora::rng::SplitMix64;
use mslora::sweep::{permutations, run_sweep, SweepAxis};
use mslora::taskgen::{DatasetRef, LabeledDataset};
use mslora::trainer::{run_sequence, write_trace_csv};
use mslora::{Error, Matrix};
use serde_json::json;

#[derive(Parser)]
#[command(
    name = "mslora",
    version,
    about = "Continual learning with masked per-task LoRA branches"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured task sequence.
    Train {
        config: PathBuf,
        /// Run directory; defaults to `runtime.output_dir`.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Continue from a checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Run verification suites against a config or a checkpoint directory.
    Verify {
        target: PathBuf,
        #[arg(long, value_enum, default_value_t = Suite::All)]
        suite: Suite,
    },
    /// Run one full sequence per value of an ablation axis.
    Sweep {
        config: PathBuf,
        #[arg(long)]
        axis: String,
        /// Comma-separated values. For `order`, `all` expands to every permutation.
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        values: Vec<String>,
        /// Run the values concurrently.
        #[arg(long)]
        parallel: bool,
        /// Directory for the comparison table; defaults to `<runtime.output_dir>/sweeps`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Write an analysis artifact from a checkpoint.
    Export {
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        what: What,
        #[arg(long)]
        out: PathBuf,
        /// Overwrite an existing output file.
        #[arg(long)]
        force: bool,
        /// Config used to regenerate datasets for `embeddings`; defaults to the
        /// run's `config.echo` when the checkpoint sits in a run directory.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Suite {
    Prop1,
    Stability,
    Grads,
    All,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum What {
    Sim,
    Embeddings,
    Delta,
}

/// Failure with its exit code.
#[derive(Debug)]
enum Failure {
    Config(String),
    Runtime(String),
    Verification(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 1,
            Failure::Runtime(_) => 2,
            Failure::Verification(_) => 3,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_)
            | Error::DuplicateTask(_)
            | Error::Partition(_)
            | Error::RankTooLarge { .. }
            | Error::ZeroRank => Failure::Config(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Runtime(format!("{}: {e}", path.display()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Train {
            config,
            output,
            resume,
        } => cmd_train(&config, output, resume),
        Command::Verify { target, suite } => cmd_verify(&target, suite),
        Command::Sweep {
            config,
            axis,
            values,
            parallel,
            output,
        } => cmd_sweep(&config, &axis, values, parallel, output),
        Command::Export {
            checkpoint,
            what,
            out,
            force,
            config,
        } => cmd_export(&checkpoint, what, &out, force, config),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (kind, msg) = match &f {
                Failure::Config(m) => ("config error", m),
                Failure::Runtime(m) => ("error", m),
                Failure::Verification(m) => ("verification failed", m),
            };
            eprintln!("mslora: {kind}: {msg}");
            ExitCode::from(f.code())
        }
    }
}

fn output_dir(explicit: Option<PathBuf>, exp: &Experiment) -> Result<PathBuf, Failure> {
    explicit.or_else(|| exp.output_dir.clone()).ok_or_else(|| {
        Failure::Config("no output directory: pass --output or set runtime.output_dir".into())
    })
}

fn write_text(path: &Path, text: &str) -> CmdResult {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn write_json(path: &Path, value: serde_json::Value) -> CmdResult {
    let text = serde_json::to_string_pretty(&value).map_err(|e| Failure::Runtime(e.to_string()))?;
    write_text(path, &(text + "\n"))
}

fn cmd_train(config: &Path, output: Option<PathBuf>, resume: Option<PathBuf>) -> CmdResult {
    let exp = Experiment::from_file(config)?;
    let out = output_dir(output, &exp)?;
    fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
    write_text(&out.join("config.echo"), &exp.echo())?;

    let (mut model, snapshots) = match resume {
        Some(path) => {
            let ckpt = load_checkpoint(&path)?;
            if ckpt.model.config() != &exp.run.model {
                return Err(Failure::Config(format!(
                    "checkpoint model {:?} does not match the configured model {:?}",
                    ckpt.model.config(),
                    exp.run.model
                )));
            }
            (ckpt.model, ckpt.snapshots)
        }
        None => (exp.run.build_model()?, Vec::new()),
    };
    let learned = model.tasks().len();
    if learned > 0 && learned == exp.sequence.len() {
        let same = model
            .tasks()
            .iter()
            .zip(&exp.sequence)
            .all(|(t, s)| t.id == s.id && t.modality == s.modality);
        if !same {
            return Err(Failure::Config(
                "checkpoint tasks do not match the configured sequence".into(),
            ));
        }
        println!("all {learned} tasks already learned; nothing to train");
        return Ok(());
    }
    let ckpt_dir = out.join("checkpoints");
    let outcome = run_sequence(
        &mut model,
        &exp.sequence,
        &exp.run,
        snapshots,
        Some(&ckpt_dir),
    )?;
    let report = &outcome.report;
    write_json(&out.join("report.json"), json!(report))?;
    write_trace_csv(&out.join("trace.csv"), &report.tasks)?;
    let exports = out.join("exports");
    fs::create_dir_all(&exports).map_err(|e| io_err(&exports, e))?;
    report
        .similarity
        .write_csv(&exports.join("similarity.csv"))?;

    for t in &report.tasks {
        println!(
            "task {:<8} modality {:<6} train acc {:.3}  test acc {:.3}  final loss {:.4}",
            t.task_id.0, t.modality_id.0, t.train_accuracy, t.test_accuracy, t.final_train_loss
        );
    }
    println!(
        "stability exact: {}  same/cross similarity: {:?}/{:?}",
        report.stability.passed(),
        report.modality_gap.same_modality,
        report.modality_gap.cross_modality
    );
    println!("wrote {}", out.display());
    Ok(())
}

/// A trained model plus its snapshots, from a checkpoint or by training a config.
fn load_target(target: &Path) -> Result<(Checkpoint, Option<Experiment>), Failure> {
    if target.is_dir() && target.join(MANIFEST).exists() {
        Ok((load_checkpoint(target)?, None))
    } else if target.is_dir() {
        Err(Failure::Config(format!(
            "{} is a directory without {MANIFEST}",
            target.display()
        )))
    } else {
        let exp = Experiment::from_file(target)?;
        let mut model = exp.run.build_model()?;
        let outcome = run_sequence(&mut model, &exp.sequence, &exp.run, Vec::new(), None)?;
        Ok((
            Checkpoint {
                model,
                optimizer: None,
                snapshots: outcome.snapshots,
            },
            Some(exp),
        ))
    }
}

/// Clones `model` and opens a probe task whose branches are random, scale 1.
fn probe_model(model: &ToyModel, fallback_rank: usize) -> Result<ToyModel, Failure> {
    let mut probe = model.clone();
    let rank = model
        .placed_layers()
        .first()
        .and_then(|&l| model.layers()[l].branches().first())
        .map_or(fallback_rank, |b| b.rank());
    let modality = model
        .tasks()
        .first()
        .map_or_else(|| "probe".into(), |t| t.modality.clone());
    let mut id = String::from("probe");
    while model.tasks().iter().any(|t| t.id.0 == id) {
        id.push('_');
    }
    let task = probe.begin_task(id.as_str().into(), modality, 4, None, rank, 1.0, 0x5eed)?;
    let mut rng = SplitMix64::new(0x9e0b);
    for l in probe.placed_layers().to_vec() {
        for pid in [
            ParamId::BranchA {
                layer: l,
                branch: task,
            },
            ParamId::BranchB {
                layer: l,
                branch: task,
            },
        ] {
            for v in probe.param_mut(pid)?.as_mut_slice() {
                *v = 0.2 * rng.normal();
            }
        }
    }
    Ok(probe)
}

fn cmd_verify(target: &Path, suite: Suite) -> CmdResult {
    let (ckpt, exp) = load_target(target)?;
    let run = exp.map(|e| e.run).unwrap_or_default();
    let mut passed = true;
    let mut reports = serde_json::Map::new();

    if matches!(suite, Suite::Prop1 | Suite::All) {
        let probe = probe_model(&ckpt.model, run.rank)?;
        let mut rng = SplitMix64::new(0x1234);
        let d = probe.width();
        let x = Matrix::from_fn(d, 32, |_, _| rng.normal());
        let labels: Vec<usize> = (0..32).map(|_| rng.below(4)).collect();
        let mut checks = Vec::new();
        for &layer in probe.placed_layers() {
            for kind in [LossKind::CeOnly, LossKind::Full] {
                let r = metrics::verify_prop1(&probe, layer, kind, &run.loss, &x, &labels, 1e-12)?;
                passed &= r.passed;
                checks.push(r);
            }
        }
        reports.insert("prop1".into(), json!(checks));
    }
    if matches!(suite, Suite::Stability | Suite::All) {
        let policy = ckpt
            .snapshots
            .first()
            .map_or(MaskPolicy::Prefix, |s| s.mask_policy);
        let r = metrics::stability_replay(&ckpt.model, &ckpt.snapshots, policy)?;
        passed &= r.passed();
        reports.insert("stability".into(), json!(r));
    }
    if matches!(suite, Suite::Grads | Suite::All) {
        let r = gradcheck::battery(50, run.seed)?;
        passed &= r.passed();
        reports.insert("grads".into(), json!(r));
    }
    let text =
        serde_json::to_string_pretty(&reports).map_err(|e| Failure::Runtime(e.to_string()))?;
    println!("{text}");
    if passed {
        Ok(())
    } else {
        Err(Failure::Verification(
            "one or more checks exceeded tolerance".into(),
        ))
    }
}

fn cmd_sweep(
    config: &Path,
    axis: &str,
    values: Vec<String>,
    parallel: bool,
    output: Option<PathBuf>,
) -> CmdResult {
    let exp = Experiment::from_file(config)?;
    let axis: SweepAxis = axis.parse()?;
    let mut values: Vec<String> = values
        .into_iter()
        .map(|v| v.trim().to_string())
        .filter(|v| !v.is_empty())
        .collect();
    if values.is_empty() {
        return Err(Failure::Config("--values lists no values".into()));
    }
    if axis == SweepAxis::Order && values == ["all"] {
        let ids: Vec<String> = exp.sequence.iter().map(|t| t.id.0.clone()).collect();
        values = permutations(&ids);
    }
    let out = match output {
        Some(p) => p,
        None => output_dir(None, &exp)?.join("sweeps"),
    };
    fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
    write_text(&out.join("config.echo"), &exp.echo())?;
    if parallel {
        eprintln!("mslora: warning: --parallel runs sweep values concurrently");
    }
    let report = run_sweep(&exp, axis, &values, parallel)?;
    let csv_path = out.join(format!("sweep_{axis}.csv"));
    report.write_csv(&csv_path)?;
    write_json(&out.join(format!("sweep_{axis}.json")), json!(report))?;
    for row in &report.rows {
        println!(
            "{axis}={:<20} {:<6} mean acc {:?}  gap {:?}  ortho {:?}",
            row.value, row.status, row.mean_accuracy, row.modality_gap, row.last_branch_ortho
        );
    }
    println!("wrote {}", csv_path.display());
    match report.failures() {
        0 => Ok(()),
        n => Err(Failure::Runtime(format!(
            "{n} of {} runs failed; see {}",
            report.rows.len(),
            csv_path.display()
        ))),
    }
}

fn export_config(checkpoint: &Path, explicit: Option<PathBuf>) -> Result<Experiment, Failure> {
    if let Some(path) = explicit {
        return Ok(Experiment::from_file(&path)?);
    }
    let echo = checkpoint
        .parent()
        .and_then(Path::parent)
        .map(|run| run.join("config.echo"));
    match echo {
        Some(path) if path.is_file() => Ok(Experiment::from_file(&path)?),
        _ => Ok(Experiment::parse("", Path::new(""))?),
    }
}

fn cmd_export(
    checkpoint: &Path,
    what: What,
    out: &Path,
    force: bool,
    config: Option<PathBuf>,
) -> CmdResult {
    if out.exists() && !force {
        return Err(Failure::Config(format!(
            "{} exists; pass --force to overwrite",
            out.display()
        )));
    }
    let ckpt = load_checkpoint(checkpoint)?;
    let model = &ckpt.model;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    match what {
        What::Sim => {
            let exp = export_config(checkpoint, config)?;
            metrics::similarity_matrix(model, exp.run.loss.similarity)?.write_csv(out)?;
        }
        What::Delta => metrics::export_delta(model, out)?,
        What::Embeddings => {
            let exp = export_config(checkpoint, config)?;
            let mut datasets: Vec<(TaskId, LabeledDataset)> = Vec::new();
            for (k, task) in model.tasks().iter().enumerate() {
                let data = task.data.as_deref().ok_or_else(|| {
                    Failure::Config(format!("task `{}` has no dataset reference", task.id))
                })?;
                let r: DatasetRef = data.parse()?;
                let ds = r.resolve(
                    model.width(),
                    task.classes,
                    exp.run.synth,
                    exp.run.split_seed(k),
                )?;
                datasets.push((task.id.clone(), ds));
            }
            let pairs: Vec<(TaskId, &LabeledDataset)> =
                datasets.iter().map(|(id, ds)| (id.clone(), ds)).collect();
            let policy = ckpt
                .snapshots
                .first()
                .map_or(exp.run.mask_policy, |s| s.mask_policy);
            metrics::export_embeddings(model, &pairs, policy, out)?;
        }
    }
    println!("wrote {}", out.display());
    Ok(())
}
