//! Experiment configuration files (TOML).
//!
//! ```toml
//! [model]
//! layers = 4
//! width = 16
//! placement = "all"        # all | shallow[:k] | deep[:k]
//!
//! [lora]
//! rank = 4
//! alpha = 4.0
//!
//! [loss]
//! alpha = 0.1
//! beta = 0.01
//! cr.reduce = "sum"        # sum | mean
//! similarity.normalize = true
//!
//! [optimizer]
//! lr = 0.01
//! betas = [0.9, 0.999]
//! epsilon = 1e-8
//! warmup_ratio = 0.03
//!
//! [data]
//! n_per_class = 200
//! margin = 6.0
//!
//! [runtime]
//! seed = 0
//! determinism = true
//! output_dir = "runs/example"
//!
//! [eval]
//! mask_policy = "prefix"   # prefix | single | modality | all
//!
//! [[sequence]]
//! id = "A1"
//! modality = "A"
//! data = "synth:101:1:4"   # or a CSV path, relative to this file
//! classes = 4
//! steps = 300
//! batch = 32
//! ```
//!
//! Every key is optional; unknown keys are rejected. Omitting `[[sequence]]`
//! selects the built-in `A1, B1, A2, B2` sequence.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{MaskPolicy, ModelConfig, Placement};
use crate::optim::AdamWConfig;
use crate::regularizers::{CrReduce, LossConfig, LossWeights, SimilarityOpts};
use crate::taskgen::{DatasetRef, SynthParams, DEFAULT_CLASSES};
use crate::trainer::{default_sequence, RunConfig, TaskSpec, DEFAULT_BATCH, DEFAULT_STEPS};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lora: Option<LoraSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<LossSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<DataSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub runtime: Option<RuntimeSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sequence: Option<Vec<SequenceEntry>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub layers: Option<usize>,
    pub width: Option<usize>,
    pub placement: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraSection {
    pub rank: Option<usize>,
    pub alpha: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSection {
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub cr: Option<CrSection>,
    pub similarity: Option<SimilaritySection>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrSection {
    pub reduce: Option<CrReduce>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimilaritySection {
    pub normalize: Option<bool>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    pub lr: Option<f64>,
    pub betas: Option<[f64; 2]>,
    pub epsilon: Option<f64>,
    pub warmup_ratio: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub n_per_class: Option<usize>,
    pub margin: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuntimeSection {
    pub seed: Option<u64>,
    pub determinism: Option<bool>,
    pub output_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub mask_policy: Option<MaskPolicy>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceEntry {
    pub id: String,
    pub modality: String,
    pub data: String,
    pub classes: Option<usize>,
    pub steps: Option<usize>,
    pub batch: Option<usize>,
}

/// A parsed and validated experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct Experiment {
    pub run: RunConfig,
    pub sequence: Vec<TaskSpec>,
    pub output_dir: Option<PathBuf>,
}

impl Experiment {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new(""));
        Self::parse(&text, base).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Parses TOML text; relative CSV paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let file: ConfigFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_config(file, base)
    }

    pub fn from_config(file: ConfigFile, base: &Path) -> Result<Self> {
        let defaults = RunConfig::default();
        let model = file.model.unwrap_or_default();
        let layers = model.layers.unwrap_or(defaults.model.layers);
        let placement = match &model.placement {
            Some(s) => s.parse::<Placement>()?.resolve_default(layers),
            None => defaults.model.placement,
        };
        let lora = file.lora.unwrap_or_default();
        let rank = lora.rank.unwrap_or(defaults.rank);
        let loss = file.loss.unwrap_or_default();
        let opt = file.optimizer.unwrap_or_default();
        let data = file.data.unwrap_or_default();
        let runtime = file.runtime.unwrap_or_default();
        let eval = file.eval.unwrap_or_default();
        let betas = opt
            .betas
            .unwrap_or([defaults.adamw.betas.0, defaults.adamw.betas.1]);
        let run = RunConfig {
            model: ModelConfig {
                layers,
                width: model.width.unwrap_or(defaults.model.width),
                placement,
            },
            rank,
            // alpha defaults to the rank, giving scale 1.
            lora_alpha: lora.alpha.unwrap_or(rank as f64),
            loss: LossConfig {
                weights: LossWeights {
                    alpha: loss.alpha.unwrap_or(defaults.loss.weights.alpha),
                    beta: loss.beta.unwrap_or(defaults.loss.weights.beta),
                },
                similarity: SimilarityOpts {
                    normalize: loss
                        .similarity
                        .and_then(|s| s.normalize)
                        .unwrap_or(defaults.loss.similarity.normalize),
                },
                reduce: loss
                    .cr
                    .and_then(|c| c.reduce)
                    .unwrap_or(defaults.loss.reduce),
            },
            lr: opt.lr.unwrap_or(defaults.lr),
            warmup_ratio: opt.warmup_ratio.unwrap_or(defaults.warmup_ratio),
            adamw: AdamWConfig {
                betas: (betas[0], betas[1]),
                epsilon: opt.epsilon.unwrap_or(defaults.adamw.epsilon),
                weight_decay: 0.0,
            },
            mask_policy: eval.mask_policy.unwrap_or(defaults.mask_policy),
            seed: runtime.seed.unwrap_or(defaults.seed),
            determinism: runtime.determinism.unwrap_or(defaults.determinism),
            synth: SynthParams {
                per_class: data.n_per_class.unwrap_or(defaults.synth.per_class),
                margin: data.margin.unwrap_or(defaults.synth.margin),
            },
        };
        run.validate()?;
        let sequence = match file.sequence {
            None => default_sequence(),
            Some(entries) if entries.is_empty() => {
                return Err(Error::Config(
                    "[[sequence]] must list at least one task".into(),
                ))
            }
            Some(entries) => entries
                .into_iter()
                .map(|e| sequence_entry(e, base))
                .collect::<Result<_>>()?,
        };
        crate::trainer::validate_sequence(&sequence)?;
        Ok(Self {
            run,
            sequence,
            output_dir: runtime.output_dir,
        })
    }

    /// The effective configuration with every key filled in.
    pub fn to_config(&self) -> ConfigFile {
        let r = &self.run;
        ConfigFile {
            model: Some(ModelSection {
                layers: Some(r.model.layers),
                width: Some(r.model.width),
                placement: Some(r.model.placement.to_string()),
            }),
            lora: Some(LoraSection {
                rank: Some(r.rank),
                alpha: Some(r.lora_alpha),
            }),
            loss: Some(LossSection {
                alpha: Some(r.loss.weights.alpha),
                beta: Some(r.loss.weights.beta),
                cr: Some(CrSection {
                    reduce: Some(r.loss.reduce),
                }),
                similarity: Some(SimilaritySection {
                    normalize: Some(r.loss.similarity.normalize),
                }),
            }),
            optimizer: Some(OptimizerSection {
                lr: Some(r.lr),
                betas: Some([r.adamw.betas.0, r.adamw.betas.1]),
                epsilon: Some(r.adamw.epsilon),
                warmup_ratio: Some(r.warmup_ratio),
            }),
            data: Some(DataSection {
                n_per_class: Some(r.synth.per_class),
                margin: Some(r.synth.margin),
            }),
            runtime: Some(RuntimeSection {
                seed: Some(r.seed),
                determinism: Some(r.determinism),
                output_dir: self.output_dir.clone(),
            }),
            eval: Some(EvalSection {
                mask_policy: Some(r.mask_policy),
            }),
            sequence: Some(
                self.sequence
                    .iter()
                    .map(|t| SequenceEntry {
                        id: t.id.0.clone(),
                        modality: t.modality.0.clone(),
                        data: t.data.to_string(),
                        classes: Some(t.classes),
                        steps: Some(t.steps),
                        batch: Some(t.batch),
                    })
                    .collect(),
            ),
        }
    }

    /// Effective configuration as TOML; parses back to an equal [`Experiment`].
    pub fn echo(&self) -> String {
        toml::to_string(&self.to_config()).expect("config sections serialize")
    }
}

fn sequence_entry(e: SequenceEntry, base: &Path) -> Result<TaskSpec> {
    let mut data: DatasetRef = e.data.parse()?;
    if let DatasetRef::Csv(p) = &data {
        if p.is_relative() && !base.as_os_str().is_empty() {
            data = DatasetRef::Csv(base.join(p));
        }
    }
    let classes = match (&data, e.classes) {
        (_, Some(c)) => c,
        (DatasetRef::Synthetic { classes, .. }, None) => *classes,
        (DatasetRef::Csv(_), None) => DEFAULT_CLASSES,
    };
    Ok(TaskSpec {
        id: e.id.as_str().into(),
        modality: e.modality.as_str().into(),
        data,
        classes,
        steps: e.steps.unwrap_or(DEFAULT_STEPS),
        batch: e.batch.unwrap_or(DEFAULT_BATCH),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let e = Experiment::parse("", Path::new("")).unwrap();
        assert_eq!(e.run, RunConfig::default());
        assert_eq!(e.sequence, default_sequence());
        assert_eq!(e.output_dir, None);
    }

    #[test]
    fn unknown_key_rejected_with_line() {
        let err =
            Experiment::parse("[loss]\nalpha = 0.1\nbeat = 0.01\n", Path::new("")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("beat"), "{msg}");
        assert!(msg.contains("line 3"), "{msg}");
    }

    #[test]
    fn dotted_keys_and_enums() {
        let text = "[loss]\ncr.reduce = \"mean\"\nsimilarity.normalize = false\n[eval]\nmask_policy = \"single\"\n[model]\nplacement = \"deep\"\nlayers = 8\n";
        let e = Experiment::parse(text, Path::new("")).unwrap();
        assert_eq!(e.run.loss.reduce, CrReduce::Mean);
        assert!(!e.run.loss.similarity.normalize);
        assert_eq!(e.run.mask_policy, MaskPolicy::Single);
        assert_eq!(e.run.model.placement, Placement::Deep(2));
    }

    #[test]
    fn invalid_values_rejected() {
        for text in [
            "[optimizer]\nwarmup_ratio = 0.7\n",
            "[lora]\nrank = 0\n",
            "[lora]\nrank = 32\n",
            "[loss]\nalpha = -1.0\n",
            "[eval]\nmask_policy = \"some\"\n",
            "[model]\nplacement = \"middle\"\n",
            "sequence = []\n",
            "[[sequence]]\nid = \"a\"\nmodality = \"A\"\ndata = \"synth:1:1:1\"\n",
        ] {
            assert!(Experiment::parse(text, Path::new("")).is_err(), "{text}");
        }
    }

    #[test]
    fn echo_round_trips() {
        let text = "[lora]\nrank = 2\n[runtime]\nseed = 9\noutput_dir = \"out\"\n[[sequence]]\nid = \"x\"\nmodality = \"M\"\ndata = \"synth:3:4:2\"\nsteps = 7\n";
        let e = Experiment::parse(text, Path::new("")).unwrap();
        assert_eq!(e.run.lora_alpha, 2.0);
        assert_eq!(e.sequence[0].classes, 2);
        let again = Experiment::parse(&e.echo(), Path::new("")).unwrap();
        assert_eq!(again, e);
        assert_eq!(again.echo(), e.echo());
    }

    #[test]
    fn csv_paths_resolve_against_config_dir() {
        let text =
            "[[sequence]]\nid = \"x\"\nmodality = \"M\"\ndata = \"data/x.csv\"\nclasses = 3\n";
        let e = Experiment::parse(text, Path::new("/cfg")).unwrap();
        assert_eq!(
            e.sequence[0].data,
            DatasetRef::Csv(PathBuf::from("/cfg/data/x.csv"))
        );
    }
}
