//! JSON run configuration. Every section is optional; unknown keys are
//! rejected so typos fail before any work starts.

use std::path::{Path, PathBuf};

use mone::harness::{load_idx, synth_planted_patch_with, Dataset, RouterKind, SynthOptions, TrainConfig};
use mone::nested::ModelConfig;
use mone::routing::SolverOptions;
use mone::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub routing: RoutingConfig,
    pub dataset: DatasetSource,
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            pretrain: TrainConfig::pretrain(),
            finetune: TrainConfig::default(),
            routing: RoutingConfig::default(),
            dataset: DatasetSource::default(),
            seed: 0,
            out: PathBuf::from("mone-out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoutingConfig {
    /// Effective capacity for fine-tuning, evaluation and demos.
    pub ec: f64,
    /// Fine-tune with capacities drawn from this set instead of `ec`.
    pub sampled: Option<Vec<f64>>,
    pub beta: f64,
    pub delta: f64,
    pub flip_linear: bool,
    pub router: RouterKind,
    /// Capacities visited by `sweep`.
    pub sweep: Vec<f64>,
}

impl Default for RoutingConfig {
    fn default() -> Self {
        let s = SolverOptions::default();
        Self {
            ec: 0.6,
            sampled: None,
            beta: s.beta,
            delta: s.delta,
            flip_linear: s.flip_linear,
            router: RouterKind::Learned,
            sweep: (2..=9).map(|i| i as f64 / 10.0).collect(),
        }
    }
}

impl RoutingConfig {
    pub fn solver(&self) -> SolverOptions {
        SolverOptions { beta: self.beta, delta: self.delta, flip_linear: self.flip_linear }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    /// Planted-patch images shaped by the model config, seeded by the run seed.
    Synth {
        train: usize,
        test: usize,
        noise: f64,
        distractors: usize,
    },
    /// IDX files; without test files, `holdout` training examples are split off.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: Option<PathBuf>,
        test_labels: Option<PathBuf>,
        #[serde(default)]
        holdout: usize,
    },
}

impl Default for DatasetSource {
    fn default() -> Self {
        let o = SynthOptions::default();
        Self::Synth { train: 5000, test: 1000, noise: o.noise, distractors: o.distractors }
    }
}

impl DatasetSource {
    /// Parses `synth` or `idx:<images>,<labels>[,<test images>,<test labels>]`.
    pub fn parse(s: &str) -> Result<Self> {
        if s == "synth" {
            return Ok(Self::default());
        }
        let Some(paths) = s.strip_prefix("idx:") else {
            return Err(Error::Config(format!("unknown dataset {s:?} (synth | idx:<paths>)")));
        };
        let p: Vec<PathBuf> = paths.split(',').map(PathBuf::from).collect();
        match p.as_slice() {
            [a, b] => Ok(Self::Idx {
                train_images: a.clone(),
                train_labels: b.clone(),
                test_images: None,
                test_labels: None,
                holdout: 0,
            }),
            [a, b, c, d] => Ok(Self::Idx {
                train_images: a.clone(),
                train_labels: b.clone(),
                test_images: Some(c.clone()),
                test_labels: Some(d.clone()),
                holdout: 0,
            }),
            _ => Err(Error::Config("idx dataset needs 2 or 4 comma-separated paths".into())),
        }
    }

    /// `(train, test)` splits.
    pub fn load(&self, model: &ModelConfig, seed: u64) -> Result<(Dataset, Dataset)> {
        let (train, test) = match self {
            Self::Synth { train, test, noise, distractors } => {
                let o = SynthOptions {
                    examples: train + test,
                    classes: model.classes,
                    height: model.height,
                    width: model.width,
                    patch: model.patch,
                    noise: *noise,
                    distractors: *distractors,
                    seed,
                };
                if model.channels != 1 {
                    return Err(Error::Config("synthetic images are single-channel".into()));
                }
                synth_planted_patch_with(&o)?.split(*test, seed)?
            }
            Self::Idx { train_images, train_labels, test_images, test_labels, holdout } => {
                let train = load_idx(train_images, train_labels)?;
                match (test_images, test_labels) {
                    (Some(a), Some(b)) => (train, load_idx(a, b)?),
                    (None, None) => train.split(*holdout, seed)?,
                    _ => return Err(Error::Config("give both test images and test labels".into())),
                }
            }
        };
        train.check_model(model)?;
        test.check_model(model)?;
        Ok((train, test))
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Parses a config document. Missing keys of a `pretrain` section fall
    /// back to the pretraining defaults, not the fine-tuning ones.
    pub fn from_json(text: &str) -> Result<Self> {
        let mut doc: serde_json::Value = serde_json::from_str(text)?;
        if let Some(serde_json::Value::Object(given)) = doc.get_mut("pretrain") {
            let serde_json::Value::Object(mut merged) = serde_json::to_value(TrainConfig::pretrain())? else {
                unreachable!("structs serialize to objects")
            };
            merged.extend(std::mem::take(given));
            *given = merged;
        }
        Ok(serde_json::from_value(doc)?)
    }

    /// Checks everything that can be checked without data.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        // rejects bad solver settings before any data is touched
        mone::routing::solve_capacity(1.0, self.model.spec.experts, &self.routing.solver())?;
        if let Some(s) = &self.routing.sampled {
            if s.is_empty() {
                return Err(Error::Config("sampled capacity set is empty".into()));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
