//! Run configuration and single-run orchestration shared by the CLI, the
//! browser demo and the acceptance suite.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::{load_idx, Dataset, Normalizer, Split, SyntheticKind, SyntheticSpec};
use crate::error::{Error, Result};
use crate::net::{Mode, Model, ModelConfig};
use crate::rng::RngStream;
use crate::train::{evaluate, summarize, train_loop, Evaluation, MetricsRow, Summary, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub layers: usize,
    pub widths: Vec<usize>,
    pub beta: f64,
    pub mode: Mode,
    #[serde(default = "default_true")]
    pub bias: bool,
    #[serde(default)]
    pub head_shared_grad: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSpec {
    Spirals {
        classes: usize,
        train_per_class: usize,
        test_per_class: usize,
        #[serde(default)]
        val_per_class: usize,
        noise: f64,
        seed: u64,
    },
    Gaussians {
        classes: usize,
        train_per_class: usize,
        test_per_class: usize,
        #[serde(default)]
        val_per_class: usize,
        noise: f64,
        seed: u64,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        /// Trailing training rows held out as the validation split.
        #[serde(default)]
        holdout: usize,
    },
}

/// Standardized splits; `val` doubles as the calibration split for
/// budgeted evaluation.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub val: Option<Dataset>,
    pub test: Dataset,
    pub normalizer: Normalizer,
}

impl Splits {
    pub fn calibration(&self) -> &Dataset {
        self.val.as_ref().unwrap_or(&self.train)
    }
}

impl DataSpec {
    pub fn spirals(train_per_class: usize, test_per_class: usize, noise: f64, seed: u64) -> Self {
        DataSpec::Spirals {
            classes: 3,
            train_per_class,
            test_per_class,
            val_per_class: 0,
            noise,
            seed,
        }
    }

    pub fn load(&self) -> Result<Splits> {
        let (train, val, test) = match self {
            DataSpec::Spirals {
                classes,
                train_per_class,
                test_per_class,
                val_per_class,
                noise,
                seed,
            }
            | DataSpec::Gaussians {
                classes,
                train_per_class,
                test_per_class,
                val_per_class,
                noise,
                seed,
            } => {
                let kind = match self {
                    DataSpec::Spirals { .. } => SyntheticKind::Spirals,
                    _ => SyntheticKind::Gaussians,
                };
                let spec = |per_class: usize, tag: u64| SyntheticSpec {
                    kind,
                    classes: *classes,
                    samples_per_class: per_class,
                    noise: *noise,
                    seed: if tag == 0 { *seed } else { RngStream::derive(*seed, tag).seed() },
                };
                let train = spec(*train_per_class, 0).generate(Split::Train)?;
                let test = spec(*test_per_class, 1).generate(Split::Test)?;
                let val = match val_per_class {
                    0 => None,
                    &n => Some(spec(n, 2).generate(Split::Val)?),
                };
                (train, val, test)
            }
            DataSpec::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                holdout,
            } => {
                let full = load_idx(train_images, train_labels)?;
                let mut test = load_idx(test_images, test_labels)?.with_split(Split::Test);
                let classes = full.classes.max(test.classes);
                test.classes = classes;
                let (mut train, val) = match holdout {
                    0 => (full, None),
                    &h => {
                        let (t, v) = full.split_tail(h, Split::Val)?;
                        (t, Some(v))
                    }
                };
                train.classes = classes;
                let val = val.map(|mut v| {
                    v.classes = classes;
                    v
                });
                (train, val, test)
            }
        };
        let normalizer = Normalizer::fit(&train)?;
        Ok(Splits {
            train: normalizer.apply(&train)?,
            val: val.map(|v| normalizer.apply(&v)).transpose()?,
            test: normalizer.apply(&test)?,
            normalizer,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub data: DataSpec,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn model_config(&self, input_dim: usize, classes: usize) -> ModelConfig {
        ModelConfig {
            layers: self.model.layers,
            widths: self.model.widths.clone(),
            input_dim,
            classes,
            beta: self.model.beta,
            mode: self.model.mode,
            bias: self.model.bias,
            seed: self.seed,
            head_shared_grad: self.model.head_shared_grad,
        }
    }

    /// The desk-scale spiral setup: K = 3, 600 train / 300 test (plus 300
    /// calibration), noise 0.15, four layers of 32, 3000 steps.
    pub fn spiral_benchmark(mode: Mode, beta: f64, seed: u64) -> Self {
        let mut train = TrainConfig::new(3000, 64, seed);
        train.eval_every = 3000;
        RunConfig {
            model: ModelSpec {
                layers: 4,
                widths: vec![32; 4],
                beta,
                mode,
                bias: true,
                head_shared_grad: false,
            },
            train,
            data: DataSpec::Spirals {
                classes: 3,
                train_per_class: 200,
                test_per_class: 100,
                val_per_class: 100,
                noise: 0.15,
                seed: 1000 + seed,
            },
            seed,
            out_dir: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub model: Model,
    pub history: Vec<MetricsRow>,
    pub summary: Summary,
    pub test: Evaluation,
    pub splits: Splits,
}

pub fn run(cfg: &RunConfig) -> Result<RunResult> {
    cfg.train.validate()?;
    let splits = cfg.data.load()?;
    run_on(cfg, splits)
}

pub fn run_on(cfg: &RunConfig, splits: Splits) -> Result<RunResult> {
    let mcfg = cfg.model_config(splits.train.dim(), splits.train.classes);
    let model = Model::build(mcfg, &mut RngStream::derive(cfg.seed, 0x4d4f_4445_4c))?;
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = cfg.seed;
    let mut eval: Vec<&Dataset> = vec![&splits.train];
    if let Some(v) = &splits.val {
        eval.push(v);
    }
    eval.push(&splits.test);
    let outcome = train_loop(model, &splits.train, &eval, &train_cfg)?;
    let test = evaluate(&outcome.model, &splits.test, train_cfg.ensemble)?;
    let summary = summarize(&outcome.history);
    Ok(RunResult {
        model: outcome.model,
        history: outcome.history,
        summary,
        test,
        splits,
    })
}

/// Checkpoint metadata that lets a later command rebuild the splits.
pub fn checkpoint_meta(cfg: &RunConfig, splits: &Splits) -> Result<serde_json::Value> {
    Ok(serde_json::json!({
        "data": serde_json::to_value(&cfg.data)?,
        "normalizer": serde_json::to_value(&splits.normalizer)?,
        "ensemble": serde_json::to_value(cfg.train.ensemble)?,
    }))
}

pub fn data_from_meta(meta: &serde_json::Value) -> Result<DataSpec> {
    let data = meta
        .get("data")
        .ok_or_else(|| Error::Format("checkpoint has no data description".into()))?;
    Ok(serde_json::from_value(data.clone())?)
}
