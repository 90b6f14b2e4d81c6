//! TOML experiment files.
//!
//! Every section and key is optional except the data paths the chosen data
//! kind needs. Unknown keys are rejected. [`FileConfig`] holds the file with
//! defaults filled in; [`FileConfig::resolve`] validates it and turns it into
//! the typed pieces the trainer consumes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{read_cifar_binary, read_idx, synthetic_dataset, LabeledDataset};
use crate::dependence::{BinningConfig, RedundancyFilter, DEFAULT_BINS};
use crate::error::{Result, SgsError};
use crate::net::{LayerSpec, NetworkSpec};
use crate::optim::{OptimizerConfig, OptimizerKind, ScheduleKind};
use crate::reparam::MaskFamily;
use crate::scaling::DEFAULT_EPSILON_FLOOR;
use crate::tensor::{KernelMatrix, Scalar};
use crate::train::{Measure, SgsConfig, TrainingConfig};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub model: ModelSection,
    pub data: DataSection,
    pub train: TrainSection,
    pub sgs: SgsSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// `[channels, height, width]`
    pub input: [usize; 3],
    pub layers: Vec<String>,
}

impl Default for ModelSection {
    fn default() -> Self {
        let spec = NetworkSpec::two_conv((1, 28, 28), 10);
        Self {
            input: [1, 28, 28],
            layers: spec.layers.iter().map(|l| l.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    #[default]
    Mnist,
    Cifar,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub kind: DataKind,
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    pub cifar_train: Vec<PathBuf>,
    pub cifar_test: Vec<PathBuf>,
    /// Keep only the first `n` samples; 0 keeps all.
    pub train_limit: usize,
    pub test_limit: usize,
    pub synthetic_train: usize,
    pub synthetic_test: usize,
    pub synthetic_classes: usize,
    pub synthetic_correlation_length: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            kind: DataKind::Mnist,
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
            cifar_train: Vec::new(),
            cifar_test: Vec::new(),
            train_limit: 0,
            test_limit: 0,
            synthetic_train: 256,
            synthetic_test: 64,
            synthetic_classes: 10,
            synthetic_correlation_length: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub schedule: String,
    pub optimizer: String,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub precision: u32,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 32,
            lr: 0.05,
            schedule: "constant".into(),
            optimizer: "sgd_momentum".into(),
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
            precision: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgsSection {
    pub enabled: bool,
    /// `mi`, `autocorr`, `alpha_beta`, `fixed` or `masks`
    pub measure: String,
    pub k: f64,
    pub refresh_every: usize,
    pub refresh_batches: usize,
    pub warmup_epochs: usize,
    pub bins: usize,
    pub epsilon_floor: f64,
    pub redundancy_filter: bool,
    /// Only with `redundancy_filter`; defaults to `(max - min) / bins`.
    pub redundancy_threshold: Option<f64>,
    pub scaling_position: String,
    pub alpha: f64,
    pub beta: f64,
    /// Row-major values for `measure = "fixed"`.
    pub fixed_values: Vec<f64>,
    pub fixed_kernel: [usize; 2],
    pub mask_family: String,
}

impl Default for SgsSection {
    fn default() -> Self {
        Self {
            enabled: true,
            measure: "mi".into(),
            k: 5.0,
            refresh_every: 5,
            refresh_batches: 2,
            warmup_epochs: 1,
            bins: DEFAULT_BINS,
            epsilon_floor: DEFAULT_EPSILON_FLOOR,
            redundancy_filter: false,
            redundancy_threshold: None,
            scaling_position: "pre".into(),
            alpha: 1.0,
            beta: 1.0,
            fixed_values: vec![1.0; 9],
            fixed_kernel: [3, 3],
            mask_family: "acb".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

/// Validated, typed view of a config file.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub network: NetworkSpec,
    pub data: DataSource,
    pub training: TrainingConfig,
    pub precision: Precision,
}

#[derive(Debug, Clone)]
pub enum DataSource {
    Idx {
        train: (PathBuf, PathBuf),
        test: (PathBuf, PathBuf),
        train_limit: usize,
        test_limit: usize,
    },
    Cifar {
        train: Vec<PathBuf>,
        test: Vec<PathBuf>,
        train_limit: usize,
        test_limit: usize,
    },
    Synthetic {
        train: usize,
        test: usize,
        classes: usize,
        correlation_length: usize,
        shape: (usize, usize, usize),
    },
}

fn cfg_err(key: &str, msg: impl std::fmt::Display) -> SgsError {
    SgsError::Config(format!("{key}: {msg}"))
}

fn parse_key<T: std::str::FromStr<Err = SgsError>>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|e: SgsError| cfg_err(key, e))
}

fn limit<T: Scalar>(d: LabeledDataset<T>, n: usize) -> LabeledDataset<T> {
    if n == 0 {
        d
    } else {
        d.take(n)
    }
}

impl FileConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| SgsError::Config(e.message().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SgsError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)
            .map_err(|e| SgsError::Config(format!("{}: {e}", path.display())))?;
        if let Some(dir) = path.parent() {
            cfg.rebase_paths(dir);
        }
        Ok(cfg)
    }

    /// Makes relative data paths relative to `dir`.
    pub fn rebase_paths(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        let d = &mut self.data;
        for p in [&mut d.train_images, &mut d.train_labels, &mut d.test_images, &mut d.test_labels]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
        d.cifar_train.iter_mut().for_each(fix);
        d.cifar_test.iter_mut().for_each(fix);
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| SgsError::Config(e.to_string()))
    }

    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let input = self.model.input;
        let layers = self
            .model
            .layers
            .iter()
            .map(|l| l.parse::<LayerSpec>().map_err(|e| cfg_err("model.layers", e)))
            .collect::<Result<Vec<_>>>()?;
        let network = NetworkSpec {
            input: (input[0], input[1], input[2]),
            layers,
        };
        network.shapes().map_err(|e| cfg_err("model", e))?;

        let t = &self.train;
        let kind: OptimizerKind = parse_key("train.optimizer", &t.optimizer)?;
        let optimizer = OptimizerConfig::for_kind(kind, t.momentum, t.weight_decay);
        let precision = match t.precision {
            32 => Precision::F32,
            64 => Precision::F64,
            p => return Err(cfg_err("train.precision", format!("must be 32 or 64, got {p}"))),
        };

        let s = &self.sgs;
        let measure = match s.measure.as_str() {
            "mi" => Measure::Mi,
            "autocorr" => Measure::Autocorr,
            "alpha_beta" => Measure::AlphaBeta {
                alpha: s.alpha,
                beta: s.beta,
            },
            "fixed" => Measure::Fixed {
                matrix: KernelMatrix::new(s.fixed_kernel[0], s.fixed_kernel[1], s.fixed_values.clone())
                    .map_err(|e| cfg_err("sgs.fixed_values", e))?,
            },
            "masks" => Measure::Masks {
                family: parse_key::<MaskFamily>("sgs.mask_family", &s.mask_family)?,
            },
            other => {
                return Err(cfg_err(
                    "sgs.measure",
                    format!("unknown measure '{other}' (mi, autocorr, alpha_beta, fixed, masks)"),
                ))
            }
        };
        if s.redundancy_threshold.is_some() && !s.redundancy_filter {
            return Err(cfg_err(
                "sgs.redundancy_threshold",
                "set without sgs.redundancy_filter = true",
            ));
        }
        let sgs = SgsConfig {
            enabled: s.enabled,
            measure,
            k: s.k,
            refresh_every: s.refresh_every,
            refresh_batches: s.refresh_batches,
            warmup_epochs: s.warmup_epochs,
            binning: BinningConfig {
                bins: s.bins,
                range: None,
                redundancy_filter: if s.redundancy_filter {
                    RedundancyFilter::On {
                        threshold: s.redundancy_threshold,
                    }
                } else {
                    RedundancyFilter::Off
                },
            },
            epsilon_floor: s.epsilon_floor,
            scaling_position: parse_key("sgs.scaling_position", &s.scaling_position)?,
        };
        let training = TrainingConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            schedule: parse_key::<ScheduleKind>("train.schedule", &t.schedule)?,
            optimizer,
            seed: t.seed,
            sgs,
        };
        training.validate()?;

        let data = self.resolve_data(network.input)?;
        Ok(ExperimentConfig {
            network,
            data,
            training,
            precision,
        })
    }

    fn resolve_data(&self, shape: (usize, usize, usize)) -> Result<DataSource> {
        let d = &self.data;
        let existing = |key: &str, p: &Option<PathBuf>| -> Result<PathBuf> {
            let p = p.as_ref().ok_or_else(|| cfg_err(key, "missing (required for this data kind)"))?;
            if !p.is_file() {
                return Err(cfg_err(key, format!("file not found: {}", p.display())));
            }
            Ok(p.clone())
        };
        match d.kind {
            DataKind::Mnist => Ok(DataSource::Idx {
                train: (
                    existing("data.train_images", &d.train_images)?,
                    existing("data.train_labels", &d.train_labels)?,
                ),
                test: (
                    existing("data.test_images", &d.test_images)?,
                    existing("data.test_labels", &d.test_labels)?,
                ),
                train_limit: d.train_limit,
                test_limit: d.test_limit,
            }),
            DataKind::Cifar => {
                for (key, list) in [("data.cifar_train", &d.cifar_train), ("data.cifar_test", &d.cifar_test)] {
                    if list.is_empty() {
                        return Err(cfg_err(key, "missing (required for kind = \"cifar\")"));
                    }
                    for p in list {
                        if !p.is_file() {
                            return Err(cfg_err(key, format!("file not found: {}", p.display())));
                        }
                    }
                }
                Ok(DataSource::Cifar {
                    train: d.cifar_train.clone(),
                    test: d.cifar_test.clone(),
                    train_limit: d.train_limit,
                    test_limit: d.test_limit,
                })
            }
            DataKind::Synthetic => {
                if d.synthetic_train == 0 {
                    return Err(cfg_err("data.synthetic_train", "must be >= 1"));
                }
                if d.synthetic_classes == 0 {
                    return Err(cfg_err("data.synthetic_classes", "must be >= 1"));
                }
                Ok(DataSource::Synthetic {
                    train: d.synthetic_train,
                    test: d.synthetic_test,
                    classes: d.synthetic_classes,
                    correlation_length: d.synthetic_correlation_length,
                    shape,
                })
            }
        }
    }
}

impl DataSource {
    /// `(train, test)` sets.
    pub fn load<T: Scalar>(&self, seed: u64) -> Result<(LabeledDataset<T>, LabeledDataset<T>)> {
        match self {
            DataSource::Idx {
                train,
                test,
                train_limit,
                test_limit,
            } => Ok((
                limit(read_idx(&train.0, &train.1)?, *train_limit),
                limit(read_idx(&test.0, &test.1)?, *test_limit),
            )),
            DataSource::Cifar {
                train,
                test,
                train_limit,
                test_limit,
            } => Ok((
                limit(read_cifar_binary(train)?, *train_limit),
                limit(read_cifar_binary(test)?, *test_limit),
            )),
            DataSource::Synthetic {
                train,
                test,
                classes,
                correlation_length,
                shape,
            } => Ok((
                synthetic_dataset(*train, *shape, *classes, *correlation_length, seed)?,
                synthetic_dataset((*test).max(1), *shape, *classes, *correlation_length, seed ^ 0x5eed)?,
            )),
        }
    }
}
