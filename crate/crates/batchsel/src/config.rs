//! Experiment configuration: a line-oriented `key = value` text format with
//! `[run <name>]` sections.
//!
//! Keys before the first `[run]` section either configure the experiment
//! (dataset, output directory, repeats, base seed) or set defaults inherited
//! by every run. Unknown keys are rejected with their line number.
//!
//! ```text
//! dataset = synthetic
//! synth_n = 2000
//! out = results
//! repeats = 3
//! epochs = 10
//!
//! [run shuffle]
//! selection_mode = shuffle
//!
//! [run ranked_s1e2]
//! selection_mode = ranked
//! s_e0 = 1e2
//! r_freq = 0.5
//! r_ratio = 1.0
//! ```

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::model::Activation;
use crate::optim::{AdaDeltaState, AdamState, OptimizerConfig};
use crate::sampler::{BatchGrowth, BatchSchedule, SelectionMode, SelectionSchedule};
use crate::trainer::RunConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: syntax error: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: unknown key '{key}'")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: invalid value for '{key}': {message}")]
    InvalidValue {
        line: usize,
        key: String,
        message: String,
    },
    #[error("invalid configuration: {0}")]
    Validation(String),
}

/// Where the data split comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Mnist {
        dir: PathBuf,
        n_train: usize,
        n_val: usize,
    },
    Synthetic {
        n: usize,
        d: usize,
        classes: usize,
        spread: f64,
        data_seed: u64,
        n_train: usize,
        n_val: usize,
    },
}

impl DataSource {
    pub fn synthetic_defaults() -> Self {
        DataSource::Synthetic {
            n: 2000,
            d: 16,
            classes: 10,
            spread: 0.15,
            data_seed: 1,
            n_train: 1600,
            n_val: 200,
        }
    }

    pub fn mnist_defaults(dir: PathBuf) -> Self {
        DataSource::Mnist {
            dir,
            n_train: 50_000,
            n_val: 10_000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NamedRun {
    pub name: String,
    pub config: RunConfig,
}

/// A parsed experiment: named run configurations plus the shared dataset,
/// output directory, repeat count and base seed (repeat `k` runs with seed
/// `base_seed + k`).
#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub runs: Vec<NamedRun>,
    pub data: DataSource,
    pub out_dir: PathBuf,
    pub repeats: usize,
    pub base_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum OptKind {
    Sgd,
    AdaDelta,
    Adam,
}

#[derive(Debug, Clone, Default)]
struct RunBuilder {
    selection_mode: Option<SelectionMode>,
    s_e0: Option<f64>,
    s_eend: Option<f64>,
    e0: Option<usize>,
    e_end: Option<usize>,
    b_e0: Option<usize>,
    b_eend: Option<usize>,
    b_mode: Option<BatchGrowth>,
    t_s: Option<u64>,
    r_freq: Option<f64>,
    r_ratio: Option<f64>,
    recompute_batch: Option<usize>,
    optimizer: Option<OptKind>,
    eta: Option<f64>,
    rho: Option<f64>,
    alpha: Option<f64>,
    beta1: Option<f64>,
    beta2: Option<f64>,
    epsilon: Option<f64>,
    epochs: Option<usize>,
    eval_every: Option<usize>,
    importance_sampling: Option<bool>,
    hidden: Option<Vec<usize>>,
    activation: Option<Activation>,
}

impl RunBuilder {
    fn finish(&self, name: &str) -> Result<RunConfig, ConfigError> {
        let fail = |msg: String| ConfigError::Validation(format!("run '{name}': {msg}"));
        let mode = self.selection_mode.unwrap_or(SelectionMode::Shuffle);
        let epochs = self.epochs.unwrap_or(10);
        let e0 = self.e0.unwrap_or(0);
        let e_end = self.e_end.unwrap_or(epochs.max(e0 + 1));

        let selection = if let Some(s_e0) = self.s_e0 {
            let s_eend = self.s_eend.unwrap_or(s_e0);
            if s_eend == s_e0 {
                SelectionSchedule::fixed(s_e0)
            } else {
                SelectionSchedule::exponential(s_e0, s_eend, e0, e_end)
            }
            .map_err(|e| fail(e.to_string()))?
        } else if mode == SelectionMode::Ranked {
            return Err(fail(
                "selection_mode = ranked requires s_e0 (selection pressure)".into(),
            ));
        } else {
            SelectionSchedule::fixed(1.0).expect("valid")
        };

        let b_e0 = self.b_e0.unwrap_or(64);
        let b_eend = self.b_eend.unwrap_or(b_e0);
        let growth = self.b_mode.unwrap_or(if b_eend == b_e0 {
            BatchGrowth::Constant
        } else {
            BatchGrowth::Exponential
        });
        let batch = match growth {
            BatchGrowth::Constant => BatchSchedule::constant(b_e0),
            BatchGrowth::Exponential => BatchSchedule::exponential(b_e0, b_eend, e0, e_end),
            BatchGrowth::Linear => BatchSchedule::linear(b_e0, b_eend, e0, e_end),
        }
        .map_err(|e| fail(e.to_string()))?;

        let optimizer = match self.optimizer.unwrap_or(OptKind::Adam) {
            OptKind::Sgd => OptimizerConfig::Sgd {
                eta: self.eta.unwrap_or(0.1),
            },
            OptKind::AdaDelta => OptimizerConfig::AdaDelta {
                rho: self.rho.unwrap_or(AdaDeltaState::DEFAULT_RHO),
                epsilon: self.epsilon.unwrap_or(AdaDeltaState::DEFAULT_EPSILON),
            },
            OptKind::Adam => OptimizerConfig::Adam {
                alpha: self.alpha.unwrap_or(AdamState::DEFAULT_ALPHA),
                beta1: self.beta1.unwrap_or(AdamState::DEFAULT_BETA1),
                beta2: self.beta2.unwrap_or(AdamState::DEFAULT_BETA2),
                epsilon: self.epsilon.unwrap_or(AdamState::DEFAULT_EPSILON),
            },
        };

        let importance_sampling = self.importance_sampling.unwrap_or(false);
        if importance_sampling && mode != SelectionMode::Ranked {
            return Err(fail(
                "importance_sampling = true requires selection_mode = ranked".into(),
            ));
        }

        Ok(RunConfig {
            selection_mode: mode,
            selection,
            batch,
            sort_period: self.t_s,
            r_freq: self.r_freq.unwrap_or(0.0),
            r_ratio: self.r_ratio.unwrap_or(1.0),
            recompute_batch: self.recompute_batch.unwrap_or(1024),
            optimizer,
            epochs,
            seed: 0,
            importance_sampling,
            eval_every: self.eval_every.unwrap_or(1),
            hidden: self.hidden.clone().unwrap_or_else(|| vec![128]),
            activation: self.activation.unwrap_or(Activation::Relu),
        })
    }
}

#[derive(Debug, Clone, Default)]
struct ExperimentBuilder {
    dataset: Option<&'static str>,
    mnist_dir: Option<PathBuf>,
    n_train: Option<usize>,
    n_val: Option<usize>,
    synth_n: Option<usize>,
    synth_d: Option<usize>,
    synth_classes: Option<usize>,
    synth_spread: Option<f64>,
    data_seed: Option<u64>,
    out: Option<PathBuf>,
    repeats: Option<usize>,
    seed: Option<u64>,
}

fn parse_value<T: std::str::FromStr>(
    line: usize,
    key: &str,
    value: &str,
) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::InvalidValue {
        line,
        key: key.to_string(),
        message: e.to_string(),
    })
}

fn parse_bool(line: usize, key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(ConfigError::InvalidValue {
            line,
            key: key.to_string(),
            message: format!("expected true or false, got '{other}'"),
        }),
    }
}

fn parse_hidden(line: usize, value: &str) -> Result<Vec<usize>, ConfigError> {
    if value == "none" {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|part| parse_value::<usize>(line, "hidden", part.trim()))
        .collect()
}

fn apply_run_key(
    builder: &mut RunBuilder,
    line: usize,
    key: &str,
    value: &str,
) -> Result<bool, ConfigError> {
    match key {
        "selection_mode" => {
            builder.selection_mode = Some(match value {
                "random" => SelectionMode::Random,
                "shuffle" => SelectionMode::Shuffle,
                "ranked" => SelectionMode::Ranked,
                other => {
                    return Err(ConfigError::InvalidValue {
                        line,
                        key: key.into(),
                        message: format!("expected random, shuffle or ranked, got '{other}'"),
                    })
                }
            })
        }
        "s_e0" => builder.s_e0 = Some(parse_value(line, key, value)?),
        "s_eend" => builder.s_eend = Some(parse_value(line, key, value)?),
        "e0" => builder.e0 = Some(parse_value(line, key, value)?),
        "e_end" => builder.e_end = Some(parse_value(line, key, value)?),
        "b_e0" => builder.b_e0 = Some(parse_value(line, key, value)?),
        "b_eend" => builder.b_eend = Some(parse_value(line, key, value)?),
        "b_mode" => {
            builder.b_mode = Some(match value {
                "constant" => BatchGrowth::Constant,
                "exponential" => BatchGrowth::Exponential,
                "linear" => BatchGrowth::Linear,
                other => {
                    return Err(ConfigError::InvalidValue {
                        line,
                        key: key.into(),
                        message: format!(
                            "expected constant, exponential or linear, got '{other}'"
                        ),
                    })
                }
            })
        }
        "t_s" => builder.t_s = Some(parse_value(line, key, value)?),
        "r_freq" => builder.r_freq = Some(parse_value(line, key, value)?),
        "r_ratio" => builder.r_ratio = Some(parse_value(line, key, value)?),
        "recompute_batch" => builder.recompute_batch = Some(parse_value(line, key, value)?),
        "optimizer" => {
            builder.optimizer = Some(match value {
                "sgd" => OptKind::Sgd,
                "adadelta" => OptKind::AdaDelta,
                "adam" => OptKind::Adam,
                other => {
                    return Err(ConfigError::InvalidValue {
                        line,
                        key: key.into(),
                        message: format!("expected sgd, adadelta or adam, got '{other}'"),
                    })
                }
            })
        }
        "eta" => builder.eta = Some(parse_value(line, key, value)?),
        "rho" => builder.rho = Some(parse_value(line, key, value)?),
        "alpha" => builder.alpha = Some(parse_value(line, key, value)?),
        "beta1" => builder.beta1 = Some(parse_value(line, key, value)?),
        "beta2" => builder.beta2 = Some(parse_value(line, key, value)?),
        "epsilon" => builder.epsilon = Some(parse_value(line, key, value)?),
        "epochs" => builder.epochs = Some(parse_value(line, key, value)?),
        "eval_every" => builder.eval_every = Some(parse_value(line, key, value)?),
        "importance_sampling" => {
            builder.importance_sampling = Some(parse_bool(line, key, value)?)
        }
        "hidden" => builder.hidden = Some(parse_hidden(line, value)?),
        "activation" => {
            builder.activation = Some(match value {
                "relu" => Activation::Relu,
                "tanh" => Activation::Tanh,
                other => {
                    return Err(ConfigError::InvalidValue {
                        line,
                        key: key.into(),
                        message: format!("expected relu or tanh, got '{other}'"),
                    })
                }
            })
        }
        _ => return Ok(false),
    }
    Ok(true)
}

fn apply_experiment_key(
    builder: &mut ExperimentBuilder,
    line: usize,
    key: &str,
    value: &str,
) -> Result<bool, ConfigError> {
    match key {
        "dataset" => {
            builder.dataset = Some(match value {
                "mnist" => "mnist",
                "synthetic" => "synthetic",
                other => {
                    return Err(ConfigError::InvalidValue {
                        line,
                        key: key.into(),
                        message: format!("expected mnist or synthetic, got '{other}'"),
                    })
                }
            })
        }
        "mnist_dir" => builder.mnist_dir = Some(PathBuf::from(value)),
        "n_train" => builder.n_train = Some(parse_value(line, key, value)?),
        "n_val" => builder.n_val = Some(parse_value(line, key, value)?),
        "synth_n" => builder.synth_n = Some(parse_value(line, key, value)?),
        "synth_d" => builder.synth_d = Some(parse_value(line, key, value)?),
        "synth_classes" => builder.synth_classes = Some(parse_value(line, key, value)?),
        "synth_spread" => builder.synth_spread = Some(parse_value(line, key, value)?),
        "data_seed" => builder.data_seed = Some(parse_value(line, key, value)?),
        "out" => builder.out = Some(PathBuf::from(value)),
        "repeats" => builder.repeats = Some(parse_value(line, key, value)?),
        "seed" => builder.seed = Some(parse_value(line, key, value)?),
        _ => return Ok(false),
    }
    Ok(true)
}

/// Parse an experiment description from text. See the module documentation
/// for the format.
pub fn parse_config_str(text: &str) -> Result<ExperimentSpec, ConfigError> {
    let mut experiment = ExperimentBuilder::default();
    let mut defaults = RunBuilder::default();
    let mut runs: Vec<(String, RunBuilder)> = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        if let Some(rest) = trimmed.strip_prefix('[') {
            let inner = rest.strip_suffix(']').ok_or_else(|| ConfigError::Syntax {
                line,
                message: "section header must end with ']'".into(),
            })?;
            let name = inner
                .strip_prefix("run ")
                .map(str::trim)
                .filter(|n| !n.is_empty())
                .ok_or_else(|| ConfigError::Syntax {
                    line,
                    message: "expected '[run <name>]'".into(),
                })?;
            if runs.iter().any(|(existing, _)| existing == name) {
                return Err(ConfigError::Validation(format!(
                    "duplicate run name '{name}'"
                )));
            }
            runs.push((name.to_string(), defaults.clone()));
            continue;
        }
        let (key, value) = trimmed.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line,
            message: "expected 'key = value'".into(),
        })?;
        let key = key.trim();
        let value = value.trim();
        if key.is_empty() {
            return Err(ConfigError::Syntax {
                line,
                message: "missing key before '='".into(),
            });
        }
        if value.is_empty() {
            return Err(ConfigError::Syntax {
                line,
                message: format!("missing value for '{key}'"),
            });
        }

        if let Some((_, current)) = runs.last_mut() {
            if apply_run_key(current, line, key, value)? {
                continue;
            }
            if apply_experiment_key(&mut ExperimentBuilder::default(), line, key, value)? {
                return Err(ConfigError::InvalidValue {
                    line,
                    key: key.to_string(),
                    message: "only allowed before the first [run] section".into(),
                });
            }
            return Err(ConfigError::UnknownKey {
                line,
                key: key.to_string(),
            });
        }
        if apply_experiment_key(&mut experiment, line, key, value)? {
            continue;
        }
        if apply_run_key(&mut defaults, line, key, value)? {
            continue;
        }
        return Err(ConfigError::UnknownKey {
            line,
            key: key.to_string(),
        });
    }

    if runs.is_empty() {
        return Err(ConfigError::Validation(
            "config defines no [run] sections".into(),
        ));
    }

    let data = match experiment.dataset {
        Some("mnist") => {
            let dir = experiment.mnist_dir.ok_or_else(|| {
                ConfigError::Validation("dataset = mnist requires mnist_dir".into())
            })?;
            DataSource::Mnist {
                dir,
                n_train: experiment.n_train.unwrap_or(50_000),
                n_val: experiment.n_val.unwrap_or(10_000),
            }
        }
        Some("synthetic") => {
            let n = experiment.synth_n.unwrap_or(2000);
            DataSource::Synthetic {
                n,
                d: experiment.synth_d.unwrap_or(16),
                classes: experiment.synth_classes.unwrap_or(10),
                spread: experiment.synth_spread.unwrap_or(0.15),
                data_seed: experiment.data_seed.unwrap_or(1),
                n_train: experiment.n_train.unwrap_or(n * 4 / 5),
                n_val: experiment.n_val.unwrap_or(n / 10),
            }
        }
        Some(_) => unreachable!("dataset values are validated at parse time"),
        None => {
            return Err(ConfigError::Validation(
                "missing 'dataset' (mnist or synthetic)".into(),
            ))
        }
    };

    let runs = runs
        .into_iter()
        .map(|(name, builder)| {
            builder.finish(&name).map(|config| NamedRun { name, config })
        })
        .collect::<Result<Vec<_>, _>>()?;

    Ok(ExperimentSpec {
        runs,
        data,
        out_dir: experiment.out.unwrap_or_else(|| PathBuf::from("out")),
        repeats: experiment.repeats.unwrap_or(1).max(1),
        base_seed: experiment.seed.unwrap_or(0),
    })
}

/// Parse an experiment description from a file.
pub fn parse_config(path: &Path) -> Result<ExperimentSpec, ConfigError> {
    parse_config_str(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "\
# benchmark configuration
dataset = synthetic
synth_n = 500
synth_d = 8
synth_classes = 5
out = results
repeats = 3
seed = 7
epochs = 4
b_e0 = 16

[run shuffle]
selection_mode = shuffle

[run ranked_s1e2]
selection_mode = ranked
s_e0 = 1e2
r_freq = 0.5
r_ratio = 1.0
";

    #[test]
    fn parses_a_full_experiment() {
        let spec = parse_config_str(SAMPLE).unwrap();
        assert_eq!(spec.repeats, 3);
        assert_eq!(spec.base_seed, 7);
        assert_eq!(spec.out_dir, PathBuf::from("results"));
        assert_eq!(spec.runs.len(), 2);
        assert_eq!(spec.runs[0].name, "shuffle");
        assert_eq!(spec.runs[0].config.selection_mode, SelectionMode::Shuffle);
        assert_eq!(spec.runs[0].config.epochs, 4);
        assert_eq!(spec.runs[0].config.batch.start_size(), 16);

        let ranked = &spec.runs[1].config;
        assert_eq!(ranked.selection_mode, SelectionMode::Ranked);
        assert_eq!(ranked.selection.start_pressure(), 1e2);
        assert_eq!(ranked.r_freq, 0.5);
        assert_eq!(ranked.r_ratio, 1.0);
        match spec.data {
            DataSource::Synthetic { n, d, classes, n_train, n_val, .. } => {
                assert_eq!((n, d, classes), (500, 8, 5));
                assert_eq!((n_train, n_val), (400, 50));
            }
            _ => panic!("expected synthetic source"),
        }
    }

    #[test]
    fn pressure_exponent_notation_parses() {
        let spec = parse_config_str(
            "dataset = synthetic\n[run r]\nselection_mode = ranked\ns_e0 = 1e8\n",
        )
        .unwrap();
        assert_eq!(spec.runs[0].config.selection.start_pressure(), 1e8);
    }

    #[test]
    fn ranked_without_pressure_names_the_missing_key() {
        let err = parse_config_str("dataset = synthetic\n[run r]\nselection_mode = ranked\n")
            .unwrap_err();
        let message = err.to_string();
        assert!(message.contains("s_e0"), "message: {message}");
        assert!(message.contains("'r'"), "message: {message}");
    }

    #[test]
    fn unknown_keys_are_rejected_with_line_numbers() {
        let err =
            parse_config_str("dataset = synthetic\nbogus_key = 3\n[run r]\n").unwrap_err();
        match err {
            ConfigError::UnknownKey { line, key } => {
                assert_eq!(line, 2);
                assert_eq!(key, "bogus_key");
            }
            other => panic!("expected UnknownKey, got {other}"),
        }
    }

    #[test]
    fn syntax_errors_carry_line_numbers() {
        let err = parse_config_str("dataset = synthetic\n[run r]\nnot a key value\n")
            .unwrap_err();
        match err {
            ConfigError::Syntax { line, .. } => assert_eq!(line, 3),
            other => panic!("expected Syntax, got {other}"),
        }
    }

    #[test]
    fn duplicate_run_names_are_rejected() {
        let err = parse_config_str("dataset = synthetic\n[run a]\n[run a]\n").unwrap_err();
        assert!(err.to_string().contains("duplicate run name 'a'"));
    }

    #[test]
    fn experiment_keys_inside_runs_are_rejected() {
        let err =
            parse_config_str("dataset = synthetic\n[run a]\nrepeats = 4\n").unwrap_err();
        match err {
            ConfigError::InvalidValue { line, key, .. } => {
                assert_eq!(line, 3);
                assert_eq!(key, "repeats");
            }
            other => panic!("expected InvalidValue, got {other}"),
        }
    }

    #[test]
    fn missing_dataset_is_a_validation_error() {
        let err = parse_config_str("[run a]\n").unwrap_err();
        assert!(err.to_string().contains("dataset"));
    }

    #[test]
    fn pressure_decay_builds_an_exponential_schedule() {
        let spec = parse_config_str(
            "dataset = synthetic\n[run r]\nselection_mode = ranked\ns_e0 = 1e8\ns_eend = 1\nepochs = 50\n",
        )
        .unwrap();
        let sched = spec.runs[0].config.selection;
        assert_eq!(sched.pressure_at(0), 1e8);
        assert_eq!(sched.pressure_at(50), 1.0);
    }

    #[test]
    fn hidden_layers_parse_as_lists() {
        let spec = parse_config_str(
            "dataset = synthetic\n[run a]\nhidden = 256, 64\n[run b]\nhidden = none\n",
        )
        .unwrap();
        assert_eq!(spec.runs[0].config.hidden, vec![256, 64]);
        assert!(spec.runs[1].config.hidden.is_empty());
    }

    #[test]
    fn importance_sampling_needs_ranked_mode() {
        let err = parse_config_str(
            "dataset = synthetic\n[run a]\nselection_mode = shuffle\nimportance_sampling = true\n",
        )
        .unwrap_err();
        assert!(err.to_string().contains("importance_sampling"));
    }

    #[test]
    fn optimizer_defaults_follow_the_selected_algorithm() {
        let spec = parse_config_str(
            "dataset = synthetic\n[run a]\noptimizer = adadelta\n[run b]\noptimizer = adam\n[run c]\noptimizer = sgd\neta = 0.5\n",
        )
        .unwrap();
        assert_eq!(
            spec.runs[0].config.optimizer,
            OptimizerConfig::AdaDelta { rho: 0.95, epsilon: 1e-6 }
        );
        assert_eq!(
            spec.runs[1].config.optimizer,
            OptimizerConfig::Adam {
                alpha: 0.001,
                beta1: 0.9,
                beta2: 0.999,
                epsilon: 1e-8
            }
        );
        assert_eq!(spec.runs[2].config.optimizer, OptimizerConfig::Sgd { eta: 0.5 });
    }
}
