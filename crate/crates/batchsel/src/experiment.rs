//! Experiment execution: load the data split, train every (run, repeat)
//! pair, and write per-seed CSV logs plus a per-run median aggregate.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::config::{DataSource, ExperimentSpec};
use crate::dataset::{self, DataSplit, DatasetError};
use crate::trainer::{self, MetricsLog, MetricsRow, TrainerError};

pub const CSV_HEADER: &str =
    "epoch,wall_seconds,train_loss,train_error,val_loss,val_error,n_eff,s_e,b_e";

/// Environment variable capping how many repeats run in parallel.
pub const THREADS_ENV: &str = "BATCHSEL_THREADS";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset error: {0}")]
    Dataset(#[from] DatasetError),
    #[error("training error in run '{run}' (seed {seed}): {source}")]
    Training {
        run: String,
        seed: u64,
        source: TrainerError,
    },
    #[error("inconsistent results: {0}")]
    Inconsistent(String),
}

/// Format a value in plain decimal with 9 significant digits.
pub fn format_significant(v: f64) -> String {
    if !v.is_finite() {
        return v.to_string();
    }
    if v == 0.0 {
        return "0.00000000".to_string();
    }
    let magnitude = v.abs().log10().floor() as i32;
    let decimals = (8 - magnitude).max(0) as usize;
    format!("{v:.decimals$}")
}

fn csv_line(row: &MetricsRow) -> String {
    [
        row.epoch,
        row.wall_seconds,
        row.train_loss,
        row.train_error,
        row.val_loss,
        row.val_error,
        row.n_eff as f64,
        row.s_e,
        row.b_e as f64,
    ]
    .iter()
    .map(|&v| format_significant(v))
    .collect::<Vec<_>>()
    .join(",")
}

/// Write a metrics CSV atomically (write to a temporary file in the same
/// directory, then rename).
pub fn write_csv(path: &Path, rows: &[MetricsRow]) -> Result<(), ExperimentError> {
    let tmp = path.with_extension("csv.tmp");
    {
        let mut out = fs::File::create(&tmp)?;
        writeln!(out, "{CSV_HEADER}")?;
        for row in rows {
            writeln!(out, "{}", csv_line(row))?;
        }
        out.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Per-row, per-column medians across repeats. All logs must have the same
/// number of rows (runs are deterministic given a seed, so they do).
pub fn median_rows(logs: &[MetricsLog]) -> Result<Vec<MetricsRow>, ExperimentError> {
    let rows = logs
        .first()
        .map(|l| l.rows.len())
        .ok_or_else(|| ExperimentError::Inconsistent("no repeats to aggregate".into()))?;
    if logs.iter().any(|l| l.rows.len() != rows) {
        return Err(ExperimentError::Inconsistent(
            "repeats produced different numbers of evaluation rows".into(),
        ));
    }
    let mut result = Vec::with_capacity(rows);
    for i in 0..rows {
        let col = |f: &dyn Fn(&MetricsRow) -> f64| -> f64 {
            let mut values: Vec<f64> = logs.iter().map(|l| f(&l.rows[i])).collect();
            median(&mut values)
        };
        result.push(MetricsRow {
            epoch: col(&|r| r.epoch),
            wall_seconds: col(&|r| r.wall_seconds),
            train_loss: col(&|r| r.train_loss),
            train_error: col(&|r| r.train_error),
            val_loss: col(&|r| r.val_loss),
            val_error: col(&|r| r.val_error),
            n_eff: col(&|r| r.n_eff as f64).round() as usize,
            s_e: col(&|r| r.s_e),
            b_e: col(&|r| r.b_e as f64).round() as usize,
        });
    }
    Ok(result)
}

const MNIST_FILES: [(&str, &str); 2] = [
    ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
];

/// Materialize the data split a spec asks for.
///
/// MNIST: the training pair is split `n_train`/`n_val` contiguously and the
/// separate test pair becomes the test set. Synthetic: one generated dataset
/// split `n_train`/`n_val`/rest.
pub fn load_split(source: &DataSource) -> Result<DataSplit, ExperimentError> {
    match source {
        DataSource::Mnist {
            dir,
            n_train,
            n_val,
        } => {
            let train = dataset::load_idx(
                &dir.join(MNIST_FILES[0].0),
                &dir.join(MNIST_FILES[0].1),
            )?;
            let test = dataset::load_idx(
                &dir.join(MNIST_FILES[1].0),
                &dir.join(MNIST_FILES[1].1),
            )?;
            let parts = dataset::split(&train, *n_train, *n_val)?;
            Ok(DataSplit::new(parts.train, parts.validation, test))
        }
        DataSource::Synthetic {
            n,
            d,
            classes,
            spread,
            data_seed,
            n_train,
            n_val,
        } => {
            let ds = dataset::synthetic_blobs(*n, *d, *classes, *spread, *data_seed)?;
            Ok(dataset::split(&ds, *n_train, *n_val)?)
        }
    }
}

fn thread_cap() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&v| v >= 1)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|p| p.get())
                .unwrap_or(1)
        })
}

/// Run every (run, repeat) pair of the spec and write the CSV outputs into
/// the spec's output directory: one `<run>_seed<k>.csv` per repeat plus a
/// `<run>_median.csv` aggregate.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<(), ExperimentError> {
    fs::create_dir_all(&spec.out_dir)?;
    let split = load_split(&spec.data)?;
    let cap = thread_cap().max(1);

    for run in &spec.runs {
        let mut logs: Vec<Option<MetricsLog>> = vec![None; spec.repeats];
        let mut first_error: Option<ExperimentError> = None;

        for chunk_start in (0..spec.repeats).step_by(cap) {
            let chunk_end = (chunk_start + cap).min(spec.repeats);
            let results: Vec<(usize, Result<MetricsLog, ExperimentError>)> =
                std::thread::scope(|scope| {
                    let handles: Vec<_> = (chunk_start..chunk_end)
                        .map(|repeat| {
                            let split = &split;
                            let run_name = run.name.clone();
                            let mut config = run.config.clone();
                            config.seed = spec.base_seed + repeat as u64;
                            let out_dir = spec.out_dir.clone();
                            scope.spawn(move || {
                                let seed = config.seed;
                                let outcome = trainer::train(&config, split).map_err(|e| {
                                    ExperimentError::Training {
                                        run: run_name.clone(),
                                        seed,
                                        source: e,
                                    }
                                })?;
                                let path =
                                    out_dir.join(format!("{run_name}_seed{seed}.csv"));
                                write_csv(&path, &outcome.metrics.rows)?;
                                Ok(outcome.metrics)
                            })
                        })
                        .collect();
                    (chunk_start..)
                        .zip(handles)
                        .map(|(repeat, handle)| {
                            (repeat, handle.join().expect("training thread panicked"))
                        })
                        .collect()
                });
            for (repeat, result) in results {
                match result {
                    Ok(log) => logs[repeat] = Some(log),
                    Err(e) => {
                        if first_error.is_none() {
                            first_error = Some(e);
                        }
                    }
                }
            }
        }
        if let Some(e) = first_error {
            return Err(e);
        }

        let logs: Vec<MetricsLog> = logs.into_iter().map(|l| l.expect("all succeeded")).collect();
        let rows = median_rows(&logs)?;
        write_csv(&spec.out_dir.join(format!("{}_median.csv", run.name)), &rows)?;
    }
    Ok(())
}

/// CSV output paths a spec will produce, in deterministic order.
pub fn expected_outputs(spec: &ExperimentSpec) -> Vec<PathBuf> {
    let mut paths = Vec::new();
    for run in &spec.runs {
        for repeat in 0..spec.repeats {
            let seed = spec.base_seed + repeat as u64;
            paths.push(spec.out_dir.join(format!("{}_seed{seed}.csv", run.name)));
        }
        paths.push(spec.out_dir.join(format!("{}_median.csv", run.name)));
    }
    paths
}
