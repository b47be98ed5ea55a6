//! The batch-selection training loop: distribution refresh once per epoch,
//! periodic sorting, periodic loss recomputation for the top-ranked
//! fraction, batch assembly in the three selection modes, optional
//! importance-sampling reweighting, optimizer stepping and metrics capture.

use std::collections::{HashSet, VecDeque};
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dataset::{DataSplit, Dataset};
use crate::model::{self, Activation, ModelParams};
use crate::optim::{OptimError, OptimizerConfig};
use crate::sampler::{
    BatchSchedule, LossRankTable, SamplerCounters, SamplerError, SelectionDistribution,
    SelectionMode, SelectionSchedule, ShufflePool,
};

/// Chunk size for full-dataset evaluations; fixed so that results do not
/// depend on any runtime tunable.
const EVAL_CHUNK: usize = 1024;

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Model(#[from] model::ModelError),
    #[error(transparent)]
    Optim(#[from] OptimError),
}

/// Everything one training run needs: selection behaviour, schedules,
/// optimizer, model shape and bookkeeping cadence.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub selection_mode: SelectionMode,
    pub selection: SelectionSchedule,
    pub batch: BatchSchedule,
    /// Sort period in evaluated datapoints; `None` selects `n/10`.
    pub sort_period: Option<u64>,
    /// Loss recomputations per epoch; 0 disables recomputation.
    pub r_freq: f64,
    /// Fraction of the dataset (top-ranked) refreshed per recomputation.
    pub r_ratio: f64,
    /// Chunk size for recomputation forward passes.
    pub recompute_batch: usize,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub seed: u64,
    pub importance_sampling: bool,
    /// Epochs between full train/validation evaluations.
    pub eval_every: usize,
    /// Hidden layer widths; empty for a single softmax layer.
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            selection_mode: SelectionMode::Shuffle,
            selection: SelectionSchedule::fixed(1.0).expect("valid"),
            batch: BatchSchedule::constant(64).expect("valid"),
            sort_period: None,
            r_freq: 0.0,
            r_ratio: 1.0,
            recompute_batch: 1024,
            optimizer: OptimizerConfig::adam_defaults(),
            epochs: 10,
            seed: 0,
            importance_sampling: false,
            eval_every: 1,
            hidden: vec![128],
            activation: Activation::Relu,
        }
    }
}

/// Which periodic triggers fired during one `select_batch` call.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StepEvents {
    pub refreshed_distribution: bool,
    pub sorted: bool,
    pub recomputed: bool,
}

/// Outcome of one batch selection: the chosen datapoints, the gradient of
/// the (possibly importance-weighted) batch-mean loss, and the unweighted
/// per-example losses that were written back into the rank table.
#[derive(Debug, Clone)]
pub struct SelectedBatch {
    pub indices: Vec<usize>,
    pub gradient: Vec<f64>,
    pub per_example_losses: Vec<f64>,
    pub mean_loss: f64,
    pub events: StepEvents,
}

/// Wall-clock breakdown of a run, evaluation time excluded.
#[derive(Debug, Clone, Copy, Default)]
pub struct Timing {
    /// Bookkeeping + drawing + loss write-back.
    pub selection_seconds: f64,
    /// Loss recomputation forward passes.
    pub recompute_seconds: f64,
    /// Batch forward/backward passes.
    pub gradient_seconds: f64,
    /// Whole stepping loop including optimizer updates.
    pub train_seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    /// Training progress in epochs, `c / n`.
    pub epoch: f64,
    pub wall_seconds: f64,
    pub train_loss: f64,
    pub train_error: f64,
    pub val_loss: f64,
    pub val_error: f64,
    pub n_eff: usize,
    pub s_e: f64,
    pub b_e: usize,
}

#[derive(Debug, Clone, Default)]
pub struct MetricsLog {
    pub rows: Vec<MetricsRow>,
}

impl MetricsLog {
    /// First recorded epoch at which the train loss is at or below the
    /// threshold.
    pub fn epochs_to_reach_train_loss(&self, threshold: f64) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.train_loss <= threshold)
            .map(|r| r.epoch)
    }
}

pub struct TrainOutcome {
    pub metrics: MetricsLog,
    pub params: ModelParams,
    pub timing: Timing,
    pub saw_nonfinite_loss: bool,
}

/// Number of unique datapoints among the `min(n, len)` most recent
/// selections.
pub fn compute_n_eff(history: &[usize], n: usize) -> usize {
    let window = history.len().min(n);
    let mut seen = HashSet::with_capacity(window);
    for &idx in &history[history.len() - window..] {
        seen.insert(idx);
    }
    seen.len()
}

/// Importance-sampling weights for the selected batch: with `q_i = p_i /
/// sum_k p_k` over the batch, each loss contribution is scaled by
/// `1 / (b * q_i)`. A batch with uniform probabilities short-circuits to
/// exact unit weights so the reweighted gradient is bitwise identical to the
/// plain one.
pub fn importance_weights(batch_probabilities: &[f64]) -> Result<Vec<f64>, TrainerError> {
    let b = batch_probabilities.len();
    if b == 0 {
        return Ok(Vec::new());
    }
    if batch_probabilities.iter().any(|&p| p.is_nan() || p <= 0.0) {
        return Err(TrainerError::InvalidConfig(
            "selection probabilities must be positive for importance sampling".into(),
        ));
    }
    let first = batch_probabilities[0];
    if batch_probabilities.iter().all(|&p| p == first) {
        return Ok(vec![1.0; b]);
    }
    let sum: f64 = batch_probabilities.iter().sum();
    Ok(batch_probabilities
        .iter()
        .map(|&p| sum / (b as f64 * p))
        .collect())
}

/// Single-owner mutable selection state for one training run.
pub struct Trainer<'a> {
    data: &'a Dataset,
    mode: SelectionMode,
    schedule: SelectionSchedule,
    batch_schedule: BatchSchedule,
    sort_period: i64,
    r_freq: f64,
    r_ratio: f64,
    recompute_batch: usize,
    importance_sampling: bool,
    table: LossRankTable,
    counters: SamplerCounters,
    dist: Option<SelectionDistribution>,
    shuffle: ShufflePool,
    rng: ChaCha8Rng,
    history: VecDeque<usize>,
    last_batch_size: usize,
    recomputed_examples: u64,
    timing: Timing,
    saw_nonfinite_loss: bool,
}

impl<'a> Trainer<'a> {
    pub fn new(config: &RunConfig, data: &'a Dataset) -> Result<Self, TrainerError> {
        let n = data.n();
        if n == 0 {
            return Err(TrainerError::InvalidConfig(
                "training dataset is empty".into(),
            ));
        }
        if !(config.r_ratio > 0.0 && config.r_ratio <= 1.0) {
            return Err(TrainerError::InvalidConfig(format!(
                "r_ratio must lie in (0, 1], got {}",
                config.r_ratio
            )));
        }
        if !(config.r_freq >= 0.0 && config.r_freq.is_finite()) {
            return Err(TrainerError::InvalidConfig(format!(
                "r_freq must be a finite non-negative number, got {}",
                config.r_freq
            )));
        }
        if config.r_freq > 0.0 && config.r_ratio * (n as f64) < 1.0 {
            return Err(TrainerError::InvalidConfig(format!(
                "r_ratio {} selects less than one of {n} datapoints",
                config.r_ratio
            )));
        }
        if config.recompute_batch == 0 {
            return Err(TrainerError::InvalidConfig(
                "recompute_batch must be at least 1".into(),
            ));
        }
        if config.importance_sampling && config.selection_mode != SelectionMode::Ranked {
            return Err(TrainerError::InvalidConfig(
                "importance_sampling requires ranked selection".into(),
            ));
        }
        let sort_period = config
            .sort_period
            .map(|p| p as i64)
            .unwrap_or(((n / 10).max(1)) as i64);
        if sort_period < 1 {
            return Err(TrainerError::InvalidConfig(
                "sort period must be at least 1".into(),
            ));
        }
        // The selection stream is separated from model initialization (which
        // uses the same seed on the default stream).
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Trainer {
            data,
            mode: config.selection_mode,
            schedule: config.selection,
            batch_schedule: config.batch,
            sort_period,
            r_freq: config.r_freq,
            r_ratio: config.r_ratio,
            recompute_batch: config.recompute_batch,
            importance_sampling: config.importance_sampling,
            table: LossRankTable::new(n),
            counters: SamplerCounters::new(n),
            dist: None,
            shuffle: ShufflePool::new(n),
            rng,
            history: VecDeque::with_capacity(n + 1),
            last_batch_size: 0,
            recomputed_examples: 0,
            timing: Timing::default(),
            saw_nonfinite_loss: false,
        })
    }

    pub fn counters(&self) -> &SamplerCounters {
        &self.counters
    }

    pub fn table(&self) -> &LossRankTable {
        &self.table
    }

    pub fn distribution(&self) -> Option<&SelectionDistribution> {
        self.dist.as_ref()
    }

    pub fn timing(&self) -> Timing {
        self.timing
    }

    pub fn saw_nonfinite_loss(&self) -> bool {
        self.saw_nonfinite_loss
    }

    /// Total datapoints whose losses were refreshed by recomputation.
    pub fn recomputed_examples(&self) -> u64 {
        self.recomputed_examples
    }

    /// Batch size used by the most recent step.
    pub fn last_batch_size(&self) -> usize {
        self.last_batch_size
    }

    /// Selection history (most recent last), capped at `n` entries.
    pub fn history(&self) -> (&[usize], &[usize]) {
        self.history.as_slices()
    }

    /// Selection pressure currently in effect: the pressure the active
    /// distribution was built from, 1 for the baseline modes.
    pub fn current_pressure(&self) -> f64 {
        match self.mode {
            SelectionMode::Ranked => self
                .dist
                .as_ref()
                .map(|d| d.pressure())
                .unwrap_or_else(|| self.schedule.pressure_at(0)),
            _ => 1.0,
        }
    }

    fn n_eff(&self) -> usize {
        let (a, b) = self.history.as_slices();
        if b.is_empty() {
            compute_n_eff(a, self.data.n())
        } else {
            let joined: Vec<usize> = a.iter().chain(b).copied().collect();
            compute_n_eff(&joined, self.data.n())
        }
    }

    fn gather(&self, indices: &[usize]) -> (Array2<f64>, Vec<usize>) {
        let mut features = Array2::zeros((indices.len(), self.data.dim()));
        let mut labels = Vec::with_capacity(indices.len());
        for (mut row, &idx) in features.outer_iter_mut().zip(indices) {
            row.assign(&self.data.features().row(idx));
            labels.push(self.data.labels()[idx]);
        }
        (features, labels)
    }

    /// Refresh the latest known losses of the `ceil(r_ratio * n)` top-ranked
    /// datapoints at the current parameters, in chunks of `recompute_batch`.
    fn recompute_top_losses(&mut self, params: &ModelParams) -> Result<(), TrainerError> {
        let n = self.data.n();
        let k = ((self.r_ratio * n as f64).ceil() as usize).min(n);
        let mut start = 0;
        while start < k {
            let end = (start + self.recompute_batch).min(k);
            let indices: Vec<usize> = (start..end).map(|r| self.table.index_at_rank(r)).collect();
            let (features, labels) = self.gather(&indices);
            let losses = model::forward_loss(params, features.view(), &labels)?;
            for (&idx, &loss) in indices.iter().zip(&losses) {
                self.table.update_loss(idx, loss)?;
            }
            start = end;
        }
        self.recomputed_examples += k as u64;
        Ok(())
    }

    /// Select one batch and compute the gradient at `params`.
    ///
    /// Per call: the evaluated-datapoint counter advances by the batch size;
    /// in ranked mode the selection distribution is refreshed once per
    /// epoch, the table is re-sorted every `sort_period` evaluated
    /// datapoints, and (with `r_freq > 0`) the top-ranked losses are
    /// recomputed `r_freq` times per epoch; then the batch is drawn, the
    /// forward/backward pass runs, and the fresh per-example losses are
    /// written back into the table. The baseline modes skip the ranked-mode
    /// bookkeeping and only draw and write back.
    pub fn select_batch(&mut self, params: &ModelParams) -> Result<SelectedBatch, TrainerError> {
        let select_start = Instant::now();
        let n = self.data.n();
        let epoch_now = (self.counters.c / n as i64) as usize;
        let b = self.batch_schedule.batch_size_at(epoch_now).min(n);
        self.last_batch_size = b;
        self.counters.c += b as i64;

        let mut events = StepEvents::default();
        let mut recompute_elapsed = 0.0;
        if self.mode == SelectionMode::Ranked {
            if self.counters.c - self.counters.c_e > n as i64 {
                self.counters.c_e = self.counters.c;
                let epoch = (self.counters.c_e / n as i64) as usize;
                let pressure = self.schedule.pressure_at(epoch);
                self.dist = Some(SelectionDistribution::build(pressure, n)?);
                events.refreshed_distribution = true;
            }
            if self.counters.c - self.counters.c_s > self.sort_period {
                self.counters.c_s = self.counters.c;
                self.table.sort();
                events.sorted = true;
            }
            if self.r_freq > 0.0
                && (self.counters.c - self.counters.c_r) as f64 > n as f64 / self.r_freq
            {
                self.counters.c_r = self.counters.c;
                let recompute_start = Instant::now();
                self.recompute_top_losses(params)?;
                self.table.sort();
                recompute_elapsed = recompute_start.elapsed().as_secs_f64();
                events.recomputed = true;
            }
        }

        let mut indices = Vec::with_capacity(b);
        let mut batch_probabilities = Vec::new();
        match self.mode {
            SelectionMode::Random => {
                for _ in 0..b {
                    indices.push(self.rng.random_range(0..n));
                }
            }
            SelectionMode::Shuffle => {
                for _ in 0..b {
                    indices.push(self.shuffle.next(&mut self.rng));
                }
            }
            SelectionMode::Ranked => {
                let dist = self
                    .dist
                    .as_ref()
                    .expect("distribution is built on the first call");
                if self.importance_sampling {
                    batch_probabilities.reserve(b);
                }
                for _ in 0..b {
                    let r = self.rng.random::<f64>();
                    let rank = dist.sample_rank(r)?;
                    indices.push(self.table.index_at_rank(rank));
                    if self.importance_sampling {
                        batch_probabilities.push(dist.probabilities()[rank]);
                    }
                }
            }
        }
        for &idx in &indices {
            self.history.push_back(idx);
            if self.history.len() > n {
                self.history.pop_front();
            }
        }
        let weights = if self.importance_sampling {
            Some(importance_weights(&batch_probabilities)?)
        } else {
            None
        };
        self.timing.selection_seconds +=
            select_start.elapsed().as_secs_f64() - recompute_elapsed;
        self.timing.recompute_seconds += recompute_elapsed;

        let gradient_start = Instant::now();
        let (features, labels) = self.gather(&indices);
        let result =
            model::forward_backward_weighted(params, features.view(), &labels, weights.as_deref())?;
        self.timing.gradient_seconds += gradient_start.elapsed().as_secs_f64();

        let writeback_start = Instant::now();
        for (&idx, &loss) in indices.iter().zip(&result.per_example_losses) {
            if !loss.is_finite() {
                self.saw_nonfinite_loss = true;
            }
            self.table.update_loss(idx, loss)?;
        }
        self.timing.selection_seconds += writeback_start.elapsed().as_secs_f64();

        Ok(SelectedBatch {
            indices,
            gradient: result.gradient,
            per_example_losses: result.per_example_losses,
            mean_loss: result.mean_loss,
            events,
        })
    }
}

/// Run one full training configuration against a data split and collect
/// metrics at every `eval_every`-epoch boundary (plus a row before the first
/// step and one at the end). Wall-clock excludes evaluation time.
pub fn train(config: &RunConfig, split: &DataSplit) -> Result<TrainOutcome, TrainerError> {
    if config.epochs == 0 {
        return Err(TrainerError::InvalidConfig("epochs must be at least 1".into()));
    }
    if config.eval_every == 0 {
        return Err(TrainerError::InvalidConfig(
            "eval_every must be at least 1".into(),
        ));
    }
    let data = &split.train;
    let n = data.n();
    let mut sizes = Vec::with_capacity(config.hidden.len() + 2);
    sizes.push(data.dim());
    sizes.extend_from_slice(&config.hidden);
    sizes.push(data.num_classes());

    let mut params = ModelParams::init(&sizes, config.activation, config.seed)?;
    let mut optimizer = config.optimizer.build(params.n_params())?;
    let mut trainer = Trainer::new(config, data)?;

    let mut log = MetricsLog::default();
    let mut train_wall = 0.0;
    record_row(&trainer, &params, split, train_wall, &mut log)?;

    let target = (config.epochs * n) as i64;
    let mut next_eval_epoch = config.eval_every as i64;
    let mut last_recorded_c = 0i64;
    while trainer.counters.c < target {
        let step_start = Instant::now();
        let batch = trainer.select_batch(&params)?;
        optimizer.step(params.theta_mut(), &batch.gradient)?;
        train_wall += step_start.elapsed().as_secs_f64();

        let epochs_done = trainer.counters.c / n as i64;
        if epochs_done >= next_eval_epoch {
            record_row(&trainer, &params, split, train_wall, &mut log)?;
            last_recorded_c = trainer.counters.c;
            while next_eval_epoch <= epochs_done {
                next_eval_epoch += config.eval_every as i64;
            }
        }
    }
    if last_recorded_c != trainer.counters.c {
        record_row(&trainer, &params, split, train_wall, &mut log)?;
    }

    let mut timing = trainer.timing();
    timing.train_seconds = train_wall;
    Ok(TrainOutcome {
        metrics: log,
        saw_nonfinite_loss: trainer.saw_nonfinite_loss(),
        timing,
        params,
    })
}

fn record_row(
    trainer: &Trainer<'_>,
    params: &ModelParams,
    split: &DataSplit,
    wall_seconds: f64,
    log: &mut MetricsLog,
) -> Result<(), TrainerError> {
    let n = split.train.n();
    let (train_loss, train_error) = model::evaluate(params, &split.train, EVAL_CHUNK)?;
    let (val_loss, val_error) = if split.validation.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        model::evaluate(params, &split.validation, EVAL_CHUNK)?
    };
    let b_e = if trainer.last_batch_size > 0 {
        trainer.last_batch_size
    } else {
        trainer.batch_schedule.batch_size_at(0).min(n)
    };
    log.rows.push(MetricsRow {
        epoch: trainer.counters.c as f64 / n as f64,
        wall_seconds,
        train_loss,
        train_error,
        val_loss,
        val_error,
        n_eff: trainer.n_eff(),
        s_e: trainer.current_pressure(),
        b_e,
    });
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synthetic_blobs;
    use approx::assert_relative_eq;

    fn blob_split(n: usize, d: usize, c: usize, seed: u64) -> DataSplit {
        let ds = synthetic_blobs(n, d, c, 0.08, seed).unwrap();
        crate::dataset::split(&ds, n, 0).unwrap()
    }

    fn tiny_config(mode: SelectionMode, n: usize) -> RunConfig {
        RunConfig {
            selection_mode: mode,
            batch: BatchSchedule::constant(10).unwrap(),
            hidden: vec![],
            epochs: 3,
            seed: 1,
            sort_period: Some((n / 10).max(1) as u64),
            ..RunConfig::default()
        }
    }

    #[test]
    fn shuffle_covers_every_index_once_per_epoch() {
        let split = blob_split(6, 2, 2, 0);
        let mut config = tiny_config(SelectionMode::Shuffle, 6);
        config.batch = BatchSchedule::constant(2).unwrap();
        let params = ModelParams::init(&[2, 2], Activation::Relu, 1).unwrap();
        let mut trainer = Trainer::new(&config, &split.train).unwrap();
        let mut seen = Vec::new();
        for _ in 0..3 {
            let batch = trainer.select_batch(&params).unwrap();
            assert_eq!(batch.indices.len(), 2);
            seen.extend(batch.indices);
        }
        seen.sort_unstable();
        assert_eq!(seen, vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn fresh_ranked_table_biases_toward_low_indices() {
        let split = blob_split(1000, 2, 2, 3);
        let config = RunConfig {
            selection_mode: SelectionMode::Ranked,
            selection: SelectionSchedule::fixed(1e8).unwrap(),
            batch: BatchSchedule::constant(500).unwrap(),
            hidden: vec![],
            seed: 5,
            ..RunConfig::default()
        };
        let params = ModelParams::init(&[2, 2], Activation::Relu, 5).unwrap();
        let mut trainer = Trainer::new(&config, &split.train).unwrap();
        let batch = trainer.select_batch(&params).unwrap();
        // All losses are infinite, so ranks equal datapoint indices and the
        // top decile should absorb well over half the draws.
        let low = batch.indices.iter().filter(|&&i| i < 100).count();
        assert!(low as f64 / 500.0 > 0.6, "low fraction {}", low as f64 / 500.0);
    }

    #[test]
    fn recompute_trigger_fires_at_the_documented_step() {
        let split = blob_split(100, 2, 2, 7);
        let mut config = tiny_config(SelectionMode::Ranked, 100);
        config.selection = SelectionSchedule::fixed(100.0).unwrap();
        config.r_freq = 0.5;
        config.r_ratio = 1.0;
        let params = ModelParams::init(&[2, 2], Activation::Relu, 2).unwrap();
        let mut trainer = Trainer::new(&config, &split.train).unwrap();
        let mut recompute_steps = Vec::new();
        for step in 1..=30 {
            let batch = trainer.select_batch(&params).unwrap();
            if batch.events.recomputed {
                recompute_steps.push(step);
            }
        }
        // c - c_r must exceed n / r_freq = 200, first satisfied at c = 210.
        assert_eq!(recompute_steps, vec![21]);
    }

    #[test]
    fn counter_discipline_and_batch_clamping() {
        let split = blob_split(10, 2, 2, 9);
        let mut config = tiny_config(SelectionMode::Random, 10);
        config.batch = BatchSchedule::constant(64).unwrap();
        let params = ModelParams::init(&[2, 2], Activation::Relu, 3).unwrap();
        let mut trainer = Trainer::new(&config, &split.train).unwrap();
        for k in 1..=4 {
            let batch = trainer.select_batch(&params).unwrap();
            assert_eq!(batch.indices.len(), 10);
            assert_eq!(trainer.counters().c, 10 * k);
            assert!(batch.indices.iter().all(|&i| i < 10));
        }
    }

    #[test]
    fn table_holds_latest_losses_for_batch_datapoints() {
        let split = blob_split(40, 3, 2, 11);
        let mut config = tiny_config(SelectionMode::Ranked, 40);
        config.selection = SelectionSchedule::fixed(10.0).unwrap();
        let params = ModelParams::init(&[3, 2], Activation::Relu, 6).unwrap();
        let mut trainer = Trainer::new(&config, &split.train).unwrap();
        let mut latest = std::collections::HashMap::new();
        for _ in 0..12 {
            let batch = trainer.select_batch(&params).unwrap();
            for (&idx, &loss) in batch.indices.iter().zip(&batch.per_example_losses) {
                latest.insert(idx, loss);
            }
            for (&idx, &loss) in &latest {
                assert_eq!(trainer.table().loss_of_index(idx), Some(loss));
            }
        }
    }

    #[test]
    fn no_recompute_passes_when_disabled() {
        let split = blob_split(50, 2, 2, 13);
        let mut config = tiny_config(SelectionMode::Ranked, 50);
        config.selection = SelectionSchedule::fixed(100.0).unwrap();
        config.r_freq = 0.0;
        let params = ModelParams::init(&[2, 2], Activation::Relu, 7).unwrap();
        let mut trainer = Trainer::new(&config, &split.train).unwrap();
        for _ in 0..20 {
            let batch = trainer.select_batch(&params).unwrap();
            assert!(!batch.events.recomputed);
        }
        assert_eq!(trainer.recomputed_examples(), 0);
    }

    #[test]
    fn recompute_touches_exactly_the_top_fraction() {
        let split = blob_split(50, 2, 2, 15);
        let mut config = tiny_config(SelectionMode::Ranked, 50);
        config.selection = SelectionSchedule::fixed(100.0).unwrap();
        config.r_freq = 1.0;
        config.r_ratio = 0.21;
        config.recompute_batch = 4;
        let params = ModelParams::init(&[2, 2], Activation::Relu, 8).unwrap();
        let mut trainer = Trainer::new(&config, &split.train).unwrap();
        let mut triggers = 0u64;
        for _ in 0..30 {
            let batch = trainer.select_batch(&params).unwrap();
            if batch.events.recomputed {
                triggers += 1;
            }
        }
        assert!(triggers > 0);
        // ceil(0.21 * 50) = 11 datapoints per trigger.
        assert_eq!(trainer.recomputed_examples(), triggers * 11);
    }

    #[test]
    fn importance_weights_match_hand_computed_values() {
        let w = importance_weights(&[0.3, 0.1]).unwrap();
        assert_relative_eq!(w[0], 1.0 / 1.5, max_relative = 1e-12);
        assert_relative_eq!(w[1], 2.0, max_relative = 1e-12);

        let uniform = importance_weights(&[0.25; 4]).unwrap();
        assert_eq!(uniform, vec![1.0; 4]);

        assert!(importance_weights(&[0.5, 0.0]).is_err());
    }

    #[test]
    fn importance_sampling_with_uniform_pressure_is_bitwise_neutral() {
        let split = blob_split(60, 3, 3, 17);
        let mut base = tiny_config(SelectionMode::Ranked, 60);
        base.selection = SelectionSchedule::fixed(1.0).unwrap();
        base.batch = BatchSchedule::constant(8).unwrap();
        let params = ModelParams::init(&[3, 3], Activation::Relu, 9).unwrap();

        let mut with_is = base.clone();
        with_is.importance_sampling = true;

        let mut t_plain = Trainer::new(&base, &split.train).unwrap();
        let mut t_is = Trainer::new(&with_is, &split.train).unwrap();
        for _ in 0..6 {
            let a = t_plain.select_batch(&params).unwrap();
            let b = t_is.select_batch(&params).unwrap();
            assert_eq!(a.indices, b.indices);
            assert_eq!(a.gradient, b.gradient);
        }
    }

    #[test]
    fn importance_sampling_changes_the_gradient_under_pressure() {
        let split = blob_split(60, 3, 3, 19);
        let mut base = tiny_config(SelectionMode::Ranked, 60);
        base.selection = SelectionSchedule::fixed(100.0).unwrap();
        base.batch = BatchSchedule::constant(8).unwrap();
        let mut params = ModelParams::init(&[3, 3], Activation::Relu, 10).unwrap();

        let mut with_is = base.clone();
        with_is.importance_sampling = true;
        let mut t_plain = Trainer::new(&base, &split.train).unwrap();
        let mut t_is = Trainer::new(&with_is, &split.train).unwrap();
        // Populate the table with finite, distinct losses first.
        t_plain.select_batch(&params).unwrap();
        t_is.select_batch(&params).unwrap();
        params.theta_mut().iter_mut().for_each(|w| *w += 0.01);
        let mut any_diff = false;
        for _ in 0..5 {
            let a = t_plain.select_batch(&params).unwrap();
            let b = t_is.select_batch(&params).unwrap();
            assert_eq!(a.indices, b.indices);
            if a.gradient != b.gradient {
                any_diff = true;
            }
        }
        assert!(any_diff);
    }

    #[test]
    fn importance_sampling_requires_ranked_mode() {
        let split = blob_split(20, 2, 2, 21);
        let mut config = tiny_config(SelectionMode::Shuffle, 20);
        config.importance_sampling = true;
        assert!(Trainer::new(&config, &split.train).is_err());
    }

    #[test]
    fn config_validation_errors() {
        let split = blob_split(20, 2, 2, 23);
        let mut config = tiny_config(SelectionMode::Ranked, 20);
        config.r_ratio = 0.0;
        assert!(Trainer::new(&config, &split.train).is_err());
        let mut config = tiny_config(SelectionMode::Ranked, 20);
        config.r_ratio = 1.5;
        assert!(Trainer::new(&config, &split.train).is_err());
        let mut config = tiny_config(SelectionMode::Ranked, 20);
        config.r_freq = 2.0;
        config.r_ratio = 0.01;
        assert!(Trainer::new(&config, &split.train).is_err());
        let mut config = tiny_config(SelectionMode::Ranked, 20);
        config.recompute_batch = 0;
        assert!(Trainer::new(&config, &split.train).is_err());
    }

    #[test]
    fn n_eff_counts_distinct_recent_selections() {
        assert_eq!(compute_n_eff(&[0, 0, 0, 0], 4), 1);
        assert_eq!(compute_n_eff(&[0, 1, 2, 3], 4), 4);
        assert_eq!(compute_n_eff(&[9, 9, 1, 2, 3], 3), 3);
        assert_eq!(compute_n_eff(&[7], 100), 1);
    }

    #[test]
    fn n_eff_after_one_shuffle_epoch_is_n() {
        let split = blob_split(30, 2, 2, 25);
        let mut config = tiny_config(SelectionMode::Shuffle, 30);
        config.batch = BatchSchedule::constant(5).unwrap();
        let params = ModelParams::init(&[2, 2], Activation::Relu, 11).unwrap();
        let mut trainer = Trainer::new(&config, &split.train).unwrap();
        for _ in 0..6 {
            trainer.select_batch(&params).unwrap();
        }
        assert_eq!(trainer.n_eff(), 30);
    }

    #[test]
    fn n_eff_of_random_mode_matches_occupancy_expectation() {
        let split = blob_split(1000, 2, 2, 27);
        let mut config = tiny_config(SelectionMode::Random, 1000);
        config.batch = BatchSchedule::constant(50).unwrap();
        let params = ModelParams::init(&[2, 2], Activation::Relu, 12).unwrap();
        let mut trainer = Trainer::new(&config, &split.train).unwrap();
        for _ in 0..20 {
            trainer.select_batch(&params).unwrap();
        }
        // One epoch of with-replacement draws: expect n(1 - 1/e) ~ 632.
        let n_eff = trainer.n_eff() as f64;
        assert!((n_eff - 632.0).abs() <= 30.0, "n_eff {n_eff}");
    }

    #[test]
    fn train_is_deterministic_per_seed() {
        let split = blob_split(80, 4, 2, 29);
        let mut config = tiny_config(SelectionMode::Ranked, 80);
        config.selection = SelectionSchedule::exponential(100.0, 1.0, 0, 3).unwrap();
        config.r_freq = 0.5;
        config.epochs = 2;
        let a = train(&config, &split).unwrap();
        let b = train(&config, &split).unwrap();
        assert_eq!(a.metrics.rows.len(), b.metrics.rows.len());
        for (x, y) in a.metrics.rows.iter().zip(&b.metrics.rows) {
            assert_eq!(x.epoch, y.epoch);
            assert_eq!(x.train_loss, y.train_loss);
            assert_eq!(x.train_error, y.train_error);
            assert_eq!(x.val_loss.to_bits(), y.val_loss.to_bits());
            assert_eq!(x.n_eff, y.n_eff);
            assert_eq!(x.s_e, y.s_e);
            assert_eq!(x.b_e, y.b_e);
        }
        assert_eq!(a.params.theta(), b.params.theta());
    }

    #[test]
    fn train_records_initial_and_boundary_rows() {
        let split = blob_split(50, 2, 2, 31);
        let mut config = tiny_config(SelectionMode::Shuffle, 50);
        config.epochs = 3;
        config.eval_every = 1;
        let out = train(&config, &split).unwrap();
        assert_eq!(out.metrics.rows.len(), 4);
        assert_eq!(out.metrics.rows[0].epoch, 0.0);
        for w in out.metrics.rows.windows(2) {
            assert!(w[1].epoch > w[0].epoch);
            assert!(w[1].wall_seconds >= w[0].wall_seconds);
        }
        // b = 10 divides n = 50, so boundaries land exactly.
        assert_eq!(out.metrics.rows[3].epoch, 3.0);
    }
}
