//! Online loss-ranked batch selection for stochastic gradient training.
//!
//! Instead of sweeping a dataset in shuffled order, the trainer in this crate
//! can sample each minibatch from a distribution that favours datapoints with
//! a high latest-known loss. Datapoints are kept in a rank table sorted by
//! loss; the probability of selecting the `i`-th ranked datapoint decays
//! geometrically with its rank, controlled by a selection pressure `s` (the
//! ratio between the top and bottom selection probabilities). The pressure
//! and the batch size can follow per-epoch schedules, and stale loss values
//! can periodically be recomputed for the top-ranked fraction of the data.
//!
//! The crate bundles everything needed to benchmark the idea end to end:
//!
//! * [`dataset`] — MNIST IDX ingestion, synthetic cluster data, splits.
//! * [`sampler`] — the rank table, selection distribution, schedules and the
//!   uniform/shuffle baseline modes.
//! * [`optim`] — SGD, AdaDelta and Adam steppers on flat parameter vectors.
//! * [`model`] — a small feed-forward softmax classifier with manual
//!   backpropagation exposing per-example losses.
//! * [`trainer`] — the batch-selection training loop and metrics capture.
//! * [`config`] / [`experiment`] — experiment specs, the text config format
//!   and the CSV-producing benchmark runner used by the `batchsel` binary.

pub mod config;
pub mod dataset;
pub mod experiment;
pub mod model;
pub mod optim;
pub mod sampler;
pub mod trainer;

pub use dataset::{Dataset, DataSplit};
pub use trainer::{train, MetricsLog, RunConfig, TrainOutcome, Trainer};
