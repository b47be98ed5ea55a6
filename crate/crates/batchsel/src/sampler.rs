//! Datapoint selection machinery: the loss rank table, the rank-based
//! selection distribution, pressure and batch-size schedules, trigger
//! counters and the uniform/shuffle baseline modes.

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("unknown datapoint index {index} (table holds {len} datapoints)")]
    UnknownIndex { index: usize, len: usize },
}

/// How datapoints are drawn when assembling a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionMode {
    /// Uniformly at random, with replacement.
    Random,
    /// Uniformly at random without repetitions within one epoch.
    Shuffle,
    /// By rank of the latest known loss.
    Ranked,
}

// ---------------------------------------------------------------------------
// Loss rank table
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
struct Entry {
    loss: f64,
    index: usize,
}

/// Per-datapoint latest known losses paired with datapoint indices, ordered
/// descending by loss after each [`sort`](LossRankTable::sort).
///
/// Unevaluated datapoints carry a loss of `+inf` so they rank before every
/// evaluated one. In-place loss updates may leave the ordering stale until
/// the next sort; [`is_sorted`](LossRankTable::is_sorted) tracks that.
#[derive(Debug, Clone)]
pub struct LossRankTable {
    entries: Vec<Entry>,
    pos_of_index: Vec<usize>,
    fresh: bool,
}

impl LossRankTable {
    /// A table over datapoints `0..n`, all losses initialized to `+inf`.
    pub fn new(n: usize) -> Self {
        LossRankTable {
            entries: (0..n)
                .map(|index| Entry {
                    loss: f64::INFINITY,
                    index,
                })
                .collect(),
            pos_of_index: (0..n).collect(),
            fresh: true,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// True when no loss has changed since the last sort.
    pub fn is_sorted(&self) -> bool {
        self.fresh
    }

    /// Loss stored at the given rank position (0 = highest ranked).
    pub fn loss_at_rank(&self, rank: usize) -> f64 {
        self.entries[rank].loss
    }

    /// Datapoint index stored at the given rank position.
    pub fn index_at_rank(&self, rank: usize) -> usize {
        self.entries[rank].index
    }

    /// Latest known loss of a datapoint, by datapoint index.
    pub fn loss_of_index(&self, index: usize) -> Option<f64> {
        self.pos_of_index
            .get(index)
            .map(|&pos| self.entries[pos].loss)
    }

    /// Datapoint indices in current rank order.
    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().map(|e| e.index)
    }

    /// Losses in current rank order.
    pub fn losses(&self) -> impl Iterator<Item = f64> + '_ {
        self.entries.iter().map(|e| e.loss)
    }

    /// Replace the latest known loss of a datapoint in place. The table
    /// ordering may become stale until the next [`sort`](LossRankTable::sort).
    pub fn update_loss(&mut self, index: usize, loss: f64) -> Result<(), SamplerError> {
        let pos = *self
            .pos_of_index
            .get(index)
            .ok_or(SamplerError::UnknownIndex {
                index,
                len: self.entries.len(),
            })?;
        self.entries[pos].loss = loss;
        self.fresh = false;
        Ok(())
    }

    /// Sort descending by loss, ties broken by ascending datapoint index.
    pub fn sort(&mut self) {
        self.entries
            .sort_unstable_by(|a, b| b.loss.total_cmp(&a.loss).then(a.index.cmp(&b.index)));
        for (pos, entry) in self.entries.iter().enumerate() {
            self.pos_of_index[entry.index] = pos;
        }
        self.fresh = true;
    }
}

// ---------------------------------------------------------------------------
// Selection pressure schedule
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PressureMode {
    Fixed,
    ExponentialDecay,
}

/// Per-epoch selection pressure: fixed, or geometric interpolation from
/// `s_start` at `epoch_start` to `s_end` at `epoch_end` (clamped outside the
/// window).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectionSchedule {
    s_start: f64,
    s_end: f64,
    epoch_start: usize,
    epoch_end: usize,
    mode: PressureMode,
}

impl SelectionSchedule {
    pub fn fixed(s: f64) -> Result<Self, SamplerError> {
        check_pressure(s)?;
        Ok(SelectionSchedule {
            s_start: s,
            s_end: s,
            epoch_start: 0,
            epoch_end: 0,
            mode: PressureMode::Fixed,
        })
    }

    pub fn exponential(
        s_start: f64,
        s_end: f64,
        epoch_start: usize,
        epoch_end: usize,
    ) -> Result<Self, SamplerError> {
        check_pressure(s_start)?;
        check_pressure(s_end)?;
        if epoch_end <= epoch_start {
            return Err(SamplerError::InvalidArgument(format!(
                "pressure schedule needs epoch_end > epoch_start, got {epoch_start}..{epoch_end}"
            )));
        }
        Ok(SelectionSchedule {
            s_start,
            s_end,
            epoch_start,
            epoch_end,
            mode: PressureMode::ExponentialDecay,
        })
    }

    pub fn mode(&self) -> PressureMode {
        self.mode
    }

    pub fn start_pressure(&self) -> f64 {
        self.s_start
    }

    /// Pressure at the given epoch. Epochs outside the schedule window are
    /// clamped to the nearest endpoint, so both endpoint values are returned
    /// exactly.
    pub fn pressure_at(&self, epoch: usize) -> f64 {
        match self.mode {
            PressureMode::Fixed => self.s_start,
            PressureMode::ExponentialDecay => {
                if epoch <= self.epoch_start {
                    self.s_start
                } else if epoch >= self.epoch_end {
                    self.s_end
                } else {
                    let t = (epoch - self.epoch_start) as f64
                        / (self.epoch_end - self.epoch_start) as f64;
                    self.s_start * (self.s_end / self.s_start).powf(t)
                }
            }
        }
    }
}

fn check_pressure(s: f64) -> Result<(), SamplerError> {
    if !(s.is_finite() && s > 0.0) {
        return Err(SamplerError::InvalidArgument(format!(
            "selection pressure must be positive and finite, got {s}"
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Selection distribution
// ---------------------------------------------------------------------------

/// Rank-based selection probabilities for `n` datapoints under pressure `s`.
///
/// The probability of the rank-`i` datapoint (1-based rank, stored 0-based)
/// is proportional to `q^i` with `q = 1/exp(ln(s)/n)`, so adjacent ranks keep
/// a constant probability ratio and the top rank is `s^((n-1)/n)` times more
/// likely than the bottom one. `s = 1` is the uniform distribution.
#[derive(Debug, Clone)]
pub struct SelectionDistribution {
    p: Vec<f64>,
    cumulative: Vec<f64>,
    pressure: f64,
}

impl SelectionDistribution {
    pub fn build(s: f64, n: usize) -> Result<Self, SamplerError> {
        check_pressure(s)?;
        if n == 0 {
            return Err(SamplerError::InvalidArgument(
                "selection distribution needs at least one datapoint".into(),
            ));
        }
        let ratio = 1.0 / (s.ln() / n as f64).exp();
        let mut weight = 1.0;
        let mut cumulative = Vec::with_capacity(n);
        let mut p = Vec::with_capacity(n);
        let mut sum = 0.0;
        for _ in 0..n {
            weight *= ratio;
            p.push(weight);
            sum += weight;
            cumulative.push(sum);
        }
        // Normalizing by the final cumulative sum pins the last entry to
        // exactly 1.0.
        let total = sum;
        for v in &mut p {
            *v /= total;
        }
        for v in &mut cumulative {
            *v /= total;
        }
        Ok(SelectionDistribution {
            p,
            cumulative,
            pressure: s,
        })
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.p
    }

    pub fn cumulative(&self) -> &[f64] {
        &self.cumulative
    }

    /// The pressure value this distribution was built from.
    pub fn pressure(&self) -> f64 {
        self.pressure
    }

    /// Map `r in [0,1)` to the lowest rank whose cumulative probability
    /// exceeds `r`, by bisection.
    pub fn sample_rank(&self, r: f64) -> Result<usize, SamplerError> {
        self.sample_rank_counted(r).map(|(rank, _)| rank)
    }

    /// As [`sample_rank`](SelectionDistribution::sample_rank), also returning
    /// the number of comparisons the bisection performed.
    pub fn sample_rank_counted(&self, r: f64) -> Result<(usize, u32), SamplerError> {
        if !(0.0..1.0).contains(&r) {
            return Err(SamplerError::InvalidArgument(format!(
                "selection draw must lie in [0,1), got {r}"
            )));
        }
        let mut lo = 0usize;
        let mut hi = self.cumulative.len();
        let mut comparisons = 0u32;
        while lo < hi {
            let mid = lo + (hi - lo) / 2;
            comparisons += 1;
            if self.cumulative[mid] <= r {
                lo = mid + 1;
            } else {
                hi = mid;
            }
        }
        // The final cumulative entry is exactly 1.0 > r.
        debug_assert!(lo < self.cumulative.len());
        Ok((lo, comparisons))
    }
}

/// Draw one datapoint index: sample a rank from `dist` and look up the
/// datapoint stored at that rank.
pub fn select_datapoint<R: Rng + ?Sized>(
    table: &LossRankTable,
    dist: &SelectionDistribution,
    rng: &mut R,
) -> Result<usize, SamplerError> {
    debug_assert_eq!(table.len(), dist.len());
    let r = rng.random::<f64>();
    let rank = dist.sample_rank(r)?;
    Ok(table.index_at_rank(rank))
}

// ---------------------------------------------------------------------------
// Trigger counters
// ---------------------------------------------------------------------------

/// Evaluated-datapoint counters driving the periodic triggers: `c` counts
/// datapoints evaluated in batches, the checkpoints remember the `c` value of
/// the last epoch refresh (`c_e`), sort (`c_s`) and loss recomputation
/// (`c_r`).
///
/// `c_e` starts at `-n` so the distribution refresh fires on the very first
/// call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SamplerCounters {
    pub c: i64,
    pub c_e: i64,
    pub c_s: i64,
    pub c_r: i64,
}

impl SamplerCounters {
    pub fn new(n: usize) -> Self {
        SamplerCounters {
            c: 0,
            c_e: -(n as i64),
            c_s: 0,
            c_r: 0,
        }
    }
}

/// Sort the table if more than `sort_period` datapoints were evaluated since
/// the last sort. Returns whether a sort happened.
pub fn maybe_sort(
    table: &mut LossRankTable,
    counters: &mut SamplerCounters,
    sort_period: i64,
) -> bool {
    if counters.c - counters.c_s > sort_period {
        counters.c_s = counters.c;
        table.sort();
        true
    } else {
        false
    }
}

// ---------------------------------------------------------------------------
// Batch size schedule
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchGrowth {
    Constant,
    Exponential,
    Linear,
}

/// Per-epoch batch size: constant, geometric interpolation between the
/// endpoint sizes, or the linear ramp `b_start + (b_end - b_start) * (e -
/// epoch_start) / epoch_end` (note the divisor). Fractional sizes are rounded
/// half-to-even and clamped to at least 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchSchedule {
    b_start: usize,
    b_end: usize,
    epoch_start: usize,
    epoch_end: usize,
    mode: BatchGrowth,
}

impl BatchSchedule {
    pub fn constant(b: usize) -> Result<Self, SamplerError> {
        check_batch(b)?;
        Ok(BatchSchedule {
            b_start: b,
            b_end: b,
            epoch_start: 0,
            epoch_end: 0,
            mode: BatchGrowth::Constant,
        })
    }

    pub fn exponential(
        b_start: usize,
        b_end: usize,
        epoch_start: usize,
        epoch_end: usize,
    ) -> Result<Self, SamplerError> {
        Self::ramp(BatchGrowth::Exponential, b_start, b_end, epoch_start, epoch_end)
    }

    pub fn linear(
        b_start: usize,
        b_end: usize,
        epoch_start: usize,
        epoch_end: usize,
    ) -> Result<Self, SamplerError> {
        Self::ramp(BatchGrowth::Linear, b_start, b_end, epoch_start, epoch_end)
    }

    fn ramp(
        mode: BatchGrowth,
        b_start: usize,
        b_end: usize,
        epoch_start: usize,
        epoch_end: usize,
    ) -> Result<Self, SamplerError> {
        check_batch(b_start)?;
        check_batch(b_end)?;
        if epoch_end <= epoch_start {
            return Err(SamplerError::InvalidArgument(format!(
                "batch schedule needs epoch_end > epoch_start, got {epoch_start}..{epoch_end}"
            )));
        }
        Ok(BatchSchedule {
            b_start,
            b_end,
            epoch_start,
            epoch_end,
            mode,
        })
    }

    pub fn mode(&self) -> BatchGrowth {
        self.mode
    }

    pub fn start_size(&self) -> usize {
        self.b_start
    }

    /// Batch size at the given epoch; epochs outside the window are clamped.
    pub fn batch_size_at(&self, epoch: usize) -> usize {
        let e = epoch.clamp(self.epoch_start, self.epoch_end.max(self.epoch_start));
        let b = match self.mode {
            BatchGrowth::Constant => return self.b_start,
            BatchGrowth::Exponential => {
                let t = (e - self.epoch_start) as f64
                    / (self.epoch_end - self.epoch_start) as f64;
                self.b_start as f64 * (self.b_end as f64 / self.b_start as f64).powf(t)
            }
            BatchGrowth::Linear => {
                self.b_start as f64
                    + (self.b_end as f64 - self.b_start as f64) * (e - self.epoch_start) as f64
                        / self.epoch_end as f64
            }
        };
        (b.round_ties_even() as usize).max(1)
    }
}

fn check_batch(b: usize) -> Result<(), SamplerError> {
    if b == 0 {
        return Err(SamplerError::InvalidArgument(
            "batch size endpoints must be at least 1".into(),
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Shuffle baseline
// ---------------------------------------------------------------------------

/// Draws datapoint indices uniformly without repetition until every index has
/// been handed out once, then reshuffles and starts over.
#[derive(Debug, Clone)]
pub struct ShufflePool {
    order: Vec<usize>,
    cursor: usize,
}

impl ShufflePool {
    pub fn new(n: usize) -> Self {
        ShufflePool {
            order: (0..n).collect(),
            cursor: n,
        }
    }

    pub fn next<R: Rng + ?Sized>(&mut self, rng: &mut R) -> usize {
        if self.cursor >= self.order.len() {
            self.order.shuffle(rng);
            self.cursor = 0;
        }
        let index = self.order[self.cursor];
        self.cursor += 1;
        index
    }
}
