//! Online structure adaptation for one adapter: rank is retargeted from the
//! spectrum of recent gradients, and the hot-row budget is retargeted from
//! recent update frequencies.
//!
//! The decision side is split from the mutation side on purpose.  A
//! [`AdaptDriver`] watches one node's traffic and produces an [`AdaptPlan`];
//! `apply_plan` executes a plan against a [`TableState`].  In a replicated
//! deployment one node plans and every node applies the identical plan, so
//! replicas stay byte-for-byte in lockstep.

use crate::lowrank::{select_rank, Spectrum};
use crate::mat::Mat;
use crate::model::{Index, ModelError, TableState};
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, VecDeque};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AdaptError {
    #[error("invalid adaptation config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Knobs for the adaptation loop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptConfig {
    /// Fraction of spectral energy the selected rank must capture.
    pub alpha: f64,
    /// Training steps between structure adaptations.
    pub interval_steps: u64,
    /// Gradient rows kept for spectrum estimation.
    pub reservoir_size: usize,
    /// Spectrum snapshots taken per interval; the rank target averages them.
    pub spectra_per_interval: u32,
    /// An index is hot when its update count reaches the count at this
    /// quantile of the recently-updated set (0.10 keeps roughly the top
    /// decile).
    pub hot_quantile: f64,
    /// Lower capacity clamp as a fraction of the vocabulary.
    pub capacity_floor_frac: f64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            alpha: 0.8,
            interval_steps: 128,
            reservoir_size: 4096,
            spectra_per_interval: 4,
            hot_quantile: 0.10,
            capacity_floor_frac: 1.0 / 50.0,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<(), AdaptError> {
        if !(0.8..=0.95).contains(&self.alpha) {
            return Err(AdaptError::BadConfig(format!(
                "alpha {} outside [0.80, 0.95]",
                self.alpha
            )));
        }
        if self.interval_steps == 0 {
            return Err(AdaptError::BadConfig("interval_steps must be positive".into()));
        }
        if self.reservoir_size == 0 {
            return Err(AdaptError::BadConfig("reservoir_size must be positive".into()));
        }
        if self.spectra_per_interval == 0 || u64::from(self.spectra_per_interval) > self.interval_steps {
            return Err(AdaptError::BadConfig(
                "spectra_per_interval must be in [1, interval_steps]".into(),
            ));
        }
        if !(self.hot_quantile > 0.0 && self.hot_quantile <= 1.0) {
            return Err(AdaptError::BadConfig("hot_quantile must lie in (0, 1]".into()));
        }
        if !(self.capacity_floor_frac > 0.0 && self.capacity_floor_frac <= 1.0) {
            return Err(AdaptError::BadConfig("capacity_floor_frac must lie in (0, 1]".into()));
        }
        Ok(())
    }

    fn snapshot_stride(&self) -> u64 {
        (self.interval_steps / u64::from(self.spectra_per_interval)).max(1)
    }
}

/// Fixed-size uniform sample of recent gradient rows (reservoir sampling).
/// After `n` offers each offered row is retained with probability
/// `size / max(n, size)`.
#[derive(Clone, Debug)]
pub struct GradientReservoir {
    dim: usize,
    size: usize,
    rows: Vec<Vec<f64>>,
    seen: u64,
    rng: ChaCha12Rng,
}

impl GradientReservoir {
    pub fn new(dim: usize, size: usize, seed: u64) -> Self {
        assert!(dim > 0 && size > 0);
        GradientReservoir {
            dim,
            size,
            rows: Vec::with_capacity(size),
            seen: 0,
            rng: ChaCha12Rng::seed_from_u64(seed ^ 0x5eed_0001),
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn seen(&self) -> u64 {
        self.seen
    }

    pub fn offer(&mut self, row: &[f64]) {
        debug_assert_eq!(row.len(), self.dim);
        self.seen += 1;
        if self.rows.len() < self.size {
            self.rows.push(row.to_vec());
            return;
        }
        let j = self.rng.gen_range(0..self.seen);
        if (j as usize) < self.size {
            self.rows[j as usize].copy_from_slice(row);
        }
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.rows.iter().map(Vec::as_slice)
    }

    /// Spectrum of the sampled rows; `None` while the reservoir is empty.
    pub fn spectrum(&self) -> Option<Spectrum> {
        if self.rows.is_empty() {
            return None;
        }
        let g = Mat::from_fn(self.rows.len(), self.dim, |r, c| self.rows[r][c]);
        Spectrum::from_rows(&g).ok()
    }

    pub fn clear(&mut self) {
        self.rows.clear();
        self.seen = 0;
    }
}

/// Exact sliding-window update counter: which indices were touched how often
/// over the last `window_steps` training steps.
#[derive(Clone, Debug)]
pub struct UsageTracker {
    window_steps: u64,
    events: VecDeque<(u64, Index)>,
    counts: BTreeMap<Index, u32>,
}

impl UsageTracker {
    pub fn new(window_steps: u64) -> Self {
        assert!(window_steps > 0);
        UsageTracker { window_steps, events: VecDeque::new(), counts: BTreeMap::new() }
    }

    pub fn record(&mut self, step: u64, index: Index) {
        debug_assert!(self.events.back().is_none_or(|&(s, _)| s <= step));
        self.events.push_back((step, index));
        *self.counts.entry(index).or_insert(0) += 1;
    }

    /// Drops events outside the trailing window ending at `now` (inclusive).
    pub fn advance_to(&mut self, now: u64) {
        let cutoff = now.saturating_sub(self.window_steps - 1);
        while let Some(&(s, idx)) = self.events.front() {
            if s >= cutoff {
                break;
            }
            self.events.pop_front();
            match self.counts.get_mut(&idx) {
                Some(c) if *c > 1 => *c -= 1,
                _ => {
                    self.counts.remove(&idx);
                }
            }
        }
    }

    /// Distinct indices updated inside the window.
    pub fn tracked(&self) -> usize {
        self.counts.len()
    }

    pub fn count(&self, index: Index) -> u32 {
        self.counts.get(&index).copied().unwrap_or(0)
    }

    pub fn counts(&self) -> impl Iterator<Item = (Index, u32)> + '_ {
        self.counts.iter().map(|(&i, &c)| (i, c))
    }
}

/// Update-count threshold at the hot quantile: with `n` recently-updated
/// indices, the count of the `ceil(q * n)`-th most updated one.  `None` when
/// nothing was updated.
///
/// Runs in linear expected time via repeated partitioning; the tests check
/// it against a full sort.
pub fn update_tau(counts: &[u32], quantile: f64) -> Option<u32> {
    assert!(quantile > 0.0 && quantile <= 1.0);
    if counts.is_empty() {
        return None;
    }
    let n = counts.len();
    let k = ((quantile * n as f64).ceil() as usize).clamp(1, n);
    let mut scratch = counts.to_vec();
    // k-th largest = element at sorted-descending position k-1.
    let (_, kth, _) = scratch.select_nth_unstable_by(k - 1, |a, b| b.cmp(a));
    Some(*kth)
}

/// One adaptation decision, complete enough to replay on any replica.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdaptPlan {
    /// Adapter rank after the cycle (0 = hold the current rank).
    pub new_rank: usize,
    /// Hot-row budget after the cycle.
    pub capacity: usize,
    /// Update-count threshold used for pruning, if one existed.
    pub tau: Option<u32>,
    /// Hot rows to fold back into the base table, ascending.
    pub prune: Vec<Index>,
    /// Seed for re-randomizing freshly added rows of `B` on rank growth,
    /// shared so replicas grow identically.
    pub b_reseed: u64,
    /// Spectrum snapshots behind the rank target (diagnostic).
    pub snapshots: usize,
    /// Indices updated in the trailing window (diagnostic).
    pub tracked: usize,
    /// Indices at or above the update threshold (diagnostic).
    pub active: usize,
}

/// What a cycle actually changed, for logging.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptReport {
    pub step: u64,
    pub old_rank: usize,
    pub new_rank: usize,
    /// Snapshots that contributed to the rank target (0 means held).
    pub snapshots: usize,
    pub tau: Option<u32>,
    /// Indices updated in the trailing window.
    pub tracked: usize,
    pub active: usize,
    pub capacity_before: usize,
    pub capacity_after: usize,
    pub pruned_rows: usize,
}

/// Per-table adaptation state machine: feeds on gradient rows and update
/// events, emits a plan every `interval_steps` steps.
#[derive(Clone, Debug)]
pub struct AdaptDriver {
    config: AdaptConfig,
    reservoir: GradientReservoir,
    tracker: UsageTracker,
    spectra: Vec<Spectrum>,
    selected: Vec<usize>,
    step: u64,
    plan_rng: ChaCha12Rng,
}

impl AdaptDriver {
    pub fn new(config: AdaptConfig, dim: usize, seed: u64) -> Result<Self, AdaptError> {
        config.validate()?;
        Ok(AdaptDriver {
            reservoir: GradientReservoir::new(dim, config.reservoir_size, seed),
            tracker: UsageTracker::new(config.interval_steps),
            spectra: Vec::new(),
            selected: Vec::new(),
            step: 0,
            plan_rng: ChaCha12Rng::seed_from_u64(seed ^ 0x5eed_0002),
            config,
        })
    }

    pub fn config(&self) -> &AdaptConfig {
        &self.config
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn reservoir(&self) -> &GradientReservoir {
        &self.reservoir
    }

    pub fn tracker(&self) -> &UsageTracker {
        &self.tracker
    }

    /// Full-table gradient row for one updated index.
    pub fn record_gradient_row(&mut self, row: &[f64]) {
        self.reservoir.offer(row);
    }

    /// Marks `index` as updated by the current training step.
    pub fn record_update(&mut self, index: Index) {
        self.tracker.record(self.step, index);
    }

    /// Closes one training step.  Returns a plan at interval boundaries.
    pub fn end_step(&mut self) -> Option<AdaptPlan> {
        self.step += 1;
        self.tracker.advance_to(self.step);
        if self.step % self.config.snapshot_stride() == 0 {
            if let Some(sp) = self.reservoir.spectrum() {
                self.selected.push(select_rank(&sp, self.config.alpha));
                self.spectra.push(sp);
            }
        }
        if self.step % self.config.interval_steps == 0 {
            Some(self.make_plan())
        } else {
            None
        }
    }

    /// Rank target from this interval's snapshots: the rounded-up mean of
    /// the per-snapshot selections.  `None` holds the current rank.
    pub fn target_rank(&self) -> Option<usize> {
        if self.selected.is_empty() {
            return None;
        }
        let mean = self.selected.iter().sum::<usize>() as f64 / self.selected.len() as f64;
        Some((mean.ceil() as usize).max(1))
    }

    fn make_plan(&mut self) -> AdaptPlan {
        let plan = AdaptPlan {
            new_rank: self.target_rank().unwrap_or(0),
            b_reseed: self.plan_rng.gen(),
            snapshots: self.selected.len(),
            ..AdaptPlan::default()
        };
        self.spectra.clear();
        self.selected.clear();
        plan
    }

    /// Fills in the usage-driven half of a plan against a concrete table:
    /// prune set, capacity clamp, and a rank fallback when no spectra were
    /// seen (`new_rank == 0` from [`make_plan`] means hold).
    pub fn finalize_plan(&self, mut plan: AdaptPlan, state: &TableState) -> AdaptPlan {
        if plan.new_rank == 0 {
            plan.new_rank = state.adapter().rank();
        }
        plan.new_rank = plan.new_rank.min(state.table().dim());
        let counts: Vec<u32> = self.tracker.counts().map(|(_, c)| c).collect();
        plan.tau = update_tau(&counts, self.config.hot_quantile);
        plan.tracked = counts.len();
        let vocab = state.table().vocab();
        let floor = ((vocab as f64 * self.config.capacity_floor_frac).ceil() as usize).clamp(1, vocab);
        plan.active = match plan.tau {
            Some(tau) => self.tracker.counts().filter(|&(_, c)| c >= tau).count(),
            None => 0,
        };
        plan.capacity = plan.active.max(floor).min(vocab);
        if let Some(tau) = plan.tau {
            plan.prune = state
                .adapter()
                .hot_indices()
                .filter(|&i| self.tracker.count(i) < tau)
                .collect();
        }
        plan
    }

    /// Convenience for single-node operation: plan and apply in one call.
    pub fn end_step_and_apply(
        &mut self,
        state: &mut TableState,
    ) -> Result<Option<AdaptReport>, AdaptError> {
        let Some(plan) = self.end_step() else {
            return Ok(None);
        };
        let plan = self.finalize_plan(plan, state);
        let report = apply_plan(state, &plan, self.step)?;
        Ok(Some(report))
    }
}

/// Executes a plan: recompacts the adapter to the planned rank, folds the
/// pruned rows into the base table, then installs the new capacity.  Serving
/// values never move: growth is exact, pruning folds the served f32s, and a
/// shrink keeps the closest rank-`new_rank` delta.
pub fn apply_plan(
    state: &mut TableState,
    plan: &AdaptPlan,
    step: u64,
) -> Result<AdaptReport, AdaptError> {
    let old_rank = state.adapter().rank();
    let capacity_before = state.adapter().capacity();
    let new_rank = if plan.new_rank == 0 { old_rank } else { plan.new_rank };
    state.recompact_to_rank(new_rank)?;
    if new_rank > old_rank {
        reseed_new_b_rows(state, old_rank, plan.b_reseed)?;
    }
    let mut pruned = 0;
    for &idx in &plan.prune {
        if state.fold_row(idx)? {
            pruned += 1;
        }
    }
    let capacity = plan.capacity.max(state.adapter().hot_count()).min(state.table().vocab());
    state.set_capacity(capacity)?;
    Ok(AdaptReport {
        step,
        old_rank,
        new_rank,
        snapshots: plan.snapshots,
        tau: plan.tau,
        tracked: plan.tracked,
        active: plan.active,
        capacity_before,
        capacity_after: capacity,
        pruned_rows: pruned,
    })
}

/// After a rank grow the appended rows of `B` are zero and the appended
/// columns of `A` are zero, which would leave the new directions without
/// gradient signal forever.  Re-randomizing just the new `B` rows restores
/// signal while leaving every `A*B` product bitwise unchanged (the matching
/// `A` columns are still zero).
fn reseed_new_b_rows(state: &mut TableState, old_rank: usize, seed: u64) -> Result<(), AdaptError> {
    let dim = state.table().dim();
    let rank = state.adapter().rank();
    let mut b = state.adapter().b().to_vec();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let scale = 0.1 / (dim as f64).sqrt();
    for r in old_rank..rank {
        for c in 0..dim {
            b[r * dim + c] = (rng.sample::<f64, _>(rand_distr::StandardNormal) * scale) as f32;
        }
    }
    state.set_b(b)?;
    Ok(())
}
