//! Capacity scheduling between serving and in-process training.
//!
//! Compute units ("partitions") belong to either the inference pool or the
//! training pool.  A control loop watches tail latency and moves at most one
//! unit per cycle: above the high watermark it reclaims a unit for serving,
//! below the low watermark it grants one to training.  The gap between the
//! watermarks is the hysteresis band that keeps the loop from oscillating.

use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SchedulerError {
    #[error("invalid scheduler config: {0}")]
    BadConfig(String),
    #[error("partition sets overlap or are empty")]
    BadPartitions,
}

/// Tail latency at the 99th percentile.
///
/// Uses the floor position convention: with `n` sorted samples the p99 is
/// the element at 0-based position `min(n - 1, floor(0.99 * n))`, so 100
/// samples of 1..=100 ms report 100 ms.  `None` on an empty slice.
pub fn p99(samples: &[f64]) -> Option<f64> {
    if samples.is_empty() {
        return None;
    }
    let mut sorted = samples.to_vec();
    sorted.sort_unstable_by(|a, b| a.partial_cmp(b).expect("latencies must be comparable"));
    let pos = ((0.99 * sorted.len() as f64).floor() as usize).min(sorted.len() - 1);
    Some(sorted[pos])
}

/// Which units serve and which train.  Unit ids are arbitrary but unique
/// across both pools.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PartitionState {
    inference: BTreeSet<u32>,
    training: BTreeSet<u32>,
}

impl PartitionState {
    pub fn new(
        inference: impl IntoIterator<Item = u32>,
        training: impl IntoIterator<Item = u32>,
    ) -> Result<Self, SchedulerError> {
        let inference: BTreeSet<u32> = inference.into_iter().collect();
        let training: BTreeSet<u32> = training.into_iter().collect();
        if inference.is_empty() || !inference.is_disjoint(&training) {
            return Err(SchedulerError::BadPartitions);
        }
        Ok(PartitionState { inference, training })
    }

    pub fn n_inference(&self) -> usize {
        self.inference.len()
    }

    pub fn n_training(&self) -> usize {
        self.training.len()
    }

    pub fn inference(&self) -> impl Iterator<Item = u32> + '_ {
        self.inference.iter().copied()
    }

    pub fn training(&self) -> impl Iterator<Item = u32> + '_ {
        self.training.iter().copied()
    }

    /// Moves the lowest-id training unit into the inference pool.
    fn reclaim_for_inference(&mut self) -> Option<u32> {
        let id = self.training.pop_first()?;
        self.inference.insert(id);
        Some(id)
    }

    /// Moves the lowest-id inference unit into the training pool.
    fn grant_to_training(&mut self) -> Option<u32> {
        let id = self.inference.pop_first()?;
        self.training.insert(id);
        Some(id)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    /// Reclaim a unit for serving when p99 exceeds this.
    pub t_high_ms: f64,
    /// Grant a unit to training when p99 falls below this.
    pub t_low_ms: f64,
    /// The inference pool never shrinks below this.
    pub min_inference: usize,
    /// The training pool never grows beyond this.
    pub max_training: usize,
    /// Hold (and flag) when a cycle carries fewer samples than this.
    pub min_samples: usize,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            t_high_ms: 10.0,
            t_low_ms: 6.0,
            min_inference: 1,
            max_training: usize::MAX,
            min_samples: 100,
        }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<(), SchedulerError> {
        if !(self.t_low_ms.is_finite() && self.t_high_ms.is_finite()) {
            return Err(SchedulerError::BadConfig("watermarks must be finite".into()));
        }
        if self.t_low_ms <= 0.0 || self.t_low_ms >= self.t_high_ms {
            return Err(SchedulerError::BadConfig(format!(
                "need 0 < t_low ({}) < t_high ({})",
                self.t_low_ms, self.t_high_ms
            )));
        }
        if self.min_inference == 0 {
            return Err(SchedulerError::BadConfig("min_inference must be at least 1".into()));
        }
        if self.min_samples == 0 {
            return Err(SchedulerError::BadConfig("min_samples must be positive".into()));
        }
        Ok(())
    }
}

/// Why the scheduler did what it did in one cycle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Action {
    /// p99 in the band, or a boundary blocked the move.
    Hold,
    /// Too few samples to trust the estimate; previous allocation kept.
    HeldLowSamples,
    /// One unit moved training -> inference.
    ReclaimedForInference,
    /// One unit moved inference -> training.
    GrantedToTraining,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub action: Action,
    /// Measured tail latency; `None` when below the sample floor.
    pub p99_ms: Option<f64>,
    pub n_inference: usize,
    pub n_training: usize,
}

/// Hysteresis controller; moves at most one unit per call.
#[derive(Clone, Debug)]
pub struct Scheduler {
    config: SchedulerConfig,
}

impl Scheduler {
    pub fn new(config: SchedulerConfig) -> Result<Self, SchedulerError> {
        config.validate()?;
        Ok(Scheduler { config })
    }

    pub fn config(&self) -> &SchedulerConfig {
        &self.config
    }

    pub fn step(&self, state: &mut PartitionState, latencies_ms: &[f64]) -> Decision {
        let decision = |action, p99_ms, state: &PartitionState| Decision {
            action,
            p99_ms,
            n_inference: state.n_inference(),
            n_training: state.n_training(),
        };
        if latencies_ms.len() < self.config.min_samples {
            return decision(Action::HeldLowSamples, None, state);
        }
        let p = p99(latencies_ms).expect("min_samples > 0 guarantees a sample");
        if p > self.config.t_high_ms {
            if state.reclaim_for_inference().is_some() {
                return decision(Action::ReclaimedForInference, Some(p), state);
            }
        } else if p < self.config.t_low_ms
            && state.n_inference() > self.config.min_inference
            && state.n_training() < self.config.max_training
            && state.grant_to_training().is_some()
        {
            return decision(Action::GrantedToTraining, Some(p), state);
        }
        decision(Action::Hold, Some(p), state)
    }
}

/// Source of per-request latency samples for a given allocation.
pub trait LatencyModel {
    fn sample(&mut self, n_inference: usize, n_training: usize, load: f64) -> f64;

    fn sample_many(
        &mut self,
        n_inference: usize,
        n_training: usize,
        load: f64,
        count: usize,
    ) -> Vec<f64> {
        (0..count).map(|_| self.sample(n_inference, n_training, load)).collect()
    }
}

/// Queueing-flavoured latency: a base cost, a term inversely proportional to
/// serving capacity, a term for training interference, all under lognormal
/// noise.
#[derive(Clone, Debug)]
pub struct DefaultLatencyModel {
    pub base_ms: f64,
    /// Coefficient on `load / n_inference`.
    pub load_coeff: f64,
    /// Coefficient on `n_training / train_scale`.
    pub train_coeff: f64,
    pub train_scale: f64,
    /// Lognormal sigma.
    pub sigma: f64,
    rng: ChaCha12Rng,
}

impl DefaultLatencyModel {
    pub fn new(seed: u64) -> Self {
        DefaultLatencyModel {
            base_ms: 2.0,
            load_coeff: 24.0,
            train_coeff: 2.0,
            train_scale: 8.0,
            sigma: 0.1,
            rng: ChaCha12Rng::seed_from_u64(seed ^ 0x1a7e_0000),
        }
    }

    /// Deterministic location parameter (the median of the distribution).
    pub fn median_ms(&self, n_inference: usize, n_training: usize, load: f64) -> f64 {
        self.base_ms
            + self.load_coeff * load / n_inference.max(1) as f64
            + self.train_coeff * n_training as f64 / self.train_scale
    }

    /// Analytic p-th quantile, for checking measured tails.
    pub fn quantile_ms(&self, n_inference: usize, n_training: usize, load: f64, z: f64) -> f64 {
        self.median_ms(n_inference, n_training, load) * (self.sigma * z).exp()
    }
}

impl LatencyModel for DefaultLatencyModel {
    fn sample(&mut self, n_inference: usize, n_training: usize, load: f64) -> f64 {
        let noise: f64 = self.rng.sample(rand_distr::StandardNormal);
        self.median_ms(n_inference, n_training, load) * (self.sigma * noise).exp()
    }
}

/// 99th-percentile z-score of the standard normal.
pub const Z99: f64 = 2.3263478740408408;

#[derive(Clone, Debug, PartialEq)]
pub struct CycleRecord {
    pub cycle: u64,
    pub decision: Decision,
}

/// Drives the controller for `cycles` cycles against a latency model, with
/// `load(cycle)` describing offered load.
pub fn run_control_loop(
    scheduler: &Scheduler,
    model: &mut impl LatencyModel,
    state: &mut PartitionState,
    cycles: u64,
    samples_per_cycle: usize,
    load: impl Fn(u64) -> f64,
) -> Vec<CycleRecord> {
    (0..cycles)
        .map(|cycle| {
            let lat =
                model.sample_many(state.n_inference(), state.n_training(), load(cycle), samples_per_cycle);
            CycleRecord { cycle, decision: scheduler.step(state, &lat) }
        })
        .collect()
}
