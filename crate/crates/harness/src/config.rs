//! Experiment configuration: strategy names, the JSON config schema, and
//! validation with field-path error messages.

use liveupdate_core::adapt::AdaptConfig;
use liveupdate_core::scheduler::SchedulerConfig;
use liveupdate_core::sync::SimNetConfig;
use liveupdate_core::trainer::TrainerConfig;
use liveupdate_core::workload::WorkloadSpec;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{field}: {msg}")]
    Invalid { field: String, msg: String },
    #[error("unknown scenario {0:?} (expected no_update, delta_update, quick_update_<percent>, or live_update)")]
    UnknownScenario(String),
    #[error("failed to read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed to parse config: {0}")]
    Json(#[from] serde_json::Error),
}

fn invalid(field: &str, msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { field: field.to_string(), msg: msg.into() }
}

/// Update strategy under test.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Strategy {
    /// Serve the initial weights forever.
    NoUpdate,
    /// Ship every row the upstream trainer changed, each cadence.
    DeltaUpdate,
    /// Ship the top `top_percent` of diverged rows by delta magnitude each
    /// cadence, plus a periodic full sync.
    QuickUpdate { top_percent: f64 },
    /// Train low-rank adapters on the serving nodes, sync them each cadence,
    /// plus a periodic full sync.
    LiveUpdate,
}

impl Strategy {
    pub fn is_live(&self) -> bool {
        matches!(self, Strategy::LiveUpdate)
    }

    /// Strategies that consume the upstream trainer's full tables.
    pub fn needs_upstream(&self) -> bool {
        !matches!(self, Strategy::NoUpdate)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::NoUpdate => write!(f, "no_update"),
            Strategy::DeltaUpdate => write!(f, "delta_update"),
            Strategy::QuickUpdate { top_percent } => write!(f, "quick_update_{top_percent}"),
            Strategy::LiveUpdate => write!(f, "live_update"),
        }
    }
}

impl FromStr for Strategy {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "no_update" => Ok(Strategy::NoUpdate),
            "delta_update" => Ok(Strategy::DeltaUpdate),
            "live_update" => Ok(Strategy::LiveUpdate),
            other => {
                if let Some(pct) = other.strip_prefix("quick_update_") {
                    let top_percent: f64 = pct
                        .parse()
                        .map_err(|_| ConfigError::UnknownScenario(other.to_string()))?;
                    return Ok(Strategy::QuickUpdate { top_percent });
                }
                Err(ConfigError::UnknownScenario(other.to_string()))
            }
        }
    }
}

impl From<Strategy> for String {
    fn from(s: Strategy) -> String {
        s.to_string()
    }
}

impl TryFrom<String> for Strategy {
    type Error = ConfigError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

/// Compute-unit split handed to the latency control loop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    /// Total schedulable units.
    pub units: usize,
    /// Units serving inference at the start of the run.
    pub initial_inference: usize,
}

impl Default for PartitionSpec {
    fn default() -> Self {
        PartitionSpec { units: 8, initial_inference: 6 }
    }
}

/// One experiment, serializable as JSON.  Fields left out of a config file
/// take these defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: Strategy,
    /// Master seed; every stochastic component derives from it.
    pub seed: u64,
    /// Serving replicas (live_update only; baselines keep one serving copy).
    pub nodes: usize,
    pub horizon_min: u64,
    /// Incremental update cadence (adapter sync or baseline row shipping).
    pub update_interval_min: u64,
    /// Full-table install cadence (quick_update and live_update).
    pub full_sync_interval_min: u64,
    /// Tumbling accuracy-evaluation window.
    pub eval_window_min: u64,
    pub emb_dim: usize,
    /// Adapter rank at startup.
    pub rank_init: usize,
    /// Initial adapter capacity as a fraction of the vocabulary.
    pub capacity_init_frac: f64,
    /// Local training steps each serving node runs per simulated minute.
    pub steps_per_min: u32,
    /// How long cached samples stay eligible for training batches.
    pub buffer_retention_min: f64,
    /// Simulated compute seconds charged per local training step.
    pub train_step_cost_s: f64,
    /// Upstream (full-table) trainer learning rate.
    pub upstream_learning_rate: f64,
    /// Rank/capacity adaptation; `None` freezes the adapter shape and grows
    /// capacity on demand instead.  `interval_steps` is derived from the
    /// update cadence at run time; the configured value is ignored.
    pub adaptation: Option<AdaptConfig>,
    pub workload: WorkloadSpec,
    pub trainer: TrainerConfig,
    pub scheduler: SchedulerConfig,
    pub partitions: PartitionSpec,
    pub net: SimNetConfig,
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            scenario: Strategy::LiveUpdate,
            seed: 0,
            nodes: 1,
            horizon_min: 120,
            update_interval_min: 5,
            full_sync_interval_min: 60,
            eval_window_min: 10,
            emb_dim: 16,
            rank_init: 4,
            capacity_init_frac: 0.05,
            steps_per_min: 4,
            buffer_retention_min: 10.0,
            train_step_cost_s: 0.05,
            upstream_learning_rate: 0.1,
            adaptation: Some(AdaptConfig::default()),
            workload: WorkloadSpec {
                vocabs: vec![10_000],
                zipf_s: 1.2,
                events_per_minute: 1000.0,
                ids_per_table: 1,
                dense_dim: 4,
                drift_times_min: vec![30.0, 90.0],
                coef_scale: 2.0,
                seed: 0,
            },
            trainer: TrainerConfig {
                learning_rate: 2.0,
                batch_size: 64,
                b_init_scale: 1.0,
                ..TrainerConfig::default()
            },
            scheduler: SchedulerConfig::default(),
            partitions: PartitionSpec::default(),
            net: SimNetConfig::default(),
            out_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        let config: ExperimentConfig = serde_json::from_str(&text)?;
        Ok(config)
    }

    /// Training steps between incremental updates, which is also the
    /// adaptation interval and the usage-tracking window.
    pub fn steps_per_interval(&self) -> u64 {
        self.steps_per_min as u64 * self.update_interval_min
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if let Strategy::QuickUpdate { top_percent } = self.scenario {
            if !(top_percent > 0.0 && top_percent <= 100.0) {
                return Err(invalid("scenario", "quick_update percent must be in (0, 100]"));
            }
        }
        if self.nodes == 0 || self.nodes > u16::MAX as usize {
            return Err(invalid("nodes", "must be between 1 and 65535"));
        }
        if self.horizon_min == 0 {
            return Err(invalid("horizon_min", "must be positive"));
        }
        if self.update_interval_min == 0 {
            return Err(invalid("update_interval_min", "must be positive"));
        }
        if self.full_sync_interval_min == 0
            || self.full_sync_interval_min % self.update_interval_min != 0
        {
            return Err(invalid(
                "full_sync_interval_min",
                "must be a positive multiple of update_interval_min",
            ));
        }
        if self.eval_window_min == 0 {
            return Err(invalid("eval_window_min", "must be positive"));
        }
        if self.emb_dim == 0 {
            return Err(invalid("emb_dim", "must be positive"));
        }
        if self.rank_init == 0 || self.rank_init > self.emb_dim {
            return Err(invalid("rank_init", "must be in 1..=emb_dim"));
        }
        if !(self.capacity_init_frac > 0.0 && self.capacity_init_frac <= 1.0) {
            return Err(invalid("capacity_init_frac", "must be in (0, 1]"));
        }
        if self.steps_per_min == 0 {
            return Err(invalid("steps_per_min", "must be positive"));
        }
        if !(self.buffer_retention_min > 0.0 && self.buffer_retention_min.is_finite()) {
            return Err(invalid("buffer_retention_min", "must be finite and positive"));
        }
        if !(self.train_step_cost_s >= 0.0 && self.train_step_cost_s.is_finite()) {
            return Err(invalid("train_step_cost_s", "must be finite and non-negative"));
        }
        if !(self.upstream_learning_rate > 0.0 && self.upstream_learning_rate.is_finite()) {
            return Err(invalid("upstream_learning_rate", "must be finite and positive"));
        }
        if let Some(adapt) = &self.adaptation {
            let derived = AdaptConfig { interval_steps: self.steps_per_interval(), ..adapt.clone() };
            derived
                .validate()
                .map_err(|e| invalid("adaptation", e.to_string()))?;
        }
        self.workload
            .validate()
            .map_err(|e| invalid("workload", e.to_string()))?;
        self.trainer
            .validate()
            .map_err(|e| invalid("trainer", e.to_string()))?;
        self.scheduler
            .validate()
            .map_err(|e| invalid("scheduler", e.to_string()))?;
        if self.partitions.units == 0 {
            return Err(invalid("partitions.units", "must be positive"));
        }
        if self.partitions.initial_inference == 0
            || self.partitions.initial_inference > self.partitions.units
        {
            return Err(invalid("partitions.initial_inference", "must be in 1..=units"));
        }
        if self.partitions.initial_inference < self.scheduler.min_inference {
            return Err(invalid(
                "partitions.initial_inference",
                "must be at least scheduler.min_inference",
            ));
        }
        if !(self.net.bandwidth_gbps > 0.0) {
            return Err(invalid("net.bandwidth_gbps", "must be positive"));
        }
        Ok(())
    }
}
