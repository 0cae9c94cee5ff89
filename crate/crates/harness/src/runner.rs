//! Scenario engine: replays one trace against one update strategy.
//!
//! Every strategy sees the identical arrival stream, scored prequentially
//! (predict with the serving state of the moment, then learn), so runs with
//! equal seeds are paired sample for sample.  The engine advances in whole
//! simulated minutes: arrivals first, then local training, then whatever the
//! strategy does at cadence boundaries, then a latency-control cycle.

use crate::config::{ConfigError, ExperimentConfig, Strategy};
use crate::metrics::{metrics_to_csv, write_text, MetricsError, MetricsRow, WindowAccumulator};
use crate::upstream::{DenseTables, UpstreamTrainer};
use liveupdate_core::adapt::{self, AdaptConfig, AdaptDriver, AdaptError, AdaptPlan};
use liveupdate_core::model::checkpoint::{self, CheckpointError};
use liveupdate_core::model::{EmbeddingTable, Index, ModelError, TableState};
use liveupdate_core::scheduler::{
    p99, Action, DefaultLatencyModel, LatencyModel, PartitionState, Scheduler, SchedulerError,
};
use liveupdate_core::sync::{
    message_bytes, sync_round, RankContribution, RankState, SimNet, SimNetConfig, SyncError,
};
use liveupdate_core::trainer::{sample_batch, AdapterTrainer, ToyDlrm, TrainError};
use liveupdate_core::workload::{RingBuffer, Sample, WorkloadError, WorkloadStream};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sync(#[from] SyncError),
    #[error(transparent)]
    Adapt(#[from] AdaptError),
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("trace sample {at} has {got} id lists, config expects {expected} tables")]
    TraceShape { at: usize, expected: usize, got: usize },
    #[error("trace sample {at} has dense dim {got}, config expects {expected}")]
    TraceDense { at: usize, expected: usize, got: usize },
    #[error("trace sample {at}: id {id} out of range for table {table} (vocab {vocab})")]
    TraceId { at: usize, table: usize, id: u64, vocab: usize },
}

/// Latency samples fed to the control loop per simulated minute.
const LATENCY_SAMPLES_PER_MIN: usize = 400;

/// Per-row transfer overhead charged to the baseline strategies: one u64 id
/// per row, matching the adapter wire format's index field.
const ROW_INDEX_BYTES: u64 = 8;
/// Per-table framing charged to a baseline shipment, matching the adapter
/// message header.
const TABLE_HEADER_BYTES: u64 = liveupdate_core::sync::MESSAGE_HEADER_BYTES as u64;

fn bytes_to_seconds(bytes: u64, gbps: f64) -> f64 {
    bytes as f64 * 8.0 / (gbps * 1e9)
}

/// One adapter sync round's payload accounting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundStats {
    /// Simulated minute at which the round ran.
    pub t_min: u64,
    pub round: u64,
    pub participants: usize,
    /// A-row entries summed over every rank's contribution.
    pub entries: u64,
    pub messages: u64,
    pub b_messages: u64,
    /// Encoded size of every rank's contribution (each message once).
    pub contrib_bytes: u64,
    /// Bytes on the wire for the whole round, forwarding and retransmits
    /// included.
    pub wire_bytes: u64,
    pub latency_ms: f64,
    /// Largest adapter rank among the participants during the round.
    pub max_rank_k: usize,
    pub dim: usize,
}

/// One structure-adaptation event.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptRow {
    pub t_min: u64,
    pub step: u64,
    pub table: usize,
    pub old_rank: usize,
    pub new_rank: usize,
    pub capacity_before: usize,
    pub capacity_after: usize,
    pub tau: Option<u32>,
    pub tracked: usize,
    pub active: usize,
    pub pruned: usize,
    /// Adapter parameters over base parameters after the event.
    pub memory_ratio: f64,
}

/// One latency-control cycle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchedRow {
    pub cycle: u64,
    pub p99_ms: f64,
    pub n_inf: usize,
    pub n_train: usize,
    pub moved: String,
}

fn action_name(action: Action) -> &'static str {
    match action {
        Action::Hold => "hold",
        Action::HeldLowSamples => "held_low_samples",
        Action::ReclaimedForInference => "to_inference",
        Action::GrantedToTraining => "to_training",
    }
}

/// Cost and volume totals for a finished run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunTotals {
    /// Simulated seconds spent moving update payloads.
    pub transfer_s: f64,
    /// Simulated seconds of local training compute.
    pub training_s: f64,
    /// transfer_s + training_s.
    pub cost_s: f64,
    /// Incremental update bytes (sync rounds or shipped rows).
    pub payload_bytes: u64,
    /// Bytes of periodic full-table installs; tracked separately and not
    /// charged to cost, since every strategy shares that backbone.
    pub full_sync_bytes: u64,
    pub training_steps: u64,
    pub sync_rounds: u64,
    pub mean_round_latency_ms: f64,
    pub final_memory_ratio: f64,
    /// Sample-weighted mean BCE over the whole run.
    pub mean_bce: f64,
    /// Mean of the windowed BCEs whose windows end in the final 60 minutes.
    pub final_hour_mean_bce: f64,
}

/// Everything `compare` needs from a finished run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub strategy: String,
    pub seed: u64,
    pub nodes: usize,
    pub horizon_min: u64,
    pub update_interval_min: u64,
    pub full_sync_interval_min: u64,
    pub eval_window_min: u64,
    pub trace_len: usize,
    pub totals: RunTotals,
}

#[derive(Serialize, Deserialize)]
struct RunMetaFile {
    meta: RunMeta,
    config: ExperimentConfig,
}

pub struct RunResult {
    pub config: ExperimentConfig,
    pub meta: RunMeta,
    pub metrics: Vec<MetricsRow>,
    pub adapt_rows: Vec<AdaptRow>,
    pub sched_rows: Vec<SchedRow>,
    pub rounds: Vec<RoundStats>,
    /// Final serving state per replica (a single synthetic replica for the
    /// baselines); used for checkpointing and replica-equality checks.
    pub final_states: Vec<Vec<TableState>>,
}

/// Generates the arrival trace for a config's workload and horizon.
pub fn generate_trace(config: &ExperimentConfig) -> Result<Vec<Sample>, RunError> {
    config.validate()?;
    let horizon = config.horizon_min as f64;
    let stream = WorkloadStream::new(config.workload.clone())?;
    Ok(stream.take_while(|s| s.ts < horizon).collect())
}

pub fn run_scenario(config: &ExperimentConfig) -> Result<RunResult, RunError> {
    let trace = generate_trace(config)?;
    run_scenario_on_trace(config, &trace)
}

pub fn run_scenario_on_trace(config: &ExperimentConfig, trace: &[Sample]) -> Result<RunResult, RunError> {
    config.validate()?;
    validate_trace(config, trace)?;
    Engine::new(config.clone())?.run(trace)
}

fn validate_trace(config: &ExperimentConfig, trace: &[Sample]) -> Result<(), RunError> {
    let n_tables = config.workload.vocabs.len();
    for (at, s) in trace.iter().enumerate() {
        if s.ids.len() != n_tables {
            return Err(RunError::TraceShape { at, expected: n_tables, got: s.ids.len() });
        }
        if s.dense.len() != config.workload.dense_dim {
            return Err(RunError::TraceDense { at, expected: config.workload.dense_dim, got: s.dense.len() });
        }
        for (table, ids) in s.ids.iter().enumerate() {
            let vocab = config.workload.vocabs[table];
            if let Some(&id) = ids.iter().find(|&&id| id as usize >= vocab) {
                return Err(RunError::TraceId { at, table, id, vocab });
            }
        }
    }
    Ok(())
}

/// One serving replica running local adapter training.
struct LiveNode {
    state: RankState,
    buffer: RingBuffer,
    trainer: AdapterTrainer,
    batch_rng: ChaCha12Rng,
}

struct Engine {
    config: ExperimentConfig,
    eval_model: ToyDlrm,
    upstream: Option<UpstreamTrainer>,
    // live_update state
    nodes: Vec<LiveNode>,
    drivers: Vec<AdaptDriver>,
    pending_plans: Vec<Option<AdaptPlan>>,
    net: SimNet,
    rounds_done: u64,
    // baseline serving state
    serving: Option<DenseTables>,
    /// delta_update: rows to diff next shipment; quick_update: rows that may
    /// diverge from serving.
    candidates: Vec<BTreeSet<Index>>,
    // latency control
    scheduler: Option<Scheduler>,
    partition: PartitionState,
    lat_model: DefaultLatencyModel,
    // accounting
    transfer_s: f64,
    training_s: f64,
    payload_total: u64,
    payload_window: u64,
    full_sync_bytes: u64,
    training_steps: u64,
    metrics: Vec<MetricsRow>,
    adapt_rows: Vec<AdaptRow>,
    sched_rows: Vec<SchedRow>,
    rounds: Vec<RoundStats>,
}

impl Engine {
    fn new(config: ExperimentConfig) -> Result<Self, RunError> {
        let vocabs = config.workload.vocabs.clone();
        let n_tables = vocabs.len();
        let dim = config.emb_dim;
        let init = DenseTables::seeded_init(&vocabs, dim, config.seed);
        let eval_model = ToyDlrm::new(n_tables, dim, config.workload.dense_dim, config.seed);

        let upstream = config.scenario.needs_upstream().then(|| {
            UpstreamTrainer::new(
                ToyDlrm::new(n_tables, dim, config.workload.dense_dim, config.seed),
                init.clone(),
                config.upstream_learning_rate,
            )
        });

        let mut nodes = Vec::new();
        let mut drivers = Vec::new();
        if config.scenario.is_live() {
            let buffer_capacity =
                (config.workload.events_per_minute * config.buffer_retention_min * 1.3) as usize + 64;
            for node in 0..config.nodes {
                let tables = vocabs
                    .iter()
                    .enumerate()
                    .map(|(t, &vocab)| {
                        let capacity =
                            ((vocab as f64 * config.capacity_init_frac).ceil() as usize).clamp(1, vocab);
                        let table = EmbeddingTable::from_weights(
                            t as u16,
                            vocab,
                            dim,
                            init.tables()[t].weights().to_vec(),
                        )?;
                        TableState::new(table, config.rank_init, capacity)
                    })
                    .collect::<Result<Vec<_>, ModelError>>()?;
                nodes.push(LiveNode {
                    state: RankState::new(node as u16, tables),
                    buffer: RingBuffer::new(buffer_capacity, config.buffer_retention_min),
                    // Same trainer seed everywhere: adapter revival draws must
                    // agree across replicas.
                    trainer: AdapterTrainer::new(
                        config.trainer.clone(),
                        ToyDlrm::new(n_tables, dim, config.workload.dense_dim, config.seed),
                    )?,
                    batch_rng: ChaCha12Rng::seed_from_u64(
                        config.seed ^ 0xba7c_0000 ^ ((node as u64) << 20),
                    ),
                });
            }
            if let Some(adapt_config) = &config.adaptation {
                let derived =
                    AdaptConfig { interval_steps: config.steps_per_interval(), ..adapt_config.clone() };
                for t in 0..n_tables {
                    drivers.push(AdaptDriver::new(
                        derived.clone(),
                        dim,
                        config.seed ^ 0xada0_0000 ^ ((t as u64) << 16),
                    )?);
                }
            }
        }

        let serving = (!config.scenario.is_live()).then(|| init.clone());
        let scheduler =
            config.scenario.is_live().then(|| Scheduler::new(config.scheduler.clone())).transpose()?;
        let n_inf = config.partitions.initial_inference as u32;
        let units = config.partitions.units as u32;
        let partition = PartitionState::new(0..n_inf, n_inf..units)?;
        let lat_model = DefaultLatencyModel::new(config.seed ^ 0x5ced_0001);
        let net = SimNet::new(SimNetConfig { seed: config.net.seed ^ config.seed, ..config.net.clone() });

        Ok(Engine {
            eval_model,
            upstream,
            nodes,
            drivers,
            pending_plans: vec![None; n_tables],
            net,
            rounds_done: 0,
            serving,
            candidates: vec![BTreeSet::new(); n_tables],
            scheduler,
            partition,
            lat_model,
            transfer_s: 0.0,
            training_s: 0.0,
            payload_total: 0,
            payload_window: 0,
            full_sync_bytes: 0,
            training_steps: 0,
            metrics: Vec::new(),
            adapt_rows: Vec::new(),
            sched_rows: Vec::new(),
            rounds: Vec::new(),
            config,
        })
    }

    fn run(mut self, trace: &[Sample]) -> Result<RunResult, RunError> {
        let horizon = self.config.horizon_min;
        let n_replicas = self.nodes.len().max(1);
        let mut cursor = 0usize;
        let mut window = WindowAccumulator::default();
        let mut minute_p99s: Vec<f64> = Vec::new();

        for minute in 0..horizon {
            // Arrivals: score prequentially, then hand to the learners.
            let minute_end = (minute + 1) as f64;
            let mut arrivals = 0u64;
            while cursor < trace.len() && trace[cursor].ts < minute_end {
                let sample = &trace[cursor];
                let p = match self.config.scenario {
                    Strategy::LiveUpdate => {
                        let node = &self.nodes[cursor % n_replicas];
                        self.eval_model.predict(node.state.tables(), sample)?
                    }
                    _ => self
                        .eval_model
                        .predict(self.serving.as_ref().expect("baselines keep a serving copy"), sample)?,
                };
                window.push(p, sample.label);
                match self.config.scenario {
                    Strategy::NoUpdate => {}
                    Strategy::DeltaUpdate | Strategy::QuickUpdate { .. } => {
                        let up = self.upstream.as_mut().expect("baseline has upstream");
                        up.train(sample)?;
                        for (t, ids) in sample.ids.iter().enumerate() {
                            self.candidates[t].extend(ids.iter().copied());
                        }
                    }
                    Strategy::LiveUpdate => {
                        self.upstream.as_mut().expect("live has upstream").train(sample)?;
                        self.nodes[cursor % n_replicas].buffer.ingest(sample.clone());
                    }
                }
                arrivals += 1;
                cursor += 1;
            }

            if self.config.scenario.is_live() {
                self.train_minute(minute_end)?;
            }

            // Cadence boundaries.  A full sync supersedes the incremental
            // path for the strategies that have one.
            let t = minute + 1;
            let at_full = t % self.config.full_sync_interval_min == 0;
            let at_cadence = t % self.config.update_interval_min == 0;
            match self.config.scenario {
                Strategy::NoUpdate => {}
                Strategy::DeltaUpdate => {
                    if at_cadence {
                        self.ship_delta();
                    }
                }
                Strategy::QuickUpdate { top_percent } => {
                    if at_full {
                        self.full_sync()?;
                    } else if at_cadence {
                        self.ship_quick(top_percent);
                    }
                }
                Strategy::LiveUpdate => {
                    if at_full {
                        self.full_sync()?;
                    } else if at_cadence {
                        self.live_boundary(t)?;
                    }
                }
            }

            // Latency control cycle.
            let load = arrivals as f64 / self.config.workload.events_per_minute;
            minute_p99s.push(self.sched_minute(minute, load));

            // Window close.
            if t % self.config.eval_window_min == 0 || t == horizon {
                let (samples, bce, roc) = window.finish();
                let p99_ms = minute_p99s.iter().sum::<f64>() / minute_p99s.len() as f64;
                minute_p99s.clear();
                self.metrics.push(MetricsRow {
                    t_min: t as f64,
                    samples,
                    bce,
                    auroc: roc,
                    cum_cost_s: self.transfer_s + self.training_s,
                    memory_ratio: self.memory_ratio(),
                    payload_bytes: self.payload_window,
                    p99_ms,
                });
                self.payload_window = 0;
            }
        }

        self.finish(trace.len())
    }

    /// Local adapter training for one minute, all replicas in lockstep.  The
    /// designated replica (the highest rank) feeds the adaptation driver;
    /// driver steps advance even when a replica has nothing to train on so
    /// plan boundaries stay aligned with sync rounds.
    fn train_minute(&mut self, now_min: f64) -> Result<(), RunError> {
        let designated = self.nodes.len() - 1;
        let adaptive = !self.drivers.is_empty();
        for _ in 0..self.config.steps_per_min {
            let mut designated_report = None;
            for node_i in 0..self.nodes.len() {
                let node = &mut self.nodes[node_i];
                node.buffer.evict_expired(now_min);
                let Some(batch) = sample_batch(
                    &node.buffer,
                    now_min,
                    self.config.buffer_retention_min,
                    self.config.trainer.batch_size,
                    &mut node.batch_rng,
                ) else {
                    continue;
                };
                let report = node.trainer.train_step(node.state.tables_mut(), &batch)?;
                node.state.note_train_report(&report)?;
                self.training_steps += 1;
                self.training_s += self.config.train_step_cost_s;
                if !adaptive {
                    grow_capacity_on_demand(node, &report)?;
                }
                if node_i == designated {
                    designated_report = Some(report);
                }
            }
            if adaptive {
                if let Some(report) = &designated_report {
                    for (t, driver) in self.drivers.iter_mut().enumerate() {
                        for touched in &report.touched[t] {
                            driver.record_gradient_row(&touched.grad_w);
                            // Demand counts even when capacity refused the
                            // insert; that unmet demand is what grows it.
                            driver.record_update(touched.index);
                        }
                    }
                }
                for (t, driver) in self.drivers.iter_mut().enumerate() {
                    if let Some(plan) = driver.end_step() {
                        self.pending_plans[t] = Some(plan);
                    }
                }
            }
        }
        Ok(())
    }

    /// Sync round plus cluster-wide structure adaptation at a cadence
    /// boundary.  The plan is finalized against the designated replica's
    /// post-merge state and applied identically everywhere, so replicas stay
    /// byte-identical.
    fn live_boundary(&mut self, t_min: u64) -> Result<(), RunError> {
        if self.nodes.len() > 1 {
            let contribs: Vec<RankContribution> =
                self.nodes.iter().map(|n| n.state.contribution()).collect();
            let (entries, messages, b_messages, contrib_bytes) = contribution_stats(&contribs);
            let report = sync_round(self.rounds_done, &contribs, &mut self.net)?;
            for node in &mut self.nodes {
                node.state.integrate(&report.merged)?;
            }
            let max_rank_k = self
                .nodes
                .iter()
                .flat_map(|n| n.state.tables().iter())
                .map(|s| s.adapter().rank())
                .max()
                .unwrap_or(0);
            self.transfer_s += bytes_to_seconds(report.total_bytes, self.config.net.bandwidth_gbps);
            self.payload_window += report.total_bytes;
            self.payload_total += report.total_bytes;
            self.rounds.push(RoundStats {
                t_min,
                round: self.rounds_done,
                participants: self.nodes.len(),
                entries,
                messages,
                b_messages,
                contrib_bytes,
                wire_bytes: report.total_bytes,
                latency_ms: report.latency_ms,
                max_rank_k,
                dim: self.config.emb_dim,
            });
            self.rounds_done += 1;
        }

        if !self.drivers.is_empty() {
            let designated = self.nodes.len() - 1;
            let mut applied = Vec::new();
            for t in 0..self.pending_plans.len() {
                let Some(base) = self.pending_plans[t].take() else { continue };
                let plan = self.drivers[t].finalize_plan(base, &self.nodes[designated].state.tables()[t]);
                let step = self.drivers[t].step();
                let mut first_report = None;
                for node in &mut self.nodes {
                    let report = adapt::apply_plan(&mut node.state.tables_mut()[t], &plan, step)?;
                    first_report.get_or_insert(report);
                }
                applied.push((t, first_report.expect("at least one replica")));
            }
            let memory_ratio = self.memory_ratio();
            for (table, report) in applied {
                self.adapt_rows.push(AdaptRow {
                    t_min,
                    step: report.step,
                    table,
                    old_rank: report.old_rank,
                    new_rank: report.new_rank,
                    capacity_before: report.capacity_before,
                    capacity_after: report.capacity_after,
                    tau: report.tau,
                    tracked: report.tracked,
                    active: report.active,
                    pruned: report.pruned_rows,
                    memory_ratio,
                });
            }
        }
        Ok(())
    }

    /// Installs the upstream tables wholesale.  Volume is tracked separately
    /// from incremental cost; a pending adaptation plan is dropped because it
    /// described adapters that no longer exist.
    fn full_sync(&mut self) -> Result<(), RunError> {
        let upstream = self.upstream.as_mut().expect("full sync requires the upstream trainer");
        let mut bytes = 0u64;
        match self.config.scenario {
            Strategy::QuickUpdate { .. } => {
                let serving = self.serving.as_mut().expect("baseline serving copy");
                *serving = upstream.tables().clone();
                for set in &mut self.candidates {
                    set.clear();
                }
                for table in serving.tables() {
                    bytes += (table.vocab() * table.dim() * 4) as u64;
                }
            }
            Strategy::LiveUpdate => {
                for node in &mut self.nodes {
                    for (t, state) in node.state.tables_mut().iter_mut().enumerate() {
                        let weights = upstream.tables().tables()[t].weights().to_vec();
                        bytes += (weights.len() * 4) as u64;
                        state.apply_full_update(weights)?;
                    }
                }
                for pending in &mut self.pending_plans {
                    *pending = None;
                }
            }
            _ => unreachable!("only quick_update and live_update take full syncs"),
        }
        upstream.note_full_sync();
        self.full_sync_bytes += bytes;
        Ok(())
    }

    /// Ships every candidate row whose upstream value differs from serving.
    fn ship_delta(&mut self) {
        let upstream = self.upstream.as_ref().expect("delta has upstream");
        let serving = self.serving.as_mut().expect("baseline serving copy");
        let dim = self.config.emb_dim as u64;
        let mut bytes = 0u64;
        for (t, set) in self.candidates.iter_mut().enumerate() {
            let mut shipped = 0u64;
            for &id in set.iter() {
                let up_row = upstream.tables().tables()[t].row(id);
                if serving.0[t].row(id) != up_row {
                    serving.0[t].row_mut(id).copy_from_slice(up_row);
                    shipped += 1;
                }
            }
            set.clear();
            if shipped > 0 {
                bytes += shipped * (ROW_INDEX_BYTES + 4 * dim) + TABLE_HEADER_BYTES;
            }
        }
        self.account_transfer(bytes);
    }

    /// Ships the top share of diverged rows by delta magnitude; the rest
    /// stay candidates for later cadences.
    fn ship_quick(&mut self, top_percent: f64) {
        let upstream = self.upstream.as_ref().expect("quick has upstream");
        let serving = self.serving.as_mut().expect("baseline serving copy");
        let dim = self.config.emb_dim as u64;
        let mut bytes = 0u64;
        for (t, set) in self.candidates.iter_mut().enumerate() {
            let mut scored: Vec<(f64, Index)> = Vec::new();
            let mut settled: Vec<Index> = Vec::new();
            for &id in set.iter() {
                let up_row = upstream.tables().tables()[t].row(id);
                let serve_row = serving.0[t].row(id);
                let d2: f64 = up_row
                    .iter()
                    .zip(serve_row)
                    .map(|(&a, &b)| {
                        let d = a as f64 - b as f64;
                        d * d
                    })
                    .sum();
                if d2 == 0.0 {
                    settled.push(id);
                } else {
                    scored.push((d2, id));
                }
            }
            for id in settled {
                set.remove(&id);
            }
            if scored.is_empty() {
                continue;
            }
            scored.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite deltas").then(a.1.cmp(&b.1)));
            let take = ((top_percent / 100.0) * scored.len() as f64).ceil() as usize;
            let take = take.clamp(1, scored.len());
            for &(_, id) in &scored[..take] {
                let up_row = upstream.tables().tables()[t].row(id);
                serving.0[t].row_mut(id).copy_from_slice(up_row);
                set.remove(&id);
            }
            bytes += take as u64 * (ROW_INDEX_BYTES + 4 * dim) + TABLE_HEADER_BYTES;
        }
        self.account_transfer(bytes);
    }

    fn account_transfer(&mut self, bytes: u64) {
        self.transfer_s += bytes_to_seconds(bytes, self.config.net.bandwidth_gbps);
        self.payload_window += bytes;
        self.payload_total += bytes;
    }

    /// One latency-control cycle.  Only live_update trains on the serving
    /// nodes, so only it runs the controller; baselines sample latency with
    /// every unit serving.
    fn sched_minute(&mut self, minute: u64, load: f64) -> f64 {
        if let Some(scheduler) = &self.scheduler {
            let lat = self.lat_model.sample_many(
                self.partition.n_inference(),
                self.partition.n_training(),
                load,
                LATENCY_SAMPLES_PER_MIN,
            );
            let decision = scheduler.step(&mut self.partition, &lat);
            let p99_ms = decision
                .p99_ms
                .unwrap_or_else(|| p99(&lat).expect("fixed positive sample count"));
            self.sched_rows.push(SchedRow {
                cycle: minute,
                p99_ms,
                n_inf: decision.n_inference,
                n_train: decision.n_training,
                moved: action_name(decision.action).to_string(),
            });
            p99_ms
        } else {
            let lat = self.lat_model.sample_many(
                self.config.partitions.units,
                0,
                load,
                LATENCY_SAMPLES_PER_MIN,
            );
            p99(&lat).expect("fixed positive sample count")
        }
    }

    /// Adapter parameters over base parameters, replica 0.
    fn memory_ratio(&self) -> f64 {
        let Some(node) = self.nodes.first() else { return 0.0 };
        let mut adapter_params = 0usize;
        let mut base_params = 0usize;
        for state in node.state.tables() {
            let k = state.adapter().rank();
            let d = state.table().dim();
            adapter_params += state.adapter().capacity() * k + k * d;
            base_params += state.table().vocab() * d;
        }
        adapter_params as f64 / base_params as f64
    }

    fn finish(self, trace_len: usize) -> Result<RunResult, RunError> {
        let weighted: f64 = self.metrics.iter().map(|r| r.bce * r.samples as f64).sum();
        let total_samples: usize = self.metrics.iter().map(|r| r.samples).sum();
        let mean_bce = if total_samples == 0 { 0.0 } else { weighted / total_samples as f64 };
        let final_hour_start = self.config.horizon_min.saturating_sub(60) as f64;
        let last_hour: Vec<&MetricsRow> = self
            .metrics
            .iter()
            .filter(|r| r.t_min > final_hour_start && r.samples > 0)
            .collect();
        let final_hour_mean_bce = if last_hour.is_empty() {
            0.0
        } else {
            last_hour.iter().map(|r| r.bce).sum::<f64>() / last_hour.len() as f64
        };
        let mean_round_latency_ms = if self.rounds.is_empty() {
            0.0
        } else {
            self.rounds.iter().map(|r| r.latency_ms).sum::<f64>() / self.rounds.len() as f64
        };

        let final_states: Vec<Vec<TableState>> = if self.config.scenario.is_live() {
            self.nodes.into_iter().map(|n| n.state.into_tables()).collect()
        } else {
            let serving = self.serving.expect("baseline serving copy");
            let states = serving
                .0
                .iter()
                .enumerate()
                .map(|(t, table)| {
                    let base = EmbeddingTable::from_weights(
                        t as u16,
                        table.vocab(),
                        table.dim(),
                        table.weights().to_vec(),
                    )?;
                    TableState::new(base, 1, 1)
                })
                .collect::<Result<Vec<_>, ModelError>>()?;
            vec![states]
        };

        let totals = RunTotals {
            transfer_s: self.transfer_s,
            training_s: self.training_s,
            cost_s: self.transfer_s + self.training_s,
            payload_bytes: self.payload_total,
            full_sync_bytes: self.full_sync_bytes,
            training_steps: self.training_steps,
            sync_rounds: self.rounds_done,
            mean_round_latency_ms,
            final_memory_ratio: self.metrics.last().map_or(0.0, |r| r.memory_ratio),
            mean_bce,
            final_hour_mean_bce,
        };
        let meta = RunMeta {
            strategy: self.config.scenario.to_string(),
            seed: self.config.seed,
            nodes: self.config.nodes,
            horizon_min: self.config.horizon_min,
            update_interval_min: self.config.update_interval_min,
            full_sync_interval_min: self.config.full_sync_interval_min,
            eval_window_min: self.config.eval_window_min,
            trace_len,
            totals,
        };
        Ok(RunResult {
            config: self.config,
            meta,
            metrics: self.metrics,
            adapt_rows: self.adapt_rows,
            sched_rows: self.sched_rows,
            rounds: self.rounds,
            final_states,
        })
    }
}

/// Grows a fixed-shape adapter's capacity to meet refused demand, the
/// baseline behavior when adaptation is disabled.
fn grow_capacity_on_demand(
    node: &mut LiveNode,
    report: &liveupdate_core::trainer::TrainReport,
) -> Result<(), RunError> {
    if report.skipped_cold == 0 {
        return Ok(());
    }
    for (t, touched) in report.touched.iter().enumerate() {
        let refused = touched.iter().filter(|r| !r.applied).count();
        if refused == 0 {
            continue;
        }
        let state = &mut node.state.tables_mut()[t];
        let vocab = state.table().vocab();
        let wanted = (state.adapter().hot_count() + refused).min(vocab);
        if wanted > state.adapter().capacity() {
            state.set_capacity(wanted)?;
        }
    }
    Ok(())
}

fn contribution_stats(contribs: &[RankContribution]) -> (u64, u64, u64, u64) {
    let mut entries = 0u64;
    let mut messages = 0u64;
    let mut b_messages = 0u64;
    let mut bytes = 0u64;
    for c in contribs {
        for tc in &c.tables {
            if tc.entries.is_empty() && tc.b.is_none() {
                continue;
            }
            entries += tc.entries.len() as u64;
            messages += 1;
            if tc.b.is_some() {
                b_messages += 1;
            }
            bytes += message_bytes(tc) as u64;
        }
    }
    (entries, messages, b_messages, bytes)
}

pub const ADAPT_HEADER: &str =
    "t_min,step,table,old_rank,new_rank,capacity_before,capacity_after,tau,tracked,active,pruned,memory_ratio";
pub const SCHED_HEADER: &str = "cycle,p99_ms,n_inf,n_train,moved";

pub fn adapt_to_csv(rows: &[AdaptRow]) -> String {
    let mut out = String::from(ADAPT_HEADER);
    out.push('\n');
    for r in rows {
        let tau = r.tau.map_or(String::new(), |t| t.to_string());
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.t_min,
            r.step,
            r.table,
            r.old_rank,
            r.new_rank,
            r.capacity_before,
            r.capacity_after,
            tau,
            r.tracked,
            r.active,
            r.pruned,
            r.memory_ratio
        )
        .expect("writing to a String cannot fail");
    }
    out
}

pub fn sched_to_csv(rows: &[SchedRow]) -> String {
    let mut out = String::from(SCHED_HEADER);
    out.push('\n');
    for r in rows {
        writeln!(out, "{},{},{},{},{}", r.cycle, r.p99_ms, r.n_inf, r.n_train, r.moved)
            .expect("writing to a String cannot fail");
    }
    out
}

/// Writes metrics.csv, adapt.csv, sched.csv, run_meta.json, and checkpoints/.
pub fn write_outputs(result: &RunResult, dir: &Path) -> Result<(), RunError> {
    std::fs::create_dir_all(dir)?;
    write_text(&dir.join("metrics.csv"), &metrics_to_csv(&result.metrics))?;
    write_text(&dir.join("adapt.csv"), &adapt_to_csv(&result.adapt_rows))?;
    write_text(&dir.join("sched.csv"), &sched_to_csv(&result.sched_rows))?;
    let meta_file =
        RunMetaFile { meta: result.meta.clone(), config: result.config.clone() };
    std::fs::write(dir.join("run_meta.json"), serde_json::to_string_pretty(&meta_file)?)?;
    let ckpt_dir = dir.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir)?;
    for (t, state) in result.final_states[0].iter().enumerate() {
        checkpoint::save_to_path(state, &ckpt_dir.join(format!("table_{t}.bin")))?;
    }
    Ok(())
}

pub fn load_run_meta(path: &Path) -> Result<RunMeta, RunError> {
    let text = std::fs::read_to_string(path)?;
    let file: RunMetaFile = serde_json::from_str(&text)?;
    Ok(file.meta)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ExperimentConfig {
        let mut config = ExperimentConfig::default();
        config.horizon_min = 4;
        config.update_interval_min = 2;
        config.full_sync_interval_min = 4;
        config.eval_window_min = 2;
        config.workload.vocabs = vec![50];
        config.workload.events_per_minute = 30.0;
        config.seed = 3;
        config
    }

    #[test]
    fn trace_validation_rejects_shape_and_range_errors() {
        let config = tiny_config();
        let mut trace = generate_trace(&config).unwrap();
        assert!(validate_trace(&config, &trace).is_ok());

        let mut bad = trace.clone();
        bad[1].ids.push(vec![0]);
        assert!(matches!(
            run_scenario_on_trace(&config, &bad),
            Err(RunError::TraceShape { at: 1, .. })
        ));

        let mut bad = trace.clone();
        bad[2].ids[0] = vec![50];
        assert!(matches!(
            run_scenario_on_trace(&config, &bad),
            Err(RunError::TraceId { at: 2, id: 50, .. })
        ));

        trace[0].dense = vec![0.0; 9];
        assert!(matches!(
            run_scenario_on_trace(&config, &trace),
            Err(RunError::TraceDense { at: 0, got: 9, .. })
        ));
    }

    #[test]
    fn transfer_seconds_follow_the_bandwidth_arithmetic() {
        // 100 Gbps moves 12.5e9 bytes per second.
        assert!((bytes_to_seconds(12_500_000_000, 100.0) - 1.0).abs() < 1e-12);
        assert_eq!(bytes_to_seconds(0, 100.0), 0.0);
    }

    #[test]
    fn csv_renderers_emit_headers_on_empty_input() {
        assert_eq!(adapt_to_csv(&[]), format!("{ADAPT_HEADER}\n"));
        assert_eq!(sched_to_csv(&[]), format!("{SCHED_HEADER}\n"));
    }
}
