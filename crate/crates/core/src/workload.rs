//! Synthetic click workload: Zipf-distributed sparse ids over a simulated
//! clock, planted logistic labels that drift on a schedule, and the ring
//! buffer that retains the recent stream for training.
//!
//! Everything is deterministic in the spec's seed: identical specs produce
//! identical streams, sample for sample.

use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::io::{BufRead, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("trace line {line}: {source}")]
    Json { line: usize, source: serde_json::Error },
    #[error("trace line {line}: label must be 0 or 1")]
    BadLabel { line: usize },
    #[error("trace line {line}: non-finite value")]
    NonFinite { line: usize },
    #[error("trace line {line}: timestamps must be non-decreasing")]
    DecreasingTimestamp { line: usize },
    #[error("workload spec is invalid: {0}")]
    BadSpec(String),
}

/// One logged request/impression.  `ids[t]` holds the sparse ids for table
/// `t` (multi-hot lists are pooled by the model).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    /// Simulated minutes since stream start.
    pub ts: f64,
    pub ids: Vec<Vec<u64>>,
    pub dense: Vec<f32>,
    pub label: u8,
}

/// Stream shape: per-table vocabularies, Zipf exponent, arrival rate with
/// +/-5% per-minute jitter, and the drift schedule for the label model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    /// Vocabulary size of each embedding table; length fixes the table count.
    pub vocabs: Vec<usize>,
    /// Zipf exponent shared by all tables.
    pub zipf_s: f64,
    /// Mean events per simulated minute.
    pub events_per_minute: f64,
    /// Ids drawn per table per sample.
    #[serde(default = "default_ids_per_table")]
    pub ids_per_table: usize,
    /// Dense feature dimension.
    #[serde(default = "default_dense_dim")]
    pub dense_dim: usize,
    /// Minutes at which the label model is redrawn.
    #[serde(default)]
    pub drift_times_min: Vec<f64>,
    /// Std-dev of the planted per-id logit coefficients.
    #[serde(default = "default_coef_scale")]
    pub coef_scale: f64,
    pub seed: u64,
}

fn default_ids_per_table() -> usize {
    1
}

fn default_dense_dim() -> usize {
    4
}

fn default_coef_scale() -> f64 {
    2.0
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        if self.vocabs.is_empty() || self.vocabs.iter().any(|&v| v == 0) {
            return Err(WorkloadError::BadSpec("vocabs must be non-empty and positive".into()));
        }
        if !(self.zipf_s.is_finite() && self.zipf_s > 0.0) {
            return Err(WorkloadError::BadSpec(format!("zipf exponent {} invalid", self.zipf_s)));
        }
        if !(self.events_per_minute.is_finite() && self.events_per_minute >= 1.0) {
            return Err(WorkloadError::BadSpec("events_per_minute must be >= 1".into()));
        }
        if self.ids_per_table == 0 {
            return Err(WorkloadError::BadSpec("ids_per_table must be >= 1".into()));
        }
        if self.drift_times_min.windows(2).any(|w| w[1] <= w[0]) {
            return Err(WorkloadError::BadSpec("drift times must be strictly increasing".into()));
        }
        Ok(())
    }

    /// Drift epoch active at simulated minute `ts`.
    pub fn epoch_at(&self, ts: f64) -> usize {
        self.drift_times_min.iter().take_while(|&&d| ts >= d).count()
    }
}

/// Partial harmonic sum `H(n, s) = sum_{j=1..n} j^-s`.
fn harmonic(n: usize, s: f64) -> f64 {
    (1..=n).map(|j| (j as f64).powf(-s)).sum()
}

/// Analytic share of traffic landing on the `top_fraction` most popular
/// ranks under Zipf(s).
pub fn analytic_top_share(vocab: usize, s: f64, top_fraction: f64) -> f64 {
    let top = ((vocab as f64 * top_fraction).ceil() as usize).clamp(1, vocab);
    harmonic(top, s) / harmonic(vocab, s)
}

/// Finds, by bisection, the exponent at which the top `top_fraction` ranks
/// carry `target_share` of the traffic.  The share is strictly increasing in
/// the exponent, so the root is unique.
pub fn calibrate_zipf_exponent(vocab: usize, top_fraction: f64, target_share: f64) -> f64 {
    assert!(vocab >= 2, "calibration needs a non-trivial vocabulary");
    assert!(top_fraction > 0.0 && top_fraction < 1.0);
    assert!(target_share > top_fraction && target_share < 1.0);
    let (mut lo, mut hi) = (0.01f64, 8.0f64);
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if analytic_top_share(vocab, mid, top_fraction) < target_share {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Planted logistic labeler for one drift epoch: a per-id coefficient per
/// table plus a fixed dense-feature weight vector.
#[derive(Clone, Debug)]
pub struct LabelModel {
    coefs: Vec<Vec<f64>>,
    dense_w: Vec<f64>,
}

impl LabelModel {
    /// Epoch 0 is the initial model; each drift redraws every per-id
    /// coefficient.  The dense weights are epoch-independent.
    pub fn new(spec: &WorkloadSpec, epoch: usize) -> Self {
        let mut coefs = Vec::with_capacity(spec.vocabs.len());
        for (t, &vocab) in spec.vocabs.iter().enumerate() {
            let mut rng = ChaCha12Rng::seed_from_u64(
                spec.seed ^ 0xc0ef_0000_0000_0000 ^ ((t as u64) << 32) ^ epoch as u64,
            );
            let coef: Vec<f64> =
                (0..vocab).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal) * spec.coef_scale).collect();
            coefs.push(coef);
        }
        let mut rng = ChaCha12Rng::seed_from_u64(spec.seed ^ 0xdeb5_0000_0000_0000);
        let dense_w: Vec<f64> =
            (0..spec.dense_dim).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal) * 0.5).collect();
        LabelModel { coefs, dense_w }
    }

    pub fn logit(&self, ids: &[Vec<u64>], dense: &[f32]) -> f64 {
        let mut z = 0.0;
        for (t, table_ids) in ids.iter().enumerate() {
            if table_ids.is_empty() {
                continue;
            }
            let sum: f64 = table_ids.iter().map(|&i| self.coefs[t][i as usize]).sum();
            z += sum / table_ids.len() as f64;
        }
        z += dense.iter().zip(&self.dense_w).map(|(x, w)| *x as f64 * w).sum::<f64>();
        z
    }

    pub fn prob(&self, ids: &[Vec<u64>], dense: &[f32]) -> f64 {
        sigmoid(self.logit(ids, dense))
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Infinite deterministic sample stream.
pub struct WorkloadStream {
    spec: WorkloadSpec,
    rng: ChaCha12Rng,
    zipf: Vec<Zipf<f64>>,
    /// Fixed rank -> id permutation per table, so popularity is scattered
    /// across the id space.
    perms: Vec<Vec<u64>>,
    label_model: LabelModel,
    epoch: usize,
    minute: u64,
    pending: VecDeque<Sample>,
}

impl WorkloadStream {
    pub fn new(spec: WorkloadSpec) -> Result<Self, WorkloadError> {
        spec.validate()?;
        let zipf = spec
            .vocabs
            .iter()
            .map(|&v| Zipf::new(v as u64, spec.zipf_s).expect("validated parameters"))
            .collect();
        let mut perms = Vec::with_capacity(spec.vocabs.len());
        for (t, &vocab) in spec.vocabs.iter().enumerate() {
            let mut perm: Vec<u64> = (0..vocab as u64).collect();
            let mut prng =
                ChaCha12Rng::seed_from_u64(spec.seed ^ 0x9e3779b97f4a7c15 ^ ((t as u64) << 20));
            perm.shuffle(&mut prng);
            perms.push(perm);
        }
        let rng = ChaCha12Rng::seed_from_u64(spec.seed);
        let label_model = LabelModel::new(&spec, 0);
        Ok(WorkloadStream {
            spec,
            rng,
            zipf,
            perms,
            label_model,
            epoch: 0,
            minute: 0,
            pending: VecDeque::new(),
        })
    }

    pub fn spec(&self) -> &WorkloadSpec {
        &self.spec
    }

    /// Maps a popularity rank (0-based) to the table id serving it.
    pub fn id_for_rank(&self, table: usize, rank: usize) -> u64 {
        self.perms[table][rank]
    }

    fn fill_minute(&mut self) {
        let m = self.minute;
        self.minute += 1;
        // +/-5% uniform jitter on the per-minute arrival count.
        let jitter = self.rng.gen_range(-0.05..=0.05);
        let count = ((self.spec.events_per_minute * (1.0 + jitter)).round() as usize).max(1);
        for e in 0..count {
            let ts = m as f64 + (e as f64 + 0.5) / count as f64;
            let epoch = self.spec.epoch_at(ts);
            if epoch != self.epoch {
                self.epoch = epoch;
                self.label_model = LabelModel::new(&self.spec, epoch);
            }
            let mut ids = Vec::with_capacity(self.spec.vocabs.len());
            for t in 0..self.spec.vocabs.len() {
                let mut list = Vec::with_capacity(self.spec.ids_per_table);
                for _ in 0..self.spec.ids_per_table {
                    let rank = self.zipf[t].sample(&mut self.rng) as usize - 1;
                    list.push(self.perms[t][rank]);
                }
                ids.push(list);
            }
            let dense: Vec<f32> =
                (0..self.spec.dense_dim).map(|_| self.rng.sample::<f64, _>(rand_distr::StandardNormal) as f32).collect();
            let p = self.label_model.prob(&ids, &dense);
            let label = u8::from(self.rng.gen_bool(p.clamp(1e-9, 1.0 - 1e-9)));
            self.pending.push_back(Sample { ts, ids, dense, label });
        }
    }
}

impl Iterator for WorkloadStream {
    type Item = Sample;

    fn next(&mut self) -> Option<Sample> {
        while self.pending.is_empty() {
            self.fill_minute();
        }
        self.pending.pop_front()
    }
}

/// Bounded FIFO over the recent stream with wall-clock retention.
///
/// Entries leave for exactly two reasons: the buffer is over capacity
/// (oldest first) or their age exceeds the retention window.
#[derive(Clone, Debug)]
pub struct RingBuffer {
    capacity: usize,
    retention_min: f64,
    entries: VecDeque<Sample>,
}

impl RingBuffer {
    pub fn new(capacity: usize, retention_min: f64) -> Self {
        assert!(capacity > 0, "capacity must be positive");
        assert!(retention_min > 0.0, "retention must be positive");
        RingBuffer { capacity, retention_min, entries: VecDeque::with_capacity(capacity.min(1 << 20)) }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn retention_min(&self) -> f64 {
        self.retention_min
    }

    /// Appends a sample (timestamps must be non-decreasing) and evicts
    /// whatever the capacity and retention rules no longer admit.
    pub fn ingest(&mut self, sample: Sample) {
        debug_assert!(
            self.entries.back().is_none_or(|b| b.ts <= sample.ts),
            "ring buffer requires non-decreasing timestamps"
        );
        let now = sample.ts;
        self.entries.push_back(sample);
        while self.entries.len() > self.capacity {
            self.entries.pop_front();
        }
        self.evict_expired(now);
    }

    /// Drops entries strictly older than `now - retention`.  An entry aged
    /// exactly the retention window stays.
    pub fn evict_expired(&mut self, now: f64) {
        let cutoff = now - self.retention_min;
        while self.entries.front().is_some_and(|e| e.ts < cutoff) {
            self.entries.pop_front();
        }
    }

    pub fn get(&self, idx: usize) -> &Sample {
        &self.entries[idx]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Sample> {
        self.entries.iter()
    }

    /// Index of the first entry with `ts >= cutoff`; entries are ordered by
    /// timestamp, so `[start, len)` is the trailing window.
    pub fn window_start(&self, cutoff: f64) -> usize {
        self.entries.partition_point(|e| e.ts < cutoff)
    }

    pub fn newest_ts(&self) -> Option<f64> {
        self.entries.back().map(|e| e.ts)
    }
}

/// Writes samples as newline-delimited JSON records.
pub fn export_trace<'a>(
    w: &mut impl Write,
    samples: impl Iterator<Item = &'a Sample>,
) -> Result<usize, WorkloadError> {
    let mut n = 0;
    for s in samples {
        serde_json::to_writer(&mut *w, s).map_err(|e| WorkloadError::Json { line: n + 1, source: e })?;
        w.write_all(b"\n")?;
        n += 1;
    }
    Ok(n)
}

/// Reads a newline-delimited trace, validating labels, finiteness and
/// timestamp order.
pub fn import_trace(r: impl BufRead) -> Result<Vec<Sample>, WorkloadError> {
    let mut out: Vec<Sample> = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let n = i + 1;
        let s: Sample =
            serde_json::from_str(&line).map_err(|e| WorkloadError::Json { line: n, source: e })?;
        if s.label > 1 {
            return Err(WorkloadError::BadLabel { line: n });
        }
        if !s.ts.is_finite() || !s.dense.iter().all(|x| x.is_finite()) {
            return Err(WorkloadError::NonFinite { line: n });
        }
        if out.last().is_some_and(|p| s.ts < p.ts) {
            return Err(WorkloadError::DecreasingTimestamp { line: n });
        }
        out.push(s);
    }
    Ok(out)
}
