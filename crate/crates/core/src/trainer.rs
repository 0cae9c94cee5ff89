//! In-process adapter training.
//!
//! The ranking model is deliberately small and, apart from the embedding
//! side, frozen: two pooled embedding inputs per request flow through fixed
//! dense layers into a logistic loss.  Only the adapter factors `A` and `B`
//! (and, for the reference full-table trainer, the raw rows) receive
//! gradient, so training cost is dominated by embedding-row math exactly
//! like the systems this models.
//!
//! Forward and backward are written once against the [`PooledRows`] trait;
//! the adapter path and any full-table reference path share them, which
//! keeps their gradients comparable by construction.

use crate::model::{Index, ModelError, TableState};
use crate::workload::{sigmoid, Sample};
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training aborted: non-finite loss or gradient at step {step}")]
    NonFinite { step: u64 },
    #[error("sample shape mismatch: expected {expected} id lists, got {got}")]
    TableCount { expected: usize, got: usize },
    #[error("batch is empty")]
    EmptyBatch,
    #[error("invalid trainer config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Source of pooled embedding rows, in f64 for gradient math.
pub trait PooledRows {
    fn num_tables(&self) -> usize;
    fn dim(&self) -> usize;
    fn pooled_row(&self, table: usize, ids: &[Index]) -> Result<Vec<f64>, TrainError>;
}

impl PooledRows for [TableState] {
    fn num_tables(&self) -> usize {
        self.len()
    }

    fn dim(&self) -> usize {
        self.first().map_or(0, |t| t.table().dim())
    }

    fn pooled_row(&self, table: usize, ids: &[Index]) -> Result<Vec<f64>, TrainError> {
        let v = self[table].pooled_lookup(ids)?;
        Ok(v.values.iter().map(|&x| x as f64).collect())
    }
}

/// Hidden width of the top layers.  Keeping it single-digit bounds how much
/// gradient rank the model can express, which keeps adapter ranks small.
pub const TOP_HIDDEN: usize = 6;
/// Hidden width of the dense-feature tower.
pub const DENSE_HIDDEN: usize = 8;

/// Fixed scoring network: pooled embeddings and a dense-feature tower are
/// concatenated and pushed through one ReLU layer into a logit.
#[derive(Clone, Debug)]
pub struct ToyDlrm {
    num_tables: usize,
    emb_dim: usize,
    dense_dim: usize,
    /// dense tower layer 1, `DENSE_HIDDEN x dense_dim`.
    dense_w1: Vec<f64>,
    /// dense tower layer 2, `emb_dim x DENSE_HIDDEN`.
    dense_w2: Vec<f64>,
    /// top layer 1, `TOP_HIDDEN x concat_dim`.
    top_w1: Vec<f64>,
    top_b1: Vec<f64>,
    /// top layer 2, `TOP_HIDDEN`.
    top_w2: Vec<f64>,
    top_b2: f64,
}

/// Intermediate activations of one forward pass, kept for backprop.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// Pooled embedding per table.
    pub pooled: Vec<Vec<f64>>,
    concat: Vec<f64>,
    top_pre: Vec<f64>,
    pub logit: f64,
}

/// Loss gradient with respect to each table's pooled embedding.
#[derive(Clone, Debug)]
pub struct Backward {
    /// d(loss)/d(logit) = p - y.
    pub g_logit: f64,
    /// d(loss)/d(pooled embedding), one vector per table.
    pub g_pooled: Vec<Vec<f64>>,
}

impl ToyDlrm {
    /// Deterministic in the seed; replicas built from the same seed share
    /// every frozen weight bitwise.
    pub fn new(num_tables: usize, emb_dim: usize, dense_dim: usize, seed: u64) -> Self {
        assert!(num_tables > 0 && emb_dim > 0 && dense_dim > 0);
        let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x7031_0000);
        let concat_dim = num_tables * emb_dim + emb_dim;
        let mut init = |n: usize, fan_in: usize| -> Vec<f64> {
            let scale = (2.0 / fan_in as f64).sqrt();
            (0..n).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal) * scale).collect()
        };
        ToyDlrm {
            num_tables,
            emb_dim,
            dense_dim,
            dense_w1: init(DENSE_HIDDEN * dense_dim, dense_dim),
            dense_w2: init(emb_dim * DENSE_HIDDEN, DENSE_HIDDEN),
            top_w1: init(TOP_HIDDEN * concat_dim, concat_dim),
            top_b1: vec![0.0; TOP_HIDDEN],
            top_w2: init(TOP_HIDDEN, TOP_HIDDEN),
            top_b2: 0.0,
        }
    }

    pub fn num_tables(&self) -> usize {
        self.num_tables
    }

    pub fn emb_dim(&self) -> usize {
        self.emb_dim
    }

    pub fn dense_dim(&self) -> usize {
        self.dense_dim
    }

    pub fn forward(
        &self,
        rows: &(impl PooledRows + ?Sized),
        sample: &Sample,
    ) -> Result<ForwardTrace, TrainError> {
        if sample.ids.len() != self.num_tables {
            return Err(TrainError::TableCount { expected: self.num_tables, got: sample.ids.len() });
        }
        let mut pooled = Vec::with_capacity(self.num_tables);
        for (t, ids) in sample.ids.iter().enumerate() {
            pooled.push(rows.pooled_row(t, ids)?);
        }

        let dense_h: Vec<f64> = (0..DENSE_HIDDEN)
            .map(|r| {
                let z: f64 = (0..self.dense_dim)
                    .map(|c| self.dense_w1[r * self.dense_dim + c] * sample.dense[c] as f64)
                    .sum();
                z.max(0.0)
            })
            .collect();
        let dense_out: Vec<f64> = (0..self.emb_dim)
            .map(|r| (0..DENSE_HIDDEN).map(|c| self.dense_w2[r * DENSE_HIDDEN + c] * dense_h[c]).sum())
            .collect();

        let concat_dim = self.num_tables * self.emb_dim + self.emb_dim;
        let mut concat = Vec::with_capacity(concat_dim);
        for p in &pooled {
            concat.extend_from_slice(p);
        }
        concat.extend_from_slice(&dense_out);

        let top_pre: Vec<f64> = (0..TOP_HIDDEN)
            .map(|r| {
                self.top_b1[r]
                    + (0..concat_dim).map(|c| self.top_w1[r * concat_dim + c] * concat[c]).sum::<f64>()
            })
            .collect();
        let logit = self.top_b2
            + top_pre.iter().zip(&self.top_w2).map(|(&z, &w)| z.max(0.0) * w).sum::<f64>();

        Ok(ForwardTrace { pooled, concat, top_pre, logit })
    }

    /// Backprop from the logistic loss down to the pooled embeddings.  The
    /// frozen layers only route gradient; nothing above the embeddings is
    /// updated.
    pub fn backward(&self, trace: &ForwardTrace, label: u8) -> Backward {
        let p = sigmoid(trace.logit);
        let g_logit = p - f64::from(label);
        let concat_dim = trace.concat.len();
        // Through the ReLU layer: g_h[r] = g * w2[r] * 1[pre > 0].
        let g_h: Vec<f64> = (0..TOP_HIDDEN)
            .map(|r| if trace.top_pre[r] > 0.0 { g_logit * self.top_w2[r] } else { 0.0 })
            .collect();
        let mut g_concat = vec![0.0; concat_dim];
        for r in 0..TOP_HIDDEN {
            if g_h[r] == 0.0 {
                continue;
            }
            for c in 0..concat_dim {
                g_concat[c] += g_h[r] * self.top_w1[r * concat_dim + c];
            }
        }
        let g_pooled = (0..self.num_tables)
            .map(|t| g_concat[t * self.emb_dim..(t + 1) * self.emb_dim].to_vec())
            .collect();
        Backward { g_logit, g_pooled }
    }

    pub fn predict(&self, rows: &(impl PooledRows + ?Sized), sample: &Sample) -> Result<f64, TrainError> {
        Ok(sigmoid(self.forward(rows, sample)?.logit))
    }
}

pub fn bce_loss(p: f64, label: u8) -> f64 {
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    if label == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Scale for (re)initializing rows of `B` when the adapter comes up
    /// empty; divided by sqrt(dim) at use.
    pub b_init_scale: f64,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig { learning_rate: 0.05, batch_size: 32, b_init_scale: 0.1, seed: 0 }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(TrainError::BadConfig("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::BadConfig("batch_size must be positive".into()));
        }
        if !(self.b_init_scale.is_finite() && self.b_init_scale > 0.0) {
            return Err(TrainError::BadConfig("b_init_scale must be positive".into()));
        }
        Ok(())
    }
}

/// One row the step touched: the id and its full-table gradient
/// `d(loss)/d(row)`, which is what spectrum estimation feeds on.
#[derive(Clone, Debug)]
pub struct TouchedRow {
    pub index: Index,
    pub grad_w: Vec<f64>,
    /// False when the insert was refused because the adapter was at
    /// capacity (the demand still counts toward usage statistics).
    pub applied: bool,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub step: u64,
    /// Mean batch loss at the pre-update parameters.
    pub loss: f64,
    /// Per table, every row the batch touched.
    pub touched: Vec<Vec<TouchedRow>>,
    pub skipped_cold: usize,
}

/// SGD over the adapter factors of a set of tables.
pub struct AdapterTrainer {
    config: TrainerConfig,
    model: ToyDlrm,
    rng: ChaCha12Rng,
    step: u64,
}

impl AdapterTrainer {
    pub fn new(config: TrainerConfig, model: ToyDlrm) -> Result<Self, TrainError> {
        config.validate()?;
        let rng = ChaCha12Rng::seed_from_u64(config.seed ^ 0x7ea1_0000);
        Ok(AdapterTrainer { config, model, rng, step: 0 })
    }

    pub fn model(&self) -> &ToyDlrm {
        &self.model
    }

    pub fn config(&self) -> &TrainerConfig {
        &self.config
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// An adapter whose `A` map is empty and whose `B` is all zero (the
    /// state right after construction or a full-table install) is a fixed
    /// point of SGD: every gradient path is zero.  Re-randomizing `B` is
    /// serving-invariant there because no `A` row exists to multiply it.
    fn revive_dead_adapters(&mut self, tables: &mut [TableState]) -> Result<(), TrainError> {
        for state in tables.iter_mut() {
            if state.adapter().b_is_zero() && state.adapter().hot_count() == 0 {
                let rank = state.adapter().rank();
                let dim = state.table().dim();
                let scale = self.config.b_init_scale / (dim as f64).sqrt();
                let b: Vec<f32> = (0..rank * dim)
                    .map(|_| (self.rng.sample::<f64, _>(rand_distr::StandardNormal) * scale) as f32)
                    .collect();
                state.set_b(b)?;
            }
        }
        Ok(())
    }

    /// Runs one batch: forward, backward, and an SGD update of every
    /// adapter the batch touched.  On a non-finite loss or gradient the
    /// parameters are left exactly as they were and an error is returned.
    pub fn train_step(
        &mut self,
        tables: &mut [TableState],
        batch: &[Sample],
    ) -> Result<TrainReport, TrainError> {
        if batch.is_empty() {
            return Err(TrainError::EmptyBatch);
        }
        if tables.is_empty() {
            return Err(TrainError::TableCount { expected: 1, got: 0 });
        }
        self.revive_dead_adapters(tables)?;

        let n_tables = tables.len();
        let dim = tables[0].table().dim();
        let m = batch.len() as f64;

        // Accumulators, all at pre-update parameter values.
        let mut loss = 0.0;
        let mut grad_w: Vec<std::collections::BTreeMap<Index, Vec<f64>>> =
            vec![std::collections::BTreeMap::new(); n_tables];
        let mut grad_b: Vec<Vec<f64>> =
            tables.iter().map(|t| vec![0.0; t.adapter().rank() * dim]).collect();

        for sample in batch {
            let trace = self.model.forward(&tables[..], sample)?;
            loss += bce_loss(sigmoid(trace.logit), sample.label);
            let back = self.model.backward(&trace, sample.label);
            for t in 0..n_tables {
                let ids = &sample.ids[t];
                if ids.is_empty() {
                    continue;
                }
                let w = 1.0 / (m * ids.len() as f64);
                for &id in ids {
                    let row = grad_w[t].entry(id).or_insert_with(|| vec![0.0; dim]);
                    for c in 0..dim {
                        row[c] += w * back.g_pooled[t][c];
                    }
                }
            }
        }
        loss /= m;

        // grad_A[i][r] = grad_w[i] . B[r,:], grad_B[r][c] = sum_i A[i][r] grad_w[i][c].
        let mut grad_a: Vec<std::collections::BTreeMap<Index, Vec<f64>>> =
            vec![std::collections::BTreeMap::new(); n_tables];
        for t in 0..n_tables {
            let rank = tables[t].adapter().rank();
            let b = tables[t].adapter().b();
            for (&id, gw) in &grad_w[t] {
                let mut ga = vec![0.0; rank];
                for r in 0..rank {
                    ga[r] = (0..dim).map(|c| gw[c] * b[r * dim + c] as f64).sum();
                }
                if let Some(a_row) = tables[t].adapter().a_row(id) {
                    for r in 0..rank {
                        let ar = a_row[r] as f64;
                        for c in 0..dim {
                            grad_b[t][r * dim + c] += ar * gw[c];
                        }
                    }
                }
                grad_a[t].insert(id, ga);
            }
        }

        // Stage every new parameter value first, then validate, then commit.
        // A diverging step must not leave a half-applied batch behind.
        let lr = self.config.learning_rate;
        let mut staged_a: Vec<Vec<(Index, Vec<f32>)>> = vec![Vec::new(); n_tables];
        let mut staged_b: Vec<Vec<f32>> = Vec::with_capacity(n_tables);
        for t in 0..n_tables {
            let rank = tables[t].adapter().rank();
            for (&id, ga) in &grad_a[t] {
                let old: Vec<f32> = match tables[t].adapter().a_row(id) {
                    Some(r) => r.to_vec(),
                    None => vec![0.0; rank],
                };
                let new: Vec<f32> =
                    (0..rank).map(|r| (old[r] as f64 - lr * ga[r]) as f32).collect();
                staged_a[t].push((id, new));
            }
            let b_new: Vec<f32> = tables[t]
                .adapter()
                .b()
                .iter()
                .enumerate()
                .map(|(i, &x)| (x as f64 - lr * grad_b[t][i]) as f32)
                .collect();
            staged_b.push(b_new);
        }
        let finite = loss.is_finite()
            && staged_a.iter().flatten().flat_map(|(_, r)| r).all(|v| v.is_finite())
            && staged_b.iter().flatten().all(|v| v.is_finite());
        if !finite {
            return Err(TrainError::NonFinite { step: self.step });
        }

        // Commit.  Rows at capacity are skipped but still reported so usage
        // statistics can grow the budget later.
        let mut touched: Vec<Vec<TouchedRow>> = vec![Vec::new(); n_tables];
        let mut skipped = 0;
        for t in 0..n_tables {
            for (id, new) in &staged_a[t] {
                let applied = match tables[t].upsert_a_row(*id, new) {
                    Ok(_) => true,
                    Err(ModelError::CapacityExhausted { .. }) => {
                        skipped += 1;
                        false
                    }
                    Err(e) => return Err(e.into()),
                };
                touched[t].push(TouchedRow {
                    index: *id,
                    grad_w: grad_w[t][id].clone(),
                    applied,
                });
            }
            tables[t].set_b(std::mem::take(&mut staged_b[t]))?;
        }

        self.step += 1;
        Ok(TrainReport { step: self.step, loss, touched, skipped_cold: skipped })
    }
}

/// Draws `batch_size` samples uniformly, with replacement, from the trailing
/// `window_min` minutes of the buffer.  `None` when the window is empty.
pub fn sample_batch(
    buffer: &crate::workload::RingBuffer,
    now_min: f64,
    window_min: f64,
    batch_size: usize,
    rng: &mut impl Rng,
) -> Option<Vec<Sample>> {
    let start = buffer.window_start(now_min - window_min);
    let n = buffer.len();
    if start >= n {
        return None;
    }
    Some((0..batch_size).map(|_| buffer.get(rng.gen_range(start..n)).clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::EmbeddingTable;
    use crate::workload::RingBuffer;

    fn rand_tables(
        n_tables: usize,
        vocab: usize,
        dim: usize,
        rank: usize,
        rng: &mut ChaCha12Rng,
    ) -> Vec<TableState> {
        (0..n_tables)
            .map(|t| {
                let w: Vec<f32> =
                    (0..vocab * dim).map(|_| (rng.gen_range(-0.5..0.5f64)) as f32).collect();
                let table = EmbeddingTable::from_weights(t as u16, vocab, dim, w).unwrap();
                let mut st = TableState::new(table, rank, vocab).unwrap();
                let b: Vec<f32> =
                    (0..rank * dim).map(|_| (rng.gen_range(-0.3..0.3f64)) as f32).collect();
                st.set_b(b).unwrap();
                for id in 0..(vocab as u64 / 2) {
                    let row: Vec<f32> =
                        (0..rank).map(|_| (rng.gen_range(-0.2..0.2f64)) as f32).collect();
                    st.upsert_a_row(id, &row).unwrap();
                }
                st
            })
            .collect()
    }

    fn rand_sample(
        n_tables: usize,
        vocab: usize,
        dense_dim: usize,
        rng: &mut ChaCha12Rng,
    ) -> Sample {
        Sample {
            ts: 0.0,
            ids: (0..n_tables)
                .map(|_| (0..2).map(|_| rng.gen_range(0..vocab as u64)).collect())
                .collect(),
            dense: (0..dense_dim).map(|_| rng.gen_range(-1.0..1.0f64) as f32).collect(),
            label: u8::from(rng.gen_bool(0.5)),
        }
    }

    fn batch_loss(model: &ToyDlrm, tables: &[TableState], batch: &[Sample]) -> f64 {
        batch
            .iter()
            .map(|s| bce_loss(model.predict(tables, s).unwrap(), s.label))
            .sum::<f64>()
            / batch.len() as f64
    }

    /// Central finite difference over one adapter parameter.
    fn fd_grad(
        model: &ToyDlrm,
        tables: &mut [TableState],
        batch: &[Sample],
        table: usize,
        poke: impl Fn(&mut TableState, f32),
        read: impl Fn(&TableState) -> f32,
    ) -> f64 {
        let h = 1e-2f32;
        let orig = read(&tables[table]);
        poke(&mut tables[table], orig + h);
        let up = batch_loss(model, tables, batch);
        poke(&mut tables[table], orig - h);
        let down = batch_loss(model, tables, batch);
        poke(&mut tables[table], orig);
        // Use the step that actually landed in f32.
        let h_eff = ((orig + h) as f64 - (orig - h) as f64).abs();
        (up - down) / h_eff
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(77);
        let (n_tables, vocab, dim, rank, dense_dim) = (2, 12, 5, 3, 4);
        let mut tables = rand_tables(n_tables, vocab, dim, rank, &mut rng);
        let model = ToyDlrm::new(n_tables, dim, dense_dim, 5);
        let batch: Vec<Sample> =
            (0..4).map(|_| rand_sample(n_tables, vocab, dense_dim, &mut rng)).collect();

        // Analytic gradients, reconstructed exactly as train_step builds them.
        let m = batch.len() as f64;
        let mut grad_w: Vec<std::collections::BTreeMap<Index, Vec<f64>>> =
            vec![std::collections::BTreeMap::new(); n_tables];
        for s in &batch {
            let trace = model.forward(&tables[..], s).unwrap();
            let back = model.backward(&trace, s.label);
            for t in 0..n_tables {
                let w = 1.0 / (m * s.ids[t].len() as f64);
                for &id in &s.ids[t] {
                    let row = grad_w[t].entry(id).or_insert_with(|| vec![0.0; dim]);
                    for c in 0..dim {
                        row[c] += w * back.g_pooled[t][c];
                    }
                }
            }
        }

        let mut checked = 0;
        for t in 0..n_tables {
            let b: Vec<f32> = tables[t].adapter().b().to_vec();
            for (&id, gw) in &grad_w[t] {
                if tables[t].adapter().a_row(id).is_none() {
                    continue;
                }
                // d(loss)/dA[id][r]
                for r in 0..rank {
                    let analytic: f64 = (0..dim).map(|c| gw[c] * b[r * dim + c] as f64).sum();
                    if analytic.abs() < 1e-4 {
                        continue;
                    }
                    let numeric = fd_grad(
                        &model,
                        &mut tables,
                        &batch,
                        t,
                        |st, v| {
                            let mut row = st.adapter().a_row(id).unwrap().to_vec();
                            row[r] = v;
                            st.upsert_a_row(id, &row).unwrap();
                        },
                        |st| st.adapter().a_row(id).unwrap()[r],
                    );
                    let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs());
                    assert!(rel < 5e-3, "A grad t={t} id={id} r={r}: {analytic} vs {numeric}");
                    checked += 1;
                }
            }
            // d(loss)/dB[r][c] spot checks.
            for (r, c) in [(0usize, 0usize), (1, 2), (2, 4)] {
                let analytic: f64 = grad_w[t]
                    .iter()
                    .filter_map(|(&id, gw)| {
                        tables[t].adapter().a_row(id).map(|a| a[r] as f64 * gw[c])
                    })
                    .sum();
                if analytic.abs() < 1e-4 {
                    continue;
                }
                let numeric = fd_grad(
                    &model,
                    &mut tables,
                    &batch,
                    t,
                    |st, v| {
                        let mut bb = st.adapter().b().to_vec();
                        bb[r * dim + c] = v;
                        st.set_b(bb).unwrap();
                    },
                    |st| st.adapter().b()[r * dim + c],
                );
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs());
                assert!(rel < 5e-3, "B grad t={t} r={r} c={c}: {analytic} vs {numeric}");
                checked += 1;
            }
        }
        assert!(checked >= 10, "too few informative gradient checks ({checked})");
    }

    #[test]
    fn repeated_steps_overfit_a_small_batch() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let (n_tables, vocab, dim, rank, dense_dim) = (2, 30, 8, 4, 4);
        let mut tables = rand_tables(n_tables, vocab, dim, rank, &mut rng);
        let model = ToyDlrm::new(n_tables, dim, dense_dim, 9);
        let batch: Vec<Sample> =
            (0..16).map(|_| rand_sample(n_tables, vocab, dense_dim, &mut rng)).collect();

        let mut trainer = AdapterTrainer::new(
            TrainerConfig { learning_rate: 0.5, batch_size: 16, ..Default::default() },
            model.clone(),
        )
        .unwrap();
        let first = trainer.train_step(&mut tables, &batch).unwrap().loss;
        let mut last = first;
        for _ in 0..300 {
            last = trainer.train_step(&mut tables, &batch).unwrap().loss;
        }
        assert!(
            last < 0.5 * first,
            "adapter SGD should overfit a fixed batch: first {first}, last {last}"
        );
    }

    #[test]
    fn dead_adapter_is_revived_and_learns_after_full_update() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let (n_tables, vocab, dim, rank, dense_dim) = (1, 20, 6, 3, 4);
        let mut tables = rand_tables(n_tables, vocab, dim, rank, &mut rng);
        let fresh: Vec<f32> = (0..vocab * dim).map(|_| rng.gen_range(-0.5..0.5f64) as f32).collect();
        tables[0].apply_full_update(fresh).unwrap();
        assert!(tables[0].adapter().b_is_zero());

        let model = ToyDlrm::new(n_tables, dim, dense_dim, 1);
        let batch: Vec<Sample> =
            (0..8).map(|_| rand_sample(n_tables, vocab, dense_dim, &mut rng)).collect();
        let mut trainer = AdapterTrainer::new(
            TrainerConfig { learning_rate: 0.5, batch_size: 8, ..Default::default() },
            model,
        )
        .unwrap();
        let first = trainer.train_step(&mut tables, &batch).unwrap().loss;
        assert!(!tables[0].adapter().b_is_zero(), "B must be re-seeded");
        let mut last = first;
        for _ in 0..200 {
            last = trainer.train_step(&mut tables, &batch).unwrap().loss;
        }
        assert!(last < 0.8 * first, "revived adapter still dead: {first} -> {last}");
    }

    #[test]
    fn non_finite_update_aborts_without_touching_state() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let (n_tables, vocab, dim, rank, dense_dim) = (1, 10, 4, 2, 3);
        let mut tables = rand_tables(n_tables, vocab, dim, rank, &mut rng);
        let model = ToyDlrm::new(n_tables, dim, dense_dim, 2);
        let batch = vec![rand_sample(n_tables, vocab, dense_dim, &mut rng)];

        let snapshot_b = tables[0].adapter().b().to_vec();
        let snapshot_rows: Vec<(Index, Vec<f32>)> =
            tables[0].adapter().iter_rows().map(|(i, r)| (i, r.to_vec())).collect();

        // A learning rate this large pushes the staged f32 parameters past
        // their range; the step must refuse to commit anything.
        let cfg = TrainerConfig { learning_rate: 1e45, ..Default::default() };
        let mut trainer = AdapterTrainer::new(cfg, model).unwrap();
        let err = trainer.train_step(&mut tables, &batch).unwrap_err();
        assert!(matches!(err, TrainError::NonFinite { .. }));
        assert_eq!(tables[0].adapter().b(), &snapshot_b[..]);
        let rows_after: Vec<(Index, Vec<f32>)> =
            tables[0].adapter().iter_rows().map(|(i, r)| (i, r.to_vec())).collect();
        assert_eq!(rows_after, snapshot_rows);
        assert_eq!(trainer.step(), 0);
    }

    #[test]
    fn capacity_exhaustion_skips_cold_inserts_but_reports_demand() {
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        let dim = 4;
        let table = EmbeddingTable::zeroed(0, 50, dim).unwrap();
        let mut st = TableState::new(table, 2, 2).unwrap();
        st.set_b(vec![0.1; 2 * dim]).unwrap();
        st.upsert_a_row(1, &[0.1, 0.1]).unwrap();
        st.upsert_a_row(2, &[0.1, 0.1]).unwrap();
        let mut tables = vec![st];

        let model = ToyDlrm::new(1, dim, 3, 7);
        let mut trainer = AdapterTrainer::new(TrainerConfig::default(), model).unwrap();
        let batch = vec![Sample {
            ts: 0.0,
            ids: vec![vec![1, 40]], // 1 is hot, 40 is cold and cannot fit
            dense: (0..3).map(|_| rng.gen_range(-1.0..1.0f64) as f32).collect(),
            label: 1,
        }];
        let report = trainer.train_step(&mut tables, &batch).unwrap();
        assert_eq!(report.skipped_cold, 1);
        let touched: Vec<_> = report.touched[0].iter().map(|t| (t.index, t.applied)).collect();
        assert!(touched.contains(&(1, true)));
        assert!(touched.contains(&(40, false)));
        assert_eq!(tables[0].adapter().hot_count(), 2);
        assert!(tables[0].adapter().a_row(40).is_none());
    }

    #[test]
    fn batch_sampling_is_uniform_over_the_window() {
        let mut rb = RingBuffer::new(1000, 100.0);
        for i in 0..100 {
            rb.ingest(Sample { ts: i as f64, ids: vec![vec![i]], dense: vec![], label: 0 });
        }
        // Window = last 20 minutes at now=99.5: ts in [79.5, 99.5] -> ids 80..100.
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let mut counts = std::collections::BTreeMap::new();
        for _ in 0..200 {
            let batch = sample_batch(&rb, 99.5, 20.0, 50, &mut rng).unwrap();
            for s in batch {
                *counts.entry(s.ids[0][0]).or_insert(0usize) += 1;
            }
        }
        assert!(counts.keys().all(|&id| (80..100).contains(&id)));
        assert_eq!(counts.len(), 20);
        let total: usize = counts.values().sum();
        let expect = total as f64 / 20.0;
        for (&id, &c) in &counts {
            let dev = (c as f64 - expect).abs() / expect;
            assert!(dev < 0.2, "id {id} drawn {c} times, expected ~{expect}");
        }
    }

    #[test]
    fn empty_window_yields_no_batch() {
        let mut rb = RingBuffer::new(10, 100.0);
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        assert!(sample_batch(&rb, 5.0, 1.0, 4, &mut rng).is_none());
        rb.ingest(Sample { ts: 0.0, ids: vec![], dense: vec![], label: 0 });
        // Window [4,5] excludes the ts=0 entry.
        assert!(sample_batch(&rb, 5.0, 1.0, 4, &mut rng).is_none());
        assert!(sample_batch(&rb, 0.5, 1.0, 4, &mut rng).is_some());
    }

    #[test]
    fn identical_seeds_build_identical_models() {
        let a = ToyDlrm::new(2, 8, 4, 42);
        let b = ToyDlrm::new(2, 8, 4, 42);
        let s = Sample { ts: 0.0, ids: vec![vec![0], vec![1]], dense: vec![0.5, -0.5, 0.25, 0.0], label: 0 };
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let tables = rand_tables(2, 10, 8, 2, &mut rng);
        assert_eq!(
            a.forward(&tables[..], &s).unwrap().logit,
            b.forward(&tables[..], &s).unwrap().logit
        );
    }
}
