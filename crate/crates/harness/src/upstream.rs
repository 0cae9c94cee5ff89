//! Upstream training cluster stand-in: plain full-rank embedding tables
//! trained online on every arriving sample.  Baseline strategies ship rows
//! from here to the serving side; periodic full syncs install the whole
//! tables.

use liveupdate_core::model::Index;
use liveupdate_core::trainer::{PooledRows, ToyDlrm, TrainError};
use liveupdate_core::workload::Sample;
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use std::collections::{BTreeMap, BTreeSet};

/// A dense |V| x d table with no adapter machinery.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseTable {
    vocab: usize,
    dim: usize,
    weights: Vec<f32>,
}

impl DenseTable {
    pub fn new(vocab: usize, dim: usize, weights: Vec<f32>) -> Self {
        assert_eq!(weights.len(), vocab * dim, "weights must be |V| x d");
        DenseTable { vocab, dim, weights }
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn row(&self, index: Index) -> &[f32] {
        let i = index as usize;
        assert!(i < self.vocab, "index {index} out of range");
        &self.weights[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_mut(&mut self, index: Index) -> &mut [f32] {
        let i = index as usize;
        assert!(i < self.vocab, "index {index} out of range");
        &mut self.weights[i * self.dim..(i + 1) * self.dim]
    }
}

/// One dense table per feature, usable as the trainer's embedding source.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseTables(pub Vec<DenseTable>);

impl DenseTables {
    /// Small random weights, seeded; the shared starting point for every
    /// strategy and the upstream trainer.
    pub fn seeded_init(vocabs: &[usize], dim: usize, seed: u64) -> Self {
        let tables = vocabs
            .iter()
            .enumerate()
            .map(|(t, &vocab)| {
                let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x1ab1_e000 ^ ((t as u64) << 24));
                let weights = (0..vocab * dim)
                    .map(|_| (rng.sample::<f64, _>(rand_distr::StandardNormal) * 0.05) as f32)
                    .collect();
                DenseTable::new(vocab, dim, weights)
            })
            .collect();
        DenseTables(tables)
    }

    pub fn tables(&self) -> &[DenseTable] {
        &self.0
    }
}

impl PooledRows for DenseTables {
    fn num_tables(&self) -> usize {
        self.0.len()
    }

    fn dim(&self) -> usize {
        self.0.first().map_or(0, |t| t.dim)
    }

    // Mirrors the serving path: accumulate in f64, round to f32, then widen,
    // so both sides see identically quantized pooled rows.
    fn pooled_row(&self, table: usize, ids: &[Index]) -> Result<Vec<f64>, TrainError> {
        let t = &self.0[table];
        let mut acc = vec![0.0f64; t.dim];
        for &id in ids {
            for (a, &x) in acc.iter_mut().zip(t.row(id)) {
                *a += x as f64;
            }
        }
        let n = ids.len() as f64;
        Ok(acc.into_iter().map(|a| ((a / n) as f32) as f64).collect())
    }
}

/// Online SGD over the full tables, one sample at a time.  Tracks which rows
/// changed since the last full sync so delta shipping can iterate divergence
/// candidates instead of whole tables.
pub struct UpstreamTrainer {
    model: ToyDlrm,
    tables: DenseTables,
    learning_rate: f64,
    touched_since_full_sync: Vec<BTreeSet<Index>>,
    samples_seen: u64,
}

impl UpstreamTrainer {
    pub fn new(model: ToyDlrm, tables: DenseTables, learning_rate: f64) -> Self {
        let n = tables.0.len();
        assert_eq!(model.num_tables(), n, "model and tables disagree on table count");
        UpstreamTrainer {
            model,
            tables,
            learning_rate,
            touched_since_full_sync: vec![BTreeSet::new(); n],
            samples_seen: 0,
        }
    }

    pub fn tables(&self) -> &DenseTables {
        &self.tables
    }

    pub fn samples_seen(&self) -> u64 {
        self.samples_seen
    }

    /// Rows this table has touched since the last [`note_full_sync`].
    pub fn touched(&self, table: usize) -> &BTreeSet<Index> {
        &self.touched_since_full_sync[table]
    }

    pub fn note_full_sync(&mut self) {
        for set in &mut self.touched_since_full_sync {
            set.clear();
        }
    }

    /// One SGD step on a single sample.  Mean pooling spreads the pooled-row
    /// gradient over the ids, weighted by multiplicity.
    pub fn train(&mut self, sample: &Sample) -> Result<(), TrainError> {
        let trace = self.model.forward(&self.tables, sample)?;
        let back = self.model.backward(&trace, sample.label);
        for (t, ids) in sample.ids.iter().enumerate() {
            let len = ids.len() as f64;
            let mut by_id: BTreeMap<Index, usize> = BTreeMap::new();
            for &id in ids {
                *by_id.entry(id).or_insert(0) += 1;
            }
            for (id, count) in by_id {
                let coeff = self.learning_rate * count as f64 / len;
                let row = self.tables.0[t].row_mut(id);
                for (w, &g) in row.iter_mut().zip(&back.g_pooled[t]) {
                    *w = (*w as f64 - coeff * g) as f32;
                }
                self.touched_since_full_sync[t].insert(id);
            }
        }
        self.samples_seen += 1;
        Ok(())
    }
}
