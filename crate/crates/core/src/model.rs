//! Embedding tables with sparse low-rank adapter overlays.
//!
//! A [`TableState`] bundles the frozen base table `W`, the adapter `(A, B)`
//! and the hot-index filter, and is the only way to mutate them, which keeps
//! the filter equal to the adapter's key set by construction.  The served
//! value of a row is
//!
//! ```text
//! serve(i) = W[i] + A[i] * B      (A[i] present only for hot indices)
//! ```
//!
//! with f32 storage and f64 accumulation.  `fold_row` writes exactly the
//! value the lookup path computes, so folding a row back into `W` never
//! changes what callers observe.

pub mod checkpoint;

use crate::lowrank::{self, LowRankError};
use crate::mat::Mat;
use parking_lot::RwLock;
use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use thiserror::Error;

/// Row index into an embedding table.
pub type Index = u64;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("index {index} out of range for vocabulary of {vocab}")]
    IndexOutOfRange { index: Index, vocab: u64 },
    #[error("expected a vector of length {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("lookup over an empty index list")]
    EmptyIndexList,
    #[error("adapter is at capacity ({capacity} rows)")]
    CapacityExhausted { capacity: usize },
    #[error("capacity {capacity} cannot hold {hot} hot rows")]
    CapacityBelowOccupancy { capacity: usize, hot: usize },
    #[error("capacity {capacity} exceeds vocabulary {vocab}")]
    CapacityAboveVocab { capacity: usize, vocab: u64 },
    #[error("rank {rank} out of range for dimension {dim}")]
    RankOutOfRange { rank: usize, dim: usize },
    #[error("table must have at least one row and one column")]
    EmptyShape,
    #[error("non-finite value in input")]
    NonFinite,
    #[error(transparent)]
    LowRank(#[from] LowRankError),
}

/// One served embedding row.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingVector {
    pub values: Vec<f32>,
}

impl EmbeddingVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Dense base table, frozen between full-parameter updates.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    table_id: u16,
    vocab: usize,
    dim: usize,
    weights: Vec<f32>,
    version: u64,
}

impl EmbeddingTable {
    pub fn from_weights(
        table_id: u16,
        vocab: usize,
        dim: usize,
        weights: Vec<f32>,
    ) -> Result<Self, ModelError> {
        if vocab == 0 || dim == 0 {
            return Err(ModelError::EmptyShape);
        }
        if weights.len() != vocab * dim {
            return Err(ModelError::DimensionMismatch { expected: vocab * dim, got: weights.len() });
        }
        if !weights.iter().all(|w| w.is_finite()) {
            return Err(ModelError::NonFinite);
        }
        Ok(EmbeddingTable { table_id, vocab, dim, weights, version: 0 })
    }

    pub fn zeroed(table_id: u16, vocab: usize, dim: usize) -> Result<Self, ModelError> {
        EmbeddingTable::from_weights(table_id, vocab, dim, vec![0.0; vocab * dim])
    }

    pub fn table_id(&self) -> u16 {
        self.table_id
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn row(&self, index: Index) -> Result<&[f32], ModelError> {
        let i = self.check_index(index)?;
        Ok(&self.weights[i * self.dim..(i + 1) * self.dim])
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    fn check_index(&self, index: Index) -> Result<usize, ModelError> {
        if index >= self.vocab as u64 {
            return Err(ModelError::IndexOutOfRange { index, vocab: self.vocab as u64 });
        }
        Ok(index as usize)
    }
}

/// Sparse low-rank delta: per-hot-index k-vectors `A[i]` and a shared
/// `k x d` matrix `B`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    rank: usize,
    dim: usize,
    capacity: usize,
    a: BTreeMap<Index, Vec<f32>>,
    b: Vec<f32>,
}

impl LoraAdapter {
    pub fn new(rank: usize, dim: usize, capacity: usize) -> Result<Self, ModelError> {
        if dim == 0 {
            return Err(ModelError::EmptyShape);
        }
        if rank == 0 || rank > dim {
            return Err(ModelError::RankOutOfRange { rank, dim });
        }
        Ok(LoraAdapter { rank, dim, capacity, a: BTreeMap::new(), b: vec![0.0; rank * dim] })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn hot_count(&self) -> usize {
        self.a.len()
    }

    pub fn a_row(&self, index: Index) -> Option<&[f32]> {
        self.a.get(&index).map(Vec::as_slice)
    }

    /// Hot indices in ascending order.
    pub fn hot_indices(&self) -> impl Iterator<Item = Index> + '_ {
        self.a.keys().copied()
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = (Index, &[f32])> + '_ {
        self.a.iter().map(|(i, r)| (*i, r.as_slice()))
    }

    pub fn b(&self) -> &[f32] {
        &self.b
    }

    pub fn set_b(&mut self, b: Vec<f32>) -> Result<(), ModelError> {
        if b.len() != self.rank * self.dim {
            return Err(ModelError::DimensionMismatch { expected: self.rank * self.dim, got: b.len() });
        }
        if !b.iter().all(|x| x.is_finite()) {
            return Err(ModelError::NonFinite);
        }
        self.b = b;
        Ok(())
    }

    pub fn b_is_zero(&self) -> bool {
        self.b.iter().all(|&x| x == 0.0)
    }
}

/// Membership filter over the adapter's hot indices; the serving path asks
/// this before touching the sparse map.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct HotIndexFilter {
    set: BTreeSet<Index>,
}

impl HotIndexFilter {
    pub fn contains(&self, index: Index) -> bool {
        self.set.contains(&index)
    }

    pub fn len(&self) -> usize {
        self.set.len()
    }

    pub fn is_empty(&self) -> bool {
        self.set.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = Index> + '_ {
        self.set.iter().copied()
    }
}

/// Outcome of an A-row upsert.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Upsert {
    Inserted,
    Updated,
}

/// A base table plus its adapter and filter, mutated only through methods
/// that keep the three consistent.
#[derive(Clone, Debug)]
pub struct TableState {
    table: EmbeddingTable,
    adapter: LoraAdapter,
    filter: HotIndexFilter,
}

impl TableState {
    pub fn new(table: EmbeddingTable, rank: usize, capacity: usize) -> Result<Self, ModelError> {
        if capacity > table.vocab() {
            return Err(ModelError::CapacityAboveVocab { capacity, vocab: table.vocab() as u64 });
        }
        let adapter = LoraAdapter::new(rank, table.dim(), capacity)?;
        Ok(TableState { table, adapter, filter: HotIndexFilter::default() })
    }

    pub fn table(&self) -> &EmbeddingTable {
        &self.table
    }

    pub fn adapter(&self) -> &LoraAdapter {
        &self.adapter
    }

    pub fn filter(&self) -> &HotIndexFilter {
        &self.filter
    }

    /// Served row: base weights plus the adapter delta for hot indices.
    pub fn lookup(&self, index: Index) -> Result<EmbeddingVector, ModelError> {
        let base = self.table.row(index)?;
        if !self.filter.contains(index) {
            return Ok(EmbeddingVector { values: base.to_vec() });
        }
        let a_row = self.adapter.a_row(index).expect("filter and adapter agree");
        Ok(EmbeddingVector { values: combine_row(base, a_row, &self.adapter.b, self.table.dim()) })
    }

    /// Arithmetic mean of the served rows for `indices` (f64 accumulation).
    pub fn pooled_lookup(&self, indices: &[Index]) -> Result<EmbeddingVector, ModelError> {
        if indices.is_empty() {
            return Err(ModelError::EmptyIndexList);
        }
        let dim = self.table.dim();
        let mut acc = vec![0.0f64; dim];
        for &i in indices {
            let v = self.lookup(i)?;
            for (a, x) in acc.iter_mut().zip(&v.values) {
                *a += *x as f64;
            }
        }
        let n = indices.len() as f64;
        Ok(EmbeddingVector { values: acc.into_iter().map(|a| (a / n) as f32).collect() })
    }

    /// Inserts or overwrites the A-row for `index`.  Inserting a new row
    /// fails once the adapter holds `capacity` rows.
    pub fn upsert_a_row(&mut self, index: Index, row: &[f32]) -> Result<Upsert, ModelError> {
        self.table.check_index(index)?;
        if row.len() != self.adapter.rank {
            return Err(ModelError::DimensionMismatch { expected: self.adapter.rank, got: row.len() });
        }
        if !row.iter().all(|x| x.is_finite()) {
            return Err(ModelError::NonFinite);
        }
        if let Some(existing) = self.adapter.a.get_mut(&index) {
            existing.copy_from_slice(row);
            return Ok(Upsert::Updated);
        }
        if self.adapter.a.len() >= self.adapter.capacity {
            return Err(ModelError::CapacityExhausted { capacity: self.adapter.capacity });
        }
        self.adapter.a.insert(index, row.to_vec());
        self.filter.set.insert(index);
        Ok(Upsert::Inserted)
    }

    pub fn set_b(&mut self, b: Vec<f32>) -> Result<(), ModelError> {
        self.adapter.set_b(b)
    }

    /// Folds the adapter delta of one row into the base weights and evicts
    /// the row.  The served value is unchanged because the fold stores the
    /// exact f32 the lookup path would have produced.  Returns `false` for
    /// cold indices (defensive no-op).
    pub fn fold_row(&mut self, index: Index) -> Result<bool, ModelError> {
        let i = self.table.check_index(index)?;
        let Some(a_row) = self.adapter.a.remove(&index) else {
            return Ok(false);
        };
        self.filter.set.remove(&index);
        let dim = self.table.dim;
        let folded = combine_row(
            &self.table.weights[i * dim..(i + 1) * dim],
            &a_row,
            &self.adapter.b,
            dim,
        );
        self.table.weights[i * dim..(i + 1) * dim].copy_from_slice(&folded);
        Ok(true)
    }

    /// Folds every hot row; afterwards the adapter is empty.
    pub fn fold_all(&mut self) -> Result<usize, ModelError> {
        let hot: Vec<Index> = self.adapter.hot_indices().collect();
        for &i in &hot {
            self.fold_row(i)?;
        }
        Ok(hot.len())
    }

    /// Installs a freshly trained full table: weights replaced, version
    /// bumped, adapter rows dropped and `B` zeroed.
    pub fn apply_full_update(&mut self, new_weights: Vec<f32>) -> Result<(), ModelError> {
        let expected = self.table.vocab * self.table.dim;
        if new_weights.len() != expected {
            return Err(ModelError::DimensionMismatch { expected, got: new_weights.len() });
        }
        if !new_weights.iter().all(|w| w.is_finite()) {
            return Err(ModelError::NonFinite);
        }
        self.table.weights = new_weights;
        self.table.version += 1;
        self.adapter.a.clear();
        self.adapter.b.iter_mut().for_each(|x| *x = 0.0);
        self.filter.set.clear();
        Ok(())
    }

    /// Rewrites the adapter at a new rank via [`lowrank::recompact`] over the
    /// active rows.  Growing is exact; shrinking keeps the best rank-`k_new`
    /// approximation of the current delta.
    pub fn recompact_to_rank(&mut self, k_new: usize) -> Result<(), ModelError> {
        if k_new == 0 || k_new > self.table.dim() {
            return Err(ModelError::RankOutOfRange { rank: k_new, dim: self.table.dim() });
        }
        let k = self.adapter.rank;
        if k_new == k {
            return Ok(());
        }
        let indices: Vec<Index> = self.adapter.hot_indices().collect();
        let a = Mat::from_fn(indices.len(), k, |r, c| {
            self.adapter.a[&indices[r]][c] as f64
        });
        let b = Mat::from_fn(k, self.table.dim(), |r, c| {
            self.adapter.b[r * self.table.dim() + c] as f64
        });
        let (an, bn) = lowrank::recompact(&a, &b, k_new)?;
        let mut new_a = BTreeMap::new();
        for (r, &idx) in indices.iter().enumerate() {
            let row: Vec<f32> = (0..k_new).map(|c| an.at(r, c) as f32).collect();
            new_a.insert(idx, row);
        }
        let mut new_b = Vec::with_capacity(k_new * self.table.dim());
        for r in 0..k_new {
            for c in 0..self.table.dim() {
                new_b.push(bn.at(r, c) as f32);
            }
        }
        self.adapter.rank = k_new;
        self.adapter.a = new_a;
        self.adapter.b = new_b;
        Ok(())
    }

    /// Sets the row budget.  The new capacity must cover the current hot
    /// set (fold first when shrinking) and fit the vocabulary.
    pub fn set_capacity(&mut self, capacity: usize) -> Result<(), ModelError> {
        if capacity < self.adapter.a.len() {
            return Err(ModelError::CapacityBelowOccupancy {
                capacity,
                hot: self.adapter.a.len(),
            });
        }
        if capacity > self.table.vocab() {
            return Err(ModelError::CapacityAboveVocab { capacity, vocab: self.table.vocab() as u64 });
        }
        self.adapter.capacity = capacity;
        Ok(())
    }

    /// True when the filter mirrors the adapter key set exactly; the
    /// mutation methods maintain this, tests assert it.
    pub fn is_consistent(&self) -> bool {
        self.filter.set.len() == self.adapter.a.len()
            && self.filter.set.iter().all(|i| self.adapter.a.contains_key(i))
    }
}

/// `base + a_row * b`, accumulated in f64 and rounded once per component.
/// Both the lookup path and `fold_row` go through here, which is what makes
/// folding invisible to readers.
fn combine_row(base: &[f32], a_row: &[f32], b: &[f32], dim: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(dim);
    for c in 0..dim {
        let mut acc = base[c] as f64;
        for (r, &a) in a_row.iter().enumerate() {
            acc += a as f64 * b[r * dim + c] as f64;
        }
        out.push(acc as f32);
    }
    out
}

/// Shared handle for one table: many readers, one writer at a time.  Every
/// mutation runs under the write lock, so a reader sees each row either
/// before or after a change, never mid-write.
#[derive(Clone)]
pub struct SharedTableState {
    inner: Arc<RwLock<TableState>>,
}

impl SharedTableState {
    pub fn new(state: TableState) -> Self {
        SharedTableState { inner: Arc::new(RwLock::new(state)) }
    }

    pub fn lookup(&self, index: Index) -> Result<EmbeddingVector, ModelError> {
        self.inner.read().lookup(index)
    }

    pub fn pooled_lookup(&self, indices: &[Index]) -> Result<EmbeddingVector, ModelError> {
        self.inner.read().pooled_lookup(indices)
    }

    /// Runs a read-only closure under the read lock.
    pub fn read<T>(&self, f: impl FnOnce(&TableState) -> T) -> T {
        f(&self.inner.read())
    }

    /// Runs one mutation under the write lock; keep closures row-granular so
    /// readers are never blocked for longer than one row publication.
    pub fn write<T>(&self, f: impl FnOnce(&mut TableState) -> T) -> T {
        f(&mut self.inner.write())
    }
}
