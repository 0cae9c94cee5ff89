//! Periodic adapter synchronization between training replicas.
//!
//! Each replica ("rank") accumulates the set of adapter rows it changed
//! since the last round.  A round gathers every rank's contribution up a
//! binomial tree, merges them with a highest-rank-wins rule per row, and
//! broadcasts the merged result back down.  The merge is associative,
//! commutative and idempotent, so delivery order, duplication from retries,
//! and tree shape cannot change the outcome.
//!
//! Wire format, little-endian throughout, one message per (rank, table):
//!
//! ```text
//! round        u64
//! rank         u16
//! table        u16
//! k            u16     adapter rank
//! d            u16     embedding dimension
//! entry_count  u32
//! entries      entry_count x { index u64, row k x f32 }
//! b_included   u8      0 or 1
//! b            k*d x f32, present iff b_included == 1
//! ```

use crate::model::{Index, ModelError, TableState};
use crate::trainer::TrainReport;
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

pub type TableId = u16;

/// Fixed header size of a wire message in bytes.
pub const MESSAGE_HEADER_BYTES: usize = 8 + 2 + 2 + 2 + 2 + 4 + 1;

#[derive(Debug, Error)]
pub enum SyncError {
    #[error("message truncated at byte {at}")]
    Truncated { at: usize },
    #[error("{got} trailing bytes after message body")]
    TrailingBytes { got: usize },
    #[error("b_included flag must be 0 or 1, got {0}")]
    BadFlag(u8),
    #[error("contributions disagree on table {table} shape: {k_a}x{d_a} vs {k_b}x{d_b}")]
    ShapeMismatch { table: TableId, k_a: u16, d_a: u16, k_b: u16, d_b: u16 },
    #[error("message size field out of range: {0}")]
    SizeOverflow(usize),
    #[error("rank {rank} unreachable after {attempts} delivery attempts")]
    Unreachable { rank: u16, attempts: u32 },
    #[error("table index {0} out of range for this rank")]
    UnknownTable(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Rows one rank changed in one table since the last round.
#[derive(Clone, Debug, PartialEq)]
pub struct TableContribution {
    pub table: TableId,
    pub k: u16,
    pub d: u16,
    /// Changed A rows, ascending by index.
    pub entries: Vec<(Index, Vec<f32>)>,
    /// The rank's `B`, included when it trained this table.
    pub b: Option<Vec<f32>>,
}

/// All tables of one rank's round contribution.
#[derive(Clone, Debug, PartialEq)]
pub struct RankContribution {
    pub rank: u16,
    pub tables: Vec<TableContribution>,
}

/// Merged view of one table after a round: winning rank and value per row.
#[derive(Clone, Debug, PartialEq)]
pub struct MergedTable {
    pub table: TableId,
    pub k: u16,
    pub d: u16,
    pub entries: BTreeMap<Index, (u16, Vec<f32>)>,
    pub b: Option<(u16, Vec<f32>)>,
}

/// Result of merging any number of rank contributions.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MergeOutcome {
    pub tables: BTreeMap<TableId, MergedTable>,
}

impl MergeOutcome {
    /// Folds one rank's contribution in.  Per row and per `B`, the highest
    /// contributing rank wins; equal ranks carry equal values (a rank never
    /// contributes two values for one key in one round), which makes
    /// re-absorbing a duplicate a no-op.
    pub fn absorb(&mut self, contrib: &RankContribution) -> Result<(), SyncError> {
        for tc in &contrib.tables {
            let merged = self.tables.entry(tc.table).or_insert_with(|| MergedTable {
                table: tc.table,
                k: tc.k,
                d: tc.d,
                entries: BTreeMap::new(),
                b: None,
            });
            if merged.k != tc.k || merged.d != tc.d {
                return Err(SyncError::ShapeMismatch {
                    table: tc.table,
                    k_a: merged.k,
                    d_a: merged.d,
                    k_b: tc.k,
                    d_b: tc.d,
                });
            }
            for (idx, row) in &tc.entries {
                match merged.entries.get(idx) {
                    Some(&(r, _)) if r >= contrib.rank => {}
                    _ => {
                        merged.entries.insert(*idx, (contrib.rank, row.clone()));
                    }
                }
            }
            if let Some(b) = &tc.b {
                match &merged.b {
                    Some((r, _)) if *r >= contrib.rank => {}
                    _ => merged.b = Some((contrib.rank, b.clone())),
                }
            }
        }
        Ok(())
    }

    pub fn merge_all(contribs: &[RankContribution]) -> Result<MergeOutcome, SyncError> {
        let mut out = MergeOutcome::default();
        for c in contribs {
            out.absorb(c)?;
        }
        Ok(out)
    }

    /// Re-encodes the merged values as a contribution from `sender`, which
    /// is how the result travels back down the tree.  Winner tags are a
    /// merge-time detail and do not survive the wire.
    pub fn as_contribution(&self, sender: u16) -> RankContribution {
        let tables = self
            .tables
            .values()
            .map(|mt| TableContribution {
                table: mt.table,
                k: mt.k,
                d: mt.d,
                entries: mt.entries.iter().map(|(&i, (_, v))| (i, v.clone())).collect(),
                b: mt.b.as_ref().map(|(_, b)| b.clone()),
            })
            .collect();
        RankContribution { rank: sender, tables }
    }
}

// ---------------------------------------------------------------------------
// Wire encoding
// ---------------------------------------------------------------------------

/// Serialized size of one table message.
pub fn message_bytes(tc: &TableContribution) -> usize {
    MESSAGE_HEADER_BYTES
        + tc.entries.len() * (8 + tc.k as usize * 4)
        + tc.b.as_ref().map_or(0, |b| b.len() * 4)
}

pub fn encode_message(round: u64, rank: u16, tc: &TableContribution) -> Result<Vec<u8>, SyncError> {
    if tc.entries.len() > u32::MAX as usize {
        return Err(SyncError::SizeOverflow(tc.entries.len()));
    }
    let mut out = Vec::with_capacity(message_bytes(tc));
    out.extend_from_slice(&round.to_le_bytes());
    out.extend_from_slice(&rank.to_le_bytes());
    out.extend_from_slice(&tc.table.to_le_bytes());
    out.extend_from_slice(&tc.k.to_le_bytes());
    out.extend_from_slice(&tc.d.to_le_bytes());
    out.extend_from_slice(&(tc.entries.len() as u32).to_le_bytes());
    for (idx, row) in &tc.entries {
        debug_assert_eq!(row.len(), tc.k as usize);
        out.extend_from_slice(&idx.to_le_bytes());
        for v in row {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    match &tc.b {
        Some(b) => {
            debug_assert_eq!(b.len(), tc.k as usize * tc.d as usize);
            out.push(1);
            for v in b {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        None => out.push(0),
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], SyncError> {
        if self.at + n > self.buf.len() {
            return Err(SyncError::Truncated { at: self.buf.len() });
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, SyncError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, SyncError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, SyncError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, SyncError> {
        let raw = self.take(n * 4)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn decode_message(buf: &[u8]) -> Result<(u64, u16, TableContribution), SyncError> {
    let mut c = Cursor { buf, at: 0 };
    let round = c.u64()?;
    let rank = c.u16()?;
    let table = c.u16()?;
    let k = c.u16()?;
    let d = c.u16()?;
    let count = c.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let idx = c.u64()?;
        let row = c.f32s(k as usize)?;
        entries.push((idx, row));
    }
    let b = match c.take(1)?[0] {
        0 => None,
        1 => Some(c.f32s(k as usize * d as usize)?),
        f => return Err(SyncError::BadFlag(f)),
    };
    if c.at != buf.len() {
        return Err(SyncError::TrailingBytes { got: buf.len() - c.at });
    }
    Ok((round, rank, TableContribution { table, k, d, entries, b }))
}

// ---------------------------------------------------------------------------
// Simulated transport
// ---------------------------------------------------------------------------

/// Lossy, delaying, reordering point-to-point transport.  Delivery is
/// at-least-once: a dropped transfer is retried until it lands (bounded so a
/// fully dead link errors instead of spinning).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimNetConfig {
    /// Probability a transfer attempt is dropped.
    pub drop_prob: f64,
    /// Shuffle arrival order within a gather stage.
    pub reorder: bool,
    /// Fixed per-attempt link latency.
    pub base_delay_ms: f64,
    /// Uniform extra latency in `[0, jitter_ms]` per attempt.
    pub jitter_ms: f64,
    /// Link bandwidth for the size-dependent latency term.
    pub bandwidth_gbps: f64,
    pub seed: u64,
}

impl Default for SimNetConfig {
    fn default() -> Self {
        SimNetConfig {
            drop_prob: 0.0,
            reorder: false,
            base_delay_ms: 0.5,
            jitter_ms: 0.0,
            bandwidth_gbps: 100.0,
            seed: 0,
        }
    }
}

pub struct SimNet {
    config: SimNetConfig,
    rng: ChaCha12Rng,
}

const MAX_ATTEMPTS: u32 = 64;

/// One completed transfer: how long it took and how many attempts it cost.
struct Transfer {
    latency_ms: f64,
    attempts: u32,
}

impl SimNet {
    pub fn new(config: SimNetConfig) -> Self {
        assert!((0.0..1.0).contains(&config.drop_prob), "drop_prob must be in [0, 1)");
        let rng = ChaCha12Rng::seed_from_u64(config.seed ^ 0x6e37_0000);
        SimNet { config, rng }
    }

    pub fn config(&self) -> &SimNetConfig {
        &self.config
    }

    fn transfer(&mut self, to: u16, bytes: usize) -> Result<Transfer, SyncError> {
        let size_ms = bytes as f64 * 8.0 / (self.config.bandwidth_gbps * 1e9) * 1e3;
        let mut latency = 0.0;
        for attempt in 1..=MAX_ATTEMPTS {
            let jitter = if self.config.jitter_ms > 0.0 {
                self.rng.gen_range(0.0..self.config.jitter_ms)
            } else {
                0.0
            };
            latency += self.config.base_delay_ms + jitter + size_ms;
            if !self.rng.gen_bool(self.config.drop_prob) {
                return Ok(Transfer { latency_ms: latency, attempts: attempt });
            }
        }
        Err(SyncError::Unreachable { rank: to, attempts: MAX_ATTEMPTS })
    }
}

// ---------------------------------------------------------------------------
// Round orchestration
// ---------------------------------------------------------------------------

/// Accounting for one synchronization round.
#[derive(Clone, Debug, PartialEq)]
pub struct SyncRoundReport {
    pub round: u64,
    pub participants: usize,
    pub merged: MergeOutcome,
    /// Bytes put on the wire, retransmissions included.
    pub total_bytes: u64,
    /// Bytes of distinct transfers (each hop counted once).
    pub unique_bytes: u64,
    /// Critical-path latency: per stage the slowest active link, summed over
    /// gather and broadcast stages.
    pub latency_ms: f64,
    pub gather_stages: usize,
    pub retries: u32,
}

/// Runs one gather-merge-broadcast round over `contribs` (indexed by rank).
///
/// Gather: at stage `s`, rank `r + 2^s` forwards everything it holds to
/// rank `r` for every `r` divisible by `2^(s+1)`.  Rank 0 merges.
/// Broadcast: the merged result retraces the same tree in reverse.
pub fn sync_round(
    round: u64,
    contribs: &[RankContribution],
    net: &mut SimNet,
) -> Result<SyncRoundReport, SyncError> {
    let n = contribs.len();
    assert!(n > 0, "a round needs at least one participant");

    // Encode each rank's outgoing messages once; these byte buffers are what
    // travels (and gets re-forwarded) in the tree.
    let mut held: Vec<Vec<Vec<u8>>> = Vec::with_capacity(n);
    for c in contribs {
        let msgs = c
            .tables
            .iter()
            .filter(|tc| !tc.entries.is_empty() || tc.b.is_some())
            .map(|tc| encode_message(round, c.rank, tc))
            .collect::<Result<Vec<_>, _>>()?;
        held.push(msgs);
    }

    let mut total_bytes = 0u64;
    let mut unique_bytes = 0u64;
    let mut latency = 0.0f64;
    let mut retries = 0u32;
    let mut stages = 0usize;

    // Gather.
    let mut stride = 1usize;
    while stride < n {
        let mut stage_latency = 0.0f64;
        for dst in (0..n).step_by(stride * 2) {
            let src = dst + stride;
            if src >= n {
                continue;
            }
            let bundle = std::mem::take(&mut held[src]);
            let bytes: usize = bundle.iter().map(Vec::len).sum();
            let t = net.transfer(dst as u16, bytes)?;
            total_bytes += (bytes as u64) * u64::from(t.attempts);
            unique_bytes += bytes as u64;
            retries += t.attempts - 1;
            stage_latency = stage_latency.max(t.latency_ms);
            // At-least-once delivery can duplicate a bundle; receiving it
            // again changes nothing because the merge is idempotent, so the
            // simulation keeps a single copy.
            held[dst].extend(bundle);
        }
        latency += stage_latency;
        stages += 1;
        stride *= 2;
    }

    // Merge at the root, in (possibly reordered) arrival order.
    let mut msgs = std::mem::take(&mut held[0]);
    if net.config.reorder {
        msgs.shuffle(&mut net.rng);
    }
    let mut merged = MergeOutcome::default();
    let mut decoded: BTreeMap<u16, Vec<TableContribution>> = BTreeMap::new();
    for m in &msgs {
        let (r, rank, tc) = decode_message(m)?;
        debug_assert_eq!(r, round);
        decoded.entry(rank).or_default().push(tc);
    }
    for (&rank, tables) in decoded.iter().rev() {
        // Highest rank first or last makes no difference; order varies with
        // reordering and the result must not.
        merged.absorb(&RankContribution { rank, tables: tables.clone() })?;
    }

    // Broadcast the merged result back down the same tree.
    let down = merged.as_contribution(contribs[0].rank);
    let down_msgs: Vec<Vec<u8>> = down
        .tables
        .iter()
        .filter(|tc| !tc.entries.is_empty() || tc.b.is_some())
        .map(|tc| encode_message(round, down.rank, tc))
        .collect::<Result<Vec<_>, _>>()?;
    let down_bytes: usize = down_msgs.iter().map(Vec::len).sum();
    let mut reach = 1usize; // ranks holding the result
    while reach < n {
        let mut stage_latency = 0.0f64;
        for dst in reach..(reach * 2).min(n) {
            if down_bytes > 0 {
                let t = net.transfer(dst as u16, down_bytes)?;
                total_bytes += (down_bytes as u64) * u64::from(t.attempts);
                unique_bytes += down_bytes as u64;
                retries += t.attempts - 1;
                stage_latency = stage_latency.max(t.latency_ms);
            }
        }
        latency += stage_latency;
        reach *= 2;
    }

    Ok(SyncRoundReport {
        round,
        participants: n,
        merged,
        total_bytes,
        unique_bytes,
        latency_ms: latency,
        gather_stages: stages,
        retries,
    })
}

// ---------------------------------------------------------------------------
// Per-rank state
// ---------------------------------------------------------------------------

/// One replica's trainable state plus the change-tracking a round needs.
pub struct RankState {
    rank: u16,
    tables: Vec<TableState>,
    dirty: Vec<BTreeSet<Index>>,
    b_dirty: Vec<bool>,
}

impl RankState {
    pub fn new(rank: u16, tables: Vec<TableState>) -> Self {
        let n = tables.len();
        RankState { rank, tables, dirty: vec![BTreeSet::new(); n], b_dirty: vec![false; n] }
    }

    pub fn rank(&self) -> u16 {
        self.rank
    }

    pub fn tables(&self) -> &[TableState] {
        &self.tables
    }

    pub fn tables_mut(&mut self) -> &mut [TableState] {
        &mut self.tables
    }

    pub fn into_tables(self) -> Vec<TableState> {
        self.tables
    }

    pub fn note_a_change(&mut self, table: usize, index: Index) -> Result<(), SyncError> {
        self.dirty.get_mut(table).ok_or(SyncError::UnknownTable(table))?.insert(index);
        Ok(())
    }

    pub fn note_b_change(&mut self, table: usize) -> Result<(), SyncError> {
        *self.b_dirty.get_mut(table).ok_or(SyncError::UnknownTable(table))? = true;
        Ok(())
    }

    /// Marks everything a training step applied.
    pub fn note_train_report(&mut self, report: &TrainReport) -> Result<(), SyncError> {
        for (t, rows) in report.touched.iter().enumerate() {
            let mut any = false;
            for row in rows {
                if row.applied {
                    self.note_a_change(t, row.index)?;
                    any = true;
                }
            }
            if any {
                self.note_b_change(t)?;
            }
        }
        Ok(())
    }

    /// Current values of every row changed since the last round.  Rows that
    /// were folded away in the meantime are no longer adapter state and are
    /// skipped.
    pub fn contribution(&self) -> RankContribution {
        let tables = self
            .tables
            .iter()
            .enumerate()
            .map(|(t, state)| {
                let adapter = state.adapter();
                TableContribution {
                    table: state.table().table_id(),
                    k: adapter.rank() as u16,
                    d: adapter.dim() as u16,
                    entries: self.dirty[t]
                        .iter()
                        .filter_map(|&i| adapter.a_row(i).map(|r| (i, r.to_vec())))
                        .collect(),
                    b: self.b_dirty[t].then(|| adapter.b().to_vec()),
                }
            })
            .collect();
        RankContribution { rank: self.rank, tables }
    }

    /// Installs a merged round result and resets the change tracking.
    ///
    /// When the merged row set does not fit the local budget, capacity is
    /// temporarily raised, then rows are folded back into the base table in
    /// ascending index order (never-merged rows first) until the budget
    /// holds again.  Every replica folds the same rows, so replicas stay
    /// identical.
    pub fn integrate(&mut self, merged: &MergeOutcome) -> Result<(), SyncError> {
        for (t, state) in self.tables.iter_mut().enumerate() {
            let Some(mt) = merged.tables.get(&state.table().table_id()) else {
                continue;
            };
            let capacity = state.adapter().capacity();
            let union: BTreeSet<Index> = state
                .adapter()
                .hot_indices()
                .chain(mt.entries.keys().copied())
                .collect();
            if union.len() > capacity {
                state.set_capacity(union.len())?;
            }
            if let Some((_, b)) = &mt.b {
                state.set_b(b.clone())?;
            }
            for (&idx, (_, row)) in &mt.entries {
                state.upsert_a_row(idx, row)?;
            }
            if union.len() > capacity {
                let spill = union.len() - capacity;
                let fold: Vec<Index> = state
                    .adapter()
                    .hot_indices()
                    .filter(|i| !mt.entries.contains_key(i))
                    .chain(mt.entries.keys().copied())
                    .take(spill)
                    .collect();
                for idx in fold {
                    state.fold_row(idx)?;
                }
                state.set_capacity(capacity)?;
            }
            self.dirty[t].clear();
            self.b_dirty[t] = false;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::EmbeddingTable;

    fn state(table_id: u16, vocab: usize, dim: usize, rank: usize) -> TableState {
        let table = EmbeddingTable::zeroed(table_id, vocab, dim).unwrap();
        TableState::new(table, rank, vocab).unwrap()
    }

    fn contribution(rank: u16, entries: &[(Index, f32)], b0: Option<f32>) -> RankContribution {
        RankContribution {
            rank,
            tables: vec![TableContribution {
                table: 0,
                k: 2,
                d: 3,
                entries: entries.iter().map(|&(i, v)| (i, vec![v, -v])).collect(),
                b: b0.map(|v| vec![v; 6]),
            }],
        }
    }

    #[test]
    fn highest_rank_wins_per_row_and_for_b() {
        let contribs = vec![
            contribution(0, &[(1, 0.1), (2, 0.2)], Some(0.5)),
            contribution(3, &[(2, 3.2), (9, 3.9)], Some(3.5)),
            contribution(1, &[(2, 1.2), (5, 1.5)], None),
        ];
        let m = MergeOutcome::merge_all(&contribs).unwrap();
        let t = &m.tables[&0];
        assert_eq!(t.entries[&1], (0, vec![0.1, -0.1]));
        assert_eq!(t.entries[&2], (3, vec![3.2, -3.2]));
        assert_eq!(t.entries[&5], (1, vec![1.5, -1.5]));
        assert_eq!(t.entries[&9], (3, vec![3.9, -3.9]));
        assert_eq!(t.b, Some((3, vec![3.5; 6])));
    }

    #[test]
    fn merge_is_order_independent_and_idempotent() {
        let contribs = vec![
            contribution(0, &[(1, 0.1), (4, 0.4)], Some(0.1)),
            contribution(1, &[(1, 1.1), (7, 1.7)], None),
            contribution(2, &[(4, 2.4), (7, 2.7), (8, 2.8)], Some(2.0)),
            contribution(3, &[(1, 3.1)], Some(3.0)),
            contribution(4, &[(8, 4.8), (9, 4.9)], None),
        ];
        let reference = MergeOutcome::merge_all(&contribs).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        for _ in 0..100 {
            let mut shuffled = contribs.clone();
            shuffled.shuffle(&mut rng);
            // Duplicate a random contribution to model at-least-once delivery.
            let dup = shuffled[rng.gen_range(0..shuffled.len())].clone();
            shuffled.push(dup);
            let m = MergeOutcome::merge_all(&shuffled).unwrap();
            assert_eq!(m, reference);
        }
    }

    #[test]
    fn support_sets_match_a_state_diff_oracle() {
        let mut rs = RankState::new(2, vec![state(0, 100, 3, 2)]);
        let before: BTreeMap<Index, Vec<f32>> =
            rs.tables()[0].adapter().iter_rows().map(|(i, r)| (i, r.to_vec())).collect();

        let mut rng = ChaCha12Rng::seed_from_u64(5);
        for _ in 0..40 {
            let idx = rng.gen_range(0..100u64);
            let row = vec![rng.gen_range(0.1..1.0f64) as f32, 1.0];
            rs.tables_mut()[0].upsert_a_row(idx, &row).unwrap();
            rs.note_a_change(0, idx).unwrap();
        }

        let after: BTreeMap<Index, Vec<f32>> =
            rs.tables()[0].adapter().iter_rows().map(|(i, r)| (i, r.to_vec())).collect();
        let diff: BTreeSet<Index> = after
            .iter()
            .filter(|(i, r)| before.get(*i) != Some(*r))
            .map(|(&i, _)| i)
            .collect();

        let contrib = rs.contribution();
        let support: BTreeSet<Index> = contrib.tables[0].entries.iter().map(|&(i, _)| i).collect();
        assert_eq!(support, diff, "support must equal the set of changed rows");
        for (i, row) in &contrib.tables[0].entries {
            assert_eq!(&after[i], row, "support must carry current values");
        }
    }

    #[test]
    fn contribution_skips_rows_folded_after_being_marked() {
        let mut rs = RankState::new(0, vec![state(0, 10, 3, 2)]);
        rs.tables_mut()[0].upsert_a_row(4, &[1.0, 2.0]).unwrap();
        rs.note_a_change(0, 4).unwrap();
        rs.tables_mut()[0].fold_row(4).unwrap();
        let c = rs.contribution();
        assert!(c.tables[0].entries.is_empty());
    }

    #[test]
    fn wire_round_trip_is_exact() {
        let tc = TableContribution {
            table: 7,
            k: 2,
            d: 3,
            entries: vec![(0, vec![0.0, -0.0]), (42, vec![1.5e-39, f32::MAX])],
            b: Some(vec![1.0, -2.0, 3.0, -4.0, 5.5, -6.25]),
        };
        let buf = encode_message(9, 3, &tc).unwrap();
        assert_eq!(buf.len(), message_bytes(&tc));
        let (round, rank, back) = decode_message(&buf).unwrap();
        assert_eq!(round, 9);
        assert_eq!(rank, 3);
        assert_eq!(back, tc);
        assert_eq!(
            back.entries[0].1[1].to_bits(),
            (-0.0f32).to_bits(),
            "negative zero must survive"
        );

        let no_b = TableContribution { b: None, ..tc };
        let buf = encode_message(0, 0, &no_b).unwrap();
        assert_eq!(decode_message(&buf).unwrap().2, no_b);
    }

    #[test]
    fn golden_message_bytes() {
        let tc = TableContribution {
            table: 1,
            k: 1,
            d: 2,
            entries: vec![(5, vec![1.0])],
            b: Some(vec![0.5, -1.0]),
        };
        let buf = encode_message(2, 3, &tc).unwrap();
        let expect: Vec<u8> = [
            2u64.to_le_bytes().as_slice(),  // round
            &3u16.to_le_bytes(),            // rank
            &1u16.to_le_bytes(),            // table
            &1u16.to_le_bytes(),            // k
            &2u16.to_le_bytes(),            // d
            &1u32.to_le_bytes(),            // entry count
            &5u64.to_le_bytes(),            // entry index
            &1.0f32.to_le_bytes(),          // entry row
            &[1u8],                         // b included
            &0.5f32.to_le_bytes(),
            &(-1.0f32).to_le_bytes(),
        ]
        .concat();
        assert_eq!(buf, expect);
    }

    #[test]
    fn decode_rejects_malformed_messages() {
        let tc = TableContribution {
            table: 0,
            k: 1,
            d: 1,
            entries: vec![(1, vec![2.0])],
            b: None,
        };
        let buf = encode_message(1, 0, &tc).unwrap();

        assert!(matches!(
            decode_message(&buf[..buf.len() - 3]),
            Err(SyncError::Truncated { .. })
        ));

        let mut trailing = buf.clone();
        trailing.extend_from_slice(&[0, 0]);
        assert!(matches!(decode_message(&trailing), Err(SyncError::TrailingBytes { got: 2 })));

        let mut bad_flag = buf.clone();
        let at = buf.len() - 1;
        bad_flag[at] = 7;
        assert!(matches!(decode_message(&bad_flag), Err(SyncError::BadFlag(7))));
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let a = contribution(0, &[(1, 0.1)], None);
        let mut b = contribution(1, &[(2, 0.2)], None);
        b.tables[0].k = 3;
        b.tables[0].entries = vec![(2, vec![0.2, 0.2, 0.2])];
        let err = MergeOutcome::merge_all(&[a, b]).unwrap_err();
        assert!(matches!(err, SyncError::ShapeMismatch { table: 0, .. }));
    }

    fn lossy_round(n_ranks: u16, drop_prob: f64, seed: u64) -> (Vec<RankState>, SyncRoundReport) {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut ranks: Vec<RankState> = (0..n_ranks)
            .map(|r| RankState::new(r, vec![state(0, 64, 3, 2), state(1, 32, 3, 2)]))
            .collect();
        for rs in &mut ranks {
            for t in 0..2usize {
                let vocab = rs.tables()[t].table().vocab() as u64;
                for _ in 0..rng.gen_range(3..10) {
                    let idx = rng.gen_range(0..vocab);
                    let row = vec![rng.gen_range(-1.0..1.0f64) as f32, rs.rank() as f32];
                    rs.tables_mut()[t].upsert_a_row(idx, &row).unwrap();
                    rs.note_a_change(t, idx).unwrap();
                }
                let b: Vec<f32> = (0..6).map(|_| rng.gen_range(-1.0..1.0f64) as f32).collect();
                rs.tables_mut()[t].set_b(b).unwrap();
                rs.note_b_change(t).unwrap();
            }
        }
        let contribs: Vec<RankContribution> = ranks.iter().map(|r| r.contribution()).collect();
        let mut net = SimNet::new(SimNetConfig {
            drop_prob,
            reorder: true,
            base_delay_ms: 1.0,
            jitter_ms: 0.5,
            seed,
            ..Default::default()
        });
        let report = sync_round(1, &contribs, &mut net).unwrap();
        for rs in &mut ranks {
            rs.integrate(&report.merged).unwrap();
        }
        (ranks, report)
    }

    #[test]
    fn lossy_rounds_still_converge_replicas_bitwise() {
        for seed in [1u64, 2, 3] {
            let (ranks, report) = lossy_round(8, 0.3, seed);
            assert!(report.retries > 0, "a 30% drop rate should force retries");
            let reference: Vec<Vec<(Index, Vec<f32>)>> = (0..2)
                .map(|t| {
                    ranks[0].tables()[t]
                        .adapter()
                        .iter_rows()
                        .map(|(i, r)| (i, r.to_vec()))
                        .collect()
                })
                .collect();
            for rs in &ranks[1..] {
                for t in 0..2usize {
                    let rows: Vec<(Index, Vec<f32>)> =
                        rs.tables()[t].adapter().iter_rows().map(|(i, r)| (i, r.to_vec())).collect();
                    assert_eq!(rows, reference[t], "rank {} table {t} diverged", rs.rank());
                    assert_eq!(rs.tables()[t].adapter().b(), ranks[0].tables()[t].adapter().b());
                }
            }
            // Same traffic through a perfect network must merge identically.
            let (clean, _) = lossy_round(8, 0.0, seed);
            for t in 0..2usize {
                let a: Vec<_> = ranks[0].tables()[t].adapter().iter_rows().collect();
                let b: Vec<_> = clean[0].tables()[t].adapter().iter_rows().collect();
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn round_latency_grows_with_the_tree_depth() {
        let run = |n: u16| -> f64 {
            let contribs: Vec<RankContribution> =
                (0..n).map(|r| contribution(r, &[(u64::from(r), 1.0)], Some(1.0))).collect();
            let mut net = SimNet::new(SimNetConfig {
                base_delay_ms: 2.0,
                bandwidth_gbps: 1e9, // size term negligible
                ..Default::default()
            });
            sync_round(0, &contribs, &mut net).unwrap().latency_ms
        };
        // Gather plus broadcast both cost ceil(log2 n) serial stages.
        for (n, stages) in [(2u16, 1.0), (4, 2.0), (8, 3.0), (16, 4.0), (5, 3.0)] {
            let lat = run(n);
            let expect = 2.0 * stages * 2.0;
            assert!(
                (lat - expect).abs() < 1e-6,
                "n={n}: latency {lat} expected {expect}"
            );
        }
    }

    #[test]
    fn payload_accounting_matches_hand_counted_tree_traffic() {
        // 4 ranks, one table each, no drops: rank r's bundle crosses one
        // link per gather stage it is forwarded on.
        let contribs: Vec<RankContribution> =
            (0..4).map(|r| contribution(r, &[(u64::from(r), 1.0)], None)).collect();
        let sizes: Vec<u64> = contribs
            .iter()
            .map(|c| encode_message(0, c.rank, &c.tables[0]).unwrap().len() as u64)
            .collect();
        let mut net = SimNet::new(SimNetConfig::default());
        let report = sync_round(0, &contribs, &mut net).unwrap();

        // Gather: stage 1 moves bundles {1}->0 and {3}->2; stage 2 moves
        // {2,3}->0.  Rank 0 never moves.
        let gather = sizes[1] + sizes[3] + (sizes[2] + sizes[3]);
        let down = encode_message(0, 0, &report.merged.as_contribution(0).tables[0])
            .unwrap()
            .len() as u64;
        // Broadcast: 0->1, then 0->2 and 1->3.
        let expect = gather + 3 * down;
        assert_eq!(report.unique_bytes, expect);
        assert_eq!(report.total_bytes, expect, "no drops means no retransmits");
    }

    #[test]
    fn integrate_spills_deterministically_when_over_capacity() {
        let build = || {
            let table = EmbeddingTable::zeroed(0, 20, 3).unwrap();
            let mut st = TableState::new(table, 2, 4).unwrap();
            st.set_b(vec![0.5; 6]).unwrap();
            st.upsert_a_row(10, &[1.0, 1.0]).unwrap();
            st.upsert_a_row(11, &[2.0, 2.0]).unwrap();
            RankState::new(0, vec![st])
        };
        let mut merged = MergeOutcome::default();
        merged
            .absorb(&contribution(5, &[(1, 0.1), (2, 0.2), (3, 0.3), (4, 0.4)], Some(0.25)))
            .unwrap();

        let mut a = build();
        let mut b = build();
        a.integrate(&merged).unwrap();
        b.integrate(&merged).unwrap();

        assert_eq!(a.tables()[0].adapter().capacity(), 4);
        assert!(a.tables()[0].adapter().hot_count() <= 4);
        let rows_a: Vec<_> = a.tables()[0].adapter().iter_rows().map(|(i, r)| (i, r.to_vec())).collect();
        let rows_b: Vec<_> = b.tables()[0].adapter().iter_rows().map(|(i, r)| (i, r.to_vec())).collect();
        assert_eq!(rows_a, rows_b);
        assert_eq!(a.tables()[0].table().weights(), b.tables()[0].table().weights());
        // Never-merged survivors fold first: 10 and 11 are gone.
        assert!(a.tables()[0].adapter().a_row(10).is_none());
        assert!(a.tables()[0].adapter().a_row(11).is_none());
    }

    #[test]
    fn single_rank_round_is_a_cheap_no_op() {
        let contribs = vec![contribution(0, &[(1, 0.5)], Some(1.0))];
        let mut net = SimNet::new(SimNetConfig::default());
        let report = sync_round(3, &contribs, &mut net).unwrap();
        assert_eq!(report.unique_bytes, 0);
        assert_eq!(report.latency_ms, 0.0);
        assert_eq!(report.merged.tables[&0].entries[&1], (0, vec![0.5, -0.5]));
    }
}
