//! Cross-run cost comparison: groups finished runs by strategy and lines up
//! their update costs across cadences.
//!
//! The interesting contrast: a strategy that ships weight deltas pays more
//! the more often it updates, while adapter sync keeps payloads small enough
//! that cadence barely moves the bill.

use crate::runner::RunMeta;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CompareError {
    #[error("no runs to compare")]
    Empty,
    #[error("runs cover different horizons ({a} min vs {b} min); costs are not comparable")]
    HorizonMismatch { a: u64, b: u64 },
}

/// One run's cost figures, keyed by its update cadence.
#[derive(Clone, Debug, PartialEq)]
pub struct CadenceCost {
    pub update_interval_min: u64,
    pub seed: u64,
    pub cost_s: f64,
    pub transfer_s: f64,
    pub training_s: f64,
    pub payload_bytes: u64,
    pub mean_bce: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StrategyCosts {
    pub strategy: String,
    /// Sorted by (cadence, seed).
    pub runs: Vec<CadenceCost>,
}

impl StrategyCosts {
    /// Mean cost per cadence, ascending by cadence.
    pub fn mean_cost_by_cadence(&self) -> Vec<(u64, f64)> {
        let mut by_cadence: BTreeMap<u64, (f64, usize)> = BTreeMap::new();
        for run in &self.runs {
            let slot = by_cadence.entry(run.update_interval_min).or_insert((0.0, 0));
            slot.0 += run.cost_s;
            slot.1 += 1;
        }
        by_cadence.into_iter().map(|(cad, (sum, n))| (cad, sum / n as f64)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostComparison {
    pub horizon_min: u64,
    /// Ordered by strategy name.
    pub groups: Vec<StrategyCosts>,
}

/// Groups run summaries by strategy; every run must cover the same horizon.
pub fn compare_update_cost(metas: &[RunMeta]) -> Result<CostComparison, CompareError> {
    let first = metas.first().ok_or(CompareError::Empty)?;
    let horizon_min = first.horizon_min;
    if let Some(other) = metas.iter().find(|m| m.horizon_min != horizon_min) {
        return Err(CompareError::HorizonMismatch { a: horizon_min, b: other.horizon_min });
    }
    let mut grouped: BTreeMap<String, Vec<CadenceCost>> = BTreeMap::new();
    for meta in metas {
        grouped.entry(meta.strategy.clone()).or_default().push(CadenceCost {
            update_interval_min: meta.update_interval_min,
            seed: meta.seed,
            cost_s: meta.totals.cost_s,
            transfer_s: meta.totals.transfer_s,
            training_s: meta.totals.training_s,
            payload_bytes: meta.totals.payload_bytes,
            mean_bce: meta.totals.mean_bce,
        });
    }
    let groups = grouped
        .into_iter()
        .map(|(strategy, mut runs)| {
            runs.sort_by_key(|r| (r.update_interval_min, r.seed));
            StrategyCosts { strategy, runs }
        })
        .collect();
    Ok(CostComparison { horizon_min, groups })
}

impl CostComparison {
    pub fn group(&self, strategy: &str) -> Option<&StrategyCosts> {
        self.groups.iter().find(|g| g.strategy == strategy)
    }

    /// How much a strategy's cost varies with cadence: max/min - 1 over the
    /// per-cadence mean costs.  None when the strategy is absent or its
    /// cheapest cadence cost zero.
    pub fn cost_spread(&self, strategy: &str) -> Option<f64> {
        let means = self.group(strategy)?.mean_cost_by_cadence();
        let min = means.iter().map(|&(_, c)| c).fold(f64::INFINITY, f64::min);
        let max = means.iter().map(|&(_, c)| c).fold(f64::NEG_INFINITY, f64::max);
        (min > 0.0).then(|| max / min - 1.0)
    }

    /// Mean cost at `cadence_a` over mean cost at `cadence_b` for one
    /// strategy.  None when either cadence is absent or the denominator is
    /// zero.
    pub fn cost_ratio(&self, strategy: &str, cadence_a: u64, cadence_b: u64) -> Option<f64> {
        let means = self.group(strategy)?.mean_cost_by_cadence();
        let at = |cad: u64| means.iter().find(|&&(c, _)| c == cad).map(|&(_, cost)| cost);
        let a = at(cadence_a)?;
        let b = at(cadence_b)?;
        (b > 0.0).then(|| a / b)
    }

    /// Plain-text summary, one row per (strategy, cadence).
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        writeln!(out, "horizon: {} min", self.horizon_min).unwrap();
        writeln!(
            out,
            "{:<20} {:>11} {:>5} {:>14} {:>14} {:>12} {:>9}",
            "strategy", "cadence_min", "runs", "mean_cost_s", "mean_xfer_s", "payload_mb", "mean_bce"
        )
        .unwrap();
        for g in &self.groups {
            let mut by_cadence: BTreeMap<u64, Vec<&CadenceCost>> = BTreeMap::new();
            for run in &g.runs {
                by_cadence.entry(run.update_interval_min).or_default().push(run);
            }
            for (cad, runs) in by_cadence {
                let n = runs.len() as f64;
                let cost = runs.iter().map(|r| r.cost_s).sum::<f64>() / n;
                let xfer = runs.iter().map(|r| r.transfer_s).sum::<f64>() / n;
                let mb = runs.iter().map(|r| r.payload_bytes as f64).sum::<f64>() / n / 1e6;
                let bce = runs.iter().map(|r| r.mean_bce).sum::<f64>() / n;
                writeln!(
                    out,
                    "{:<20} {:>11} {:>5} {:>14.3} {:>14.3} {:>12.3} {:>9.4}",
                    g.strategy,
                    cad,
                    runs.len(),
                    cost,
                    xfer,
                    mb,
                    bce
                )
                .unwrap();
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runner::RunTotals;

    fn meta(strategy: &str, cadence: u64, seed: u64, cost_s: f64, horizon: u64) -> RunMeta {
        RunMeta {
            strategy: strategy.to_string(),
            seed,
            nodes: 1,
            horizon_min: horizon,
            update_interval_min: cadence,
            full_sync_interval_min: horizon,
            eval_window_min: 10,
            trace_len: 1000,
            totals: RunTotals {
                transfer_s: cost_s / 2.0,
                training_s: cost_s / 2.0,
                cost_s,
                payload_bytes: (cost_s * 1e6) as u64,
                full_sync_bytes: 0,
                training_steps: 0,
                sync_rounds: 0,
                mean_round_latency_ms: 0.0,
                final_memory_ratio: 0.0,
                mean_bce: 0.6,
                final_hour_mean_bce: 0.6,
            },
        }
    }

    #[test]
    fn identical_runs_show_zero_cost_spread() {
        let metas =
            vec![meta("live_update", 5, 0, 8.0, 120), meta("live_update", 5, 1, 8.0, 120)];
        let cmp = compare_update_cost(&metas).unwrap();
        assert_eq!(cmp.cost_spread("live_update"), Some(0.0));
        assert_eq!(cmp.group("live_update").unwrap().runs.len(), 2);
    }

    #[test]
    fn cadence_ratio_uses_per_cadence_means() {
        let metas = vec![
            meta("delta_update", 5, 0, 40.0, 120),
            meta("delta_update", 5, 1, 44.0, 120),
            meta("delta_update", 20, 0, 14.0, 120),
        ];
        let cmp = compare_update_cost(&metas).unwrap();
        let ratio = cmp.cost_ratio("delta_update", 5, 20).unwrap();
        assert!((ratio - 3.0).abs() < 1e-12);
        let spread = cmp.cost_spread("delta_update").unwrap();
        assert!((spread - 2.0).abs() < 1e-12);
    }

    #[test]
    fn mismatched_horizons_are_rejected() {
        let metas = vec![meta("live_update", 5, 0, 8.0, 120), meta("live_update", 5, 1, 8.0, 60)];
        assert_eq!(
            compare_update_cost(&metas),
            Err(CompareError::HorizonMismatch { a: 120, b: 60 })
        );
    }

    #[test]
    fn empty_input_is_an_error() {
        assert_eq!(compare_update_cost(&[]), Err(CompareError::Empty));
        let cmp = compare_update_cost(&[meta("no_update", 5, 0, 0.0, 30)]).unwrap();
        assert_eq!(cmp.cost_spread("no_update"), None);
        assert_eq!(cmp.cost_spread("missing"), None);
    }

    #[test]
    fn table_renders_one_row_per_strategy_cadence() {
        let metas = vec![
            meta("delta_update", 5, 0, 40.0, 120),
            meta("delta_update", 20, 0, 14.0, 120),
            meta("live_update", 5, 0, 9.0, 120),
        ];
        let cmp = compare_update_cost(&metas).unwrap();
        let table = cmp.render_table();
        assert_eq!(table.lines().count(), 2 + 3);
        assert!(table.contains("delta_update"));
        assert!(table.contains("live_update"));
    }
}
