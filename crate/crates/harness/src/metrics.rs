//! Evaluation metrics and the CSV output format.
//!
//! Accuracy is prequential: every sample is scored against the serving state
//! that existed when it arrived, then handed to whatever learns from it.
//! Scores aggregate over tumbling windows of simulated minutes.

use liveupdate_core::trainer::bce_loss;
use std::fmt::Write as _;
use std::io;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("bad csv at line {line}: {msg}")]
    BadCsv { line: usize, msg: String },
}

/// Area under the ROC curve by the rank-sum (Mann-Whitney) statistic, with
/// midranks for tied scores.  Windows with a single class score 0.5.
pub fn auroc(scored: &[(f64, u8)]) -> f64 {
    let n_pos = scored.iter().filter(|(_, y)| *y == 1).count();
    let n_neg = scored.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return 0.5;
    }
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| scored[a].0.partial_cmp(&scored[b].0).expect("scores must be comparable"));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        // Walk the tie group [i, j) and give everyone the average rank.
        let mut j = i + 1;
        while j < order.len() && scored[order[j]].0 == scored[order[i]].0 {
            j += 1;
        }
        let midrank = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            if scored[idx].1 == 1 {
                rank_sum_pos += midrank;
            }
        }
        i = j;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    u / (n_pos as f64 * n_neg as f64)
}

/// One evaluation window of the run.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    /// Window end, simulated minutes.
    pub t_min: f64,
    pub samples: usize,
    /// Mean binary cross-entropy over the window.
    pub bce: f64,
    pub auroc: f64,
    /// Cumulative update cost at window end: transfer plus training seconds.
    pub cum_cost_s: f64,
    /// Adapter parameters over base parameters (0 when nothing is adapted).
    pub memory_ratio: f64,
    /// Update bytes shipped during this window.
    pub payload_bytes: u64,
    /// Mean per-minute p99 serving latency over the window.
    pub p99_ms: f64,
}

/// Accumulates prequential scores for the current window.
#[derive(Clone, Debug, Default)]
pub struct WindowAccumulator {
    scored: Vec<(f64, u8)>,
    loss_sum: f64,
}

impl WindowAccumulator {
    pub fn push(&mut self, p: f64, label: u8) {
        self.loss_sum += bce_loss(p, label);
        self.scored.push((p, label));
    }

    pub fn len(&self) -> usize {
        self.scored.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scored.is_empty()
    }

    /// Mean BCE and AUROC, then reset.  An empty window reports the
    /// uninformative pair (0, 0.5) to keep every column finite.
    pub fn finish(&mut self) -> (usize, f64, f64) {
        let n = self.scored.len();
        let (bce, roc) = if n == 0 {
            (0.0, 0.5)
        } else {
            (self.loss_sum / n as f64, auroc(&self.scored))
        };
        self.scored.clear();
        self.loss_sum = 0.0;
        (n, bce, roc)
    }
}

pub const METRICS_HEADER: &str =
    "t_min,samples,bce,auroc,cum_cost_s,memory_ratio,payload_bytes,p99_ms";

pub fn metrics_to_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.t_min, r.samples, r.bce, r.auroc, r.cum_cost_s, r.memory_ratio, r.payload_bytes, r.p99_ms
        )
        .expect("writing to a String cannot fail");
    }
    out
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>, MetricsError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == METRICS_HEADER => {}
        other => {
            return Err(MetricsError::BadCsv {
                line: 1,
                msg: format!("expected header {METRICS_HEADER:?}, got {:?}", other.map(|(_, h)| h)),
            })
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 8 {
            return Err(MetricsError::BadCsv { line: i + 1, msg: format!("expected 8 fields, got {}", fields.len()) });
        }
        let field = |j: usize| -> Result<f64, MetricsError> {
            fields[j]
                .parse()
                .map_err(|e| MetricsError::BadCsv { line: i + 1, msg: format!("field {j}: {e}") })
        };
        rows.push(MetricsRow {
            t_min: field(0)?,
            samples: field(1)? as usize,
            bce: field(2)?,
            auroc: field(3)?,
            cum_cost_s: field(4)?,
            memory_ratio: field(5)?,
            payload_bytes: field(6)? as u64,
            p99_ms: field(7)?,
        });
    }
    Ok(rows)
}

pub fn write_text(path: &Path, text: &str) -> Result<(), MetricsError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auroc_on_separable_and_degenerate_inputs() {
        // Perfect separation.
        let hi = [(0.1, 0u8), (0.2, 0), (0.8, 1), (0.9, 1)];
        assert_eq!(auroc(&hi), 1.0);
        // Perfectly inverted.
        let lo = [(0.9, 0u8), (0.8, 0), (0.2, 1), (0.1, 1)];
        assert_eq!(auroc(&lo), 0.0);
        // Single class.
        assert_eq!(auroc(&[(0.3, 1u8), (0.4, 1)]), 0.5);
        assert_eq!(auroc(&[(0.3, 0u8)]), 0.5);
        assert_eq!(auroc(&[]), 0.5);
    }

    #[test]
    fn auroc_counts_concordant_pairs() {
        // Pairs (pos > neg): 0.35>0.1 yes, 0.35>0.4 no, 0.8>0.1 yes,
        // 0.8>0.4 yes; 3 of 4.
        let scored = [(0.1, 0u8), (0.4, 0), (0.35, 1), (0.8, 1)];
        assert!((auroc(&scored) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn auroc_gives_ties_half_credit() {
        let scored = [(0.5, 0u8), (0.5, 1)];
        assert_eq!(auroc(&scored), 0.5);
        // Pairs: (0.5, 0.2) wins, (0.5, 0.5) half, (0.9, 0.2) and (0.9, 0.5)
        // win; 3.5 of 4.
        let scored = [(0.2, 0u8), (0.5, 0), (0.5, 1), (0.9, 1)];
        assert!((auroc(&scored) - 0.875).abs() < 1e-12);
    }

    #[test]
    fn window_accumulator_resets_after_finish() {
        let mut acc = WindowAccumulator::default();
        acc.push(0.9, 1);
        acc.push(0.1, 0);
        let (n, bce, roc) = acc.finish();
        assert_eq!(n, 2);
        assert!((bce - bce_loss(0.9, 1)).abs() < 1e-12, "both losses equal here");
        assert_eq!(roc, 1.0);
        assert!(acc.is_empty());
        let (n, bce, roc) = acc.finish();
        assert_eq!((n, bce, roc), (0, 0.0, 0.5));
    }

    #[test]
    fn metrics_csv_round_trips_exactly() {
        let rows = vec![
            MetricsRow {
                t_min: 10.0,
                samples: 9973,
                bce: 0.6931471805599453,
                auroc: 0.5124999999999,
                cum_cost_s: 1.25e-3,
                memory_ratio: 0.04321,
                payload_bytes: 123456,
                p99_ms: 8.75,
            },
            MetricsRow {
                t_min: 20.0,
                samples: 0,
                bce: 0.0,
                auroc: 0.5,
                cum_cost_s: 2.5e-3,
                memory_ratio: 0.0,
                payload_bytes: 0,
                p99_ms: 7.0,
            },
        ];
        let text = metrics_to_csv(&rows);
        let back = parse_metrics_csv(&text).unwrap();
        assert_eq!(back, rows);
        // Header-only on empty input.
        assert_eq!(metrics_to_csv(&[]), format!("{METRICS_HEADER}\n"));
        assert_eq!(parse_metrics_csv(&metrics_to_csv(&[])).unwrap(), vec![]);
    }

    #[test]
    fn malformed_csv_reports_the_line() {
        let text = format!("{METRICS_HEADER}\n1,2,3\n");
        let err = parse_metrics_csv(&text).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        assert!(parse_metrics_csv("nope\n").is_err());
    }
}
