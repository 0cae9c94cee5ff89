//! End-to-end runner checks: determinism, cost accounting, trace replay and
//! replica agreement.

use liveupdate_harness::config::{ExperimentConfig, Strategy};
use liveupdate_harness::metrics::{metrics_to_csv, parse_metrics_csv};
use liveupdate_harness::runner::{
    generate_trace, load_run_meta, run_scenario, run_scenario_on_trace, write_outputs,
};
use liveupdate_harness::upstream::{DenseTables, UpstreamTrainer};
use liveupdate_core::model::checkpoint;
use liveupdate_core::trainer::ToyDlrm;
use liveupdate_core::workload::{export_trace, import_trace};
use std::io::BufReader;

fn small_config(scenario: Strategy) -> ExperimentConfig {
    let mut config = ExperimentConfig::default();
    config.scenario = scenario;
    config.seed = 11;
    config.horizon_min = 20;
    config.update_interval_min = 5;
    config.full_sync_interval_min = 40;
    config.eval_window_min = 10;
    config.workload.vocabs = vec![2000, 500];
    config.workload.events_per_minute = 400.0;
    config.workload.drift_times_min = vec![];
    config.workload.seed = 11;
    config
}

#[test]
fn equal_configs_give_bitwise_equal_outputs() {
    let config = small_config(Strategy::LiveUpdate);
    let a = run_scenario(&config).unwrap();
    let b = run_scenario(&config).unwrap();
    assert_eq!(metrics_to_csv(&a.metrics), metrics_to_csv(&b.metrics));
    assert_eq!(a.meta, b.meta);
    assert_eq!(a.adapt_rows, b.adapt_rows);
    assert_eq!(a.sched_rows, b.sched_rows);
    assert_eq!(a.rounds, b.rounds);
}

#[test]
fn no_update_costs_nothing_and_ships_nothing() {
    let result = run_scenario(&small_config(Strategy::NoUpdate)).unwrap();
    let t = &result.meta.totals;
    assert_eq!(t.cost_s, 0.0);
    assert_eq!(t.transfer_s, 0.0);
    assert_eq!(t.training_s, 0.0);
    assert_eq!(t.payload_bytes, 0);
    assert_eq!(t.full_sync_bytes, 0);
    assert_eq!(t.training_steps, 0);
    assert_eq!(t.sync_rounds, 0);
    // The stream still gets scored.
    let total: usize = result.metrics.iter().map(|r| r.samples).sum();
    assert_eq!(total, result.meta.trace_len);
}

/// Replays the arrival stream through a second upstream trainer and re-counts
/// the rows a delta shipment must move, then checks the runner's payload and
/// transfer-time figures against that count.
#[test]
fn delta_payload_matches_an_independent_row_count() {
    let config = small_config(Strategy::DeltaUpdate);
    let trace = generate_trace(&config).unwrap();
    let result = run_scenario_on_trace(&config, &trace).unwrap();

    let dim = config.emb_dim;
    let n_tables = config.workload.vocabs.len();
    let model = ToyDlrm::new(n_tables, dim, config.workload.dense_dim, config.seed);
    let init = DenseTables::seeded_init(&config.workload.vocabs, dim, config.seed);
    let mut upstream = UpstreamTrainer::new(model, init.clone(), config.upstream_learning_rate);
    let mut serving = init;
    let mut candidates: Vec<std::collections::BTreeSet<u64>> = vec![Default::default(); n_tables];

    let mut expected_bytes = 0u64;
    let mut cursor = 0usize;
    for minute in 0..config.horizon_min {
        let end = (minute + 1) as f64;
        while cursor < trace.len() && trace[cursor].ts < end {
            upstream.train(&trace[cursor]).unwrap();
            for (t, ids) in trace[cursor].ids.iter().enumerate() {
                candidates[t].extend(ids.iter().copied());
            }
            cursor += 1;
        }
        if (minute + 1) % config.update_interval_min == 0 {
            for (t, set) in candidates.iter_mut().enumerate() {
                let mut shipped = 0u64;
                for &id in set.iter() {
                    if serving.0[t].row(id) != upstream.tables().tables()[t].row(id) {
                        serving.0[t].row_mut(id).copy_from_slice(upstream.tables().tables()[t].row(id));
                        shipped += 1;
                    }
                }
                set.clear();
                if shipped > 0 {
                    expected_bytes += shipped * (8 + 4 * dim as u64)
                        + liveupdate_core::sync::MESSAGE_HEADER_BYTES as u64;
                }
            }
        }
    }

    let t = &result.meta.totals;
    assert_eq!(t.payload_bytes, expected_bytes);
    let expected_transfer = expected_bytes as f64 * 8.0 / (config.net.bandwidth_gbps * 1e9);
    assert!((t.transfer_s - expected_transfer).abs() < 1e-15);
    assert_eq!(t.training_s, 0.0, "row shipping does no serving-side training");
    assert!(t.payload_bytes > 0, "a learning upstream must ship something");
}

#[test]
fn written_metrics_parse_back_to_the_same_rows() {
    let config = small_config(Strategy::QuickUpdate { top_percent: 10.0 });
    let result = run_scenario(&config).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_outputs(&result, dir.path()).unwrap();

    let text = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let parsed = parse_metrics_csv(&text).unwrap();
    assert_eq!(parsed, result.metrics);

    let meta = load_run_meta(&dir.path().join("run_meta.json")).unwrap();
    assert_eq!(meta, result.meta);

    // One checkpoint per table, loadable.
    for t in 0..config.workload.vocabs.len() {
        let path = dir.path().join("checkpoints").join(format!("table_{t}.bin"));
        let state = checkpoint::load_from_path(&path, t as u16).unwrap();
        assert_eq!(state.table().vocab(), config.workload.vocabs[t]);
    }
}

#[test]
fn replaying_an_exported_trace_reproduces_the_run() {
    let config = small_config(Strategy::LiveUpdate);
    let trace = generate_trace(&config).unwrap();
    let direct = run_scenario_on_trace(&config, &trace).unwrap();

    let mut buf = Vec::new();
    export_trace(&mut buf, trace.iter()).unwrap();
    let reloaded = import_trace(BufReader::new(buf.as_slice())).unwrap();
    assert_eq!(reloaded, trace, "the NDJSON round trip must be exact");

    let replayed = run_scenario_on_trace(&config, &reloaded).unwrap();
    assert_eq!(metrics_to_csv(&direct.metrics), metrics_to_csv(&replayed.metrics));
    assert_eq!(direct.meta, replayed.meta);
}

/// After a final sync boundary every replica must hold bitwise-identical
/// tables: merged rows are installed verbatim, spills fold in a fixed order,
/// and structure plans are decided once and applied everywhere.
#[test]
fn replicas_agree_bitwise_at_a_sync_boundary() {
    let mut config = small_config(Strategy::LiveUpdate);
    config.nodes = 4;
    // Horizon lands exactly on an incremental sync boundary.
    config.horizon_min = 20;
    let result = run_scenario(&config).unwrap();
    assert_eq!(result.final_states.len(), 4);

    let dir = tempfile::tempdir().unwrap();
    let fingerprint = |states: &[liveupdate_core::model::TableState], tag: usize| {
        let mut bytes = Vec::new();
        for (t, state) in states.iter().enumerate() {
            let path = dir.path().join(format!("{tag}_{t}.bin"));
            checkpoint::save_to_path(state, &path).unwrap();
            bytes.extend(std::fs::read(&path).unwrap());
        }
        bytes
    };
    let reference = fingerprint(&result.final_states[0], 0);
    for (node, states) in result.final_states.iter().enumerate().skip(1) {
        assert_eq!(
            fingerprint(states, node),
            reference,
            "replica {node} diverged from replica 0"
        );
    }
    assert!(result.meta.totals.sync_rounds > 0);
}
