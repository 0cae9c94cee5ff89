use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use liveupdate_harness::compare::compare_update_cost;
use liveupdate_harness::config::{ExperimentConfig, Strategy};
use liveupdate_harness::runner::{
    generate_trace, load_run_meta, run_scenario_on_trace, write_outputs,
};
use liveupdate_core::workload::{export_trace, import_trace};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::PathBuf;
use std::str::FromStr;

#[derive(Parser)]
#[command(
    name = "liveupdate",
    about = "Simulates embedding-freshness strategies for a recommendation serving cluster",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario end to end and write metrics, logs and checkpoints.
    Run(RunArgs),
    /// Re-run a scenario against a previously exported arrival trace.
    Replay {
        /// Newline-delimited JSON trace (see `run --export-trace`).
        trace: PathBuf,
        #[command(flatten)]
        args: RunArgs,
    },
    /// Summarize finished runs' update costs side by side.
    Compare {
        /// One or more run_meta.json files written by `run`.
        #[arg(required = true)]
        metas: Vec<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// JSON experiment config; fields you leave out take defaults.
    config: Option<PathBuf>,
    /// Override the config's strategy
    /// (no_update, delta_update, quick_update_<pct>, live_update).
    #[arg(long)]
    scenario: Option<String>,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the serving replica count.
    #[arg(long)]
    nodes: Option<usize>,
    /// Override the simulated horizon in minutes.
    #[arg(long)]
    horizon_min: Option<u64>,
    /// Override the incremental update cadence in minutes.
    #[arg(long)]
    cadence_min: Option<u64>,
    /// Output directory (default: the config's out_dir, else runs/<name>).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the generated arrival trace as trace.ndjson.
    #[arg(long)]
    export_trace: bool,
}

impl RunArgs {
    fn build_config(&self) -> anyhow::Result<ExperimentConfig> {
        let mut config = match &self.config {
            Some(path) => ExperimentConfig::from_json_file(path)
                .with_context(|| format!("loading config {}", path.display()))?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = &self.scenario {
            config.scenario = Strategy::from_str(s)?;
        }
        if let Some(seed) = self.seed {
            config.seed = seed;
            config.workload.seed = seed;
        }
        if let Some(nodes) = self.nodes {
            config.nodes = nodes;
        }
        if let Some(h) = self.horizon_min {
            config.horizon_min = h;
        }
        if let Some(c) = self.cadence_min {
            config.update_interval_min = c;
            if config.full_sync_interval_min % c != 0 {
                // Keep the install cadence a whole multiple of the update
                // cadence so boundaries stay nested.
                config.full_sync_interval_min =
                    config.full_sync_interval_min.div_ceil(c) * c;
            }
        }
        if let Some(out) = &self.out {
            config.out_dir = Some(out.clone());
        }
        config.validate()?;
        Ok(config)
    }

    fn out_dir(&self, config: &ExperimentConfig) -> PathBuf {
        config.out_dir.clone().unwrap_or_else(|| {
            PathBuf::from("runs").join(format!(
                "{}_cad{}_seed{}",
                config.scenario, config.update_interval_min, config.seed
            ))
        })
    }
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Run(args) => {
            let config = args.build_config()?;
            let trace = generate_trace(&config)?;
            run_and_report(&args, config, &trace)
        }
        Command::Replay { trace, args } => {
            let file = File::open(&trace)
                .with_context(|| format!("opening trace {}", trace.display()))?;
            let samples = import_trace(BufReader::new(file))?;
            if samples.is_empty() {
                bail!("trace {} holds no samples", trace.display());
            }
            let mut config = args.build_config()?;
            if args.horizon_min.is_none() {
                // Cover the whole trace unless the caller pinned a horizon.
                let last_ts = samples.last().expect("non-empty").ts;
                config.horizon_min = (last_ts.floor() as u64 + 1).max(1);
            }
            run_and_report(&args, config, &samples)
        }
        Command::Compare { metas } => {
            let loaded = metas
                .iter()
                .map(|p| load_run_meta(p).with_context(|| format!("reading {}", p.display())))
                .collect::<anyhow::Result<Vec<_>>>()?;
            let comparison = compare_update_cost(&loaded)?;
            print!("{}", comparison.render_table());
            Ok(())
        }
    }
}

fn run_and_report(
    args: &RunArgs,
    config: ExperimentConfig,
    trace: &[liveupdate_core::workload::Sample],
) -> anyhow::Result<()> {
    let out_dir = args.out_dir(&config);
    let result = run_scenario_on_trace(&config, trace)?;
    write_outputs(&result, &out_dir)?;
    if args.export_trace {
        let path = out_dir.join("trace.ndjson");
        let mut w = BufWriter::new(File::create(&path)?);
        export_trace(&mut w, trace.iter())?;
    }
    let t = &result.meta.totals;
    println!(
        "{} seed={} nodes={} horizon={}min cadence={}min",
        result.meta.strategy,
        result.meta.seed,
        result.meta.nodes,
        result.meta.horizon_min,
        result.meta.update_interval_min
    );
    println!(
        "  samples={} mean_bce={:.4} final_hour_bce={:.4}",
        result.meta.trace_len, t.mean_bce, t.final_hour_mean_bce
    );
    println!(
        "  cost={:.3}s (transfer {:.3}s + training {:.3}s) payload={:.3}MB full_sync={:.3}MB",
        t.cost_s,
        t.transfer_s,
        t.training_s,
        t.payload_bytes as f64 / 1e6,
        t.full_sync_bytes as f64 / 1e6
    );
    println!(
        "  training_steps={} sync_rounds={} mean_round_latency={:.3}ms memory_ratio={:.4}",
        t.training_steps, t.sync_rounds, t.mean_round_latency_ms, t.final_memory_ratio
    );
    println!("  outputs: {}", out_dir.display());
    Ok(())
}
