mod config;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedcache_core::cache::Policy;
use fedcache_core::engine::{run_experiment, run_plain_fedavg, ExperimentResult};
use fedcache_core::report::{emit_report, read_report, write_round_log, write_table, Format};
use fedcache_core::sweep::{recommend_all, run_sweep};

use crate::config::{Overrides, Resolved};

const EXIT_CONFIG: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

#[derive(Parser)]
#[command(name = "fedcache", version, about = "Threshold-gated federated learning with server-side update caching")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a single experiment and write its per-round log.
    Run(Common),
    /// Run the (tau, capacity, policy, seed) grid and write the report table.
    Sweep(Common),
    /// Recommend a caching policy per (tau, capacity) cell of an existing report.
    Recommend {
        /// Report written by `sweep`; `.json` files are read as JSON, anything else as CSV.
        report: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Run plain FedAvg (no gating, no cache) and write its per-round log.
    Baseline(Common),
}

#[derive(Args, Clone, Default)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_parser = parse_format)]
    format: Option<Format>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    tau: Option<f64>,
    #[arg(long)]
    capacity: Option<usize>,
    #[arg(long)]
    policy: Option<Policy>,
    #[arg(long)]
    rounds: Option<u64>,
    #[arg(long)]
    clients: Option<usize>,
    /// min-comm-at-accuracy-floor or max-accuracy-at-comm-budget.
    #[arg(long)]
    objective: Option<String>,
    #[arg(long)]
    accuracy_floor: Option<f64>,
    #[arg(long)]
    comm_budget: Option<u64>,
}

fn parse_format(s: &str) -> Result<Format, String> {
    s.parse()
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            tau: self.tau,
            capacity: self.capacity,
            policy: self.policy,
            rounds: self.rounds,
            clients: self.clients,
            workers: self.workers,
            objective: self.objective.clone(),
            accuracy_floor: self.accuracy_floor,
            comm_budget: self.comm_budget,
        }
    }

    fn resolve(&self) -> Result<Resolved, Failure> {
        let file = config::load(self.config.as_deref()).map_err(Failure::Config)?;
        config::resolve(file, &self.overrides()).map_err(Failure::Config)
    }

    fn format(&self) -> Format {
        self.format
            .unwrap_or_else(|| self.out.as_deref().map_or(Format::Csv, Format::from_path))
    }
}

enum Failure {
    Config(String),
    Runtime(String),
}

fn write_output(out: Option<&Path>, body: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> Result<(), Failure> {
    let result = match out {
        Some(path) => std::fs::File::create(path)
            .and_then(|f| {
                let mut w = std::io::BufWriter::new(f);
                body(&mut w)?;
                w.flush()
            })
            .map_err(|e| format!("{}: {e}", path.display())),
        None => body(&mut std::io::stdout().lock()).map_err(|e| e.to_string()),
    };
    result.map_err(Failure::Runtime)
}

fn emit_run(result: &ExperimentResult, common: &Common) -> Result<(), Failure> {
    let m = &result.metrics;
    eprintln!(
        "rounds={} comm_bytes={} cache_hits={} transmissions={} skips={} peak_mem_bytes={} final_accuracy={:.4}",
        m.rounds, m.comm_cost_bytes, m.cache_hits_total, m.transmissions_total, m.skips_total, m.peak_mem_bytes, m.final_accuracy
    );
    let format = common.format();
    write_output(common.out.as_deref(), |w| match format {
        Format::Csv => write_round_log(&result.log, w),
        Format::Json => {
            let doc = serde_json::json!({ "metrics": m, "rounds": result.log });
            serde_json::to_writer_pretty(&mut *w, &doc)?;
            writeln!(w)
        }
    })
}

fn execute(command: Command) -> Result<(), Failure> {
    match command {
        Command::Run(common) => {
            let cfg = common.resolve()?.experiment;
            cfg.validate().map_err(|e| Failure::Config(e.to_string()))?;
            let result = run_experiment(&cfg).map_err(|e| Failure::Runtime(e.to_string()))?;
            emit_run(&result, &common)
        }
        Command::Baseline(common) => {
            let cfg = common.resolve()?.experiment;
            cfg.validate().map_err(|e| Failure::Config(e.to_string()))?;
            let result = run_plain_fedavg(&cfg).map_err(|e| Failure::Runtime(e.to_string()))?;
            emit_run(&result, &common)
        }
        Command::Sweep(common) => {
            let resolved = common.resolve()?;
            let outcome = run_sweep(&resolved.sweep, resolved.workers).map_err(|e| Failure::Config(e.to_string()))?;
            let format = common.format();
            match common.out.as_deref() {
                Some(path) => emit_report(&outcome.rows, format, path).map_err(|e| Failure::Runtime(e.to_string()))?,
                None => write_table(&outcome.rows, format, std::io::stdout().lock()).map_err(Failure::Runtime)?,
            }
            eprintln!("{} cells succeeded, {} failed", outcome.rows.len(), outcome.failures.len());
            for f in &outcome.failures {
                eprintln!("cell {} failed: {}", f.cell, f.error);
            }
            if outcome.succeeded() {
                Ok(())
            } else {
                Err(Failure::Runtime(format!("{} sweep cells failed", outcome.failures.len())))
            }
        }
        Command::Recommend { report, common } => {
            let resolved = common.resolve()?;
            let rows = read_report(&report, Format::from_path(&report)).map_err(|e| Failure::Config(e.to_string()))?;
            let recs = recommend_all(&rows, resolved.sweep.objective).map_err(|e| Failure::Config(e.to_string()))?;
            let out_format = common.out.as_deref().map_or(Format::Csv, Format::from_path);
            let out_format = common.format.unwrap_or(out_format);
            write_output(common.out.as_deref(), |w| match out_format {
                Format::Csv => {
                    writeln!(w, "tau,capacity,policy,feasible,mean_comm_bytes,mean_final_accuracy")?;
                    for r in &recs {
                        let best = r.candidates.iter().find(|c| c.policy == r.policy).expect("chosen policy is a candidate");
                        writeln!(
                            w,
                            "{},{},{},{},{},{}",
                            r.tau, r.capacity, r.policy, r.feasible, best.mean_comm_bytes, best.mean_final_accuracy
                        )?;
                    }
                    Ok(())
                }
                Format::Json => {
                    serde_json::to_writer_pretty(&mut *w, &recs)?;
                    writeln!(w)
                }
            })
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_CONFIG),
            };
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}
