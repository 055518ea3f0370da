//! `multifed`: run multi-server federated experiments, compare them against a
//! single-server baseline, and generate synthetic charging data.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use multifed::data::{generate_synthetic, write_events_csv, write_station_regions, SyntheticSpec};
use multifed::harness::{
    compare, export, join_as_client, run_experiment, serve_as_server, ExperimentConfig,
    HarnessError, MetricsBundle,
};

#[derive(Parser)]
#[command(name = "multifed", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and export its metrics.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run only this server of a TCP config.
        #[arg(long, conflicts_with = "join")]
        listen: Option<String>,
        /// Run only this client of a TCP config.
        #[arg(long)]
        join: Option<String>,
    },
    /// Run a multi-server config and a baseline, then print the loss gap.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Also export both runs and `comparison.json` here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write synthetic `events.csv` and `stations.csv`.
    GenData {
        #[arg(long, default_value_t = 9)]
        regions: usize,
        #[arg(long, default_value_t = 200)]
        rows_per_region: usize,
        #[arg(long, default_value_t = 0.05)]
        noise_std: f64,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value = "data")]
        out: PathBuf,
    },
}

enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        if e.is_config_error() {
            Failure::Config(e.into())
        } else {
            Failure::Runtime(e.into())
        }
    }
}

fn load(path: Option<&Path>, seed: Option<u64>, out: Option<PathBuf>) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = out {
        cfg.output_dir = o;
    }
    Ok(cfg)
}

fn write_bundle(bundle: &MetricsBundle, dir: &Path) -> Result<(), Failure> {
    let paths = export(bundle, dir)?;
    log::info!("metrics written to {}", paths.config.parent().unwrap_or(dir).display());
    Ok(())
}

fn run(
    config: Option<PathBuf>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    listen: Option<String>,
    join: Option<String>,
) -> Result<(), Failure> {
    let cfg = load(config.as_deref(), seed, out)?;
    let mut bundle = MetricsBundle {
        config: cfg.clone(),
        ..MetricsBundle::default()
    };
    if let Some(id) = listen {
        let report = serve_as_server(&cfg, &id)?;
        for r in &report.records {
            println!("{} round {} {:?} eval_loss {}", id, r.round, r.status, r.eval_loss);
        }
        bundle.servers.push(report);
    } else if let Some(id) = join {
        let report = join_as_client(&cfg, &id)?;
        for r in &report.rounds {
            let to = r.delivered_to.as_deref().unwrap_or("FAILED");
            println!("{} round {} delivered to {}", id, r.round, to);
        }
        bundle.clients.push(report);
    } else {
        bundle = run_experiment(&cfg)?;
        for s in &bundle.servers {
            for r in &s.records {
                println!("{} round {} {:?} eval_loss {}", s.id, r.round, r.status, r.eval_loss);
            }
        }
    }
    write_bundle(&bundle, &cfg.output_dir)
}

fn compare_runs(config: PathBuf, baseline: PathBuf, seed: Option<u64>, out: Option<PathBuf>) -> Result<(), Failure> {
    let multi_cfg = load(Some(&config), seed, None)?;
    let single_cfg = load(Some(&baseline), seed, None)?;
    let multi = run_experiment(&multi_cfg)?;
    let single = run_experiment(&single_cfg)?;
    let gap = compare(&multi, &single)?;
    let json = serde_json::to_string_pretty(&gap).context("serialize comparison").map_err(Failure::Runtime)?;
    println!("{json}");
    if let Some(dir) = out {
        write_bundle(&multi, &dir.join("multi"))?;
        write_bundle(&single, &dir.join("single"))?;
        fs::write(dir.join("comparison.json"), json + "\n")
            .context("write comparison.json")
            .map_err(Failure::Runtime)?;
    }
    Ok(())
}

fn gen_data(spec: SyntheticSpec, out: &Path) -> Result<(), Failure> {
    if spec.regions == 0 || spec.rows_per_region == 0 {
        return Err(Failure::Config(anyhow::anyhow!("regions and rows-per-region must be at least 1")));
    }
    if !(spec.noise_std.is_finite() && spec.noise_std >= 0.0) {
        return Err(Failure::Config(anyhow::anyhow!("noise-std must be a non-negative number")));
    }
    let events = generate_synthetic(&spec);
    let write = || -> anyhow::Result<()> {
        fs::create_dir_all(out)?;
        write_events_csv(&out.join("events.csv"), &events)?;
        write_station_regions(&out.join("stations.csv"), &events)?;
        Ok(())
    };
    write().map_err(Failure::Runtime)?;
    println!("wrote {} events to {}", events.len(), out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let result = match Cli::parse().command {
        Command::Run { config, seed, out, listen, join } => run(config, seed, out, listen, join),
        Command::Compare { config, baseline, seed, out } => compare_runs(config, baseline, seed, out),
        Command::GenData { regions, rows_per_region, noise_std, seed, out } => gen_data(
            SyntheticSpec { rows_per_region, regions, noise_std, seed },
            &out,
        ),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
