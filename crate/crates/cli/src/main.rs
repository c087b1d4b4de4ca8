use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use wnsf_core::montecarlo::{emit_csv, emit_summary, wnsf_initial_estimate};
use wnsf_core::netsim::fmt_f64;
use wnsf_core::{
    pem_cost, pem_minimize, run_monte_carlo, simulate_dataset, summarize, wnsf_identify, DataRecord, ErrorKind,
    ExperimentConfig, Method, ThetaVector, Variant,
};

#[derive(Parser)]
#[command(name = "wnsf", version, about = "Identify a three-module cascade network from simulated data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one data record from the configured network.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Record length; defaults to the largest sample size in the config.
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Run a single identification on a data record.
    Identify {
        /// wnsf1, wnsf3, pem-true or pem-wnsf
        #[arg(long)]
        method: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the Monte Carlo study.
    Montecarlo {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        summary: PathBuf,
        /// Worker threads (0 = all cores); overrides the config.
        #[arg(long)]
        jobs: Option<usize>,
    },
}

/// Marks errors caused by bad user input that did not come from the core crate.
#[derive(Debug)]
struct ConfigError(String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let cfg: ExperimentConfig = serde_json::from_str(&text)
        .map_err(|e| ConfigError(format!("parsing config {}: {e}", path.display())))?;
    cfg.validate().with_context(|| format!("invalid config {}", path.display()))?;
    Ok(cfg)
}

fn simulate(config: &Path, seed: u64, out: &Path, samples: Option<usize>) -> Result<()> {
    let cfg = load_config(config)?;
    let len = samples.unwrap_or_else(|| cfg.n_list.iter().copied().max().unwrap_or(0));
    if len == 0 {
        return Err(ConfigError("sample count must be positive".into()).into());
    }
    let data = simulate_dataset(&cfg.model, &cfg.inputs, len, cfg.burn_in, seed)?;
    data.save(out).with_context(|| format!("writing {}", out.display()))?;
    println!("wrote {len} samples to {}", out.display());
    Ok(())
}

fn write_theta(path: &Path, theta: &ThetaVector, truth: &ThetaVector) -> Result<()> {
    let mut f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    writeln!(f, "parameter,estimate,true")?;
    for ((label, v), t) in theta.labels().iter().zip(theta.values()).zip(truth.values()) {
        writeln!(f, "{label},{},{}", fmt_f64(*v), fmt_f64(*t))?;
    }
    Ok(())
}

fn identify(method: &str, data: &Path, config: &Path, out: &Path) -> Result<()> {
    let method: Method = method.parse()?;
    let cfg = load_config(config)?;
    let data = DataRecord::load(data).with_context(|| format!("reading data {}", data.display()))?;
    let truth = ThetaVector::from_cascade(&cfg.model);
    let orders = cfg.orders();

    let (theta, summary) = match method {
        Method::Wnsf1 | Method::Wnsf3 => {
            let variant = if method == Method::Wnsf1 { Variant::Wnsf1 } else { Variant::Wnsf3 };
            let r = wnsf_identify(&data, &orders, &cfg.wnsf.clone().with_variant(variant))?;
            for t in &r.trials {
                println!(
                    "  n={:<3} iterations={:<4} converged={:<5} cost={}",
                    t.n,
                    t.iterations,
                    t.converged,
                    if t.cost.is_finite() { format!("{:.6}", t.cost) } else { "unstable".into() }
                );
            }
            let s = format!(
                "chosen n={} cost={:.6} converged={} time={:.3}s",
                r.chosen_n,
                r.cost,
                r.converged,
                r.elapsed.as_secs_f64()
            );
            (r.theta, s)
        }
        Method::PemTrue | Method::PemWnsfInit => {
            let started = std::time::Instant::now();
            let init = if method == Method::PemTrue {
                truth.clone()
            } else {
                let (init, n) = wnsf_initial_estimate(&data, &orders, &cfg.wnsf)?;
                println!("  initial estimate from FIR order n={n}, cost {:.6}", pem_cost(&init, &data)?);
                init
            };
            let r = pem_minimize(&data, &init, &cfg.pem)?;
            let s = format!(
                "iterations={} cost={:.6} converged={} time={:.3}s",
                r.iterations,
                r.cost,
                r.converged,
                started.elapsed().as_secs_f64()
            );
            (r.theta, s)
        }
    };

    println!("{method}: {summary}");
    println!("{:<8} {:>14} {:>10}", "param", "estimate", "true");
    for ((label, v), t) in theta.labels().iter().zip(theta.values()).zip(truth.values()) {
        println!("{label:<8} {v:>14.6} {t:>10.4}");
    }
    println!("mse vs configured model: {:.6e}", theta.squared_error(&truth));
    write_theta(out, &theta, &truth)
}

fn montecarlo(config: &Path, out: &Path, summary: &Path, jobs: Option<usize>) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(j) = jobs {
        cfg.jobs = j;
    }
    let rows = run_monte_carlo(&cfg)?;
    emit_csv(&rows, out).with_context(|| format!("writing {}", out.display()))?;
    let table = summarize(&rows);
    emit_summary(&table, summary).with_context(|| format!("writing {}", summary.display()))?;
    println!("{:>7} {:<14} {:>12} {:>12} {:>10} {:>6}", "N", "method", "mse_mean", "mse_median", "time_s", "fail");
    for r in &table {
        println!(
            "{:>7} {:<14} {:>12.4e} {:>12.4e} {:>10.4} {:>6.3}",
            r.n_samples,
            r.method.name(),
            r.mse_mean,
            r.mse_median,
            r.time_mean,
            r.fail_rate
        );
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<wnsf_core::Error>() {
            return match e.kind() {
                ErrorKind::Config => 1,
                ErrorKind::Numerical => 2,
                ErrorKind::Io => 3,
            };
        }
        if cause.is::<ConfigError>() {
            return 1;
        }
        if cause.is::<std::io::Error>() {
            return 3;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate { config, seed, out, samples } => simulate(&config, seed, &out, samples),
        Command::Identify { method, data, config, out } => identify(&method, &data, &config, &out),
        Command::Montecarlo { config, out, summary, jobs } => montecarlo(&config, &out, &summary, jobs),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
