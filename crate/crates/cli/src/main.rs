use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use circsel::config::ExperimentConfig;
use circsel::error::{ConfigError, HarnessError};
use circsel::harness;
use circsel::pool::TargetN;
use circsel::strategy::StrategyId;

const EXIT_CONFIG: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

#[derive(Parser)]
#[command(name = "circsel", version, about = "Circuit-selection simulator for onion-routing clients")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one strategy over the configured seeds.
    Run(RunArgs),
    /// Simulate a strategy x circuit-target grid and print the TTFB/TTLB table.
    Sweep(SweepArgs),
    /// Relay- and AS-level compromise analysis of finished runs.
    Adversary(AdversaryArgs),
    /// CDF files and summary table for finished runs.
    Report(ReportArgs),
}

#[derive(Args)]
struct Common {
    /// Experiment config file; built-in desk-scale defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Single seed, overriding the config's seed list.
    #[arg(long, conflicts_with = "seeds")]
    seed: Option<u64>,
    /// Comma-separated seed list, overriding the config's.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Simulated seconds, overriding the config.
    #[arg(long)]
    duration: Option<f64>,
    /// Output directory, overriding the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    strategy: Option<StrategyId>,
    /// Clean circuits per port class: an integer or "unchanged".
    #[arg(long)]
    circuits: Option<TargetN>,
    /// Rerun the seed recorded in a run manifest instead of a config.
    #[arg(long, conflicts_with_all = ["config", "seed", "seeds", "duration", "strategy", "circuits"])]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    /// Comma-separated strategies.
    #[arg(long, value_delimiter = ',', default_value = "vanilla,car,rtt_only")]
    strategy: Vec<StrategyId>,
    /// Comma-separated circuit targets.
    #[arg(long, value_delimiter = ',', default_value = "3,4,5")]
    circuits: Vec<TargetN>,
}

#[derive(Args)]
struct AdversaryArgs {
    /// Config whose adversary and AS sections override each run's manifest.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directories, or roots searched for them.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directories, or roots searched for them.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    #[arg(long, default_value = "report")]
    out: PathBuf,
}

fn load_config(path: Option<&PathBuf>) -> Result<ExperimentConfig, HarnessError> {
    Ok(match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    })
}

fn configure(common: &Common) -> Result<(ExperimentConfig, PathBuf), HarnessError> {
    let mut cfg = load_config(common.config.as_ref())?;
    if let Some(s) = common.seed {
        cfg.experiment.seeds = vec![s];
    }
    if let Some(s) = &common.seeds {
        cfg.experiment.seeds = s.clone();
    }
    if let Some(d) = common.duration {
        cfg.experiment.duration_s = d;
    }
    let out = match &common.out {
        Some(o) => o.clone(),
        None => cfg.resolve(&cfg.experiment.output_dir),
    };
    cfg.validate()?;
    Ok((cfg, out))
}

fn cmd_run(args: RunArgs) -> Result<(), HarnessError> {
    if let Some(m) = &args.manifest {
        let out = args.common.out.clone().unwrap_or_else(|| PathBuf::from("out"));
        let r = harness::rerun_manifest(m, &out)?;
        println!("seed {} -> {}", r.seed, r.dir.display());
        return Ok(());
    }
    let (mut cfg, out) = configure(&args.common)?;
    if let Some(s) = args.strategy {
        cfg.experiment.strategy = s;
    }
    if let Some(n) = args.circuits {
        cfg.pool.target_n = n;
    }
    for r in harness::run(&cfg, &out)? {
        let s = &r.metrics.summary;
        let web = circsel::workload::ClientKind::Web;
        let fmt = |v: Option<f64>| v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
        println!(
            "seed {}: web ttfb {} s, ttlb {} s -> {}",
            r.seed,
            fmt(s.median_ttfb(web)),
            fmt(s.median_ttlb(web)),
            r.dir.display()
        );
    }
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<(), HarnessError> {
    let (cfg, out) = configure(&args.common)?;
    let table = harness::sweep(&cfg, &args.strategy, &args.circuits, &out)?;
    print!("{}", table.render());
    if table.cells.iter().any(|c| c.error.is_some()) {
        return Err(HarnessError::Runtime("some sweep cells failed".into()));
    }
    Ok(())
}

fn cmd_adversary(args: AdversaryArgs) -> Result<(), HarnessError> {
    let cfg = args.config.as_deref().map(ExperimentConfig::load).transpose()?;
    if let Some(c) = &cfg {
        if c.adversary.is_none() {
            return Err(ConfigError::Invalid("config has no [adversary] section".into()).into());
        }
        c.validate()?;
    }
    for (dir, rep) in harness::adversary(&args.runs, cfg.as_ref())? {
        let medians: Vec<f64> = rep.relay_runs.iter().map(|r| r.median_client_rate).collect();
        let relay = circsel::workload::median(&medians).unwrap_or(0.0);
        let net = rep
            .network
            .as_ref()
            .map(|n| format!("{:.4}", n.median_client_rate))
            .unwrap_or_else(|| "-".into());
        println!("{}: relay median {relay:.4}, AS median {net}", dir.display());
    }
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<(), HarnessError> {
    let rep = harness::report(&args.runs, &args.out)?;
    print!("{}", rep.text);
    println!("wrote {} files to {}", rep.files.len() + 1, args.out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_CONFIG) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Adversary(a) => cmd_adversary(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config_error() {
                ExitCode::from(EXIT_CONFIG)
            } else {
                ExitCode::from(EXIT_RUNTIME)
            }
        }
    }
}
