use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::error;

use pcnerf::config::{InferMode, Profile, RunConfig};
use pcnerf::eval::MetricsReport;
use pcnerf::pipeline;
use pcnerf::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "pcnerf", version, about = "Parent-child neural density fields for LiDAR depth")]
struct Cli {
    /// TOML run configuration; missing keys take the profile defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Overwrite existing simulated data.
    #[arg(long, global = true)]
    force: bool,
    /// Default set: desk or paper.
    #[arg(long, global = true)]
    profile: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic boxworld dataset.
    Simulate,
    /// Build the scene graph from the training scans.
    Partition,
    /// Train one field per parent block.
    Train,
    /// Predict held-out depths with one mode; writes CSV, PLY and JSON.
    Infer {
        #[arg(long, default_value = "two_step")]
        mode: String,
    },
    /// Evaluate the configured modes (or the given ones).
    Eval {
        #[arg(long, value_delimiter = ',')]
        modes: Vec<String>,
    },
    /// simulate, partition, train and eval.
    Full,
    /// Print the effective configuration.
    Config {
        #[arg(long)]
        dump: bool,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let profile = cli.profile.as_deref().map(str::parse::<Profile>).transpose()?;
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path, profile)?,
        None => RunConfig::profile(profile.unwrap_or(Profile::Desk)),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_modes(names: &[String], fallback: &[InferMode]) -> Result<Vec<InferMode>> {
    if names.is_empty() {
        return Ok(fallback.to_vec());
    }
    names.iter().map(|n| n.parse()).collect()
}

fn print_report(r: &MetricsReport) {
    println!(
        "{:<12} avg_error {:.4} m  acc@0.2 {:.4}  acc@1 {:.4}  cd {:.4} m  f@0.2 {:.4}  f@1 {:.4}  resolved {}  unresolved {}",
        r.mode, r.avg_error_m, r.acc_0p2, r.acc_1p0, r.cd_m, r.f_0p2, r.f_1p0, r.n_resolved, r.n_unresolved
    );
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    match &cli.command {
        Command::Config { .. } => print!("{}", cfg.to_toml()),
        Command::Simulate => {
            let s = pipeline::cmd_simulate(&cfg, cli.force)?;
            println!(
                "wrote {} scans ({} points, {} boxes) to {}",
                s.points_per_scan.len(),
                s.points_per_scan.iter().sum::<usize>(),
                s.n_boxes,
                cfg.data.dataset.display()
            );
        }
        Command::Partition => {
            let g = pipeline::cmd_partition(&cfg)?;
            for (i, p) in g.parents.iter().enumerate() {
                println!("parent {i}: scans {:?}, {} children", p.scan_indices(), p.children.len());
            }
        }
        Command::Train => {
            let logs = pipeline::cmd_train(&cfg)?;
            for (b, log) in logs.iter().enumerate() {
                match log.last() {
                    Some(r) => println!("parent {b}: {} batches, last loss {:.4e}", log.len(), r.total),
                    None => println!("parent {b}: initial checkpoint only"),
                }
            }
        }
        Command::Infer { mode } => {
            let mode: InferMode = mode.parse()?;
            for run in pipeline::cmd_eval(&cfg, &[mode])? {
                print_report(&run.report);
            }
        }
        Command::Eval { modes } => {
            let modes = parse_modes(modes, &cfg.eval.modes)?;
            for run in pipeline::cmd_eval(&cfg, &modes)? {
                print_report(&run.report);
            }
        }
        Command::Full => {
            for run in pipeline::cmd_full(&cfg, cli.force)? {
                print_report(&run.report);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
