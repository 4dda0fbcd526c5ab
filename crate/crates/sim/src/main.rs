use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gradamp_sim::config::ExperimentConfig;
use gradamp_sim::error::{HarnessError, HarnessResult};
use gradamp_sim::experiment::{load_dataset, run_experiment, run_pair, Role};
use gradamp_sim::report::report;
use gradamp_sim::sweep::{sweep, Vary};

#[derive(Parser)]
#[command(
    name = "gradamp",
    version,
    about = "Federated-learning simulator with gradient-amplified defenses"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one configuration (attack included) and write its records.
    Run {
        config: PathBuf,
        /// Output directory; overrides output.dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the clean twin and the attacked run, then report on both.
    RunPair {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Metrics table and plots over finished runs.
    Report {
        #[arg(required = true)]
        manifests: Vec<PathBuf>,
        /// Defaults to the first manifest's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the dataset described by a config's [dataset] and [seeds] as CSV.
    GenData { spec: PathBuf, out: PathBuf },
    /// Paired runs over the cartesian product of the varied values.
    Sweep {
        config: PathBuf,
        /// `section.key=v1,v2,...`; may be repeated.
        #[arg(long, required = true)]
        vary: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn out_dir(cfg: &ExperimentConfig, out: Option<PathBuf>) -> PathBuf {
    out.unwrap_or_else(|| cfg.output.dir.join(&cfg.run.name))
}

fn execute(cmd: Command) -> HarnessResult<()> {
    match cmd {
        Command::Run { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let m = run_experiment(&cfg, &out_dir(&cfg, out), Role::Single, None)?;
            println!("{}", m.display());
        }
        Command::RunPair { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let dir = out_dir(&cfg, out);
            let (c, a) = run_pair(&cfg, &dir)?;
            println!(
                "{}\n{}\n{}",
                c.display(),
                a.display(),
                dir.join("metrics.csv").display()
            );
        }
        Command::Report { manifests, out } => {
            let dir = out
                .or_else(|| manifests.first().and_then(|m| m.parent()).map(Path::to_path_buf))
                .unwrap_or_default();
            for row in report(&manifests, &dir)? {
                log::info!("{}: {:?}", row.run_id, row.avg_ta_loss);
            }
            println!("{}", dir.join("metrics.csv").display());
        }
        Command::GenData { spec, out } => {
            let cfg = ExperimentConfig::load(&spec)?;
            let data = load_dataset::<f64>(&cfg)?;
            gradamp::data::write_csv(&data, &out).map_err(|e| HarnessError::Runtime(e.to_string()))?;
            println!("{} samples -> {}", data.len(), out.display());
        }
        Command::Sweep { config, vary, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let vary: Vec<Vary> = vary.iter().map(|v| v.parse()).collect::<HarnessResult<_>>()?;
            let dir = out_dir(&cfg, out);
            sweep(&cfg, &vary, &dir)?;
            println!("{}", dir.join("metrics.csv").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
