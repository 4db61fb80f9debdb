use clap::Parser;
use kf_dmd::enkf::FilterKind;
use kf_dmd::experiments::{load_config, run_experiment, ExperimentKind};
use kf_dmd::report::OutputFormat;
use std::path::PathBuf;
use std::process::ExitCode;

/// Koopman mode and eigenvalue estimation from noisy snapshots with
/// ensemble Kalman filtering; runs the benchmark experiments.
#[derive(Parser, Debug)]
#[command(name = "kf-dmd", version)]
struct Cli {
    /// JSON config file; flags override file values
    #[arg(long)]
    config: Option<PathBuf>,

    /// Experiment: ode_auto | fourier | nonauto_linear | allen_cahn | lemma_sweep
    #[arg(long)]
    experiment: Option<String>,

    /// Seed (repeatable); replaces the config's seed list
    #[arg(long)]
    seed: Vec<u64>,

    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,

    /// Table format: csv | json
    #[arg(long)]
    format: Option<String>,

    /// Filter variant: etkf | enkf
    #[arg(long)]
    filter: Option<String>,

    /// Also emit SVG line charts for plot data
    #[arg(long)]
    svg: bool,
}

fn run(cli: Cli) -> kf_dmd::Result<Vec<PathBuf>> {
    let kind = cli
        .experiment
        .as_deref()
        .map(ExperimentKind::from_name)
        .transpose()?;
    let mut cfg = load_config(cli.config.as_deref(), kind)?;
    if !cli.seed.is_empty() {
        cfg.seeds = cli.seed;
    }
    if let Some(out) = cli.out {
        cfg.out_dir = out;
    }
    if let Some(fmt) = cli.format.as_deref() {
        cfg.format = match fmt {
            "csv" => OutputFormat::Csv,
            "json" => OutputFormat::Json,
            other => return Err(kf_dmd::Error::Config(format!("unknown format '{other}'"))),
        };
    }
    if let Some(f) = cli.filter.as_deref() {
        cfg.filter.kind = match f {
            "etkf" => FilterKind::Etkf,
            "enkf" => FilterKind::Enkf,
            other => return Err(kf_dmd::Error::Config(format!("unknown filter '{other}'"))),
        };
    }
    if cli.svg {
        cfg.emit_svg = true;
    }
    run_experiment(&cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(files) => {
            for f in files {
                println!("{}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
