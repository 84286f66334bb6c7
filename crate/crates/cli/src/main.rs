use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dimcl::data::cifar::CifarVariant;
use dimcl::metrics::ProbeConfig;
use dimcl_cli::error::{CliError, CliResult};
use dimcl_cli::{evaluate_checkpoint, parse_config, run_experiment, sweep, ExperimentConfig, SweepParam};

#[derive(Parser)]
#[command(name = "dimcl", version, about = "Dimensional contrastive learning experiments")]
struct Cli {
    /// Override the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the configured output directory.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Parallel runs for sweeps.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration.
    Train { config: PathBuf },
    /// Run one configuration per value of a parameter.
    Sweep {
        config: PathBuf,
        /// lambda, tau or dim.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
    },
    /// KNN and linear-probe accuracy of a checkpoint on a dataset.
    Eval {
        checkpoint: PathBuf,
        /// DCLSYN1 file, CIFAR binary file, or extracted CIFAR directory.
        dataset: PathBuf,
        #[arg(long, default_value_t = 20)]
        knn_k: usize,
        #[arg(long, default_value_t = 100)]
        probe_epochs: usize,
        /// Read CIFAR inputs as CIFAR-100.
        #[arg(long)]
        cifar100: bool,
    },
    /// Run the loss, gradient and metric self-checks.
    Verify,
}

fn load(path: &PathBuf, cli: &Cli) -> CliResult<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut cfg = parse_config(&text)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &cli.out_dir {
        cfg.output_dir = dir.clone();
    }
    Ok(cfg)
}

fn print_row(prefix: &str, row: &dimcl_cli::EpochRow) {
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
    println!(
        "{prefix}epoch {} base {:.4} dimcl {:.4} total {:.4} diversity {} probe {} knn {}",
        row.epoch,
        row.base_loss,
        row.dimcl_loss,
        row.total_loss,
        fmt(row.feature_diversity),
        fmt(row.probe_acc),
        fmt(row.knn_acc)
    );
}

fn run(cli: &Cli) -> CliResult<bool> {
    match &cli.command {
        Command::Train { config } => {
            let cfg = load(config, cli)?;
            let report = run_experiment(&cfg)?;
            for row in report.rows.iter().filter(|r| r.is_evaluated()) {
                print_row("", row);
            }
            println!("wrote {} ({:.1}s)", cfg.output_dir.display(), report.wall_clock_secs);
            Ok(true)
        }
        Command::Sweep { config, param, values } => {
            let cfg = load(config, cli)?;
            let param: SweepParam = param.parse()?;
            let points = sweep(&cfg, param, values, cli.workers)?;
            let mut diverged = None;
            for p in &points {
                match (&p.outcome, p.report().and_then(|r| r.last_evaluation())) {
                    (Err(CliError::Diverged { step, .. }), _) => {
                        println!("{}={}: diverged at step {step}", param.key(), p.value);
                        diverged.get_or_insert(*step);
                    }
                    (Err(e), _) => return Err(CliError::Config(dimcl_cli::ConfigError {
                        line: None,
                        key: Some(param.key().into()),
                        message: format!("{}={}: {e}", param.key(), p.value),
                    })),
                    (Ok(_), Some(row)) => print_row(&format!("{}={}: ", param.key(), p.value), row),
                    (Ok(_), None) => {}
                }
            }
            println!("wrote {}", cfg.output_dir.join("sweep.csv").display());
            if let Some(step) = diverged {
                let report = points.into_iter().find_map(|p| match p.outcome {
                    Err(CliError::Diverged { report, .. }) => Some(report),
                    _ => None,
                });
                return Err(CliError::Diverged { step, report: report.expect("diverged point") });
            }
            Ok(true)
        }
        Command::Eval { checkpoint, dataset, knn_k, probe_epochs, cifar100 } => {
            let variant = if *cifar100 { CifarVariant::Cifar100 } else { CifarVariant::Cifar10 };
            let probe = ProbeConfig { epochs: *probe_epochs, seed: cli.seed.unwrap_or(0), ..ProbeConfig::default() };
            let summary = evaluate_checkpoint(checkpoint, dataset, variant, *knn_k, &probe, 1024)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
            Ok(true)
        }
        Command::Verify => {
            let mut ok = true;
            for check in dimcl::verify::run_all(cli.seed.unwrap_or(0))? {
                println!("{} {}: {}", if check.passed { "PASS" } else { "FAIL" }, check.name, check.detail);
                ok &= check.passed;
            }
            Ok(ok)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("dimcl: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
