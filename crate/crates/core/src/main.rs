use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use volssl::config::{Preset, RunConfig};
use volssl::pipeline::{self, RunDir};
use volssl::{Error, Result};

#[derive(Parser)]
#[command(name = "volssl", version, about = "Contrastive pretraining, U-Net fine-tuning and MC-dropout inference on 3D volumes")]
struct Cli {
    /// JSON overrides merged over the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    /// Worker thread cap; defaults to the number of cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Base preset; overrides a "preset" key in the config file.
    #[arg(long, global = true, value_enum)]
    preset: Option<Preset>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the phantom dataset and the train/test split.
    Synth,
    /// Contrastive pretraining of the encoder on every scan.
    Pretrain,
    /// Fine-tune the U-Net on the labelled training fraction.
    Finetune,
    /// Deterministic prediction of the test scans.
    Predict,
    /// MC-dropout prediction with aggregation and percentile heatmaps.
    Mc,
    /// Label-fraction, dropout-configuration and aggregation sweeps.
    Sweep,
    /// Finite-difference gradient checks of every op and the full network.
    Gradcheck,
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let run = RunDir::new(&cli.out);
    if let Command::Gradcheck = cli.command {
        for r in pipeline::cmd_gradcheck(&run)? {
            println!("{:<18} {:.3e} < {:e}", r.name, r.max_rel_error, r.tolerance);
        }
        return Ok(());
    }
    let cfg = RunConfig::load(cli.config.as_deref(), cli.preset)?;
    pipeline::echo_config(&cfg, &run)?;
    match cli.command {
        Command::Synth => {
            let entries = pipeline::cmd_synth(&cfg, &run)?;
            println!("wrote {} scans to {}", entries.len(), run.manifest().display());
        }
        Command::Pretrain => {
            let out = pipeline::cmd_pretrain(&cfg, &run)?;
            let last = out.loss_history.last().copied().unwrap_or(f64::NAN);
            println!("pretrained {} epochs, final loss {last:.4}", out.loss_history.len());
        }
        Command::Finetune => print!("{}", pipeline::cmd_finetune(&cfg, &run)?.1.to_csv()),
        Command::Predict => print!("{}", pipeline::cmd_predict(&cfg, &run)?.to_csv()),
        Command::Mc => print!("{}", pipeline::cmd_mc(&cfg, &run)?.to_csv()),
        Command::Sweep => {
            let r = pipeline::cmd_sweep(&cfg, &run)?;
            for report in [r.fraction, r.dropout, r.aggregation] {
                print!("{}", report.to_csv());
            }
        }
        Command::Gradcheck => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("volssl: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
