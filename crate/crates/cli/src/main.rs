use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use sessrecon::features::Mode;
use sessrecon::harness::{self, RunConfig, PACKET_LEVEL, SESSION_LEVEL};
use sessrecon::metrics::MetricsTable;
use sessrecon::models::Arch;
use sessrecon::synth::GeneratorConfig;

#[derive(Parser)]
#[command(name = "sessrecon", version, about = "Encode, reconstruct and repair TCP sessions from PCAP captures")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic capture.
    Synth {
        /// Generator settings (TOML); defaults otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        sessions: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Assemble sessions from a capture and dump them.
    Ingest {
        input: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Fit the feature schema on the training split.
    FitSchema(RunArgs),
    /// Train one autoencoder.
    Train(RunArgs),
    /// Score a checkpoint on a capture.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
        /// Rule ids to switch off, e.g. R9.
        #[arg(long = "disable", value_delimiter = ',')]
        disabled: Vec<String>,
    },
    /// Train several architectures on one split and plot their losses.
    CompareModels {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', default_value = "gru,lstm,bilstm,attention,transformer")]
        archs: Vec<Arch>,
    },
    /// Squared-error-only versus typed loss, per feature.
    LossAblation(RunArgs),
    /// Packet- versus session-level models under categorical input dropout.
    DropoutExperiment {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',')]
        rates: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Reconstruct a capture through a checkpoint and repair the result.
    Reconstruct {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Where to write the violation report.
        #[arg(long)]
        violations: Option<PathBuf>,
        #[arg(long = "disable", value_delimiter = ',')]
        disabled: Vec<String>,
    },
}

/// Run config file plus per-flag overrides.
#[derive(Args)]
struct RunArgs {
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, short)]
    out: Option<PathBuf>,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    arch: Option<Arch>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => RunConfig::default(),
        };
        if let Some(v) = &self.input {
            cfg.input = Some(v.clone());
        }
        if let Some(v) = &self.out {
            cfg.output_dir = v.clone();
        }
        if let Some(v) = self.mode {
            cfg.mode = v;
        }
        if let Some(v) = self.arch {
            cfg.model.arch = v;
        }
        if let Some(v) = self.max_epochs {
            cfg.max_epochs = v;
        }
        if let Some(v) = self.patience {
            cfg.patience = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = Some(v);
        }
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if let Some(v) = self.seed {
            cfg.model.seed = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn print_table(title: &str, t: &MetricsTable) {
    println!("{title} ({} packets)", t.packets);
    println!("{:<16} {:<9} {:>12} {:>12} {:>8}", "feature", "kind", "loss", "scaled_mse", "error");
    for f in &t.features {
        let scaled = f.scaled_mse.map_or_else(|| "N/A".to_string(), |v| format!("{v:.3e}"));
        println!("{:<16} {:<9} {:>12.4e} {:>12} {:>8.4}", f.feature.name(), f.kind, f.loss, scaled, f.reconstruction_error);
    }
    println!("mean reconstruction error {:.4}", t.mean_reconstruction_error);
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { config, sessions, seed, out } => {
            let mut cfg = match config {
                Some(p) => GeneratorConfig::load(&p).with_context(|| format!("loading {}", p.display()))?,
                None => GeneratorConfig::default(),
            };
            if let Some(n) = sessions {
                cfg.sessions = n;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let r = harness::cmd_synth(&cfg, &out)?;
            println!("wrote {} packets in {} sessions to {} ({} bytes)", r.packets, r.sessions, out.display(), r.bytes);
        }
        Command::Ingest { input, out } => {
            let r = harness::cmd_ingest(&input, &out)?;
            println!(
                "{} packets, {} sessions ({} non-TCP and {} truncated records skipped); see {}",
                r.packets,
                r.sessions,
                r.skipped_non_tcp,
                r.skipped_truncated,
                out.join("sessions.csv").display()
            );
        }
        Command::FitSchema(args) => {
            let cfg = args.resolve()?;
            let schema = harness::cmd_fit_schema(&cfg)?;
            for f in &schema.features {
                println!("{:<16} {}", f.id.name(), f.kind.label());
            }
            println!("encoded width {}, output width {}", schema.encoded_width, schema.output_width);
        }
        Command::Train(args) => {
            let cfg = args.resolve()?;
            let r = harness::cmd_train(&cfg)?;
            println!(
                "{}: best validation loss {:.6} at epoch {} of {}",
                cfg.model.arch,
                r.outcome.best_val.total,
                r.outcome.best_epoch,
                r.outcome.history.len()
            );
            print_table("validation", &r.before);
            println!("outputs in {}", r.run_dir.display());
        }
        Command::Evaluate { checkpoint, input, out, disabled } => {
            let r = harness::cmd_evaluate(&checkpoint, &input, &out, &disabled)?;
            print_table("before enforcement", &r.before);
            println!("after enforcement: mean reconstruction error {:.4}", r.after.mean_reconstruction_error);
            println!("{} violations; outputs in {}", r.violations, out.display());
        }
        Command::CompareModels { run, archs } => {
            let cfg = run.resolve()?;
            let r = harness::cmd_compare_models(&cfg, &archs)?;
            for row in &r.rows {
                println!(
                    "{:<12} params {:>8}  best val {:.6} at epoch {} of {}",
                    row.arch, row.parameters, row.best_val_loss, row.best_epoch, row.epochs
                );
            }
            println!("outputs in {}", r.run_dir.display());
        }
        Command::LossAblation(args) => {
            let cfg = args.resolve()?;
            let r = harness::cmd_loss_ablation(&cfg)?;
            print_table("squared error only", &r.mse_only.before);
            print_table("typed loss", &r.kal.before);
            println!("outputs in {}", r.run_dir.display());
        }
        Command::DropoutExperiment { run, rates, seeds } => {
            let mut cfg = run.resolve()?;
            if let Some(r) = rates {
                cfg.dropout_rates = r;
            }
            if let Some(s) = seeds {
                cfg.seeds = s;
            }
            cfg.validate()?;
            let r = harness::cmd_dropout_experiment(&cfg)?;
            println!("{:>6} {:>14} {:>14}", "rate", "packet-level", "session-level");
            for &rate in &cfg.dropout_rates {
                println!("{rate:>6.2} {:>14.5} {:>14.5}", r.median(PACKET_LEVEL, rate), r.median(SESSION_LEVEL, rate));
            }
            println!("outputs in {}", r.run_dir.display());
        }
        Command::Reconstruct { checkpoint, input, output, violations, disabled } => {
            let r = harness::cmd_reconstruct(&checkpoint, &input, &output, violations.as_deref(), &disabled)?;
            println!(
                "{} sessions in, {} sessions and {} packets out; {} violations repaired, {} remain",
                r.sessions_in, r.sessions_out, r.packets_out, r.violations_repaired, r.remaining_violations
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
