use std::path::PathBuf;
use std::process;

use clap::{Parser, Subcommand};
use mtjr::commands::{self, SweepParam};
use mtjr::config::RunConfig;
use mtjr::core::decode::DecodeConfig;
use mtjr::{Error, ExitCode};

/// Joint speech and accent recognition on synthetic accented corpora.
#[derive(Parser)]
#[command(version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train/dev/test splits of a synthetic corpus.
    GenData {
        /// Corpus spec (JSON); omitted fields take their defaults.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model; writes checkpoint.mtjc and metrics.csv to out_dir.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Fine-tune from this pretrained checkpoint (overrides init_from).
        #[arg(long)]
        init_from: Option<PathBuf>,
    },
    /// Evaluate a checkpoint and write a one-row results CSV.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Run config whose `decode` section sets the decoding.
        #[arg(long)]
        config: Option<PathBuf>,
        /// System name for the CSV; the checkpoint's file stem by default.
        #[arg(long)]
        system: Option<String>,
        /// Split name for the CSV; the data directory's name by default.
        #[arg(long)]
        split: Option<String>,
    },
    /// Train and evaluate once per value of lambda or tap_layer.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        param: SweepParam,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
}

fn pct(x: Option<f64>) -> String {
    x.map_or("-".to_string(), |v| format!("{:.2}%", 100.0 * v))
}

fn file_name(path: &std::path::Path) -> Option<String> {
    path.file_stem().map(|s| s.to_string_lossy().into_owned())
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::GenData { spec, out } => {
            let spec = match spec {
                Some(path) => commands::load_corpus_spec(&path)?,
                None => Default::default(),
            };
            for summary in commands::gen_data(&spec, &out)? {
                println!("{summary}");
            }
        }
        Command::Train { config, init_from } => {
            let mut cfg = RunConfig::load(&config)?;
            if init_from.is_some() {
                cfg.init_from = init_from;
            }
            let outcome = commands::train(&cfg)?;
            if let Some(m) = outcome.metrics.last() {
                println!(
                    "epoch {} total {:.4} dev_wer {} dev_acc {}",
                    m.epoch,
                    m.total,
                    pct(m.dev_wer),
                    pct(m.dev_acc)
                );
            }
            println!("checkpoint {}", cfg.out_dir.join(commands::CHECKPOINT_FILE).display());
        }
        Command::Eval { checkpoint, data, out, config, system, split } => {
            let decode = match config {
                Some(path) => RunConfig::load(&path)?.decode,
                None => DecodeConfig::default(),
            };
            let system = system.or_else(|| file_name(&checkpoint)).unwrap_or_default();
            let split = split.or_else(|| file_name(&data)).unwrap_or_default();
            let row = commands::eval(&checkpoint, &data, &out, &decode, &system, &split)?;
            let r = &row.report;
            println!("{system} {split}: wer {} acc {}", pct(r.wer.as_ref().map(|w| w.wer)), pct(r.accent_accuracy));
        }
        Command::Sweep { config, param, values } => {
            let cfg = RunConfig::load(&config)?;
            for p in commands::sweep(&cfg, param, &values, commands::thread_budget())? {
                println!("{} = {}: wer {} acc {}", param.name(), p.value, pct(p.wer), pct(p.acc));
            }
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        let code = e.exit_code();
        process::exit(code as i32);
    }
    process::exit(ExitCode::Success as i32);
}
