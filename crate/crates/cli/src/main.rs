use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fuseseg_cli::commands::{cmd_cv, cmd_eval, cmd_infer, cmd_phantom, cmd_register, cmd_report, cmd_train};
use fuseseg_cli::{CliError, ExperimentConfig, EXIT_CONFIG, EXIT_OK};

#[derive(Parser)]
#[command(name = "fuseseg", version, about = "Chained PET/CT fusion segmentation on phantoms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print or check the experiment configuration.
    Config {
        /// Print the default configuration as JSON.
        #[arg(long)]
        dump_defaults: bool,
        /// Validate a configuration file and print it with defaults filled in.
        #[arg(long)]
        check: Option<PathBuf>,
    },
    /// Generate a synthetic dataset.
    Phantom {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        cases: Option<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Register every case's PET onto its planning CT.
    Register {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Re-register cases that already have a registered PET.
        #[arg(long)]
        force: bool,
    },
    /// Train the CT, EF and LF networks on a registered dataset.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated case ids; all cases when omitted.
        #[arg(long, value_delimiter = ',')]
        cases: Vec<String>,
    },
    /// Segment cases with trained models.
    Infer {
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        cases: Vec<String>,
        #[arg(long)]
        threshold: Option<f32>,
    },
    /// Score a predicted mask against a reference mask.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
    },
    /// Patient-level cross-validation of the full pipeline.
    Cv {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the configured output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rebuild tables and plots of a finished cv run.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Config { dump_defaults, check } => {
            if let Some(p) = check {
                println!("{}", ExperimentConfig::load(Some(&p))?.to_json());
            } else if dump_defaults {
                println!("{}", ExperimentConfig::default().to_json());
            } else {
                return Err(CliError::Config("config needs --dump-defaults or --check <file>".into()));
            }
        }
        Command::Phantom { out, cases, config } => {
            let cfg = ExperimentConfig::load(config.as_deref())?;
            println!("{}", cmd_phantom(&cfg, &out, cases)?.display());
        }
        Command::Register { manifest, out, config, force } => {
            let cfg = ExperimentConfig::load(config.as_deref())?;
            println!("{}", cmd_register(&cfg, &manifest, &out, force)?.display());
        }
        Command::Train { manifest, out, config, cases } => {
            let cfg = ExperimentConfig::load(config.as_deref())?;
            let models = cmd_train(&cfg, &manifest, &out, &cases)?;
            for (k, h) in &models.provenance.model_hashes {
                println!("{k} {h}");
            }
        }
        Command::Infer { models, manifest, out, config, cases, threshold } => {
            let cfg = ExperimentConfig::load(config.as_deref())?;
            cmd_infer(&cfg, &models, &manifest, &out, &cases, threshold)?;
        }
        Command::Eval { pred, gt } => println!("{}", cmd_eval(&pred, &gt)?),
        Command::Cv { config, out } => {
            let cfg = ExperimentConfig::load(config.as_deref())?;
            let out = out.unwrap_or_else(|| cfg.output_dir.clone());
            print!("{}", cmd_cv(&cfg, &out)?.summary);
        }
        Command::Report { run } => print!("{}", cmd_report(&run)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::from(EXIT_OK as u8),
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
