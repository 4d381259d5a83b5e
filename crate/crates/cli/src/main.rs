use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use diabnet_cli::commands::{cmd_evaluate, cmd_experiment, cmd_preprocess, cmd_train};
use diabnet_cli::{CliError, Configuration, PipelineConfig};

#[derive(Parser)]
#[command(name = "diabnet", version, about = "Diabetes classification pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Split, impute and normalise; writes preprocess.json.
    Preprocess(Common),
    /// Train one configuration; writes weights and a metrics line.
    Train(Common),
    /// Score stored weights on the test split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Weight container written by `train`.
        #[arg(long)]
        weights: PathBuf,
    },
    /// Compare all five configurations over repeated seeds.
    Experiment {
        #[command(flatten)]
        common: Common,
        /// Runs per configuration (default: the configured repeats).
        #[arg(long)]
        repeats: Option<usize>,
    },
}

#[derive(Args)]
struct Common {
    /// Configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Overrides `pipeline.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `pipeline.output`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `pipeline.configuration`.
    #[arg(long)]
    configuration: Option<Configuration>,
}

impl Common {
    fn load(&self) -> Result<(PipelineConfig, PathBuf), CliError> {
        let mut cfg = PipelineConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(c) = self.configuration {
            cfg.configuration = c;
        }
        let out = self.out.clone().unwrap_or_else(|| cfg.output.clone());
        Ok((cfg, out))
    }
}

fn execute(command: Command) -> Result<(), CliError> {
    match command {
        Command::Preprocess(common) => {
            let (cfg, out) = common.load()?;
            let s = cmd_preprocess(&cfg, &out)?;
            println!(
                "rows {} (classes {}/{}), train {} ({}/{}), test {} ({}/{})",
                s.rows,
                s.class_counts[0],
                s.class_counts[1],
                s.train_rows,
                s.train_class_counts[0],
                s.train_class_counts[1],
                s.test_rows,
                s.test_class_counts[0],
                s.test_class_counts[1],
            );
        }
        Command::Train(common) => {
            let (cfg, out) = common.load()?;
            let t = cmd_train(&cfg, cfg.configuration, cfg.seed, &out)?;
            println!("{}", t.record.to_line());
        }
        Command::Evaluate { common, weights } => {
            let (cfg, out) = common.load()?;
            let r = cmd_evaluate(&cfg, cfg.configuration, cfg.seed, &weights, &out)?;
            println!("{}", r.to_line());
        }
        Command::Experiment { common, repeats } => {
            let (cfg, out) = common.load()?;
            let report = cmd_experiment(&cfg, repeats, &out)?;
            print!("{}", report.to_text());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
