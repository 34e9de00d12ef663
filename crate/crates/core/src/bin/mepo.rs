use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use mepo_lab::cli::{self, CliError, ExperimentConfig};

#[derive(Parser)]
#[command(name = "mepo", about = "Meta post-refinement and covariance-aligned continual learning lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the backbone jointly on the pretraining classes.
    Pretrain(Common),
    /// Meta-refine the pretrained backbone.
    Refine(Common),
    /// Build the covariance reference for the selected backbone.
    Covref(Common),
    /// Run one online continual-learning cell.
    Gcl(Common),
    /// Measure the sequential-versus-joint update gap.
    Theory(Common),
    /// Run the ablation grid and alpha sweep over all configured seeds.
    Sweep(Common),
    /// Print the default configuration.
    Defaults,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

impl From<Switch> for bool {
    fn from(s: Switch) -> bool {
        matches!(s, Switch::On)
    }
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    meta_rep: Option<Switch>,
    #[arg(long, value_enum)]
    meta_cov: Option<Switch>,
    #[arg(long)]
    alpha: Option<f64>,
}

impl Common {
    fn resolve(&self) -> Result<(ExperimentConfig, PathBuf), CliError> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(v) = self.meta_rep {
            cfg.meta_rep = v.into();
        }
        if let Some(v) = self.meta_cov {
            cfg.meta_cov = v.into();
        }
        if let Some(a) = self.alpha {
            cfg.gcl.align.alpha = a;
        }
        cfg.validate()?;
        let out = self
            .out
            .clone()
            .or_else(|| cfg.out_dir.clone().map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"));
        Ok((cfg, out))
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<(), CliError> {
    print!("{}", cli::to_json_pretty(value)?);
    Ok(())
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Defaults => print_json(&ExperimentConfig::default()),
        Command::Pretrain(c) => {
            let (cfg, out) = c.resolve()?;
            print_json(&cli::cmd_pretrain(&cfg, &out)?)
        }
        Command::Refine(c) => {
            let (cfg, out) = c.resolve()?;
            print_json(&cli::cmd_refine(&cfg, &out)?)
        }
        Command::Covref(c) => {
            let (cfg, out) = c.resolve()?;
            println!("{}", cli::cmd_covref(&cfg, &out)?.display());
            Ok(())
        }
        Command::Gcl(c) => {
            let (cfg, out) = c.resolve()?;
            print_json(&cli::cmd_gcl(&cfg, &out)?)
        }
        Command::Theory(c) => {
            let (cfg, out) = c.resolve()?;
            print_json(&cli::cmd_theory(&cfg, &out)?.fit.fit_json())
        }
        Command::Sweep(c) => {
            let (cfg, out) = c.resolve()?;
            print_json(&cli::cmd_sweep(&cfg, &out)?)
        }
    }
}

fn main() -> ExitCode {
    let args = Cli::parse();
    match run(args.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json_line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
