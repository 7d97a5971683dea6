use std::path::PathBuf;
use std::process::ExitCode;

use amar::config::{Preset, RunConfig};
use amar::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};

mod bench;
mod run;
mod simulate;

#[derive(Parser, Debug)]
#[command(
    name = "amar",
    version,
    about = "Multi-person activity recognition from WiFi CSI"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML file laid over the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = PresetArg::Desk)]
    preset: PresetArg,
    /// Base seed; overrides the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Number of seeds; overrides the configuration.
    #[arg(long, global = true)]
    seeds: Option<usize>,
    /// Bypass the quantizer.
    #[arg(long, global = true)]
    no_rvq: bool,
    /// Output directory.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    /// Only print warnings and errors.
    #[arg(long, short, global = true)]
    quiet: bool,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum PresetArg {
    Desk,
    Paper,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one model per seed and report held-out metrics.
    Train,
    /// Evaluate checkpoints, mean and standard error over seeds.
    Eval(run::EvalArgs),
    /// Run the edge or cloud role of the split deployment.
    Simulate(simulate::SimulateArgs),
    /// Parameter counts, matching cost scaling and codebook capacity.
    Bench,
}

impl Common {
    pub fn load(&self) -> amar::Result<RunConfig> {
        let preset = match self.preset {
            PresetArg::Desk => Preset::Desk,
            PresetArg::Paper => Preset::Paper,
        };
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path, preset)?,
            None => RunConfig::preset(preset),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(n) = self.seeds {
            cfg.seeds = n;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.common.quiet {
        log::LevelFilter::Warn
    } else {
        log::LevelFilter::Info
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .init();
    let result = cli.common.load().and_then(|cfg| match &cli.command {
        Command::Train => run::train(&cli.common, &cfg),
        Command::Eval(a) => run::eval(&cli.common, &cfg, a),
        Command::Simulate(a) => simulate::simulate(&cli.common, &cfg, a),
        Command::Bench => bench::bench(&cfg),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &Error) -> ExitCode {
    ExitCode::from(e.exit_code() as u8)
}
