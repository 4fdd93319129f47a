//! `pisac`: dataset generation, training, evaluation, sweeps and reports.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use pisac_core::experiment::{run_logged, Command, RunSpec};
use pisac_core::network::Variant;

#[derive(Parser, Debug)]
#[command(name = "pisac", version, about = "Pinching/movable-antenna ISAC experiments")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,

    /// Flat TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Seed override. Sweeps accept a comma-separated list and average over it.
    #[arg(long, global = true, value_delimiter = ',')]
    seed: Vec<u64>,

    #[arg(long, global = true)]
    variant: Option<VariantArg>,

    /// Comma-separated P_max values (W) for sweep-power.
    #[arg(long, global = true, value_delimiter = ',')]
    pmax_list: Option<Vec<f64>>,

    /// Comma-separated γ₀ values for sweep-gamma.
    #[arg(long, global = true, value_delimiter = ',')]
    gamma_list: Option<Vec<f64>>,

    /// Scenario count (gen-data) or test-set size (eval).
    #[arg(long, global = true)]
    count: Option<usize>,

    /// Checkpoint to evaluate (default: OUT/model.ckpt).
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,

    /// Suppress progress output.
    #[arg(long, short, global = true)]
    quiet: bool,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Cmd {
    /// Write scenarios.csv from the training stream.
    GenData,
    /// Train one variant; writes model.ckpt, history.csv and results.json.
    Train,
    /// Score a checkpoint on the test stream.
    Eval,
    /// Train and score both variants for every P_max.
    SweepPower,
    /// Train and score one variant for every γ₀.
    SweepGamma,
    /// Rewrite the CSV files from results.json.
    Report,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum VariantArg {
    Proposed,
    FixAnt,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Proposed => Variant::Proposed,
            VariantArg::FixAnt => Variant::FixAnt,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let command = match cli.command {
        Cmd::GenData => Command::GenData,
        Cmd::Train => Command::Train,
        Cmd::Eval => Command::Eval,
        Cmd::SweepPower => Command::SweepPower,
        Cmd::SweepGamma => Command::SweepGamma,
        Cmd::Report => Command::Report,
    };
    let spec = RunSpec {
        command,
        config: cli.config,
        out: cli.out,
        seeds: cli.seed,
        variant: cli.variant.map(Variant::from),
        p_max_list: cli.pmax_list,
        gamma_list: cli.gamma_list,
        count: cli.count,
        checkpoint: cli.checkpoint,
    };
    let quiet = cli.quiet;
    match run_logged(&spec, &mut |line| {
        if !quiet {
            eprintln!("{line}");
        }
    }) {
        Ok(files) => {
            for f in files {
                println!("{}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
