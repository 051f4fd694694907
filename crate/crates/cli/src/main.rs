use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use eqfree::sde::Model;
use eqfree_cli::{resolve, run, run_all, Check, Failure, Overrides, Report, Stage};

#[derive(Parser)]
#[command(name = "eqfree", version, about = "Equation-free experiments on 2D shear-dispersion particle systems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug)]
struct Common {
    /// Config file (sectioned key = value); a manifest works too.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    replicas: Option<usize>,
    #[arg(long)]
    particles: Option<usize>,
    #[arg(long)]
    preset: Option<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum System {
    DiffusiveX,
    DiffusiveXy,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum CheckArg {
    Residuals,
    Oracle,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Direct particle simulation from the uniform square.
    Simulate(Common),
    /// Coarse projective integration.
    Cpi(Common),
    /// Coarse dynamic renormalization and A(t) tracking.
    Cdr(Common),
    /// Scale-invariance probe.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        system: Option<System>,
    },
    /// Closed-form fields: residuals, rescaled statistics, oracle probe.
    Analytic {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        check: Option<CheckArg>,
    },
    /// Every preset, each into a subdirectory of --out.
    All {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        system: Option<System>,
    },
}

fn read_config(common: &Common) -> Result<Option<String>, Failure> {
    common
        .config
        .as_ref()
        .map(|p| std::fs::read_to_string(p).map_err(|e| Failure::Config(format!("{}: {e}", p.display()))))
        .transpose()
}

fn overrides(common: &Common, system: Option<System>) -> Overrides {
    Overrides {
        seed: common.seed,
        replicas: common.replicas,
        particles: common.particles,
        system: system.map(|s| match s {
            System::DiffusiveX => Model::DiffusiveX,
            System::DiffusiveXy => Model::DiffusiveXY,
        }),
    }
}

fn summarize(label: &str, report: &Report) {
    let results: Vec<String> = report.results.iter().map(|(k, v)| format!("{k}={v}")).collect();
    println!("{label}: {}", results.join(" "));
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
}

fn single(stage: Stage, common: Common, system: Option<System>, check: Option<Check>) -> Result<(), Failure> {
    let text = read_config(&common)?;
    let inv = resolve(stage, common.preset.as_deref(), text.as_deref(), &overrides(&common, system))?;
    let report = run(&inv, &common.out, check)?;
    summarize(&inv.preset, &report);
    Ok(())
}

fn dispatch(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Simulate(c) => single(Stage::Simulate, c, None, None),
        Command::Cpi(c) => single(Stage::Cpi, c, None, None),
        Command::Cdr(c) => single(Stage::Cdr, c, None, None),
        Command::Probe { common, system } => single(Stage::Probe, common, system, None),
        Command::Analytic { common, check } => {
            let check = check.map(|c| match c {
                CheckArg::Residuals => Check::Residuals,
                CheckArg::Oracle => Check::Oracle,
                CheckArg::All => Check::All,
            });
            single(Stage::Analytic, common, None, check)
        }
        Command::All { common, system } => {
            if common.preset.is_some() {
                return Err(Failure::Config("`all` runs every preset; drop --preset".into()));
            }
            let text = read_config(&common)?;
            for (label, report) in run_all(text.as_deref(), &overrides(&common, system), &common.out)? {
                summarize(&label, &report);
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{f}");
            ExitCode::from(f.exit_code() as u8)
        }
    }
}
