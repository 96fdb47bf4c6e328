#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use perfhom::campaign::{run_experiment, ExperimentConfig};

#[derive(Parser)]
#[command(name = "perfhom", version, about = "Homogenization experiments on periodically perforated domains")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Cell correctors at a list of slopes.
    CellSolve(Common),
    /// Monotonicity and Lipschitz quotients of the effective operator.
    Effective(Common),
    /// Flux correctors and their identities.
    Flux(Common),
    /// Fine-scale Dirichlet problem on the perforated domain.
    SolveEps(Common),
    /// Homogenized Dirichlet problem.
    SolveHom(Common),
    /// Fine-scale resolvent problem on the torus.
    SolveResolvent(Common),
    /// Convergence rate campaign over a dyadic ε list.
    RateStudy(Common),
    /// Interior and boundary excess profiles.
    LipschitzProfile(Common),
    /// Quenched Calderón-Zygmund ratios.
    CzCheck(Common),
    /// Extension operator constants.
    ExtensionCheck(Common),
    /// Structure audit of the vector field.
    Audit(Common),
}

#[derive(Args)]
struct Common {
    /// JSON experiment configuration; defaults to the built-in one for the subcommand.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for the CSV, JSON and table cache.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Residual tolerance for the Newton and cell solves.
    #[arg(long)]
    tol: Option<f64>,
}

impl Command {
    fn split(&self) -> (&'static str, &Common) {
        match self {
            Command::CellSolve(c) => ("cell-solve", c),
            Command::Effective(c) => ("effective", c),
            Command::Flux(c) => ("flux", c),
            Command::SolveEps(c) => ("solve-eps", c),
            Command::SolveHom(c) => ("solve-hom", c),
            Command::SolveResolvent(c) => ("solve-resolvent", c),
            Command::RateStudy(c) => ("rate-study", c),
            Command::LipschitzProfile(c) => ("lipschitz-profile", c),
            Command::CzCheck(c) => ("cz-check", c),
            Command::ExtensionCheck(c) => ("extension-check", c),
            Command::Audit(c) => ("audit", c),
        }
    }
}

fn configure(name: &str, args: &Common) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => ExperimentConfig::default_for(name)?,
    };
    if cfg.problem.name() != name {
        bail!("configuration describes a {} run, not {name}", cfg.problem.name());
    }
    if let Some(out) = &args.out {
        cfg.out = out.clone();
    }
    if let Some(t) = args.threads {
        cfg.threads = t;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(tol) = args.tol {
        if !(tol > 0.0) {
            bail!("--tol must be positive");
        }
        cfg.tolerances.newton = tol;
        cfg.tolerances.cell = tol;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    let (name, args) = cli.command.split();
    let cfg = configure(name, args)?;
    let output = run_experiment(&cfg)?;
    let (csv, json) = output.write(&cfg.out)?;
    println!("{name}: {}", if output.passed { "passed" } else { "failed" });
    println!("wrote {} and {}", csv.display(), json.display());
    Ok(output.passed)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            let _ = e.print();
            return ExitCode::from(1);
        }
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
