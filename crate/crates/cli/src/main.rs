use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use sysrisk_cli::io::{self, Format};
use sysrisk_cli::run::{self, SENSITIVITY_TOL};
use sysrisk_cli::{load_scenarios, RunConfig};

#[derive(Parser)]
#[command(name = "sysrisk", version, about = "Systemic risk measures with grouped allocations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse and validate the inputs without solving.
    Validate { scenarios: PathBuf, config: PathBuf },
    /// Solve and write the risk report.
    Compute {
        scenarios: PathBuf,
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "json")]
        format: Format,
    },
    /// Tabulate analytic sensitivities against finite differences.
    Sensitivity {
        scenarios: PathBuf,
        config: PathBuf,
        #[arg(long)]
        direction: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare a group's risk share of a subgroup with the subgroup's own level.
    Split {
        scenarios: PathBuf,
        config: PathBuf,
        #[arg(long)]
        group: usize,
        #[arg(long, value_delimiter = ',', required = true)]
        subgroup: Vec<usize>,
    },
}

fn load(scenarios: &PathBuf, config: &PathBuf) -> anyhow::Result<(RunConfig, sysrisk::Model)> {
    let config = RunConfig::load(config).context("reading config")?;
    let scenarios = load_scenarios(scenarios).context("reading scenarios")?;
    let model = run::build_model(&config, &scenarios).context("validating model")?;
    Ok((config, model))
}

fn execute(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::Validate { scenarios, config } => {
            let (_, model) = load(&scenarios, &config)?;
            println!(
                "ok: {} scenarios, {} banks, {} groups, {} utilities",
                model.n_scenarios(),
                model.n_banks(),
                model.n_groups(),
                if model.alphas().is_some() { "exponential" } else { "general" }
            );
            Ok(true)
        }
        Command::Compute {
            scenarios,
            config,
            out,
            format,
        } => {
            let (config, model) = load(&scenarios, &config)?;
            let outcome = run::run(&config, &model)?;
            let path = out.or_else(|| config.output.clone());
            io::emit_report(&outcome.report, path.as_deref(), format)?;
            for c in outcome.checks.iter().filter(|c| !c.passed()) {
                eprintln!("residual {} = {:e} exceeds {:e}", c.name, c.value, c.tol);
            }
            Ok(outcome.passed())
        }
        Command::Sensitivity {
            scenarios,
            config,
            direction,
            out,
        } => {
            let (config, model) = load(&scenarios, &config)?;
            let v = io::load_direction(&direction, model.n_banks(), model.n_scenarios())?;
            let rows = run::sensitivity_rows(&config, &model, v)?;
            io::write_output(out.as_deref(), &io::sensitivity_tsv(&rows))?;
            let bad: Vec<_> = rows.iter().filter(|r| r.rel_mismatch() > SENSITIVITY_TOL).collect();
            for r in &bad {
                eprintln!("{}: relative mismatch {:e}", r.name, r.rel_mismatch());
            }
            Ok(bad.is_empty())
        }
        Command::Split {
            scenarios,
            config,
            group,
            subgroup,
        } => {
            let (_, model) = load(&scenarios, &config)?;
            let r = run::split(&model, group, &subgroup)?;
            println!("lhs\t{:.15e}", r.lhs);
            println!("rhs\t{:.15e}", r.rhs);
            println!("slack\t{:.15e}", r.slack());
            println!("holds\t{}", r.holds());
            Ok(r.holds())
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
