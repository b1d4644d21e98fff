//! Command line front end: each proof step of the pipeline as a subcommand,
//! driven by a scenario file.

pub mod figure;
pub mod pipeline;
pub mod scenario;

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use pipeline::{Plan, Report, Stage};
use scenario::Scenario;

#[derive(Debug, Parser)]
#[command(name = "dynthick", version, about = "Conley blocks, flow selectors and cell attachment checks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Scenario JSON file.
    #[arg(long, global = true)]
    pub scenario: Option<PathBuf>,
    /// Output directory; overrides the scenario's.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Homology grid resolution per axis; overrides the scenario's.
    #[arg(long, global = true)]
    pub grid: Option<usize>,
    /// Random seed for probe generation; overrides the scenario's.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Treat warnings as failures.
    #[arg(long, global = true)]
    pub strict: bool,
}

#[derive(Clone, Copy, Debug, Subcommand)]
pub enum Command {
    /// Locate the critical point and check its isolation.
    Critical,
    /// Build the block; fiber invariance and gamma convergence.
    Block,
    /// Build the selector; transversality.
    Selector,
    /// Retraction contract.
    Retract,
    /// Homotopy seams and endpoints.
    Homotopy,
    /// Sublevel homology at c - eps and c + eps.
    Homology,
    /// Full pipeline.
    Verify,
    /// CSV point clouds for planar scenarios.
    Figure,
}

impl Command {
    fn plan(self) -> Plan {
        let upto = |s| Plan {
            upto: Some(s),
            homology: false,
        };
        match self {
            Command::Critical => upto(Stage::Critical),
            Command::Block => upto(Stage::Block),
            Command::Selector => upto(Stage::Selector),
            Command::Retract => upto(Stage::Retract),
            Command::Homotopy | Command::Figure => upto(Stage::Homotopy),
            Command::Homology => Plan {
                upto: None,
                homology: true,
            },
            Command::Verify => Plan::full(),
        }
    }

    fn report_name(self) -> &'static str {
        match self {
            Command::Critical => "critical.json",
            Command::Block => "block.json",
            Command::Selector => "selector.json",
            Command::Retract => "retract.json",
            Command::Homotopy => "homotopy.json",
            Command::Homology => "homology.json",
            Command::Verify | Command::Figure => "report.json",
        }
    }
}

/// Loads and validates the scenario with command line overrides applied.
pub fn load_scenario(cli: &Cli) -> Result<Scenario> {
    let path = cli.scenario.as_deref().context("--scenario is required")?;
    let mut sc = Scenario::load(path)?;
    if let Some(g) = cli.grid {
        sc.grid = g;
    }
    if let Some(s) = cli.seed {
        sc.seed = s;
    }
    sc.validate()?;
    Ok(sc)
}

fn output_dir(cli: &Cli, sc: &Scenario) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| sc.output_dir.clone())
        .unwrap_or_else(|| Path::new("out").join(&sc.name))
}

/// Runs one command and returns the report (if any) and the pass verdict.
pub fn execute(cli: &Cli) -> Result<(Option<Report>, bool)> {
    let sc = load_scenario(cli)?;
    let out = output_dir(cli, &sc);
    if let Command::Figure = cli.command {
        let files = figure::emit(&sc, &out)?;
        for f in files {
            println!("wrote {}", f.display());
        }
        return Ok((None, true));
    }
    let report = pipeline::run(&sc, cli.command.plan());
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let path = out.join(cli.command.report_name());
    std::fs::write(&path, pipeline::render(&report)).with_context(|| format!("writing {}", path.display()))?;
    let ok = report.verdict(cli.strict);
    println!("{} {} -> {}", if ok { "PASS" } else { "FAIL" }, sc.name, path.display());
    if let Some(f) = &report.failure {
        eprintln!("stage {:?} failed: {}", f.stage, f.error);
    }
    for c in &report.failed_checks {
        eprintln!("check failed: {c}");
    }
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    Ok((Some(report), ok))
}
