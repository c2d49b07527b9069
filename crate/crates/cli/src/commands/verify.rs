use std::path::PathBuf;

use clap::Args;

use crate::verify::{run as run_suite, Mutation, MANIFEST};
use crate::CliError;

#[derive(Debug, Clone, Args)]
pub struct VerifyArgs {
    /// Swap in a deliberately broken component.
    #[arg(long, value_enum)]
    pub mutation: Option<Mutation>,
    /// Also write the report to this file.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Restrict to these criterion numbers, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub only: Vec<u32>,
}

pub fn run(args: VerifyArgs) -> Result<(), CliError> {
    let only = (!args.only.is_empty()).then_some(args.only.as_slice());
    let report = run_suite(args.mutation, only);
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    println!("{text}");
    if let Some(path) = &args.report {
        std::fs::write(path, &text)?;
    }
    for c in &report.checks {
        let status = if c.passed { "pass" } else { "FAIL" };
        let measured = c.measured.map_or("error".to_string(), |v| format!("{v:.3e}"));
        eprintln!("{status} {:<36} {measured:>10}  {:.1}s", c.name, c.seconds);
    }
    if only.is_none() && report.names() != MANIFEST {
        return Err(CliError::Verification("report does not enumerate the check manifest".into()));
    }
    if !report.passed {
        let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
        return Err(CliError::Verification(failed.join(", ")));
    }
    Ok(())
}
