//! Prints the finite-difference report for every differentiable op.

use dsnt_core::gradcheck::{run, GradcheckConfig, Scope};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let report = run(Scope::AllOps, &GradcheckConfig::default())?;
    print!("{report}");
    std::process::exit(if report.passed() { 0 } else { 1 });
}
