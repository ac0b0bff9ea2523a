//! Runs the resolution sweep and the left-half spatial generalization experiment
//! on the default configuration and prints both tables as CSV.
//!
//! cargo run --release -p dsnt-core --example comparisons

use dsnt_core::harness::{resolution_sweep, rows_to_csv, spatialgen_experiment, ExperimentConfig};
use dsnt_core::model::HeadKind;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let base = ExperimentConfig::default();
    let heads = [HeadKind::hm(), HeadKind::fc(), HeadKind::dsnt(), HeadKind::dsntr()];
    let sweep = resolution_sweep(&base, &[4, 8, 16], &heads)?;
    print!("{}", rows_to_csv(&sweep)?);
    let spatial = spatialgen_experiment(&base)?;
    print!("{}", rows_to_csv(&spatial)?);
    Ok(())
}
