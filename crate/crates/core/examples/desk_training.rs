//! Trains one head on the default blob dataset and prints its metrics.
//!
//! cargo run --release -p dsnt-core --example desk_training -- [hm|fc|dsnt|dsntr] [epochs]

use dsnt_core::harness::{train, ExperimentConfig};
use dsnt_core::model::HeadKind;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let head = HeadKind::from_label(&args.next().unwrap_or_else(|| "dsntr".into()))?;
    let epochs = args.next().map(|e| e.parse()).transpose()?.unwrap_or(30);
    let config = ExperimentConfig {
        head,
        epochs,
        ..ExperimentConfig::default()
    };
    let out = train(&config)?;
    for (e, l) in out.report.epoch_losses.iter().enumerate() {
        println!("epoch {:>3} loss {l:.6}", e + 1);
    }
    for s in &out.report.splits {
        println!("{} mean error {:.4} pck {:?}", s.split, s.mean_error, s.pck);
    }
    println!("{:.1}s", out.wall_clock_seconds);
    Ok(())
}
