//! Trains one small DSNT model per regularizer and dumps its heatmaps as CSV.
//!
//! cargo run --release -p dsnt-core --example reg_gallery -- [out_dir]

use dsnt_core::docs::{demo_reg_gallery, gallery_config};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "gallery".into());
    let gallery = demo_reg_gallery(out.as_ref(), &gallery_config(), None)?;
    for e in &gallery.entries {
        println!("{:<9} JS to reference Gaussian {:.4}", e.regularizer, e.divergence_to_reference);
        for row in e.heatmaps[0].data().chunks(e.heatmaps[0].shape()[1]) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.2}")).collect();
            println!("    {}", cells.join(" "));
        }
    }
    if !gallery.js_more_gaussian_than_none() {
        eprintln!("JS-regularized heatmaps are not closer to a Gaussian than unregularized ones");
        std::process::exit(1);
    }
    Ok(())
}
