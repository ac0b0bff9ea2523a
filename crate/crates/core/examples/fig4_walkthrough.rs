//! Prints the DSNT computation on the 5×5 example heatmap.

fn main() {
    match dsnt_core::docs::demo_fig4() {
        Ok(trace) => print!("{trace}"),
        Err(e) => {
            eprintln!("{e}");
            std::process::exit(1);
        }
    }
}
