//! Runs the seeded synthetic experiment and prints its metrics.
//!
//! cargo run --release -p stdgan-core --example desk_experiment -- [seed]

use stdgan_core::experiment::{run, ExperimentConfig};

fn main() {
    let seed = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(7);
    let report = match run(&ExperimentConfig::desk(seed), true) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("experiment failed: {e}");
            std::process::exit(1);
        }
    };
    println!("patches per domain       {:?}", report.patches_per_domain);
    println!("histogram distance raw   {:.5}", report.raw_distance);
    println!(
        "histogram distance std   {:.5} (ratio {:.4})",
        report.standardized_distance,
        report.distance_ratio()
    );
    println!(
        "restandardized distance  {:.5}",
        report.restandardized_distance
    );
    println!("edge correlation         {:.4}", report.edge_correlation);
    if let Some(seg) = &report.segmentation {
        println!("{}", stdgan_core::segmentation::CSV_HEADER);
        println!("{}", stdgan_core::segmentation::csv_row("raw", &seg.raw));
        println!(
            "{}",
            stdgan_core::segmentation::csv_row("standardized", &seg.standardized)
        );
    }
    println!("timings {:?}", report.timings);
}
