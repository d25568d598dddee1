//! Runs the default desk-scale ablation sweep and prints both report
//! renderings. `cargo run --release --example sweep [seed...]`

use handshift::experiment::{run_experiment, PipelineConfig};

fn main() {
    let mut cfg = PipelineConfig::desk_scale();
    let seeds: Vec<u64> = std::env::args().skip(1).map(|a| a.parse().expect("seed")).collect();
    if !seeds.is_empty() {
        cfg.seeds = seeds;
    }
    let start = std::time::Instant::now();
    let report = run_experiment(&cfg, None).expect("sweep");
    print!("{}", report.render_table());
    println!("elapsed: {:.1} s", start.elapsed().as_secs_f64());
}
