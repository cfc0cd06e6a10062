//! Runs every stage on the synthetic demo world and prints a summary.
//!
//! cargo run --release -p impactscan --example demo_world -- [seed] [parallelism]

use std::time::Instant;

use impactscan::pipeline::{
    bias_summary, build_filtered_candidates, select, train_and_calibrate, PipelineConfig,
};
use impactscan::scan::scan_archive;
use impactscan::synth::{SyntheticWorld, SyntheticWorldConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(7);
    let parallelism: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(4);

    let t0 = Instant::now();
    let world = SyntheticWorld::generate(&SyntheticWorldConfig {
        rng_seed: seed,
        ..Default::default()
    })?;
    let cfg = PipelineConfig {
        parallelism,
        ..PipelineConfig::demo()
    };
    let map = world.basemap()?;
    let training =
        world.training_windows(cfg.window.size, cfg.max_train_per_class, cfg.seeds.training)?;
    println!(
        "world: {} observations, {} impacts, {} training windows ({:.1}s)",
        impactscan::raster::ArchiveSource::metas(&world).len(),
        world.ground_truth().len(),
        training.len(),
        t0.elapsed().as_secs_f64()
    );
    let t = Instant::now();
    let (model, train) = train_and_calibrate(&training, &cfg)?;
    println!(
        "train ({:.1}s): {}",
        t.elapsed().as_secs_f64(),
        serde_json::to_string(&train)?
    );
    let t = Instant::now();
    let scan = scan_archive(
        &world,
        &model.scorer,
        &model.calibration,
        cfg.window,
        cfg.parallelism,
    )?;
    println!(
        "scan ({:.1}s): {} windows, {:.0} windows/s, {} failures",
        t.elapsed().as_secs_f64(),
        scan.windows_scored,
        scan.windows_per_second(),
        scan.failures.len()
    );
    let t = Instant::now();
    let candidates = build_filtered_candidates(&scan.grids, &world, &map, &cfg)?;
    let selections = select(&candidates, &cfg)?;
    let bias = bias_summary(&selections, &map, &cfg)?;
    println!("candidates and bias ({:.1}s)", t.elapsed().as_secs_f64());
    let bins = cfg.bins()?;
    let mut per_bin = vec![0usize; bins.len()];
    for c in &candidates {
        if let Some(b) = c.ti_value.and_then(|v| bins.bin_of(v)) {
            per_bin[b] += 1;
        }
    }
    println!(
        "dateable candidates: {} per bin {:?}",
        candidates.len(),
        per_bin
    );
    for r in [&bias.top_k, &bias.stratified] {
        println!(
            "{:>10}: d_kl {:.4} observed {:?}",
            r.selection, r.d_kl, r.histogram.observed
        );
    }
    println!(
        "expected: {:?}",
        bias.expected
            .iter()
            .map(|e| format!("{e:.3}"))
            .collect::<Vec<_>>()
    );
    println!("total {:.1}s", t0.elapsed().as_secs_f64());
    Ok(())
}
