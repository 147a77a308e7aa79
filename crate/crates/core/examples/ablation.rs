//! The five ablation variants on the toy benchmark, written as CSV.
//!
//! A: random backbone. B/C: input through a controlnet-style or lightweight
//! branch. D: direct input, no skips. FULL: direct input with skips.
//!
//! ```text
//! cargo run --release --example ablation -- 2000
//! ```

use turbo_i2i::toy::ToyBenchmark;
use turbo_i2i::trainer::{run_ablation, write_csv, Variant};

fn main() -> turbo_i2i::Result<()> {
    let steps: usize = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(150);
    let mut bench = ToyBenchmark::default();
    bench.pretrain.steps = 800;
    bench.adapt.steps = steps;
    bench.adapt.eval_every = 0;

    let data = bench.data()?;
    let (backbone, _) = bench.pretrain(&data)?;
    let rows = run_ablation(
        &Variant::ALL,
        &backbone,
        &bench.adapters,
        &data,
        &bench.adapt,
    )?;

    println!(
        "{:<5} {:>10} {:>10} {:>8}",
        "conf", "fid", "dino x100", "psnr"
    );
    for r in &rows {
        println!(
            "{:<5} {:>10.4} {:>10.3} {:>8.2}",
            r.variant.to_string(),
            r.fid,
            r.dino_struct,
            r.psnr
        );
    }
    let out = std::env::temp_dir().join("turbo-i2i-ablation.csv");
    write_csv(&rows, &out)?;
    println!("{}", out.display());
    Ok(())
}
