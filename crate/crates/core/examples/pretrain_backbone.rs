//! Pretrains the toy backbone (autoencoder phase, then the conditional
//! one-step core) and saves it as a checkpoint.
//!
//! ```text
//! cargo run --release --example pretrain_backbone -- 2000 /tmp/backbone
//! ```

use std::path::PathBuf;

use turbo_i2i::checkpoint::save_generator;
use turbo_i2i::toy::ToyBenchmark;
use turbo_i2i::types::LatentMap;

fn main() -> turbo_i2i::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(400);
    let out = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("turbo-i2i-backbone"));

    let mut bench = ToyBenchmark::default();
    bench.pretrain.steps = steps;
    let data = bench.data()?;
    let (backbone, history) = bench.pretrain(&data)?;

    for r in history.records.iter().step_by((steps / 8).max(1)) {
        println!("step {:>5} {:<12} loss {:.4}", r.step, r.phase, r.g.total);
    }
    let m = save_generator(&backbone, None, &out, Some("toy-backbone"))?;
    println!(
        "saved {} tensors to {} (config {})",
        m.tensors.len(),
        out.display(),
        &m.config_hash[..12]
    );

    for (i, seed) in [1u64, 2, 3].into_iter().enumerate() {
        let z = LatentMap::seeded_noise(64, 64, seed);
        let img = backbone.backbone_sample(&z, "night")?;
        img.save_png(&out.join(format!("sample_{i}.png")))?;
    }
    Ok(())
}
