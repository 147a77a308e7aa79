//! Day -> night adaptation with cycle, identity, and adversarial losses.
//! Only the adapters train; the backbone checksum is unchanged afterwards.

use turbo_i2i::generator::AdapterSpec;
use turbo_i2i::toy::ToyBenchmark;
use turbo_i2i::trainer::train_unpaired;

fn main() -> turbo_i2i::Result<()> {
    let steps: usize = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(200);
    let mut bench = ToyBenchmark::default();
    bench.pretrain.steps = 600;
    bench.adapt.steps = steps;
    bench.adapt.eval_every = (steps / 4).max(1);

    let data = bench.data()?;
    let (mut state, _) = bench.pretrain(&data)?;
    let before = state.backbone.checksum();
    state.attach_adapters(AdapterSpec::default())?;

    let trained = train_unpaired(state, &data, &bench.adapt)?;
    for (step, m) in trained.history.metrics() {
        println!(
            "step {step:>5}: fid {:.4}  dino x100 {:.3}  recon psnr {:.2} dB",
            m.fid, m.dino_struct, m.psnr
        );
    }
    println!(
        "backbone unchanged: {}",
        trained.state.backbone.checksum() == before
    );

    let out = std::env::temp_dir().join("turbo-i2i-unpaired.jsonl");
    trained.history.write_jsonl(&out)?;
    println!("history: {}", out.display());
    Ok(())
}
