//! FID of the full configuration as the training set shrinks.

use turbo_i2i::toy::ToyBenchmark;
use turbo_i2i::trainer::dataset_size_sweep;

fn main() -> turbo_i2i::Result<()> {
    let mut bench = ToyBenchmark::default();
    bench.pretrain.steps = 800;
    bench.adapt.steps = 200;
    bench.adapt.eval_every = 0;
    let data = bench.data()?;
    let (backbone, _) = bench.pretrain(&data)?;

    let rows = dataset_size_sweep(
        &[10, 50, data.x.len()],
        &backbone,
        &bench.adapters,
        &data,
        &bench.adapt,
    )?;
    for r in rows {
        println!(
            "n={:<4} fid {:.4}  dino x100 {:.3}",
            r.size, r.fid, r.dino_struct
        );
    }
    Ok(())
}
