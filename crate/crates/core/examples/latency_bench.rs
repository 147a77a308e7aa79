//! Single-pass latency at a few resolutions.

use turbo_i2i::bench::bench;
use turbo_i2i::generator::{AdapterSpec, GeneratorConfig, GeneratorState};

fn main() -> turbo_i2i::Result<()> {
    let mut state = GeneratorState::new_random(GeneratorConfig::default())?;
    state.attach_adapters(AdapterSpec::default())?;
    for size in [64, 128, 256] {
        let r = bench(&state, size, 5, 1.0)?;
        println!(
            "{size:>4}px: median {:.2} ms, p95 {:.2} ms",
            r.median_ms, r.p95_ms
        );
    }
    Ok(())
}
