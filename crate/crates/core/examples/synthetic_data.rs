//! Renders the synthetic day/night scene set, writes it as PNG folders, and
//! derives edge maps and soft sketches from a few scenes.
//!
//! ```text
//! cargo run --release --example synthetic_data -- /tmp/scenes
//! ```

use std::path::PathBuf;

use turbo_i2i::data::{
    extract_edges, gen_two_domain_dataset, synth_sketch, write_dataset, EdgeConfig, SceneSpec,
};

fn main() -> turbo_i2i::Result<()> {
    let root = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("turbo-i2i-scenes"));

    let spec = SceneSpec {
        seed: 3,
        ..SceneSpec::default()
    };
    let ds = gen_two_domain_dataset(16, &spec)?;
    let manifest = write_dataset(&ds, &root)?;
    println!(
        "wrote {:?} images per domain to {}",
        manifest.counts,
        root.display()
    );

    let day: f64 = ds.x.iter().map(|i| i.mean_luminance()).sum::<f64>() / ds.x.len() as f64;
    let night: f64 = ds.y.iter().map(|i| i.mean_luminance()).sum::<f64>() / ds.y.len() as f64;
    println!(
        "mean luminance: day {day:.3}, night {night:.3}, gap {:.3}",
        day - night
    );

    let cfg = EdgeConfig::default();
    let extras = root.join("edges");
    std::fs::create_dir_all(&extras).map_err(|e| turbo_i2i::Error::io(&extras, e))?;
    for (i, img) in ds.x.iter().take(4).enumerate() {
        let edges = extract_edges(img, &cfg, i as u64)?;
        let sketch = synth_sketch(img, &cfg, i as u64)?;
        edges
            .to_image()?
            .save_png(&extras.join(format!("{i:02}_edges.png")))?;
        sketch
            .to_image()?
            .save_png(&extras.join(format!("{i:02}_sketch.png")))?;
        println!(
            "scene {i}: edge coverage {:.3}, sketch coverage {:.3}",
            edges.coverage(0.5),
            sketch.coverage(0.5)
        );
    }
    Ok(())
}
