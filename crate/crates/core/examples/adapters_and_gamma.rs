//! Attaching adapters to a backbone and sweeping the interpolation
//! coefficient.
//!
//! Fresh adapters are zero deltas, so the adapted generator reproduces the
//! backbone exactly. At gamma = 1 the noise map is ignored; below 1 the core
//! input is a blend of the encoded image and the noise.

use turbo_i2i::data::{gen_two_domain_dataset, SceneSpec};
use turbo_i2i::generator::{AdapterSpec, BranchKind, GeneratorConfig, GeneratorState};
use turbo_i2i::types::LatentMap;

fn max_diff(a: &turbo_i2i::types::TensorImage, b: &turbo_i2i::types::TensorImage) -> f64 {
    a.tensor()
        .data()
        .iter()
        .zip(b.tensor().data())
        .map(|(p, q)| (p - q).abs())
        .fold(0.0, f64::max)
}

fn main() -> turbo_i2i::Result<()> {
    let backbone = GeneratorState::new_random(GeneratorConfig::default())?;
    let x = gen_two_domain_dataset(1, &SceneSpec::default())?
        .x
        .remove(0);
    let z1 = LatentMap::seeded_noise(64, 64, 1);
    let z2 = LatentMap::seeded_noise(64, 64, 2);

    let mut adapted = backbone.clone();
    adapted.attach_adapters(AdapterSpec::default())?;
    println!(
        "backbone scalars {}, trainable adapter scalars {} over {} LoRA layers",
        adapted.backbone_param_count(),
        adapted.trainable_param_count(),
        adapted.lora_layers().len()
    );

    for gamma in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let a = adapted.translate(&x, &z1, gamma, "night")?;
        let b = backbone.translate(&x, &z1, gamma, "night")?;
        let other_z = adapted.translate(&x, &z2, gamma, "night")?;
        println!(
            "gamma {gamma:.2}: |adapted - backbone| {:.1e}, |z1 - z2| {:.4}",
            max_diff(&a, &b),
            max_diff(&a, &other_z)
        );
    }

    let mut branch = backbone.clone();
    branch.attach_adapters(AdapterSpec {
        skips: false,
        branch: Some(BranchKind::Controlnet),
        ..AdapterSpec::default()
    })?;
    let out = branch.forward_with_adapter_branch(&x, &z1, "night", BranchKind::Controlnet)?;
    let sample = backbone.backbone_sample(&z1, "night")?;
    println!(
        "fresh controlnet-style branch vs backbone sample: {:.1e}",
        max_diff(&out, &sample)
    );
    Ok(())
}
