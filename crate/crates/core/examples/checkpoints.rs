//! Saving and loading checkpoints and reference statistics.

use turbo_i2i::checkpoint::{
    digest, load_generator, load_stats, save_generator, save_stats, Group,
};
use turbo_i2i::data::{gen_two_domain_dataset, SceneSpec};
use turbo_i2i::generator::{AdapterSpec, GeneratorConfig, GeneratorState};
use turbo_i2i::perceptual::{fit_stats, FeatureNet};

fn main() -> turbo_i2i::Result<()> {
    let dir = std::env::temp_dir().join("turbo-i2i-checkpoints");
    let mut state = GeneratorState::new_random(GeneratorConfig::default())?;
    state.attach_adapters(AdapterSpec::default())?;

    let m = save_generator(&state, None, &dir.join("model"), Some("demo"))?;
    println!(
        "{}: {} frozen + {} trainable tensors, config hash {}",
        m.model_id,
        m.group(Group::Frozen).count(),
        m.group(Group::Trainable).count(),
        m.config_hash
    );
    println!("digest {}", digest(&dir.join("model"))?);

    let (loaded, _, _) = load_generator(&dir.join("model"))?;
    let worst = state
        .backbone
        .iter()
        .map(|(k, t)| {
            let l = loaded.backbone.get(k).unwrap();
            t.data()
                .iter()
                .zip(l.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        })
        .fold(0.0, f64::max);
    println!("max f32 rounding error after reload: {worst:.2e}");

    let net = FeatureNet::new(7);
    let ds = gen_two_domain_dataset(20, &SceneSpec::default())?;
    let stats = fit_stats(&ds.y, &net)?;
    save_stats(&stats, net.seed(), &dir.join("night-stats"))?;
    let (back, seed) = load_stats(&dir.join("night-stats"))?;
    println!(
        "stats: dim {}, {} images, feature-net seed {seed}",
        back.dim(),
        back.count
    );
    Ok(())
}
