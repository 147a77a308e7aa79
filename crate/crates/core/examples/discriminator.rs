//! Patch discriminators on frozen features and both GAN losses.

use std::sync::Arc;

use turbo_i2i::adversarial::{d_score, gan_loss_d, gan_loss_g, Discriminator};
use turbo_i2i::data::{gen_two_domain_dataset, SceneSpec};
use turbo_i2i::perceptual::FeatureNet;

fn main() -> turbo_i2i::Result<()> {
    let net = Arc::new(FeatureNet::new(0));
    let ds = gen_two_domain_dataset(2, &SceneSpec::default())?;

    let zero = Discriminator::zeroed("d_night", net.clone());
    let l = gan_loss_d(&zero, &ds.y[0], &ds.x[0])?;
    println!(
        "zero heads: D loss {:.4} (2 ln 2), G loss {:.4} (ln 2)",
        l.total,
        gan_loss_g(&zero, &ds.x[0])?.total
    );

    let d = Discriminator::new("d_night", net, 11);
    let logits = d_score(&d, &ds.y[0])?;
    println!(
        "{} patch logits, first {:?}",
        logits.numel(),
        &logits.data()[..4]
    );
    let report = gan_loss_d(&d, &ds.y[0], &ds.x[0])?;
    for (k, v) in &report.terms {
        println!("  {k}: {v:.4}");
    }
    Ok(())
}
