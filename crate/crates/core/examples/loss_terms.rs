//! One evaluation of each training objective on a small batch, showing the
//! named terms, their weights, and the weighted total.

use std::sync::Arc;

use turbo_i2i::adversarial::Discriminator;
use turbo_i2i::autograd::Tape;
use turbo_i2i::data::{edge_pairs, gen_two_domain_dataset, EdgeConfig, SceneSpec};
use turbo_i2i::generator::{
    AdapterSpec, GeneratorConfig, GeneratorState, GeneratorView, Trainable,
};
use turbo_i2i::objectives::{
    diversity_loss, paired_objective, unpaired_objective, ClipHead, LossReport, LossWeights,
};
use turbo_i2i::perceptual::FeatureNet;
use turbo_i2i::types::batch;

fn show(name: &str, r: &LossReport) {
    println!(
        "{name}: total {:.4} (consistent: {})",
        r.total,
        r.is_consistent(1e-9)
    );
    for (k, v) in &r.terms {
        println!("  {k:<8} {v:.4} x {}", r.weights[k]);
    }
}

fn main() -> turbo_i2i::Result<()> {
    let mut state = GeneratorState::new_random(GeneratorConfig::default())?;
    state.attach_adapters(AdapterSpec::default())?;
    let net = Arc::new(FeatureNet::new(0));
    let ds = gen_two_domain_dataset(2, &SceneSpec::default())?;
    let d_x = Discriminator::new("d_x", net.clone(), 1);
    let d_y = Discriminator::new("d_y", net.clone(), 2);
    let view = GeneratorView::new(&state, Trainable::Adapters, 0);

    let mut tape = Tape::new();
    let x = tape.constant(batch(&ds.x)?);
    let y = tape.constant(batch(&ds.y)?);
    let w = LossWeights::unpaired();
    let step = unpaired_objective(
        &mut tape,
        &view,
        &net,
        Some(&d_x),
        Some(&d_y),
        x,
        y,
        "day",
        "night",
        &w,
    )?;
    show("unpaired", &step.loss.report);

    let pairs = edge_pairs(&ds.y, &EdgeConfig::default(), 0)?;
    let (edges, photos): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    let clip = ClipHead::new(net.pooled_dim(), state.config.emb_dim, 4);
    let mut tape = Tape::new();
    let e = tape.constant(batch(&edges)?);
    let p = tape.constant(batch(&photos)?);
    let step = paired_objective(
        &mut tape,
        &view,
        &net,
        Some(&d_y),
        &clip,
        e,
        p,
        "night",
        &LossWeights::paired(),
    )?;
    show("paired", &step.loss.report);

    for gamma in [0.0, 0.5, 1.0] {
        let mut tape = Tape::new();
        let e = tape.constant(batch(&edges)?);
        let p = tape.constant(batch(&photos)?);
        let step = diversity_loss(
            &mut tape,
            &view,
            &net,
            e,
            p,
            None,
            gamma,
            "night",
            &LossWeights::paired(),
        )?;
        show(&format!("diversity gamma={gamma}"), &step.loss.report);
    }
    Ok(())
}
