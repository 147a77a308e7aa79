//! Finite-difference check of the unpaired objective's adapter gradients.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use turbo_i2i::adversarial::Discriminator;
use turbo_i2i::autograd::Tape;
use turbo_i2i::data::{gen_two_domain_dataset, SceneSpec};
use turbo_i2i::generator::{
    AdapterSpec, GeneratorConfig, GeneratorState, GeneratorView, Trainable,
};
use turbo_i2i::gradcheck;
use turbo_i2i::objectives::{unpaired_objective, LossWeights};
use turbo_i2i::perceptual::FeatureNet;
use turbo_i2i::types::batch;

fn main() -> turbo_i2i::Result<()> {
    let mut state = GeneratorState::new_random(GeneratorConfig::tiny())?;
    state.attach_adapters(AdapterSpec::default())?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    // Off the zero-delta point, so every adapter has a gradient.
    for (_, t) in state.adapters.iter_mut() {
        for v in t.data_mut() {
            *v += 0.2 * rng.gen_range(-1.0..1.0);
        }
    }
    let net = Arc::new(FeatureNet::new(0));
    let ds = gen_two_domain_dataset(
        2,
        &SceneSpec {
            size: 8,
            ..SceneSpec::default()
        },
    )?;
    let (xb, yb) = (batch(&ds.x)?, batch(&ds.y)?);
    let (d_x, d_y) = (
        Discriminator::new("d_x", net.clone(), 1),
        Discriminator::new("d_y", net.clone(), 2),
    );
    let w = LossWeights::unpaired();

    let loss = |s: &GeneratorState, tape: &mut Tape| {
        let view = GeneratorView::new(s, Trainable::Adapters, 0);
        let (x, y) = (tape.constant(xb.clone()), tape.constant(yb.clone()));
        unpaired_objective(
            tape,
            &view,
            &net,
            Some(&d_x),
            Some(&d_y),
            x,
            y,
            "day",
            "night",
            &w,
        )
        .map(|r| r.loss.total)
    };

    let mut tape = Tape::new();
    let total = loss(&state, &mut tape)?;
    let analytic = tape.param_grads(&tape.backward(total)?);
    let probes = gradcheck::sample_probes(&analytic, 16, &mut rng);
    let report = gradcheck::check(&state.adapters, &analytic, &probes, 1e-3, |adapters| {
        let mut s = state.clone();
        s.adapters = adapters.clone();
        let mut tape = Tape::new();
        let t = loss(&s, &mut tape)?;
        Ok(tape.value(t).data()[0])
    })?;
    for p in &report.probes {
        println!(
            "{:<24}[{:>3}] analytic {:+.6e} numeric {:+.6e} rel {:.1e}",
            p.name, p.index, p.analytic, p.numeric, p.rel_err
        );
    }
    println!("max rel err {:.2e}", report.max_rel_err());
    Ok(())
}
