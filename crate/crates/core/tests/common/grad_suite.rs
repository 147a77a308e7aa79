//! Finite-difference checks of every objective on an 8x8 toy model.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use turbo_i2i::adversarial::{gan_loss_d_var, gan_loss_g_var, Discriminator};
use turbo_i2i::autograd::Tape;
use turbo_i2i::data::{gen_two_domain_dataset, SceneSpec};
use turbo_i2i::generator::{
    AdapterSpec, GeneratorConfig, GeneratorState, GeneratorView, Trainable,
};
use turbo_i2i::gradcheck::{self, GradCheckReport};
use turbo_i2i::objectives::{
    diversity_loss, paired_objective, unpaired_objective, ClipHead, LossWeights,
};
use turbo_i2i::params::ParamStore;
use turbo_i2i::perceptual::FeatureNet;
use turbo_i2i::types::batch;
use turbo_i2i::{Result, Tensor};

pub const PROBES: usize = 16;
pub const STEP: f64 = 1e-3;
pub const TOL: f64 = 1e-3;

struct Toy {
    state: GeneratorState,
    net: Arc<FeatureNet>,
    d_x: Discriminator,
    d_y: Discriminator,
    clip: ClipHead,
    x: Tensor,
    y: Tensor,
}

fn toy() -> Toy {
    let mut state = GeneratorState::new_random(GeneratorConfig::tiny()).unwrap();
    state.attach_adapters(AdapterSpec::default()).unwrap();
    // Move off the zero-delta point so every adapter has a live gradient.
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for (_, t) in state.adapters.iter_mut() {
        for v in t.data_mut() {
            *v += 0.2 * rng.gen_range(-1.0..1.0);
        }
    }
    let net = Arc::new(FeatureNet::new(5));
    let spec = SceneSpec {
        size: 8,
        seed: 3,
        ..SceneSpec::default()
    };
    let ds = gen_two_domain_dataset(2, &spec).unwrap();
    Toy {
        d_x: Discriminator::new("d_x", net.clone(), 1),
        d_y: Discriminator::new("d_y", net.clone(), 2),
        clip: ClipHead::new(net.pooled_dim(), state.config.emb_dim, 3),
        x: batch(&ds.x).unwrap(),
        y: batch(&ds.y).unwrap(),
        state,
        net,
    }
}

/// Runs `loss` once for analytic gradients over `store`, then probes it.
fn run(
    store: &ParamStore,
    seed: u64,
    loss: impl Fn(&ParamStore, &mut Tape) -> Result<turbo_i2i::autograd::Var>,
) -> GradCheckReport {
    let mut tape = Tape::new();
    let out = loss(store, &mut tape).unwrap();
    let grads = tape.backward(out).unwrap();
    let analytic: BTreeMap<String, Tensor> = tape.param_grads(&grads);
    let shapes: BTreeMap<String, Tensor> = analytic
        .keys()
        .map(|k| (k.clone(), store.get(k).unwrap().clone()))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probes = gradcheck::sample_probes(&shapes, PROBES, &mut rng);
    assert_eq!(probes.len(), PROBES);
    gradcheck::check(store, &analytic, &probes, STEP, |s| {
        let mut tape = Tape::new();
        let out = loss(s, &mut tape)?;
        Ok(tape.value(out).item())
    })
    .unwrap()
}

fn with_adapters(state: &GeneratorState, adapters: &ParamStore) -> GeneratorState {
    let mut s = state.clone();
    s.adapters = adapters.clone();
    s
}

pub fn unpaired() -> GradCheckReport {
    let t = toy();
    run(&t.state.adapters, 1, |ad, tape| {
        let st = with_adapters(&t.state, ad);
        let g = GeneratorView::new(&st, Trainable::Adapters, 0);
        let x = tape.constant(t.x.clone());
        let y = tape.constant(t.y.clone());
        let w = LossWeights::unpaired();
        let step = unpaired_objective(
            tape,
            &g,
            &t.net,
            Some(&t.d_x),
            Some(&t.d_y),
            x,
            y,
            "day",
            "night",
            &w,
        )?;
        Ok(step.loss.total)
    })
}

pub fn paired() -> GradCheckReport {
    let t = toy();
    let mut store = t.state.adapters.clone();
    store.extend(t.clip.params.clone());
    run(&store, 2, |s, tape| {
        let mut ad = s.clone();
        let mut clip = t.clip.clone();
        for k in t.clip.params.names() {
            clip.params.insert(k, ad.remove(k).unwrap());
        }
        let st = with_adapters(&t.state, &ad);
        let g = GeneratorView::new(&st, Trainable::Adapters, 0);
        let x = tape.constant(t.x.clone());
        let y = tape.constant(t.y.clone());
        let step = paired_objective(
            tape,
            &g,
            &t.net,
            Some(&t.d_y),
            &clip,
            x,
            y,
            "night",
            &LossWeights::paired(),
        )?;
        Ok(step.loss.total)
    })
}

pub fn diversity() -> GradCheckReport {
    let t = toy();
    let z = {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        Tensor::randn(&[2, 4, 1, 1], 1.0, &mut rng)
    };
    run(&t.state.adapters, 3, |ad, tape| {
        let st = with_adapters(&t.state, ad);
        let g = GeneratorView::new(&st, Trainable::Adapters, 0);
        let x = tape.constant(t.x.clone());
        let y = tape.constant(t.y.clone());
        let zv = tape.constant(z.clone());
        let step = diversity_loss(
            tape,
            &g,
            &t.net,
            x,
            y,
            Some(zv),
            0.5,
            "night",
            &LossWeights::paired(),
        )?;
        Ok(step.loss.total)
    })
}

/// Discriminator loss w.r.t. head weights.
pub fn gan_d() -> GradCheckReport {
    let t = toy();
    run(&t.d_y.heads, 4, |heads, tape| {
        let mut d = t.d_y.clone();
        d.heads = heads.clone();
        let real = tape.constant(t.y.clone());
        let fake = tape.constant(t.x.clone());
        Ok(gan_loss_d_var(tape, &d, real, fake)?.total)
    })
}

/// Generator-side GAN loss w.r.t. generator adapters.
pub fn gan_g() -> GradCheckReport {
    let t = toy();
    run(&t.state.adapters, 5, |ad, tape| {
        let st = with_adapters(&t.state, ad);
        let x = tape.constant(t.x.clone());
        let scope = st.scope(Trainable::Adapters);
        let fake = st.forward(tape, &scope, Some(x), None, 1.0, &[1, 1])?;
        gan_loss_g_var(tape, &t.d_y, fake)
    })
}

/// Mean logit w.r.t. input pixels.
pub fn d_score_pixels() -> GradCheckReport {
    let t = toy();
    let mut store = ParamStore::new();
    store.insert("img", t.x.clone());
    run(&store, 6, |s, tape| {
        let x = tape.param(s, "img", true)?;
        let l = t.d_x.logits(tape, x, false)?;
        Ok(tape.mean(l))
    })
}

pub fn all() -> Vec<(&'static str, GradCheckReport)> {
    vec![
        ("unpaired_objective", unpaired()),
        ("paired_objective", paired()),
        ("diversity_loss", diversity()),
        ("gan_loss_d", gan_d()),
        ("gan_loss_g", gan_g()),
    ]
}
