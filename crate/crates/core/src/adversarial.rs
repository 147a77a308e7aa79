//! Discriminators and both sides of the GAN objective.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{self, Scope};
use crate::objectives::{LossReport, TapeLoss};
use crate::params::ParamStore;
use crate::perceptual::{FeatureNet, STAGES, STAGE_CHANNELS};
use crate::tensor::Tensor;
use crate::types::{batch, TensorImage};

/// Logits are clamped to this magnitude before the cross-entropy.
pub const LOGIT_CLAMP: f64 = 30.0;

/// Feature stages that carry a head.
const HEAD_STAGES: [usize; 3] = [1, 2, 3];

/// Frozen shared features plus trainable 1x1 heads producing patch logits.
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub name: String,
    pub net: Arc<FeatureNet>,
    pub heads: ParamStore,
}

impl Discriminator {
    pub fn new(name: &str, net: Arc<FeatureNet>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut heads = ParamStore::new();
        for s in HEAD_STAGES {
            let c = STAGE_CHANNELS[s];
            let hn = head_name(name, s);
            heads.insert(
                nn::w(&hn),
                Tensor::randn(&[1, c, 1, 1], 0.1 / (c as f64).sqrt(), &mut rng),
            );
            heads.insert(nn::b(&hn), Tensor::zeros(&[1]));
        }
        Discriminator {
            name: name.to_string(),
            net,
            heads,
        }
    }

    /// Heads with all-zero weights: every logit is 0.
    pub fn zeroed(name: &str, net: Arc<FeatureNet>) -> Self {
        let mut d = Self::new(name, net, 0);
        for (_, t) in d.heads.iter_mut() {
            t.data_mut().fill(0.0);
        }
        d
    }

    /// Patch logits `[N, P]` for a `[N, 3, H, W]` batch.
    pub fn logits(&self, tape: &mut Tape, x: Var, trainable: bool) -> Result<Var> {
        let feats = self.net.features(tape, x)?;
        let scope = Scope::new().with(&self.heads, trainable);
        let n = tape.shape(x)[0];
        let mut parts = Vec::with_capacity(HEAD_STAGES.len());
        let mut total = 0;
        for s in HEAD_STAGES {
            let l = nn::conv(tape, &scope, &head_name(&self.name, s), feats[s], 1, 0.0)?;
            let p = tape.shape(l)[2] * tape.shape(l)[3];
            total += p;
            parts.push(tape.reshape(l, &[n, p, 1, 1])?);
        }
        let cat = tape.concat_channels(&parts)?;
        tape.reshape(cat, &[n, total])
    }
}

fn head_name(d: &str, stage: usize) -> String {
    debug_assert!(stage < STAGES);
    format!("{d}.h{stage}")
}

/// Logit map of one image.
pub fn d_score(d: &Discriminator, img: &TensorImage) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(batch(std::slice::from_ref(img))?);
    let l = d.logits(&mut tape, x, false)?;
    let t = tape.value(l);
    t.reshape(&[t.numel()])
}

/// `mean softplus(-clamp(real)) + mean softplus(clamp(fake))` on the tape;
/// `fake` should be a constant so no gradient reaches the generator.
pub fn gan_loss_d_var(
    tape: &mut Tape,
    d: &Discriminator,
    real: Var,
    fake: Var,
) -> Result<TapeLoss> {
    if tape.shape(real) != tape.shape(fake) {
        return Err(Error::Shape(format!(
            "real {:?} vs fake {:?}",
            tape.shape(real),
            tape.shape(fake)
        )));
    }
    let lr = d.logits(tape, real, true)?;
    let lf = d.logits(tape, fake, true)?;
    let lr = tape.clamp(lr, -LOGIT_CLAMP, LOGIT_CLAMP);
    let lf = tape.clamp(lf, -LOGIT_CLAMP, LOGIT_CLAMP);
    let neg = tape.scale(lr, -1.0);
    let sr = tape.softplus(neg);
    let real_term = tape.mean(sr);
    let sf = tape.softplus(lf);
    let fake_term = tape.mean(sf);
    TapeLoss::build(
        tape,
        &[("d_real", real_term, 1.0), ("d_fake", fake_term, 1.0)],
    )
}

/// Non-saturating generator loss `mean softplus(-clamp(D(fake)))`; heads frozen.
pub fn gan_loss_g_var(tape: &mut Tape, d: &Discriminator, fake: Var) -> Result<Var> {
    let l = d.logits(tape, fake, false)?;
    let l = tape.clamp(l, -LOGIT_CLAMP, LOGIT_CLAMP);
    let neg = tape.scale(l, -1.0);
    let s = tape.softplus(neg);
    Ok(tape.mean(s))
}

pub fn gan_loss_d(d: &Discriminator, real: &TensorImage, fake: &TensorImage) -> Result<LossReport> {
    real.tensor().expect_same_shape(fake.tensor())?;
    let mut tape = Tape::new();
    let r = tape.constant(batch(std::slice::from_ref(real))?);
    let f = tape.constant(batch(std::slice::from_ref(fake))?);
    Ok(gan_loss_d_var(&mut tape, d, r, f)?.report)
}

pub fn gan_loss_g(d: &Discriminator, fake: &TensorImage) -> Result<LossReport> {
    let mut tape = Tape::new();
    let f = tape.constant(batch(std::slice::from_ref(fake))?);
    let g = gan_loss_g_var(&mut tape, d, f)?;
    Ok(TapeLoss::build(&mut tape, &[("gan_g", g, 1.0)])?.report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::softplus;
    use crate::data::{gen_two_domain_dataset, SceneSpec};

    fn net() -> Arc<FeatureNet> {
        Arc::new(FeatureNet::new(7))
    }

    fn pair() -> (TensorImage, TensorImage) {
        let mut ds = gen_two_domain_dataset(1, &SceneSpec::default()).unwrap();
        (ds.x.remove(0), ds.y.remove(0))
    }

    /// Heads whose bias pins every logit to `v`.
    fn biased(name: &str, v: f64) -> Discriminator {
        let mut d = Discriminator::zeroed(name, net());
        for (k, t) in d.heads.iter_mut() {
            if k.ends_with(".b") {
                t.data_mut().fill(v);
            }
        }
        d
    }

    #[test]
    fn zero_heads_give_zero_logits_and_ln2_losses() {
        let d = Discriminator::zeroed("dy", net());
        let (x, y) = pair();
        assert!(d_score(&d, &x).unwrap().data().iter().all(|&v| v == 0.0));
        let ld = gan_loss_d(&d, &y, &x).unwrap();
        assert!((ld.total - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
        let lg = gan_loss_g(&d, &x).unwrap();
        assert!((lg.total - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn saturated_logits_drive_losses_to_zero() {
        // Real and fake can't be told apart by constant heads, so saturate
        // through the bias and evaluate the two halves separately.
        let (x, y) = pair();
        let pos = biased("d", 1e3);
        let neg = biased("d", -1e3);
        let real_only = gan_loss_d(&pos, &y, &x).unwrap();
        let fake_only = gan_loss_d(&neg, &y, &x).unwrap();
        assert!(real_only.terms["d_real"] < 1e-9);
        assert!(fake_only.terms["d_fake"] < 1e-9);
        assert!(gan_loss_g(&pos, &x).unwrap().total < 1e-9);
        // Bounded by twice the clamp.
        assert!(real_only.total <= 2.0 * LOGIT_CLAMP + 1e-9);
    }

    #[test]
    fn generator_loss_decreases_with_logit() {
        let (x, _) = pair();
        let vals: Vec<f64> = [-2.0, -1.0, 0.0, 1.0, 2.0]
            .iter()
            .map(|&v| gan_loss_g(&biased("d", v), &x).unwrap().total)
            .collect();
        for w in vals.windows(2) {
            assert!(w[1] < w[0]);
        }
        assert!((vals[0] - softplus(2.0)).abs() < 1e-12);
    }

    #[test]
    fn scoring_is_deterministic_and_finite() {
        let d = Discriminator::new("dx", net(), 3);
        let (x, _) = pair();
        let a = d_score(&d, &x).unwrap();
        assert_eq!(a, d_score(&d, &x).unwrap());
        assert!(a.all_finite());
        // Stage 1..3 heads at 32, 16, 8, 8 resolution -> 16*16 + 8*8 + 8*8 patches.
        assert_eq!(a.numel(), 16 * 16 + 8 * 8 + 8 * 8);
    }

    #[test]
    fn shape_mismatch_is_error() {
        let d = Discriminator::new("dx", net(), 3);
        let (x, _) = pair();
        let small = TensorImage::filled(32, 32, [0.0; 3]).unwrap();
        assert!(gan_loss_d(&d, &x, &small).is_err());
    }

    #[test]
    fn backbone_gets_no_gradient() {
        let d = Discriminator::new("dx", net(), 3);
        let (x, y) = pair();
        let mut tape = Tape::new();
        let r = tape.constant(batch(&[y]).unwrap());
        let f = tape.constant(batch(&[x]).unwrap());
        let loss = gan_loss_d_var(&mut tape, &d, r, f).unwrap();
        let grads = tape.backward(loss.total).unwrap();
        let pg = tape.param_grads(&grads);
        assert!(pg.keys().all(|k| k.starts_with("dx.")));
        assert_eq!(pg.len(), d.heads.len());
    }
}
