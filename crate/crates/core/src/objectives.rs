//! Composite training objectives, each returning an itemized report.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversarial::{gan_loss_g_var, Discriminator};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{self, Scope};
use crate::params::ParamStore;
use crate::perceptual::FeatureNet;
use crate::types::{batch, TensorImage};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_idt: f64,
    pub lambda_gan: f64,
    pub lambda_clip: f64,
    pub lambda_l1: f64,
    pub lambda_lpips: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::unpaired()
    }
}

impl LossWeights {
    pub fn unpaired() -> Self {
        LossWeights {
            lambda_idt: 1.0,
            lambda_gan: 0.5,
            lambda_clip: 0.0,
            lambda_l1: 1.0,
            lambda_lpips: 5.0,
        }
    }

    pub fn paired() -> Self {
        LossWeights {
            lambda_idt: 0.0,
            lambda_gan: 0.4,
            lambda_clip: 4.0,
            lambda_l1: 1.0,
            lambda_lpips: 5.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (k, v) in self.as_map() {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Validation(format!(
                    "{k} must be a nonnegative number, got {v}"
                )));
            }
        }
        Ok(())
    }

    pub fn as_map(&self) -> BTreeMap<String, f64> {
        [
            ("lambda_idt", self.lambda_idt),
            ("lambda_gan", self.lambda_gan),
            ("lambda_clip", self.lambda_clip),
            ("lambda_l1", self.lambda_l1),
            ("lambda_lpips", self.lambda_lpips),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

/// Named loss terms, their weights, and `total = sum(weight * term)`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub terms: BTreeMap<String, f64>,
    pub weights: BTreeMap<String, f64>,
    pub total: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, f64>,
}

impl LossReport {
    pub fn weighted_sum(&self) -> f64 {
        self.terms
            .iter()
            .map(|(k, v)| self.weights.get(k).copied().unwrap_or(1.0) * v)
            .sum()
    }

    /// True when `total` matches the itemized weighted sum within `tol`.
    pub fn is_consistent(&self, tol: f64) -> bool {
        (self.total - self.weighted_sum()).abs() <= tol
    }
}

/// A loss on the tape together with its report.
pub struct TapeLoss {
    pub total: Var,
    pub report: LossReport,
}

impl TapeLoss {
    /// Sums `weight * term` for scalar terms on the tape.
    pub fn build(tape: &mut Tape, terms: &[(&str, Var, f64)]) -> Result<Self> {
        let total = if terms.is_empty() {
            tape.constant(crate::Tensor::scalar(0.0))
        } else {
            let pairs: Vec<(Var, f64)> = terms.iter().map(|&(_, v, w)| (v, w)).collect();
            tape.weighted_sum(&pairs)?
        };
        let mut report = LossReport::default();
        for &(name, v, w) in terms {
            report.terms.insert(name.to_string(), tape.value(v).item());
            report.weights.insert(name.to_string(), w);
        }
        report.total = tape.value(total).item();
        Ok(TapeLoss { total, report })
    }

    pub fn with_metadata(mut self, w: &LossWeights) -> Self {
        self.report.metadata = w.as_map();
        self
    }
}

/// Anything that maps an image batch toward a target domain on the tape.
pub trait Translator {
    /// `G(x, z, gamma, target)` on `[N, 3, H, W]`. Implementations draw
    /// their own noise when `z` is `None` and noise is needed.
    fn translate_var(
        &self,
        tape: &mut Tape,
        x: Var,
        target: &str,
        gamma: f64,
        z: Option<Var>,
    ) -> Result<Var>;

    /// Target-domain embedding repeated for `n` rows, `[n, E]`.
    fn embedding(&self, tape: &mut Tape, target: &str, n: usize) -> Result<Var>;
}

/// Test double returning its input.
pub struct IdentityTranslator {
    pub emb_dim: usize,
}

impl Translator for IdentityTranslator {
    fn translate_var(&self, _: &mut Tape, x: Var, _: &str, _: f64, _: Option<Var>) -> Result<Var> {
        Ok(x)
    }

    fn embedding(&self, tape: &mut Tape, _: &str, n: usize) -> Result<Var> {
        Ok(tape.constant(crate::Tensor::full(&[n, self.emb_dim], 1.0)))
    }
}

/// Test double returning the same image for every input.
pub struct ConstantTranslator {
    pub image: TensorImage,
    pub emb_dim: usize,
}

impl Translator for ConstantTranslator {
    fn translate_var(
        &self,
        tape: &mut Tape,
        x: Var,
        _: &str,
        _: f64,
        _: Option<Var>,
    ) -> Result<Var> {
        let n = tape.shape(x)[0];
        let imgs = vec![self.image.clone(); n];
        let t = batch(&imgs)?;
        if t.shape() != tape.shape(x) {
            return Err(Error::Shape(format!(
                "constant {:?} vs input {:?}",
                t.shape(),
                tape.shape(x)
            )));
        }
        Ok(tape.constant(t))
    }

    fn embedding(&self, tape: &mut Tape, _: &str, n: usize) -> Result<Var> {
        Ok(tape.constant(crate::Tensor::full(&[n, self.emb_dim], 1.0)))
    }
}

/// `lambda_l1 * mean|a - b| + lambda_lpips * lpips(a, b)`, batch-averaged.
pub fn rec_distance_var(
    tape: &mut Tape,
    net: &FeatureNet,
    a: Var,
    b: Var,
    w: &LossWeights,
) -> Result<Var> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::Shape(format!(
            "rec between {:?} and {:?}",
            tape.shape(a),
            tape.shape(b)
        )));
    }
    let mut terms = Vec::with_capacity(2);
    if w.lambda_l1 != 0.0 {
        let d = tape.sub(a, b)?;
        let d = tape.abs(d);
        terms.push((tape.mean(d), w.lambda_l1));
    }
    if w.lambda_lpips != 0.0 {
        terms.push((net.lpips_var(tape, a, b)?, w.lambda_lpips));
    }
    if terms.is_empty() {
        return Ok(tape.constant(crate::Tensor::scalar(0.0)));
    }
    tape.weighted_sum(&terms)
}

pub fn rec_distance(
    net: &FeatureNet,
    a: &TensorImage,
    b: &TensorImage,
    w: &LossWeights,
) -> Result<f64> {
    a.tensor().expect_same_shape(b.tensor())?;
    let mut tape = Tape::new();
    let av = tape.constant(batch(std::slice::from_ref(a))?);
    let bv = tape.constant(batch(std::slice::from_ref(b))?);
    let d = rec_distance_var(&mut tape, net, av, bv, w)?;
    Ok(tape.value(d).item())
}

fn check_codes(cx: &str, cy: &str) -> Result<()> {
    if cx == cy {
        return Err(Error::Validation(format!(
            "source and target domain are both {cx:?}"
        )));
    }
    Ok(())
}

fn check_batches(tape: &Tape, x: Var, y: Var) -> Result<()> {
    if tape.shape(x) != tape.shape(y) {
        return Err(Error::Shape(format!(
            "batches {:?} and {:?} differ",
            tape.shape(x),
            tape.shape(y)
        )));
    }
    Ok(())
}

/// Round-trip reconstruction given the one-way translations.
#[allow(clippy::too_many_arguments)]
fn cycle_from(
    tape: &mut Tape,
    g: &dyn Translator,
    net: &FeatureNet,
    x: Var,
    y: Var,
    fake_x: Var,
    fake_y: Var,
    cx: &str,
    cy: &str,
    w: &LossWeights,
) -> Result<(Var, Var)> {
    let back_x = g.translate_var(tape, fake_y, cx, 1.0, None)?;
    let back_y = g.translate_var(tape, fake_x, cy, 1.0, None)?;
    let a = rec_distance_var(tape, net, back_x, x, w)?;
    let b = rec_distance_var(tape, net, back_y, y, w)?;
    Ok((a, b))
}

/// `rec(G(G(x, cy), cx), x) + rec(G(G(y, cx), cy), y)`.
#[allow(clippy::too_many_arguments)]
pub fn cycle_loss(
    tape: &mut Tape,
    g: &dyn Translator,
    net: &FeatureNet,
    x: Var,
    y: Var,
    cx: &str,
    cy: &str,
    w: &LossWeights,
) -> Result<TapeLoss> {
    check_codes(cx, cy)?;
    check_batches(tape, x, y)?;
    let fake_y = g.translate_var(tape, x, cy, 1.0, None)?;
    let fake_x = g.translate_var(tape, y, cx, 1.0, None)?;
    let (a, b) = cycle_from(tape, g, net, x, y, fake_x, fake_y, cx, cy, w)?;
    TapeLoss::build(tape, &[("cycle_x", a, 1.0), ("cycle_y", b, 1.0)])
}

fn identity_terms(
    tape: &mut Tape,
    g: &dyn Translator,
    net: &FeatureNet,
    x: Var,
    y: Var,
    cx: &str,
    cy: &str,
    w: &LossWeights,
) -> Result<(Var, Var)> {
    let ix = g.translate_var(tape, x, cx, 1.0, None)?;
    let iy = g.translate_var(tape, y, cy, 1.0, None)?;
    let a = rec_distance_var(tape, net, ix, x, w)?;
    let b = rec_distance_var(tape, net, iy, y, w)?;
    Ok((a, b))
}

/// `rec(G(x, cx), x) + rec(G(y, cy), y)`.
#[allow(clippy::too_many_arguments)]
pub fn identity_loss(
    tape: &mut Tape,
    g: &dyn Translator,
    net: &FeatureNet,
    x: Var,
    y: Var,
    cx: &str,
    cy: &str,
    w: &LossWeights,
) -> Result<TapeLoss> {
    check_codes(cx, cy)?;
    check_batches(tape, x, y)?;
    let (a, b) = identity_terms(tape, g, net, x, y, cx, cy, w)?;
    TapeLoss::build(tape, &[("idt_x", a, 1.0), ("idt_y", b, 1.0)])
}

/// The unpaired objective plus the one-way translations, which the
/// discriminator step reuses.
pub struct UnpairedStep {
    pub loss: TapeLoss,
    pub fake_x: Var,
    pub fake_y: Var,
}

/// `cycle + lambda_idt * idt + lambda_gan * (gan(D_Y, G(x, cy)) + gan(D_X, G(y, cx)))`.
#[allow(clippy::too_many_arguments)]
pub fn unpaired_objective(
    tape: &mut Tape,
    g: &dyn Translator,
    net: &FeatureNet,
    d_x: Option<&Discriminator>,
    d_y: Option<&Discriminator>,
    x: Var,
    y: Var,
    cx: &str,
    cy: &str,
    w: &LossWeights,
) -> Result<UnpairedStep> {
    let (d_x, d_y) = match (d_x, d_y) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(Error::Validation(
                "unpaired objective needs both discriminators".into(),
            ))
        }
    };
    check_codes(cx, cy)?;
    check_batches(tape, x, y)?;
    w.validate()?;
    let fake_y = g.translate_var(tape, x, cy, 1.0, None)?;
    let fake_x = g.translate_var(tape, y, cx, 1.0, None)?;
    let (a, b) = cycle_from(tape, g, net, x, y, fake_x, fake_y, cx, cy, w)?;
    let cycle = tape.add(a, b)?;
    let mut terms = vec![("cycle", cycle, 1.0)];
    if w.lambda_idt != 0.0 {
        let (a, b) = identity_terms(tape, g, net, x, y, cx, cy, w)?;
        terms.push(("idt", tape.add(a, b)?, w.lambda_idt));
    }
    if w.lambda_gan != 0.0 {
        let gy = gan_loss_g_var(tape, d_y, fake_y)?;
        let gx = gan_loss_g_var(tape, d_x, fake_x)?;
        terms.push(("gan", tape.add(gy, gx)?, w.lambda_gan));
    }
    let loss = TapeLoss::build(tape, &terms)?.with_metadata(w);
    Ok(UnpairedStep {
        loss,
        fake_x,
        fake_y,
    })
}

/// Trainable projection from pooled output features to the embedding space.
#[derive(Clone, Debug)]
pub struct ClipHead {
    pub params: ParamStore,
}

pub const CLIP_PROJ: &str = "clip.proj";

impl ClipHead {
    pub fn new(feature_dim: usize, emb_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        nn::init_linear(
            &mut params,
            CLIP_PROJ,
            feature_dim,
            emb_dim,
            1.0 / (feature_dim as f64).sqrt(),
            &mut rng,
        );
        ClipHead { params }
    }

    /// Mean over the batch of `1 - cos(proj(pooled(img)), emb)`.
    pub fn alignment(
        &self,
        tape: &mut Tape,
        net: &FeatureNet,
        img: Var,
        emb: Var,
        trainable: bool,
    ) -> Result<Var> {
        let pooled = net.pooled(tape, img)?;
        let scope = Scope::new().with(&self.params, trainable);
        let p = nn::linear(tape, &scope, CLIP_PROJ, pooled, 0.0)?;
        if tape.shape(p) != tape.shape(emb) {
            return Err(Error::Shape(format!(
                "projection {:?} vs embedding {:?}",
                tape.shape(p),
                tape.shape(emb)
            )));
        }
        let pn = tape.row_normalize(p, 1e-12)?;
        let en = tape.row_normalize(emb, 1e-12)?;
        let cos = tape.row_dot(pn, en)?;
        let m = tape.mean(cos);
        let neg = tape.scale(m, -1.0);
        Ok(tape.add_scalar(neg, 1.0))
    }
}

pub struct PairedStep {
    pub loss: TapeLoss,
    pub output: Var,
}

/// `rec(G(x), y) + lambda_gan * gan(D, G(x)) + lambda_clip * (1 - cos)`.
#[allow(clippy::too_many_arguments)]
pub fn paired_objective(
    tape: &mut Tape,
    g: &dyn Translator,
    net: &FeatureNet,
    d: Option<&Discriminator>,
    clip: &ClipHead,
    x: Var,
    y: Var,
    target: &str,
    w: &LossWeights,
) -> Result<PairedStep> {
    let (sx, sy) = (tape.shape(x).to_vec(), tape.shape(y).to_vec());
    if sx[0] != sy[0] {
        return Err(Error::Validation(format!(
            "paired objective needs aligned pairs, got {} inputs and {} targets",
            sx[0], sy[0]
        )));
    }
    check_batches(tape, x, y)?;
    w.validate()?;
    let out = g.translate_var(tape, x, target, 1.0, None)?;
    let rec = rec_distance_var(tape, net, out, y, w)?;
    let mut terms = vec![("rec", rec, 1.0)];
    if w.lambda_gan != 0.0 {
        let d =
            d.ok_or_else(|| Error::Validation("paired objective needs a discriminator".into()))?;
        terms.push(("gan", gan_loss_g_var(tape, d, out)?, w.lambda_gan));
    }
    if w.lambda_clip != 0.0 {
        let emb = g.embedding(tape, target, sx[0])?;
        terms.push((
            "clip",
            clip.alignment(tape, net, out, emb, true)?,
            w.lambda_clip,
        ));
    }
    let loss = TapeLoss::build(tape, &terms)?.with_metadata(w);
    Ok(PairedStep { loss, output: out })
}

pub struct DiversityStep {
    pub loss: TapeLoss,
    pub output: Var,
}

/// `gamma * rec(G(x, z, gamma), y)`; zero (with no gradient) at `gamma = 0`.
#[allow(clippy::too_many_arguments)]
pub fn diversity_loss(
    tape: &mut Tape,
    g: &dyn Translator,
    net: &FeatureNet,
    x: Var,
    y: Var,
    z: Option<Var>,
    gamma: f64,
    target: &str,
    w: &LossWeights,
) -> Result<DiversityStep> {
    crate::generator::check_gamma(gamma)?;
    check_batches(tape, x, y)?;
    let out = g.translate_var(tape, x, target, gamma, z)?;
    let loss = if gamma == 0.0 {
        let zero = tape.constant(crate::Tensor::scalar(0.0));
        TapeLoss::build(tape, &[("rec", zero, 0.0)])?
    } else {
        let rec = rec_distance_var(tape, net, out, y, w)?;
        TapeLoss::build(tape, &[("rec", rec, gamma)])?
    };
    Ok(DiversityStep { loss, output: out })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adversarial::Discriminator;
    use crate::data::{gen_two_domain_dataset, SceneSpec};
    use crate::generator::{
        AdapterSpec, GeneratorConfig, GeneratorState, GeneratorView, Trainable,
    };
    use crate::types::LatentMap;
    use std::sync::Arc;

    fn small_pair(size: usize) -> (TensorImage, TensorImage) {
        let spec = SceneSpec {
            size,
            ..SceneSpec::default()
        };
        let mut ds = gen_two_domain_dataset(1, &spec).unwrap();
        (ds.x.remove(0), ds.y.remove(0))
    }

    fn vars(tape: &mut Tape, a: &TensorImage, b: &TensorImage) -> (Var, Var) {
        let av = tape.constant(batch(std::slice::from_ref(a)).unwrap());
        let bv = tape.constant(batch(std::slice::from_ref(b)).unwrap());
        (av, bv)
    }

    #[test]
    fn rec_distance_basics() {
        let net = FeatureNet::new(1);
        let (x, y) = small_pair(16);
        let w = LossWeights::default();
        assert_eq!(rec_distance(&net, &x, &x, &w).unwrap(), 0.0);
        let l1 = LossWeights {
            lambda_lpips: 0.0,
            ..w.clone()
        };
        let l2 = LossWeights {
            lambda_l1: 2.0,
            ..l1.clone()
        };
        let a = rec_distance(&net, &x, &y, &l1).unwrap();
        assert!((rec_distance(&net, &x, &y, &l2).unwrap() - 2.0 * a).abs() < 1e-12);
        // Independent recomputation from the two public metrics.
        let mean_abs = x
            .tensor()
            .data()
            .iter()
            .zip(y.tensor().data())
            .map(|(p, q)| (p - q).abs())
            .sum::<f64>()
            / x.tensor().numel() as f64;
        let want = mean_abs + 5.0 * crate::perceptual::lpips_like(&net, &x, &y).unwrap();
        let got = rec_distance(&net, &x, &y, &w).unwrap();
        assert!((got - want).abs() / want < 1e-6);
    }

    #[test]
    fn identity_double_has_zero_cycle_and_identity() {
        let net = FeatureNet::new(1);
        let g = IdentityTranslator { emb_dim: 4 };
        let (x, y) = small_pair(16);
        let mut tape = Tape::new();
        let (xv, yv) = vars(&mut tape, &x, &y);
        let w = LossWeights::default();
        assert_eq!(
            cycle_loss(&mut tape, &g, &net, xv, yv, "day", "night", &w)
                .unwrap()
                .report
                .total,
            0.0
        );
        assert_eq!(
            identity_loss(&mut tape, &g, &net, xv, yv, "day", "night", &w)
                .unwrap()
                .report
                .total,
            0.0
        );
        assert!(cycle_loss(&mut tape, &g, &net, xv, yv, "day", "day", &w).is_err());
    }

    #[test]
    fn constant_double_cycle_matches_oracle_and_is_symmetric() {
        let net = FeatureNet::new(1);
        let c = TensorImage::filled(8, 8, [0.2, -0.4, 0.6]).unwrap();
        let g = ConstantTranslator {
            image: c.clone(),
            emb_dim: 4,
        };
        let (x, y) = small_pair(8);
        let w = LossWeights::default();
        let want =
            rec_distance(&net, &c, &x, &w).unwrap() + rec_distance(&net, &c, &y, &w).unwrap();
        let mut tape = Tape::new();
        let (xv, yv) = vars(&mut tape, &x, &y);
        let fwd = cycle_loss(&mut tape, &g, &net, xv, yv, "day", "night", &w)
            .unwrap()
            .report;
        let rev = cycle_loss(&mut tape, &g, &net, yv, xv, "night", "day", &w)
            .unwrap()
            .report;
        assert!((fwd.total - want).abs() < 1e-12);
        assert!((fwd.total - rev.total).abs() < 1e-12);
    }

    #[test]
    fn unpaired_reduces_to_cycle_and_records_weights() {
        let net = Arc::new(FeatureNet::new(1));
        let (x, y) = small_pair(16);
        let dx = Discriminator::new("dx", net.clone(), 1);
        let dy = Discriminator::new("dy", net.clone(), 2);
        let c = TensorImage::filled(16, 16, [0.1, 0.1, 0.1]).unwrap();
        let g = ConstantTranslator {
            image: c,
            emb_dim: 4,
        };
        let mut tape = Tape::new();
        let (xv, yv) = vars(&mut tape, &x, &y);
        let zero = LossWeights {
            lambda_idt: 0.0,
            lambda_gan: 0.0,
            ..LossWeights::default()
        };
        let step = unpaired_objective(
            &mut tape,
            &g,
            &net,
            Some(&dx),
            Some(&dy),
            xv,
            yv,
            "day",
            "night",
            &zero,
        )
        .unwrap();
        let cyc = cycle_loss(&mut tape, &g, &net, xv, yv, "day", "night", &zero).unwrap();
        assert_eq!(step.loss.report.total, cyc.report.total);

        let w = LossWeights::default();
        let full = unpaired_objective(
            &mut tape,
            &g,
            &net,
            Some(&dx),
            Some(&dy),
            xv,
            yv,
            "day",
            "night",
            &w,
        )
        .unwrap();
        let r = &full.loss.report;
        assert_eq!(r.metadata["lambda_idt"], 1.0);
        assert_eq!(r.metadata["lambda_gan"], 0.5);
        assert!(r.is_consistent(1e-9));
        assert_eq!(r.terms.len(), 3);
        assert!(unpaired_objective(
            &mut tape,
            &g,
            &net,
            None,
            Some(&dy),
            xv,
            yv,
            "day",
            "night",
            &w
        )
        .is_err());
    }

    #[test]
    fn paired_zero_when_output_is_target() {
        let net = Arc::new(FeatureNet::new(1));
        let (x, y) = small_pair(16);
        let g = ConstantTranslator {
            image: y.clone(),
            emb_dim: 4,
        };
        let clip = ClipHead::new(net.pooled_dim(), 4, 0);
        let mut tape = Tape::new();
        let (xv, yv) = vars(&mut tape, &x, &y);
        let w = LossWeights {
            lambda_gan: 0.0,
            lambda_clip: 0.0,
            ..LossWeights::paired()
        };
        let step = paired_objective(&mut tape, &g, &net, None, &clip, xv, yv, "night", &w).unwrap();
        assert_eq!(step.loss.report.total, 0.0);

        let d = Discriminator::new("dy", net.clone(), 3);
        let full = paired_objective(
            &mut tape,
            &g,
            &net,
            Some(&d),
            &clip,
            xv,
            yv,
            "night",
            &LossWeights::paired(),
        )
        .unwrap();
        let r = full.loss.report;
        assert_eq!(r.metadata["lambda_gan"], 0.4);
        assert_eq!(r.metadata["lambda_clip"], 4.0);
        assert_eq!(
            r.terms.keys().cloned().collect::<Vec<_>>(),
            vec!["clip", "gan", "rec"]
        );
        assert!(r.is_consistent(1e-9));

        let two = tape.constant(batch(&[x.clone(), x.clone()]).unwrap());
        assert!(
            paired_objective(&mut tape, &g, &net, Some(&d), &clip, two, yv, "night", &w).is_err()
        );
    }

    #[test]
    fn identity_loss_on_fresh_generator_matches_direct_computation() {
        let net = FeatureNet::new(1);
        let mut state = GeneratorState::new_random(GeneratorConfig::default()).unwrap();
        state.attach_adapters(AdapterSpec::default()).unwrap();
        let (x, y) = small_pair(64);
        let view = GeneratorView::new(&state, Trainable::Nothing, 0);
        let w = LossWeights::default();
        let mut tape = Tape::new();
        let (xv, yv) = vars(&mut tape, &x, &y);
        let got = identity_loss(&mut tape, &view, &net, xv, yv, "day", "night", &w)
            .unwrap()
            .report
            .total;
        let z = LatentMap::seeded_noise(64, 64, 0);
        let rx = state.translate(&x, &z, 1.0, "day").unwrap();
        let ry = state.translate(&y, &z, 1.0, "night").unwrap();
        let want =
            rec_distance(&net, &rx, &x, &w).unwrap() + rec_distance(&net, &ry, &y, &w).unwrap();
        assert!((got - want).abs() < 1e-9 * want.max(1.0));
    }

    #[test]
    fn diversity_scales_reconstruction_by_gamma() {
        let net = FeatureNet::new(1);
        let mut state = GeneratorState::new_random(GeneratorConfig::default()).unwrap();
        state.attach_adapters(AdapterSpec::default()).unwrap();
        let (x, y) = small_pair(64);
        let view = GeneratorView::new(&state, Trainable::Nothing, 0);
        let w = LossWeights::default();
        let z = LatentMap::seeded_noise(64, 64, 4);
        for gamma in [0.0, 0.5, 1.0] {
            let mut tape = Tape::new();
            let (xv, yv) = vars(&mut tape, &x, &y);
            let zv = tape.constant(z.tensor().reshape(&[1, 4, 8, 8]).unwrap());
            let got = diversity_loss(&mut tape, &view, &net, xv, yv, Some(zv), gamma, "night", &w)
                .unwrap();
            let out = state.translate(&x, &z, gamma, "night").unwrap();
            let want = gamma * rec_distance(&net, &out, &y, &w).unwrap();
            assert!((got.loss.report.total - want).abs() < 1e-9, "gamma {gamma}");
        }
        let mut tape = Tape::new();
        let (xv, yv) = vars(&mut tape, &x, &y);
        assert!(diversity_loss(&mut tape, &view, &net, xv, yv, None, 1.5, "night", &w).is_err());
    }

    #[test]
    fn negative_weight_rejected() {
        let w = LossWeights {
            lambda_idt: -1.0,
            ..LossWeights::default()
        };
        assert!(w.validate().is_err());
    }
}
