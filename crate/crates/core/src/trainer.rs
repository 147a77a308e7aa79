//! Backbone pretraining, adaptation loops, diversity finetuning, and the
//! ablation and dataset-size drivers.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversarial::{gan_loss_d_var, gan_loss_g_var, Discriminator};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::generator::{AdapterSpec, BranchKind, GeneratorState, GeneratorView, Trainable};
use crate::objectives::{
    diversity_loss, paired_objective, rec_distance, rec_distance_var, unpaired_objective, ClipHead,
    LossReport, LossWeights, TapeLoss,
};
use crate::params::{Adam, AdamConfig, ParamStore};
use crate::perceptual::{
    dino_struct_dist, fit_stats, frechet_distance, FeatureNet, FeatureStats, DINO_REPORT_SCALE,
};
use crate::tensor::Tensor;
use crate::types::{batch, psnr, unbatch, TensorImage, DOWNSAMPLE, LATENT_CHANNELS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    /// Discriminator learning rate as a multiple of `lr`.
    pub d_lr_mult: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub weights: LossWeights,
    /// Interpolation coefficients sampled uniformly during diversity finetuning.
    pub gamma_choices: Vec<f64>,
    /// Held-out metric cadence in steps; 0 evaluates only at the start and end.
    pub eval_every: usize,
    /// Seed of the feature net behind the perceptual loss and discriminators.
    pub feature_seed: u64,
    /// Seed of the separate feature net used for FID and structure metrics.
    pub metric_seed: u64,
    /// Share of pretraining steps spent on the autoencoder phase.
    pub ae_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            d_lr_mult: 1.0,
            beta1: 0.5,
            beta2: 0.999,
            batch_size: 8,
            steps: 2000,
            seed: 0,
            weights: LossWeights::unpaired(),
            gamma_choices: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            eval_every: 250,
            feature_seed: 0,
            metric_seed: 7,
            ae_fraction: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Validation(
                "steps and batch_size must be at least 1".into(),
            ));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Validation(format!(
                "learning rate {} is invalid",
                self.lr
            )));
        }
        if !(self.d_lr_mult.is_finite() && self.d_lr_mult >= 0.0) {
            return Err(Error::Validation(format!(
                "d_lr_mult {} is invalid",
                self.d_lr_mult
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Validation("Adam betas must lie in [0, 1)".into()));
        }
        if self.gamma_choices.is_empty()
            || self.gamma_choices.iter().any(|g| !(0.0..=1.0).contains(g))
        {
            return Err(Error::Validation(format!(
                "gamma choices {:?} must be nonempty and inside [0, 1]",
                self.gamma_choices
            )));
        }
        if !(0.0..=1.0).contains(&self.ae_fraction) {
            return Err(Error::Validation("ae_fraction must lie in [0, 1]".into()));
        }
        self.weights.validate()
    }

    fn adam(&self) -> Adam {
        self.adam_with(self.lr)
    }

    fn adam_d(&self) -> Adam {
        self.adam_with(self.lr * self.d_lr_mult)
    }

    fn adam_with(&self, lr: f64) -> Adam {
        Adam::new(AdamConfig {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            ..AdamConfig::default()
        })
    }
}

/// Held-out quality measurements.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub fid: f64,
    /// Structure distance between sources and outputs, already scaled by 100.
    pub dino_struct: f64,
    /// PSNR of the reconstruction task in dB.
    pub psnr: f64,
    /// Mean reconstruction distance of the same task.
    pub rec: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub phase: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    pub g: LossReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d: Option<LossReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<Metrics>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub records: Vec<StepRecord>,
}

impl History {
    /// `(step, metrics)` for every evaluated step, in order.
    pub fn metrics(&self) -> impl Iterator<Item = (usize, &Metrics)> {
        self.records
            .iter()
            .filter_map(|r| r.metrics.as_ref().map(|m| (r.step, m)))
    }

    pub fn first_metrics(&self) -> Option<&Metrics> {
        self.metrics().next().map(|(_, m)| m)
    }

    pub fn final_metrics(&self) -> Option<&Metrics> {
        self.metrics().last().map(|(_, m)| m)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for line in std::io::BufReader::new(f).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if !line.trim().is_empty() {
                records.push(serde_json::from_str(&line)?);
            }
        }
        Ok(History { records })
    }
}

/// A trained generator with its history and auxiliary trainable heads
/// (discriminators, alignment projection).
#[derive(Clone, Debug)]
pub struct Trained {
    pub state: GeneratorState,
    pub history: History,
    pub aux: ParamStore,
}

/// Images of one domain.
#[derive(Clone, Debug)]
pub struct DomainImages {
    pub domain: String,
    pub images: Vec<TensorImage>,
}

/// Unpaired training sets plus a held-out split for metrics.
#[derive(Clone, Debug)]
pub struct UnpairedData {
    pub domain_x: String,
    pub domain_y: String,
    pub x: Vec<TensorImage>,
    pub y: Vec<TensorImage>,
    pub held_x: Vec<TensorImage>,
    pub held_y: Vec<TensorImage>,
}

impl UnpairedData {
    /// Holds out the last `held_out` images of each domain.
    pub fn from_sets(x: &DomainImages, y: &DomainImages, held_out: usize) -> Result<Self> {
        let cut = |set: &DomainImages| -> Result<(Vec<TensorImage>, Vec<TensorImage>)> {
            if held_out == 0 || held_out >= set.images.len() {
                return Err(Error::Validation(format!(
                    "cannot hold out {held_out} of {} {} images",
                    set.images.len(),
                    set.domain
                )));
            }
            let (a, b) = set.images.split_at(set.images.len() - held_out);
            Ok((a.to_vec(), b.to_vec()))
        };
        let (tx, hx) = cut(x)?;
        let (ty, hy) = cut(y)?;
        let d = UnpairedData {
            domain_x: x.domain.clone(),
            domain_y: y.domain.clone(),
            x: tx,
            y: ty,
            held_x: hx,
            held_y: hy,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.domain_x == self.domain_y {
            return Err(Error::Validation(format!(
                "both domains are {:?}",
                self.domain_x
            )));
        }
        if self.x.is_empty() || self.y.is_empty() {
            return Err(Error::Validation("empty training set".into()));
        }
        if self.held_x.len() < 2 || self.held_y.len() < 2 {
            return Err(Error::Validation(
                "held-out sets need at least 2 images".into(),
            ));
        }
        Ok(())
    }

    /// `size` training images per domain, drawn independently for each domain
    /// so the subsets do not share scenes. `size` equal to the set size keeps
    /// the original order.
    pub fn subset(&self, size: usize, seed: u64) -> Result<Self> {
        let n = self.x.len().min(self.y.len());
        if size == 0 || size > n {
            return Err(Error::Validation(format!(
                "subset of {size} requested from {n} images"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pick = |len: usize| -> Vec<usize> {
            let mut idx: Vec<usize> = (0..len).collect();
            if size < n {
                use rand::seq::SliceRandom;
                idx.shuffle(&mut rng);
                idx.truncate(size);
                idx.sort_unstable();
            }
            idx.truncate(size);
            idx
        };
        let (ix, iy) = (pick(self.x.len()), pick(self.y.len()));
        Ok(UnpairedData {
            x: ix.iter().map(|&i| self.x[i].clone()).collect(),
            y: iy.iter().map(|&i| self.y[i].clone()).collect(),
            ..self.clone()
        })
    }
}

/// Aligned (input, target) pairs plus a held-out split.
#[derive(Clone, Debug)]
pub struct PairedData {
    pub target_domain: String,
    pub inputs: Vec<TensorImage>,
    pub targets: Vec<TensorImage>,
    pub held_inputs: Vec<TensorImage>,
    pub held_targets: Vec<TensorImage>,
}

impl PairedData {
    /// Edge maps of `target` images as inputs, the images themselves as
    /// targets; the last `held_out` pairs are held out.
    pub fn from_edges(
        target: &DomainImages,
        edges: &crate::data::EdgeConfig,
        held_out: usize,
        seed: u64,
    ) -> Result<Self> {
        let pairs = crate::data::edge_pairs(&target.images, edges, seed)?;
        if held_out == 0 || held_out >= pairs.len() {
            return Err(Error::Validation(format!(
                "cannot hold out {held_out} of {} pairs",
                pairs.len()
            )));
        }
        let cut = pairs.len() - held_out;
        let (inputs, targets): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        let d = PairedData {
            target_domain: target.domain.clone(),
            inputs: inputs[..cut].to_vec(),
            targets: targets[..cut].to_vec(),
            held_inputs: inputs[cut..].to_vec(),
            held_targets: targets[cut..].to_vec(),
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.inputs.len() != self.targets.len()
            || self.held_inputs.len() != self.held_targets.len()
        {
            return Err(Error::Validation(format!(
                "misaligned pairs: {} inputs vs {} targets",
                self.inputs.len(),
                self.targets.len()
            )));
        }
        if self.inputs.is_empty() || self.held_inputs.len() < 2 {
            return Err(Error::Validation(
                "paired data needs training pairs and 2+ held-out pairs".into(),
            ));
        }
        Ok(())
    }
}

fn pick<'a>(rng: &mut ChaCha8Rng, set: &'a [TensorImage], n: usize) -> Result<Tensor> {
    let imgs: Vec<TensorImage> = (0..n)
        .map(|_| set[rng.gen_range(0..set.len())].clone())
        .collect();
    batch(&imgs)
}

fn pick_pairs(
    rng: &mut ChaCha8Rng,
    a: &[TensorImage],
    b: &[TensorImage],
    n: usize,
) -> Result<(Tensor, Tensor)> {
    let idx: Vec<usize> = (0..n).map(|_| rng.gen_range(0..a.len())).collect();
    let xa: Vec<TensorImage> = idx.iter().map(|&i| a[i].clone()).collect();
    let xb: Vec<TensorImage> = idx.iter().map(|&i| b[i].clone()).collect();
    Ok((batch(&xa)?, batch(&xb)?))
}

/// Gradients restricted to names that live in `store`.
fn grads_for(store: &ParamStore, grads: &BTreeMap<String, Tensor>) -> BTreeMap<String, Tensor> {
    grads
        .iter()
        .filter(|(k, _)| store.contains(k))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect()
}

fn check_finite(report: &LossReport, step: usize) -> Result<()> {
    if !report.total.is_finite() {
        return Err(Error::Numerical(format!(
            "loss diverged at step {step}: {report:?}"
        )));
    }
    Ok(())
}

fn is_eval_step(step: usize, steps: usize, every: usize) -> bool {
    step == 0 || step == steps || (every > 0 && step % every == 0)
}

const EVAL_CHUNK: usize = 16;

/// Translates `images` toward `target` in chunks. Noise, when needed, is
/// drawn per image from `noise_seed + index`.
pub fn translate_all(
    state: &GeneratorState,
    images: &[TensorImage],
    target: &str,
    gamma: f64,
    noise_seed: u64,
) -> Result<Vec<TensorImage>> {
    let t = state.domain_index(target)?;
    let scope = state.scope(Trainable::Nothing);
    let mut out = Vec::with_capacity(images.len());
    for (c, chunk) in images.chunks(EVAL_CHUNK).enumerate() {
        let mut tape = Tape::new();
        let xb = batch(chunk)?;
        let s = xb.shape().to_vec();
        let x = tape.constant(xb);
        let z = if gamma < 1.0 || state.branch().is_some() {
            let mut zs = Vec::with_capacity(chunk.len());
            for i in 0..chunk.len() {
                let seed = noise_seed.wrapping_add((c * EVAL_CHUNK + i) as u64);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                zs.push(Tensor::randn(
                    &[LATENT_CHANNELS, s[2] / DOWNSAMPLE, s[3] / DOWNSAMPLE],
                    1.0,
                    &mut rng,
                ));
            }
            Some(tape.constant(Tensor::stack(&zs)?))
        } else {
            None
        };
        let y = state.forward(&mut tape, &scope, Some(x), z, gamma, &vec![t; chunk.len()])?;
        out.extend(unbatch(tape.value(y))?);
    }
    Ok(out)
}

/// Metrics evaluator with cached reference statistics.
pub struct Evaluator {
    pub net: FeatureNet,
    reference: FeatureStats,
    weights: LossWeights,
}

const EVAL_NOISE_SEED: u64 = 0x5eed;

impl Evaluator {
    pub fn new(metric_seed: u64, reference: &[TensorImage], weights: &LossWeights) -> Result<Self> {
        let net = FeatureNet::new(metric_seed);
        let reference = fit_stats(reference, &net)?;
        Ok(Evaluator {
            net,
            reference,
            weights: weights.clone(),
        })
    }

    /// `outputs` against the reference set (FID), against `sources` (structure),
    /// and `recon` against `recon_targets` (PSNR, rec distance).
    pub fn measure(
        &self,
        sources: &[TensorImage],
        outputs: &[TensorImage],
        recon: &[TensorImage],
        recon_targets: &[TensorImage],
    ) -> Result<Metrics> {
        let fid = frechet_distance(&fit_stats(outputs, &self.net)?, &self.reference)?;
        let mut dino = 0.0;
        for (s, o) in sources.iter().zip(outputs) {
            dino += dino_struct_dist(&self.net, s, o)?;
        }
        dino *= DINO_REPORT_SCALE / sources.len() as f64;
        let (mut p, mut r) = (0.0, 0.0);
        for (a, b) in recon.iter().zip(recon_targets) {
            p += psnr(a, b)?.min(100.0);
            r += rec_distance(&self.net, a, b, &self.weights)?;
        }
        let n = recon.len() as f64;
        Ok(Metrics {
            fid,
            dino_struct: dino,
            psnr: p / n,
            rec: r / n,
        })
    }

    /// Unpaired protocol: X->Y translations of the held-out X set, and
    /// same-domain reconstruction of the held-out Y set.
    pub fn unpaired(&self, state: &GeneratorState, data: &UnpairedData) -> Result<Metrics> {
        let out = translate_all(state, &data.held_x, &data.domain_y, 1.0, EVAL_NOISE_SEED)?;
        let rec = translate_all(state, &data.held_y, &data.domain_y, 1.0, EVAL_NOISE_SEED)?;
        self.measure(&data.held_x, &out, &rec, &data.held_y)
    }

    /// Paired protocol: outputs scored against the held-out targets.
    pub fn paired(&self, state: &GeneratorState, data: &PairedData) -> Result<Metrics> {
        let out = translate_all(
            state,
            &data.held_inputs,
            &data.target_domain,
            1.0,
            EVAL_NOISE_SEED,
        )?;
        self.measure(&data.held_targets, &out, &out, &data.held_targets)
    }
}

/// Trains an autoencoder, then a domain-conditional one-step generator, from
/// a random backbone. Returns a pretrained state with no adapters.
pub fn pretrain_backbone(
    config: crate::generator::GeneratorConfig,
    sets: &[DomainImages],
    cfg: &TrainConfig,
) -> Result<(GeneratorState, History)> {
    cfg.validate()?;
    if sets.is_empty() || sets.iter().any(|s| s.images.is_empty()) {
        return Err(Error::Validation(
            "pretraining needs images in every domain".into(),
        ));
    }
    let mut state = GeneratorState::new_random(config)?;
    let labels: Vec<usize> = sets
        .iter()
        .map(|s| state.domain_index(&s.domain))
        .collect::<Result<_>>()?;
    let net = Arc::new(FeatureNet::new(cfg.feature_seed));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = History::default();
    let ae_steps = (cfg.steps as f64 * cfg.ae_fraction).round() as usize;
    let core_steps = cfg.steps - ae_steps;

    // Phase (a): autoencoder, skips off, both domains.
    let mut adam = cfg.adam();
    for step in 0..ae_steps {
        let s = step % sets.len();
        let xb = pick(&mut rng, &sets[s].images, cfg.batch_size)?;
        let mut tape = Tape::new();
        let scope = state.scope(Trainable::FirstStage);
        let x = tape.constant(xb);
        let (lat, _) = state.encode_var(&mut tape, &scope, x, 0.0)?;
        let out = state.decode_var(&mut tape, &scope, lat, None, 0.0)?;
        let rec = rec_distance_var(&mut tape, &net, out, x, &cfg.weights)?;
        let loss = TapeLoss::build(&mut tape, &[("ae_rec", rec, 1.0)])?;
        check_finite(&loss.report, step)?;
        let grads = tape.param_grads(&tape.backward(loss.total)?);
        drop(scope);
        adam.step(&mut state.backbone, &grads)?;
        history.records.push(StepRecord {
            step,
            phase: "autoencoder".into(),
            gamma: None,
            g: loss.report,
            d: None,
            metrics: None,
        });
    }

    // Latent standardization from the trained encoder.
    let (mean, std) = latent_moments(&state, sets)?;
    state.set_latent_norm(mean, std)?;

    // Phase (b): core maps a*E(y) + (1-a)*eps to E(y); adversarial on decoded output.
    let mut critics: Vec<Discriminator> = sets
        .iter()
        .enumerate()
        .map(|(i, s)| {
            Discriminator::new(
                &format!("pre_d_{}", s.domain),
                net.clone(),
                cfg.seed ^ (0xd0 + i as u64),
            )
        })
        .collect();
    let mut adam_g = cfg.adam();
    let mut adam_d: Vec<Adam> = sets.iter().map(|_| cfg.adam_d()).collect();
    for step in 0..core_steps {
        let s = step % sets.len();
        let yb = pick(&mut rng, &sets[s].images, cfg.batch_size)?;
        let n = cfg.batch_size;
        let (g_report, fake) = {
            let mut tape = Tape::new();
            let scope = state.scope(Trainable::Core);
            let y = tape.constant(yb.clone());
            let (ey, _) = state.encode_var(&mut tape, &scope, y, 0.0)?;
            let ey_t = tape.value(ey).clone();
            let plane = ey_t.numel() / n;
            let mut a = Vec::with_capacity(ey_t.numel());
            for _ in 0..n {
                let ai: f64 = rng.gen_range(0.0..1.0);
                a.extend(std::iter::repeat(ai).take(plane));
            }
            let a = Tensor::new(ey_t.shape(), a)?;
            let eps = Tensor::randn(ey_t.shape(), 1.0, &mut rng);
            let input = a
                .zip(&ey_t, |w, e| w * e)?
                .zip(&eps.zip(&a, |e, w| (1.0 - w) * e)?, |p, q| p + q)?;
            let input = tape.constant(input);
            let target = tape.constant(ey_t);
            let av = tape.constant(a);
            let emb = state.embed(&mut tape, &scope, &vec![labels[s]; n], 0.0)?;
            let lat = state.core(&mut tape, &scope, input, emb, 0.0, None)?;
            let out = state.decode_var(&mut tape, &scope, lat, None, 0.0)?;
            let d = tape.sub(lat, target)?;
            let d = tape.abs(d);
            let d = tape.mul(d, av)?;
            let lat_rec = tape.mean(d);
            let mut terms = vec![("latent_rec", lat_rec, 1.0)];
            if cfg.weights.lambda_gan != 0.0 {
                terms.push((
                    "gan",
                    gan_loss_g_var(&mut tape, &critics[s], out)?,
                    cfg.weights.lambda_gan,
                ));
            }
            let loss = TapeLoss::build(&mut tape, &terms)?;
            check_finite(&loss.report, step)?;
            let grads = tape.param_grads(&tape.backward(loss.total)?);
            let fake = tape.value(out).clone();
            drop(scope);
            adam_g.step(&mut state.backbone, &grads)?;
            (loss.report, fake)
        };
        let d_report = if cfg.weights.lambda_gan != 0.0 {
            let mut tape = Tape::new();
            let real = tape.constant(yb);
            let fake = tape.constant(fake);
            let loss = gan_loss_d_var(&mut tape, &critics[s], real, fake)?;
            let grads = tape.param_grads(&tape.backward(loss.total)?);
            adam_d[s].step(&mut critics[s].heads, &grads)?;
            Some(loss.report)
        } else {
            None
        };
        history.records.push(StepRecord {
            step: ae_steps + step,
            phase: "core".into(),
            gamma: None,
            g: g_report,
            d: d_report,
            metrics: None,
        });
    }
    state.pretrained = true;
    Ok((state, history))
}

fn latent_moments(state: &GeneratorState, sets: &[DomainImages]) -> Result<(f64, f64)> {
    let scope = state.scope(Trainable::Nothing);
    let (mut sum, mut sq, mut count) = (0.0, 0.0, 0usize);
    for set in sets {
        for chunk in set.images.chunks(EVAL_CHUNK).take(8) {
            let mut tape = Tape::new();
            let x = tape.constant(batch(chunk)?);
            let (lat, _) = state.encode_var(&mut tape, &scope, x, 0.0)?;
            for &v in tape.value(lat).data() {
                sum += v;
                sq += v * v;
                count += 1;
            }
        }
    }
    let mean = sum / count as f64;
    let var = (sq / count as f64 - mean * mean).max(1e-12);
    Ok((mean, var.sqrt()))
}

fn new_critic(name: &str, net: &Arc<FeatureNet>, seed: u64) -> Discriminator {
    Discriminator::new(name, net.clone(), seed)
}

/// Unpaired adaptation: cycle + identity + adversarial, alternating 1:1 with
/// both discriminators. Only adapter parameters change.
pub fn train_unpaired(
    state: GeneratorState,
    data: &UnpairedData,
    cfg: &TrainConfig,
) -> Result<Trained> {
    cfg.validate()?;
    data.validate()?;
    if state.adapter_spec.is_none() {
        return Err(Error::Validation(
            "attach adapters before adaptation training".into(),
        ));
    }
    let mut state = state;
    let net = Arc::new(FeatureNet::new(cfg.feature_seed));
    let eval = Evaluator::new(cfg.metric_seed, &data.held_y, &cfg.weights)?;
    let mut d_x = new_critic("d_x", &net, cfg.seed ^ 0xd1);
    let mut d_y = new_critic("d_y", &net, cfg.seed ^ 0xd2);
    let (mut adam_g, mut adam_dx, mut adam_dy) = (cfg.adam(), cfg.adam_d(), cfg.adam_d());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = History::default();
    for step in 0..cfg.steps {
        let metrics = if is_eval_step(step, cfg.steps, cfg.eval_every) {
            Some(eval.unpaired(&state, data)?)
        } else {
            None
        };
        let xb = pick(&mut rng, &data.x, cfg.batch_size)?;
        let yb = pick(&mut rng, &data.y, cfg.batch_size)?;
        let (g_report, fake_x, fake_y) = {
            let view = GeneratorView::new(
                &state,
                Trainable::Adapters,
                cfg.seed.wrapping_add(step as u64),
            );
            let mut tape = Tape::new();
            let x = tape.constant(xb.clone());
            let y = tape.constant(yb.clone());
            let out = unpaired_objective(
                &mut tape,
                &view,
                &net,
                Some(&d_x),
                Some(&d_y),
                x,
                y,
                &data.domain_x,
                &data.domain_y,
                &cfg.weights,
            )?;
            check_finite(&out.loss.report, step)?;
            let grads = tape.param_grads(&tape.backward(out.loss.total)?);
            let fx = tape.value(out.fake_x).clone();
            let fy = tape.value(out.fake_y).clone();
            drop(view);
            {
                let g = grads_for(&state.adapters, &grads);
                adam_g.step(&mut state.adapters, &g)?;
            }
            (out.loss.report, fx, fy)
        };
        let d_report = {
            let mut tape = Tape::new();
            let (x, y) = (tape.constant(xb), tape.constant(yb));
            let (fx, fy) = (tape.constant(fake_x), tape.constant(fake_y));
            let lx = gan_loss_d_var(&mut tape, &d_x, x, fx)?;
            let ly = gan_loss_d_var(&mut tape, &d_y, y, fy)?;
            let total = tape.add(lx.total, ly.total)?;
            let grads = tape.param_grads(&tape.backward(total)?);
            {
                let g = grads_for(&d_x.heads, &grads);
                adam_dx.step(&mut d_x.heads, &g)?;
            }
            {
                let g = grads_for(&d_y.heads, &grads);
                adam_dy.step(&mut d_y.heads, &g)?;
            }
            merge_reports(&[("x", lx.report), ("y", ly.report)])
        };
        history.records.push(StepRecord {
            step,
            phase: "unpaired".into(),
            gamma: Some(1.0),
            g: g_report,
            d: Some(d_report),
            metrics,
        });
    }
    let final_metrics = eval.unpaired(&state, data)?;
    push_final(&mut history, cfg.steps, "unpaired", final_metrics);
    let mut aux = d_x.heads;
    aux.extend(d_y.heads);
    Ok(Trained {
        state,
        history,
        aux,
    })
}

/// Evaluation-only record after the last step.
fn push_final(history: &mut History, step: usize, phase: &str, metrics: Metrics) {
    history.records.push(StepRecord {
        step,
        phase: format!("{phase}-final"),
        gamma: None,
        g: LossReport::default(),
        d: None,
        metrics: Some(metrics),
    });
}

fn merge_reports(parts: &[(&str, LossReport)]) -> LossReport {
    let mut out = LossReport::default();
    for (suffix, r) in parts {
        for (k, v) in &r.terms {
            let key = format!("{k}_{suffix}");
            out.terms.insert(key.clone(), *v);
            out.weights
                .insert(key, r.weights.get(k).copied().unwrap_or(1.0));
        }
        out.total += r.total;
    }
    out
}

/// Paired adaptation with reconstruction, target-domain GAN, and alignment.
pub fn train_paired(
    state: GeneratorState,
    data: &PairedData,
    cfg: &TrainConfig,
) -> Result<Trained> {
    cfg.validate()?;
    data.validate()?;
    if state.adapter_spec.is_none() {
        return Err(Error::Validation(
            "attach adapters before adaptation training".into(),
        ));
    }
    let mut state = state;
    let net = Arc::new(FeatureNet::new(cfg.feature_seed));
    let eval = Evaluator::new(cfg.metric_seed, &data.held_targets, &cfg.weights)?;
    let mut d = new_critic("d_t", &net, cfg.seed ^ 0xd3);
    let mut clip = ClipHead::new(net.pooled_dim(), state.config.emb_dim, cfg.seed ^ 0xc1);
    let (mut adam_g, mut adam_c, mut adam_d) = (cfg.adam(), cfg.adam(), cfg.adam_d());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = History::default();
    for step in 0..cfg.steps {
        let metrics = if is_eval_step(step, cfg.steps, cfg.eval_every) {
            Some(eval.paired(&state, data)?)
        } else {
            None
        };
        let (xb, yb) = pick_pairs(&mut rng, &data.inputs, &data.targets, cfg.batch_size)?;
        let (g_report, fake) = {
            let view = GeneratorView::new(
                &state,
                Trainable::Adapters,
                cfg.seed.wrapping_add(step as u64),
            );
            let mut tape = Tape::new();
            let x = tape.constant(xb);
            let y = tape.constant(yb.clone());
            let out = paired_objective(
                &mut tape,
                &view,
                &net,
                Some(&d),
                &clip,
                x,
                y,
                &data.target_domain,
                &cfg.weights,
            )?;
            check_finite(&out.loss.report, step)?;
            let grads = tape.param_grads(&tape.backward(out.loss.total)?);
            let fake = tape.value(out.output).clone();
            drop(view);
            {
                let g = grads_for(&state.adapters, &grads);
                adam_g.step(&mut state.adapters, &g)?;
            }
            let cg = grads_for(&clip.params, &grads);
            if !cg.is_empty() {
                adam_c.step(&mut clip.params, &cg)?;
            }
            (out.loss.report, fake)
        };
        let d_report = d_step(&mut d, &mut adam_d, yb, fake, cfg)?;
        history.records.push(StepRecord {
            step,
            phase: "paired".into(),
            gamma: Some(1.0),
            g: g_report,
            d: d_report,
            metrics,
        });
    }
    push_final(
        &mut history,
        cfg.steps,
        "paired",
        eval.paired(&state, data)?,
    );
    let mut aux = d.heads;
    aux.extend(clip.params);
    Ok(Trained {
        state,
        history,
        aux,
    })
}

fn d_step(
    d: &mut Discriminator,
    adam: &mut Adam,
    real: Tensor,
    fake: Tensor,
    cfg: &TrainConfig,
) -> Result<Option<LossReport>> {
    if cfg.weights.lambda_gan == 0.0 {
        return Ok(None);
    }
    let mut tape = Tape::new();
    let (r, f) = (tape.constant(real), tape.constant(fake));
    let loss = gan_loss_d_var(&mut tape, d, r, f)?;
    let grads = tape.param_grads(&tape.backward(loss.total)?);
    adam.step(&mut d.heads, &grads)?;
    Ok(Some(loss.report))
}

/// Finetunes with `gamma` drawn from the configured choices each step; the
/// loss is `gamma * rec + lambda_gan * gan` on the gamma-blended output.
pub fn finetune_diversity(
    state: GeneratorState,
    data: &PairedData,
    cfg: &TrainConfig,
) -> Result<Trained> {
    cfg.validate()?;
    data.validate()?;
    if state.adapter_spec.is_none() {
        return Err(Error::Validation(
            "finetuning needs an adapted state".into(),
        ));
    }
    let mut state = state;
    let net = Arc::new(FeatureNet::new(cfg.feature_seed));
    let eval = Evaluator::new(cfg.metric_seed, &data.held_targets, &cfg.weights)?;
    let mut d = new_critic("d_t", &net, cfg.seed ^ 0xd3);
    let (mut adam_g, mut adam_d) = (cfg.adam(), cfg.adam_d());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // Separate streams so batches match a paired run with the same seed.
    let mut gamma_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9a);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x2e);
    let mut history = History::default();
    for step in 0..cfg.steps {
        let metrics = if is_eval_step(step, cfg.steps, cfg.eval_every) {
            Some(eval.paired(&state, data)?)
        } else {
            None
        };
        let gamma = cfg.gamma_choices[gamma_rng.gen_range(0..cfg.gamma_choices.len())];
        let (xb, yb) = pick_pairs(&mut rng, &data.inputs, &data.targets, cfg.batch_size)?;
        let s = xb.shape().to_vec();
        let z = Tensor::randn(
            &[s[0], LATENT_CHANNELS, s[2] / DOWNSAMPLE, s[3] / DOWNSAMPLE],
            1.0,
            &mut noise_rng,
        );
        let (g_report, fake) = {
            let view = GeneratorView::new(
                &state,
                Trainable::Adapters,
                cfg.seed.wrapping_add(step as u64),
            );
            let mut tape = Tape::new();
            let x = tape.constant(xb);
            let y = tape.constant(yb.clone());
            let zv = tape.constant(z);
            let div = diversity_loss(
                &mut tape,
                &view,
                &net,
                x,
                y,
                Some(zv),
                gamma,
                &data.target_domain,
                &cfg.weights,
            )?;
            let rec = div.loss.total;
            let mut terms: Vec<(&str, Var, f64)> = vec![("rec", rec, 1.0)];
            if cfg.weights.lambda_gan != 0.0 {
                terms.push((
                    "gan",
                    gan_loss_g_var(&mut tape, &d, div.output)?,
                    cfg.weights.lambda_gan,
                ));
            }
            let loss = TapeLoss::build(&mut tape, &terms)?.with_metadata(&cfg.weights);
            check_finite(&loss.report, step)?;
            let grads = tape.param_grads(&tape.backward(loss.total)?);
            let fake = tape.value(div.output).clone();
            drop(view);
            {
                let g = grads_for(&state.adapters, &grads);
                adam_g.step(&mut state.adapters, &g)?;
            }
            (loss.report, fake)
        };
        let d_report = d_step(&mut d, &mut adam_d, yb, fake, cfg)?;
        history.records.push(StepRecord {
            step,
            phase: "diversity".into(),
            gamma: Some(gamma),
            g: g_report,
            d: d_report,
            metrics,
        });
    }
    push_final(
        &mut history,
        cfg.steps,
        "diversity",
        eval.paired(&state, data)?,
    );
    Ok(Trained {
        state,
        history,
        aux: d.heads,
    })
}

/// The ablation variants: input route, skips, and backbone initialization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    A,
    B,
    C,
    D,
    #[serde(rename = "FULL")]
    Full,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::A,
        Variant::B,
        Variant::C,
        Variant::D,
        Variant::Full,
    ];

    pub fn pretrained(self) -> bool {
        self != Variant::A
    }

    pub fn skips(self) -> bool {
        self == Variant::Full
    }

    pub fn branch(self) -> Option<BranchKind> {
        match self {
            Variant::B => Some(BranchKind::Controlnet),
            Variant::C => Some(BranchKind::Lightweight),
            _ => None,
        }
    }

    pub fn adapter_spec(self, base: &AdapterSpec) -> AdapterSpec {
        AdapterSpec {
            skips: self.skips(),
            branch: self.branch(),
            ..base.clone()
        }
    }

    pub fn describe(self) -> &'static str {
        match self {
            Variant::A => "direct input, no skips, random init",
            Variant::B => "controlnet-style branch, no skips, pretrained",
            Variant::C => "lightweight adapter branch, no skips, pretrained",
            Variant::D => "direct input, no skips, pretrained",
            Variant::Full => "direct input, skips, pretrained",
        }
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "A" => Ok(Variant::A),
            "B" => Ok(Variant::B),
            "C" => Ok(Variant::C),
            "D" => Ok(Variant::D),
            "FULL" => Ok(Variant::Full),
            _ => Err(Error::Unknown {
                kind: "ablation variant",
                name: s.to_string(),
            }),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::A => "A",
            Variant::B => "B",
            Variant::C => "C",
            Variant::D => "D",
            Variant::Full => "FULL",
        })
    }
}

pub fn parse_variants(list: &str) -> Result<Vec<Variant>> {
    let v: Vec<Variant> = list
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(str::parse)
        .collect::<Result<_>>()?;
    if v.is_empty() {
        return Err(Error::Validation("no ablation variants given".into()));
    }
    Ok(v)
}

/// Builds and trains one variant. `backbone` must be pretrained; variant A
/// replaces it with a random backbone of the same configuration.
pub fn run_variant(
    variant: Variant,
    backbone: &GeneratorState,
    adapters: &AdapterSpec,
    data: &UnpairedData,
    cfg: &TrainConfig,
) -> Result<Trained> {
    let mut state = if variant.pretrained() {
        if !backbone.pretrained {
            return Err(Error::Validation(format!(
                "variant {variant} needs a pretrained backbone"
            )));
        }
        let mut s = backbone.clone();
        s.adapters = ParamStore::new();
        s.adapter_spec = None;
        s
    } else {
        GeneratorState::new_random(backbone.config.clone())?
    };
    state.attach_adapters(variant.adapter_spec(adapters))?;
    train_unpaired(state, data, cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub pretrained: bool,
    pub skips: bool,
    pub branch: String,
    pub fid: f64,
    pub dino_struct: f64,
    pub psnr: f64,
}

impl AblationRow {
    pub fn from_trained(variant: Variant, t: &Trained) -> Result<Self> {
        let m = t
            .history
            .final_metrics()
            .ok_or_else(|| Error::Validation("run produced no metrics".into()))?;
        Ok(AblationRow {
            variant,
            pretrained: t.state.pretrained,
            skips: variant.skips(),
            branch: variant
                .branch()
                .map_or_else(|| "direct".to_string(), |b| b.to_string()),
            fid: m.fid,
            dino_struct: m.dino_struct,
            psnr: m.psnr,
        })
    }
}

/// Trains every variant with the same seed, data, and step count.
pub fn run_ablation(
    variants: &[Variant],
    backbone: &GeneratorState,
    adapters: &AdapterSpec,
    data: &UnpairedData,
    cfg: &TrainConfig,
) -> Result<Vec<AblationRow>> {
    if variants.is_empty() {
        return Err(Error::Validation("no ablation variants given".into()));
    }
    variants
        .iter()
        .map(|&v| {
            log::info!("ablation variant {v}: {}", v.describe());
            let t = run_variant(v, backbone, adapters, data, cfg)?;
            AblationRow::from_trained(v, &t)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub size: usize,
    pub fid: f64,
    pub dino_struct: f64,
    pub psnr: f64,
}

/// Trains the full variant once per training-set size.
pub fn dataset_size_sweep(
    sizes: &[usize],
    backbone: &GeneratorState,
    adapters: &AdapterSpec,
    data: &UnpairedData,
    cfg: &TrainConfig,
) -> Result<Vec<SweepRow>> {
    let available = data.x.len().min(data.y.len());
    if let Some(&s) = sizes.iter().find(|&&s| s > available || s == 0) {
        return Err(Error::Validation(format!(
            "sweep size {s} outside 1..={available}"
        )));
    }
    sizes
        .iter()
        .map(|&size| {
            log::info!("sweep: training on {size} images per domain");
            let sub = data.subset(size, cfg.seed)?;
            let t = run_variant(Variant::Full, backbone, adapters, &sub, cfg)?;
            let m = t
                .history
                .final_metrics()
                .expect("final metrics are always recorded");
            Ok(SweepRow {
                size,
                fid: m.fid,
                dino_struct: m.dino_struct,
                psnr: m.psnr,
            })
        })
        .collect()
}

/// Writes rows as an RFC 4180 CSV with a header.
pub fn write_csv<T: Serialize>(rows: &[T], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_two_domain_dataset, SceneSpec};
    use crate::generator::GeneratorConfig;

    fn toy_data(size: usize, n: usize, held: usize) -> UnpairedData {
        let spec = SceneSpec {
            size,
            ..SceneSpec::default()
        };
        let ds = gen_two_domain_dataset(n + held, &spec).unwrap();
        let (train, test) = ds.split(held).unwrap();
        UnpairedData {
            domain_x: "day".into(),
            domain_y: "night".into(),
            x: train.x,
            y: train.y,
            held_x: test.x,
            held_y: test.y,
        }
    }

    fn tiny_cfg(steps: usize) -> TrainConfig {
        TrainConfig {
            steps,
            batch_size: 2,
            eval_every: 0,
            ..TrainConfig::default()
        }
    }

    fn tiny_state() -> GeneratorState {
        let mut s = GeneratorState::new_random(GeneratorConfig::tiny()).unwrap();
        s.pretrained = true;
        s.attach_adapters(AdapterSpec::default()).unwrap();
        s
    }

    #[test]
    fn zero_lr_leaves_state_unchanged() {
        let data = toy_data(8, 6, 3);
        let cfg = TrainConfig {
            lr: 0.0,
            ..tiny_cfg(2)
        };
        let s = tiny_state();
        let t = train_unpaired(s.clone(), &data, &cfg).unwrap();
        assert_eq!(t.state.adapters, s.adapters);
        assert_eq!(t.state.backbone, s.backbone);
    }

    #[test]
    fn training_moves_only_adapters() {
        let data = toy_data(8, 6, 3);
        let s = tiny_state();
        let before = s.backbone.checksum();
        let t = train_unpaired(s.clone(), &data, &tiny_cfg(3)).unwrap();
        assert_eq!(t.state.backbone.checksum(), before);
        assert_ne!(t.state.adapters, s.adapters);
        for r in &t.history.records {
            assert!(r.g.is_consistent(1e-9));
        }
    }

    #[test]
    fn pretraining_with_zero_lr_keeps_init() {
        let data = toy_data(8, 4, 2);
        let sets = vec![
            DomainImages {
                domain: "day".into(),
                images: data.x.clone(),
            },
            DomainImages {
                domain: "night".into(),
                images: data.y.clone(),
            },
        ];
        let cfg = TrainConfig {
            lr: 0.0,
            ..tiny_cfg(4)
        };
        let (s, h) = pretrain_backbone(GeneratorConfig::tiny(), &sets, &cfg).unwrap();
        let fresh = GeneratorState::new_random(GeneratorConfig::tiny()).unwrap();
        for (k, v) in fresh.backbone.iter() {
            if !k.starts_with("latent.") {
                assert_eq!(s.backbone.get(k).unwrap(), v, "{k}");
            }
        }
        assert!(s.pretrained);
        assert_eq!(h.records.len(), 4);
        assert!(s.adapters.is_empty());
        assert!(pretrain_backbone(GeneratorConfig::tiny(), &[], &cfg).is_err());
    }

    #[test]
    fn variants_parse_and_reject_unknown() {
        assert_eq!(
            parse_variants("A,B,C,D,FULL").unwrap(),
            Variant::ALL.to_vec()
        );
        assert!(matches!(parse_variants("A,E"), Err(Error::Unknown { .. })));
        assert!(parse_variants("").is_err());
        assert!(!Variant::A.pretrained());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig {
            steps: 0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            gamma_choices: vec![0.5, 1.5],
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn same_domains_rejected() {
        let mut data = toy_data(8, 4, 2);
        data.domain_y = "day".into();
        assert!(train_unpaired(tiny_state(), &data, &tiny_cfg(1)).is_err());
    }

    #[test]
    fn subset_of_full_size_is_identity() {
        let data = toy_data(8, 6, 2);
        assert_eq!(data.subset(6, 1).unwrap().x, data.x);
        assert_eq!(data.subset(3, 1).unwrap().x, data.subset(3, 1).unwrap().x);
        assert!(data.subset(7, 1).is_err());
        let sub = data.subset(3, 1).unwrap();
        let pos =
            |set: &[TensorImage], img: &TensorImage| set.iter().position(|i| i == img).unwrap();
        let ix: Vec<usize> = sub.x.iter().map(|i| pos(&data.x, i)).collect();
        let iy: Vec<usize> = sub.y.iter().map(|i| pos(&data.y, i)).collect();
        assert_ne!(ix, iy, "domains drawn independently");
    }

    #[test]
    fn history_round_trips_through_jsonl() {
        let data = toy_data(8, 4, 2);
        let t = train_unpaired(tiny_state(), &data, &tiny_cfg(2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.jsonl");
        t.history.write_jsonl(&p).unwrap();
        assert_eq!(History::read_jsonl(&p).unwrap(), t.history);
    }
}
