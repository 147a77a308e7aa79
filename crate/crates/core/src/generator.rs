//! The one-step translation network `G(x, z, gamma, c)`.
//!
//! A first-stage encoder maps images to a latent 8x smaller in each spatial
//! dimension, a domain-conditioned core maps latents to latents, and a decoder
//! maps back to pixels. Adaptation adds LoRA deltas to every weight-bearing
//! layer, a full delta on the core's first conv, a delta on the domain table,
//! and four 1x1 zero-conv skips from encoder taps into the decoder. All
//! adapter contributions are scaled by `gamma`, so `gamma = 0` is exactly the
//! backbone.

use std::cell::RefCell;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{self, Scope, Train};
use crate::objectives::Translator;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::types::{LatentMap, TensorImage, DOWNSAMPLE, LATENT_CHANNELS};

pub const STAGES: usize = 4;
const LATENT_MEAN: &str = "latent.mean";
const LATENT_INV_STD: &str = "latent.inv_std";
const EMB_TABLE: &str = "emb.table";
const EMB_DELTA: &str = "emb.delta";
const FIRST_CONV: &str = "core.first";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    /// Channels of the four encoder taps, full resolution first.
    pub enc_channels: [usize; STAGES],
    /// Decoder channels at the same four resolutions.
    pub dec_channels: [usize; STAGES],
    pub core_channels: usize,
    pub core_blocks: usize,
    pub emb_dim: usize,
    pub domains: Vec<String>,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            enc_channels: [4, 8, 16, 32],
            dec_channels: [4, 8, 16, 32],
            core_channels: 32,
            core_blocks: 3,
            emb_dim: 64,
            domains: vec!["day".into(), "night".into()],
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    /// A very small network for 8x8 images, used by gradient checks.
    pub fn tiny() -> Self {
        GeneratorConfig {
            enc_channels: [2, 3, 4, 4],
            dec_channels: [2, 3, 4, 4],
            core_channels: 4,
            core_blocks: 1,
            emb_dim: 6,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.domains.len() < 2 {
            return Err(Error::Validation(
                "at least two domains are required".into(),
            ));
        }
        for (i, d) in self.domains.iter().enumerate() {
            if self.domains[..i].contains(d) {
                return Err(Error::Validation(format!("duplicate domain id {d:?}")));
            }
        }
        let dims = self.enc_channels.iter().chain(&self.dec_channels);
        if dims
            .chain([&self.core_channels, &self.emb_dim])
            .any(|&c| c == 0)
            || self.core_blocks == 0
        {
            return Err(Error::Validation(
                "generator widths and depth must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// How conditioning reaches the core when an adapter branch is used.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BranchKind {
    /// Trainable copy of the core's first conv and blocks, fed the encoded input.
    Controlnet,
    /// A small conv stack with zero-initialized residual outputs.
    Lightweight,
}

impl FromStr for BranchKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "controlnet" | "controlnetstyle" => Ok(BranchKind::Controlnet),
            "lightweight" | "lightweightadapter" => Ok(BranchKind::Lightweight),
            "direct" => Err(Error::Validation(
                "direct conditioning has no branch; use translate".into(),
            )),
            _ => Err(Error::Unknown {
                kind: "branch kind",
                name: s.to_string(),
            }),
        }
    }
}

impl fmt::Display for BranchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BranchKind::Controlnet => "controlnet",
            BranchKind::Lightweight => "lightweight",
        })
    }
}

/// Which adapters to attach to a backbone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdapterSpec {
    pub lora_rank: usize,
    pub skips: bool,
    pub branch: Option<BranchKind>,
    pub seed: u64,
}

impl Default for AdapterSpec {
    fn default() -> Self {
        AdapterSpec {
            lora_rank: 8,
            skips: true,
            branch: None,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainCode {
    pub id: String,
    pub index: usize,
    pub embedding: Vec<f64>,
}

/// Encoder activations at full, 1/2, 1/4 and 1/8 resolution, each `[C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SkipFeatures {
    pub taps: Vec<Tensor>,
}

/// Parameters that receive gradients in a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    Nothing,
    Adapters,
    /// Backbone encoder and decoder (autoencoder pretraining).
    FirstStage,
    /// Backbone core and domain table (generator pretraining).
    Core,
}

#[derive(Clone, Debug)]
pub struct GeneratorState {
    pub config: GeneratorConfig,
    pub backbone: ParamStore,
    pub adapters: ParamStore,
    pub adapter_spec: Option<AdapterSpec>,
    pub pretrained: bool,
}

fn enc_name(i: usize) -> String {
    format!("enc.s{i}")
}
fn dec_names() -> [&'static str; 5] {
    ["dec.in", "dec.s3", "dec.s2", "dec.s1", "dec.out"]
}
fn skip_name(i: usize) -> String {
    format!("skip.s{i}")
}
fn block(prefix: &str, i: usize, part: &str) -> String {
    format!("{prefix}.b{i}.{part}")
}

impl GeneratorState {
    /// A randomly initialized backbone with no adapters.
    pub fn new_random(config: GeneratorConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut p = ParamStore::new();
        let e = config.enc_channels;
        let d = config.dec_channels;
        let c = config.core_channels;
        nn::init_conv(&mut p, &enc_name(0), 3, e[0], 3, &mut rng);
        for i in 1..STAGES {
            nn::init_conv(&mut p, &enc_name(i), e[i - 1], e[i], 3, &mut rng);
        }
        nn::init_conv(&mut p, "enc.lat", e[3], LATENT_CHANNELS, 1, &mut rng);
        nn::init_conv(&mut p, FIRST_CONV, LATENT_CHANNELS, c, 3, &mut rng);
        let film_std = 0.1 / (config.emb_dim as f64).sqrt();
        for i in 0..config.core_blocks {
            nn::init_conv(&mut p, &block("core", i, "conv"), c, c, 3, &mut rng);
            nn::init_linear(
                &mut p,
                &block("core", i, "fs"),
                config.emb_dim,
                c,
                film_std,
                &mut rng,
            );
            nn::init_linear(
                &mut p,
                &block("core", i, "ft"),
                config.emb_dim,
                c,
                film_std,
                &mut rng,
            );
        }
        nn::init_conv(&mut p, "core.last", c, LATENT_CHANNELS, 3, &mut rng);
        let [n_in, n3, n2, n1, n_out] = dec_names();
        nn::init_conv(&mut p, n_in, LATENT_CHANNELS, d[3], 3, &mut rng);
        nn::init_conv(&mut p, n3, d[3], d[2], 3, &mut rng);
        nn::init_conv(&mut p, n2, d[2], d[1], 3, &mut rng);
        nn::init_conv(&mut p, n1, d[1], d[0], 3, &mut rng);
        nn::init_conv(&mut p, n_out, d[0], 3, 3, &mut rng);
        p.insert(
            EMB_TABLE,
            Tensor::randn(&[config.domains.len(), config.emb_dim], 1.0, &mut rng),
        );
        p.insert(LATENT_MEAN, Tensor::zeros(&[1]));
        p.insert(LATENT_INV_STD, Tensor::full(&[1], 1.0));
        Ok(GeneratorState {
            config,
            backbone: p,
            adapters: ParamStore::new(),
            adapter_spec: None,
            pretrained: false,
        })
    }

    /// Names of every layer that receives a LoRA pair.
    pub fn lora_layers(&self) -> Vec<String> {
        let mut out: Vec<String> = (0..STAGES).map(enc_name).collect();
        out.push("enc.lat".into());
        for i in 0..self.config.core_blocks {
            for part in ["conv", "fs", "ft"] {
                out.push(block("core", i, part));
            }
        }
        out.push("core.last".into());
        out.extend(dec_names().iter().map(|s| s.to_string()));
        out
    }

    /// Adds zero-effect adapters; replaces any that were attached before.
    pub fn attach_adapters(&mut self, spec: AdapterSpec) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut a = ParamStore::new();
        for layer in self.lora_layers() {
            nn::init_lora(&mut a, &self.backbone, &layer, spec.lora_rank, &mut rng)?;
        }
        let first = self.backbone.require(&nn::w(FIRST_CONV))?.shape().to_vec();
        a.insert(nn::full_delta(FIRST_CONV), Tensor::zeros(&first));
        let table = self.backbone.require(EMB_TABLE)?.shape().to_vec();
        a.insert(EMB_DELTA, Tensor::zeros(&table));
        if spec.skips {
            for i in 0..STAGES {
                nn::init_zero_conv(
                    &mut a,
                    &skip_name(i),
                    self.config.enc_channels[i],
                    self.config.dec_channels[i],
                );
            }
        }
        let c = self.config.core_channels;
        match spec.branch {
            None => {}
            Some(BranchKind::Controlnet) => {
                let mut names = vec![FIRST_CONV.to_string()];
                for i in 0..self.config.core_blocks {
                    for part in ["conv", "fs", "ft"] {
                        names.push(block("core", i, part));
                    }
                }
                for n in names {
                    let to = n.replacen("core", "branch", 1);
                    a.insert(nn::w(&to), self.backbone.require(&nn::w(&n))?.clone());
                    a.insert(nn::b(&to), self.backbone.require(&nn::b(&n))?.clone());
                }
                for i in 0..self.config.core_blocks {
                    nn::init_zero_conv(&mut a, &format!("branch.zc{i}"), c, c);
                }
            }
            Some(BranchKind::Lightweight) => {
                let h = (c / 2).max(1);
                nn::init_conv(&mut a, "branch.l0", LATENT_CHANNELS, h, 3, &mut rng);
                nn::init_conv(&mut a, "branch.l1", h, h, 3, &mut rng);
                for i in 0..self.config.core_blocks {
                    nn::init_zero_conv(&mut a, &format!("branch.zc{i}"), h, c);
                }
            }
        }
        self.adapters = a;
        self.adapter_spec = Some(spec);
        Ok(())
    }

    pub fn domain_index(&self, id: &str) -> Result<usize> {
        self.config
            .domains
            .iter()
            .position(|d| d == id)
            .ok_or_else(|| Error::Unknown {
                kind: "domain",
                name: id.to_string(),
            })
    }

    /// Domain codes with their effective (adapted, `gamma = 1`) embeddings.
    pub fn domain_codes(&self) -> Result<Vec<DomainCode>> {
        let table = self.backbone.require(EMB_TABLE)?;
        let table = match self.adapters.get(EMB_DELTA) {
            Some(d) => table.zip(d, |a, b| a + b)?,
            None => table.clone(),
        };
        let e = self.config.emb_dim;
        Ok(self
            .config
            .domains
            .iter()
            .enumerate()
            .map(|(i, id)| DomainCode {
                id: id.clone(),
                index: i,
                embedding: table.data()[i * e..(i + 1) * e].to_vec(),
            })
            .collect())
    }

    pub fn scope(&self, train: Trainable) -> Scope<'_> {
        let (bb, ad) = match train {
            Trainable::Nothing => (Train::Nothing, Train::Nothing),
            Trainable::Adapters => (Train::Nothing, Train::All),
            Trainable::FirstStage => (Train::prefixes(&["enc.", "dec."]), Train::Nothing),
            Trainable::Core => (Train::prefixes(&["core.", "emb."]), Train::Nothing),
        };
        Scope::new()
            .with_mask(&self.backbone, bb)
            .with_mask(&self.adapters, ad)
    }

    pub fn backbone_param_count(&self) -> usize {
        self.backbone.num_scalars()
    }

    pub fn trainable_param_count(&self) -> usize {
        self.adapters.num_scalars()
    }

    fn latent_norm(&self) -> Result<(f64, f64)> {
        Ok((
            self.backbone.require(LATENT_MEAN)?.data()[0],
            self.backbone.require(LATENT_INV_STD)?.data()[0],
        ))
    }

    /// Sets the constants that standardize encoder latents.
    pub fn set_latent_norm(&mut self, mean: f64, std: f64) -> Result<()> {
        if !(mean.is_finite() && std.is_finite() && std > 0.0) {
            return Err(Error::Numerical(format!(
                "latent norm mean={mean} std={std}"
            )));
        }
        self.backbone.insert(LATENT_MEAN, Tensor::full(&[1], mean));
        self.backbone
            .insert(LATENT_INV_STD, Tensor::full(&[1], 1.0 / std));
        Ok(())
    }

    fn has_skips(&self) -> bool {
        self.adapter_spec.as_ref().map_or(false, |s| s.skips)
    }

    pub fn branch(&self) -> Option<BranchKind> {
        self.adapter_spec.as_ref().and_then(|s| s.branch)
    }

    /// Encoder on a `[N, 3, H, W]` batch: the standardized latent plus the four taps.
    pub fn encode_var(
        &self,
        tape: &mut Tape,
        scope: &Scope<'_>,
        x: Var,
        gamma: f64,
    ) -> Result<(Var, Vec<Var>)> {
        let s = tape.shape(x).to_vec();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::Shape(format!("encoder input {:?}", s)));
        }
        if s[2] % DOWNSAMPLE != 0 || s[3] % DOWNSAMPLE != 0 {
            return Err(Error::Shape(format!(
                "image {}x{} is not divisible by {DOWNSAMPLE}",
                s[2], s[3]
            )));
        }
        let mut taps = Vec::with_capacity(STAGES);
        let mut h = x;
        for i in 0..STAGES {
            let stride = if i == 0 { 1 } else { 2 };
            h = nn::conv(tape, scope, &enc_name(i), h, stride, gamma)?;
            h = tape.silu(h);
            taps.push(h);
        }
        let raw = nn::conv(tape, scope, "enc.lat", h, 1, gamma)?;
        let (mean, inv_std) = self.latent_norm()?;
        let centered = tape.add_scalar(raw, -mean);
        Ok((tape.scale(centered, inv_std), taps))
    }

    /// Domain embeddings for a batch, with the table delta scaled by `gamma`.
    pub fn embed(
        &self,
        tape: &mut Tape,
        scope: &Scope<'_>,
        targets: &[usize],
        gamma: f64,
    ) -> Result<Var> {
        let mut table = scope.get(tape, EMB_TABLE)?;
        if gamma != 0.0 && scope.has(EMB_DELTA) {
            let d = scope.get(tape, EMB_DELTA)?;
            let d = tape.scale(d, gamma);
            table = tape.add(table, d)?;
        }
        tape.gather_rows(table, targets)
    }

    /// Blocks shared by the core and the controlnet-style branch.
    fn core_trunk(
        &self,
        tape: &mut Tape,
        scope: &Scope<'_>,
        prefix: &str,
        input: Var,
        emb: Var,
        gamma: f64,
        residuals: Option<&[Var]>,
        mut tap: impl FnMut(&mut Tape, usize, Var) -> Result<()>,
    ) -> Result<Var> {
        let mut h = nn::conv(tape, scope, &format!("{prefix}.first"), input, 1, gamma)?;
        for i in 0..self.config.core_blocks {
            let r = tape.silu(h);
            let r = nn::conv(tape, scope, &block(prefix, i, "conv"), r, 1, gamma)?;
            let fs = nn::linear(tape, scope, &block(prefix, i, "fs"), emb, gamma)?;
            let ft = nn::linear(tape, scope, &block(prefix, i, "ft"), emb, gamma)?;
            let r = tape.film(r, fs, ft)?;
            h = tape.add(h, r)?;
            if let Some(res) = residuals {
                h = tape.add(h, res[i])?;
            }
            tap(tape, i, h)?;
        }
        Ok(h)
    }

    /// Core network: latent in, latent out, conditioned on `emb`.
    pub(crate) fn core(
        &self,
        tape: &mut Tape,
        scope: &Scope<'_>,
        input: Var,
        emb: Var,
        gamma: f64,
        residuals: Option<&[Var]>,
    ) -> Result<Var> {
        let h = self.core_trunk(
            tape,
            scope,
            "core",
            input,
            emb,
            gamma,
            residuals,
            |_, _, _| Ok(()),
        )?;
        let h = tape.silu(h);
        let out = nn::conv(tape, scope, "core.last", h, 1, gamma)?;
        tape.add(input, out)
    }

    /// Per-block residuals from the adapter branch, fed the encoded input.
    fn branch_residuals(
        &self,
        tape: &mut Tape,
        scope: &Scope<'_>,
        kind: BranchKind,
        cond: Var,
        emb: Var,
    ) -> Result<Vec<Var>> {
        let mut out = Vec::with_capacity(self.config.core_blocks);
        match kind {
            BranchKind::Controlnet => {
                self.core_trunk(tape, scope, "branch", cond, emb, 1.0, None, |tape, i, h| {
                    out.push(nn::conv(tape, scope, &format!("branch.zc{i}"), h, 1, 1.0)?);
                    Ok(())
                })?;
            }
            BranchKind::Lightweight => {
                let h = nn::conv(tape, scope, "branch.l0", cond, 1, 1.0)?;
                let h = tape.silu(h);
                let h = nn::conv(tape, scope, "branch.l1", h, 1, 1.0)?;
                let h = tape.silu(h);
                for i in 0..self.config.core_blocks {
                    out.push(nn::conv(tape, scope, &format!("branch.zc{i}"), h, 1, 1.0)?);
                }
            }
        }
        Ok(out)
    }

    /// Decoder from a standardized latent; skips are added with weight `skip_gamma`.
    pub fn decode_var(
        &self,
        tape: &mut Tape,
        scope: &Scope<'_>,
        latent: Var,
        taps: Option<&[Var]>,
        gamma: f64,
    ) -> Result<Var> {
        let (mean, inv_std) = self.latent_norm()?;
        let raw = tape.scale(latent, 1.0 / inv_std);
        let raw = tape.add_scalar(raw, mean);
        let [n_in, n3, n2, n1, n_out] = dec_names();
        let skip = |tape: &mut Tape, h: Var, i: usize| -> Result<Var> {
            match taps {
                Some(t) if gamma != 0.0 => {
                    let s = nn::conv(tape, scope, &skip_name(i), t[i], 1, 1.0)?;
                    let s = tape.scale(s, gamma);
                    tape.add(h, s)
                }
                _ => Ok(h),
            }
        };
        let mut h = nn::conv(tape, scope, n_in, raw, 1, gamma)?;
        h = tape.silu(h);
        h = skip(tape, h, 3)?;
        for (name, tap) in [(n3, 2), (n2, 1), (n1, 0)] {
            h = nn::conv(tape, scope, name, h, 1, gamma)?;
            h = tape.silu(h);
            h = tape.upsample2x(h)?;
            h = skip(tape, h, tap)?;
        }
        let out = nn::conv(tape, scope, n_out, h, 1, gamma)?;
        Ok(tape.tanh(out))
    }

    /// Full differentiable forward pass on a batch.
    ///
    /// The core sees `gamma * E(x) + (1 - gamma) * z`; with a branch attached
    /// it sees `z` and the branch sees `E(x)`. `z` may be omitted only when it
    /// has zero weight.
    pub fn forward(
        &self,
        tape: &mut Tape,
        scope: &Scope<'_>,
        x: Option<Var>,
        z: Option<Var>,
        gamma: f64,
        targets: &[usize],
    ) -> Result<Var> {
        check_gamma(gamma)?;
        let emb = self.embed(tape, scope, targets, gamma)?;
        if let Some(kind) = self.branch() {
            let x =
                x.ok_or_else(|| Error::Validation("branch forward needs an input image".into()))?;
            let z =
                z.ok_or_else(|| Error::Validation("branch forward needs a noise map".into()))?;
            let (cond, _) = self.encode_var(tape, scope, x, gamma)?;
            let res = self.branch_residuals(tape, scope, kind, cond, emb)?;
            check_latent_shape(tape, z, cond)?;
            let lat = self.core(tape, scope, z, emb, gamma, Some(&res))?;
            return self.decode_var(tape, scope, lat, None, gamma);
        }
        let (input, taps) = if gamma == 0.0 {
            let z = z.ok_or_else(|| Error::Validation("gamma = 0 needs a noise map".into()))?;
            (z, None)
        } else {
            let x = x.ok_or_else(|| Error::Validation("gamma > 0 needs an input image".into()))?;
            let (lat, taps) = self.encode_var(tape, scope, x, gamma)?;
            let input = if gamma == 1.0 {
                lat
            } else {
                let z = z.ok_or_else(|| Error::Validation("gamma < 1 needs a noise map".into()))?;
                check_latent_shape(tape, z, lat)?;
                tape.lerp(lat, z, gamma)?
            };
            (input, Some(taps))
        };
        let lat = self.core(tape, scope, input, emb, gamma, None)?;
        let taps = if self.has_skips() { taps } else { None };
        self.decode_var(tape, scope, lat, taps.as_deref(), gamma)
    }

    pub fn encode(&self, x: &TensorImage) -> Result<(LatentMap, SkipFeatures)> {
        x.check_latent_compatible()?;
        let mut tape = Tape::new();
        let scope = self.scope(Trainable::Nothing);
        let xv = tape.constant(batch1(x.tensor())?);
        let (lat, taps) = self.encode_var(&mut tape, &scope, xv, 1.0)?;
        let lat = unbatch1(tape.value(lat))?;
        let taps = taps
            .into_iter()
            .map(|t| unbatch1(tape.value(t)))
            .collect::<Result<_>>()?;
        Ok((LatentMap::new(lat)?, SkipFeatures { taps }))
    }

    pub fn translate(
        &self,
        x: &TensorImage,
        z: &LatentMap,
        gamma: f64,
        target: &str,
    ) -> Result<TensorImage> {
        check_gamma(gamma)?;
        x.check_latent_compatible()?;
        z.check_matches(x.height(), x.width())?;
        let t = self.domain_index(target)?;
        let mut tape = Tape::new();
        let scope = self.scope(Trainable::Nothing);
        let xv = tape.constant(batch1(x.tensor())?);
        let zv = tape.constant(batch1(z.tensor())?);
        let out = self.forward(&mut tape, &scope, Some(xv), Some(zv), gamma, &[t])?;
        TensorImage::clamped(unbatch1(tape.value(out))?)
    }

    /// The backbone's own sample for `(z, target)`: no input, no adapters.
    pub fn backbone_sample(&self, z: &LatentMap, target: &str) -> Result<TensorImage> {
        let t = self.domain_index(target)?;
        let mut tape = Tape::new();
        let scope = Scope::new().with(&self.backbone, false);
        let zv = tape.constant(batch1(z.tensor())?);
        let emb = self.embed(&mut tape, &scope, &[t], 0.0)?;
        let lat = self.core(&mut tape, &scope, zv, emb, 0.0, None)?;
        let out = self.decode_var(&mut tape, &scope, lat, None, 0.0)?;
        TensorImage::clamped(unbatch1(tape.value(out))?)
    }

    /// Translation through the attached adapter branch of kind `kind`.
    pub fn forward_with_adapter_branch(
        &self,
        x: &TensorImage,
        z: &LatentMap,
        target: &str,
        kind: BranchKind,
    ) -> Result<TensorImage> {
        match self.branch() {
            Some(k) if k == kind => self.translate(x, z, 1.0, target),
            Some(k) => Err(Error::Validation(format!(
                "state has a {k} branch, not {kind}"
            ))),
            None => Err(Error::Validation("state has no adapter branch".into())),
        }
    }

    /// What the skip path adds to the decoder for fixed encoder features.
    pub fn skip_contribution(&self, feats: &SkipFeatures, gamma: f64) -> Result<Vec<Tensor>> {
        check_gamma(gamma)?;
        if feats.taps.len() != STAGES {
            return Err(Error::Shape(format!(
                "expected {STAGES} skip taps, got {}",
                feats.taps.len()
            )));
        }
        let mut tape = Tape::new();
        let scope = self.scope(Trainable::Nothing);
        feats
            .taps
            .iter()
            .enumerate()
            .map(|(i, t)| {
                if !self.has_skips() {
                    let s = t.shape();
                    return Ok(Tensor::zeros(&[self.config.dec_channels[i], s[1], s[2]]));
                }
                let v = tape.constant(batch1(t)?);
                let s = nn::conv(&mut tape, &scope, &skip_name(i), v, 1, 1.0)?;
                let s = tape.scale(s, gamma);
                unbatch1(tape.value(s))
            })
            .collect()
    }
}

/// A generator bound to a parameter partition, usable by the objectives.
/// Noise maps it needs but is not given come from its own seeded stream.
pub struct GeneratorView<'a> {
    pub state: &'a GeneratorState,
    pub scope: Scope<'a>,
    noise: RefCell<ChaCha8Rng>,
}

impl<'a> GeneratorView<'a> {
    pub fn new(state: &'a GeneratorState, train: Trainable, noise_seed: u64) -> Self {
        GeneratorView {
            state,
            scope: state.scope(train),
            noise: RefCell::new(ChaCha8Rng::seed_from_u64(noise_seed)),
        }
    }

    fn needs_noise(&self, gamma: f64) -> bool {
        gamma < 1.0 || self.state.branch().is_some()
    }
}

impl Translator for GeneratorView<'_> {
    fn translate_var(
        &self,
        tape: &mut Tape,
        x: Var,
        target: &str,
        gamma: f64,
        z: Option<Var>,
    ) -> Result<Var> {
        let t = self.state.domain_index(target)?;
        let s = tape.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::Shape(format!("generator input {:?}", s)));
        }
        let z = match z {
            None if self.needs_noise(gamma) => {
                let shape = [s[0], LATENT_CHANNELS, s[2] / DOWNSAMPLE, s[3] / DOWNSAMPLE];
                let n = Tensor::randn(&shape, 1.0, &mut *self.noise.borrow_mut());
                Some(tape.constant(n))
            }
            z => z,
        };
        self.state
            .forward(tape, &self.scope, Some(x), z, gamma, &vec![t; s[0]])
    }

    fn embedding(&self, tape: &mut Tape, target: &str, n: usize) -> Result<Var> {
        let t = self.state.domain_index(target)?;
        self.state.embed(tape, &self.scope, &vec![t; n], 1.0)
    }
}

pub fn check_gamma(gamma: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Validation(format!("gamma {gamma} outside [0, 1]")));
    }
    Ok(())
}

fn check_latent_shape(tape: &Tape, z: Var, like: Var) -> Result<()> {
    if tape.shape(z) != tape.shape(like) {
        return Err(Error::Shape(format!(
            "noise map {:?} does not match latent {:?}",
            tape.shape(z),
            tape.shape(like)
        )));
    }
    Ok(())
}

fn batch1(t: &Tensor) -> Result<Tensor> {
    let mut s = vec![1];
    s.extend_from_slice(t.shape());
    t.reshape(&s)
}

fn unbatch1(t: &Tensor) -> Result<Tensor> {
    t.reshape(&t.shape()[1..])
}
