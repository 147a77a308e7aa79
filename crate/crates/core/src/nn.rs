//! Layer helpers over named parameters, including low-rank adapted layers.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Which parameters of a store receive gradients.
#[derive(Clone, Debug)]
pub enum Train {
    All,
    Nothing,
    /// Only names starting with one of these prefixes.
    Prefixes(Vec<String>),
}

impl Train {
    pub fn prefixes(p: &[&str]) -> Self {
        Train::Prefixes(p.iter().map(|s| s.to_string()).collect())
    }

    fn allows(&self, name: &str) -> bool {
        match self {
            Train::All => true,
            Train::Nothing => false,
            Train::Prefixes(p) => p.iter().any(|p| name.starts_with(p.as_str())),
        }
    }
}

/// An ordered set of parameter stores a forward pass may read from.
/// Lookups take the first store holding the name.
#[derive(Clone, Default)]
pub struct Scope<'a> {
    stores: Vec<(&'a ParamStore, Train)>,
}

impl<'a> Scope<'a> {
    pub fn new() -> Self {
        Scope { stores: Vec::new() }
    }

    pub fn with(self, store: &'a ParamStore, trainable: bool) -> Self {
        self.with_mask(
            store,
            if trainable {
                Train::All
            } else {
                Train::Nothing
            },
        )
    }

    pub fn with_mask(mut self, store: &'a ParamStore, mask: Train) -> Self {
        self.stores.push((store, mask));
        self
    }

    pub fn has(&self, name: &str) -> bool {
        self.stores.iter().any(|(s, _)| s.contains(name))
    }

    pub fn get(&self, tape: &mut Tape, name: &str) -> Result<Var> {
        for (s, mask) in &self.stores {
            if s.contains(name) {
                return tape.param(s, name, mask.allows(name));
            }
        }
        Err(Error::MissingParam(name.to_string()))
    }

    pub fn tensor(&self, name: &str) -> Result<&'a Tensor> {
        self.stores
            .iter()
            .find_map(|(s, _)| s.get(name))
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }
}

/// A low-rank weight delta `scale * up * down` for one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraParams {
    /// `[rank, fan_in]`
    pub down: Tensor,
    /// `[fan_out, rank]`
    pub up: Tensor,
    pub rank: usize,
    pub scale: f64,
}

impl LoraParams {
    /// Delta with a random down-projection and a zero up-projection.
    pub fn init<R: Rng + ?Sized>(
        fan_out: usize,
        fan_in: usize,
        rank: usize,
        scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let r = clamp_rank(rank, fan_out, fan_in)?;
        Ok(LoraParams {
            down: Tensor::randn(&[r, fan_in], 1.0 / (fan_in as f64).sqrt(), rng),
            up: Tensor::zeros(&[fan_out, r]),
            rank: r,
            scale,
        })
    }

    pub fn delta(&self) -> Result<Tensor> {
        let (o, r) = (self.up.shape()[0], self.up.shape()[1]);
        let (r2, i) = (self.down.shape()[0], self.down.shape()[1]);
        if r != r2 {
            return Err(Error::Shape(format!(
                "lora up {:?} vs down {:?}",
                self.up.shape(),
                self.down.shape()
            )));
        }
        let mut out = vec![0.0; o * i];
        crate::tensor::gemm(
            o,
            r,
            i,
            self.up.data(),
            r as isize,
            1,
            self.down.data(),
            i as isize,
            1,
            &mut out,
            false,
        );
        out.iter_mut().for_each(|v| *v *= self.scale);
        Tensor::new(&[o, i], out)
    }
}

/// Effective rank for a `fan_out x fan_in` layer: the requested rank capped at `min(fan_out, fan_in)`.
pub fn clamp_rank(rank: usize, fan_out: usize, fan_in: usize) -> Result<usize> {
    if rank == 0 {
        return Err(Error::Validation("lora rank must be at least 1".into()));
    }
    Ok(rank.min(fan_out).min(fan_in))
}

/// `theta0 + gamma * delta`, reshaped to `theta0`'s shape. Neither input is modified.
pub fn merge_lora(theta0: &Tensor, delta: &LoraParams, gamma: f64) -> Result<Tensor> {
    let d = delta.delta()?;
    let fan_out = theta0.shape()[0];
    if d.shape()[0] != fan_out || d.numel() != theta0.numel() {
        return Err(Error::Shape(format!(
            "lora delta {:?} does not fit weight {:?}",
            d.shape(),
            theta0.shape()
        )));
    }
    let d = d.reshape(theta0.shape())?;
    theta0.zip(&d, |w, dw| w + gamma * dw)
}

/// Parameter-name conventions for a layer called `name`.
pub fn w(name: &str) -> String {
    format!("{name}.w")
}
pub fn b(name: &str) -> String {
    format!("{name}.b")
}
pub fn lora_down(name: &str) -> String {
    format!("{name}.lora_down")
}
pub fn lora_up(name: &str) -> String {
    format!("{name}.lora_up")
}
pub fn full_delta(name: &str) -> String {
    format!("{name}.delta")
}

/// Kaiming-style init of a conv layer into `store`.
pub fn init_conv<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: &str,
    in_c: usize,
    out_c: usize,
    k: usize,
    rng: &mut R,
) {
    let fan_in = (in_c * k * k) as f64;
    store.insert(
        w(name),
        Tensor::randn(&[out_c, in_c, k, k], (1.0 / fan_in).sqrt(), rng),
    );
    store.insert(b(name), Tensor::zeros(&[out_c]));
}

pub fn init_zero_conv(store: &mut ParamStore, name: &str, in_c: usize, out_c: usize) {
    store.insert(w(name), Tensor::zeros(&[out_c, in_c, 1, 1]));
    store.insert(b(name), Tensor::zeros(&[out_c]));
}

pub fn init_linear<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: &str,
    in_f: usize,
    out_f: usize,
    std: f64,
    rng: &mut R,
) {
    store.insert(w(name), Tensor::randn(&[out_f, in_f], std, rng));
    store.insert(b(name), Tensor::zeros(&[out_f]));
}

/// Adds a LoRA pair for the weight `name.w` found in `base` into `adapters`.
pub fn init_lora<R: Rng + ?Sized>(
    adapters: &mut ParamStore,
    base: &ParamStore,
    name: &str,
    rank: usize,
    rng: &mut R,
) -> Result<()> {
    let wt = base.require(&w(name))?;
    let fan_out = wt.shape()[0];
    let fan_in = wt.numel() / fan_out;
    let p = LoraParams::init(fan_out, fan_in, rank, 1.0, rng)?;
    adapters.insert(lora_down(name), p.down);
    adapters.insert(lora_up(name), p.up);
    Ok(())
}

/// Weight of layer `name` as seen under interpolation coefficient `gamma`:
/// the base weight plus `gamma` times any LoRA or full delta present in scope.
pub fn effective_weight(tape: &mut Tape, scope: &Scope<'_>, name: &str, gamma: f64) -> Result<Var> {
    let w0 = scope.get(tape, &w(name))?;
    if gamma == 0.0 {
        return Ok(w0);
    }
    let mut out = w0;
    let (dn, up) = (lora_down(name), lora_up(name));
    if scope.has(&dn) && scope.has(&up) {
        let d = scope.get(tape, &dn)?;
        let u = scope.get(tape, &up)?;
        let prod = tape.matmul(u, d)?;
        let shape = tape.shape(w0).to_vec();
        let prod = tape.reshape(prod, &shape)?;
        let scaled = tape.scale(prod, gamma);
        out = tape.add(out, scaled)?;
    }
    let fd = full_delta(name);
    if scope.has(&fd) {
        let d = scope.get(tape, &fd)?;
        let scaled = tape.scale(d, gamma);
        out = tape.add(out, scaled)?;
    }
    Ok(out)
}

pub fn conv(
    tape: &mut Tape,
    scope: &Scope<'_>,
    name: &str,
    x: Var,
    stride: usize,
    gamma: f64,
) -> Result<Var> {
    let wv = effective_weight(tape, scope, name, gamma)?;
    let bv = scope.get(tape, &b(name))?;
    let k = tape.shape(wv)[2];
    tape.conv2d(x, wv, Some(bv), stride, k / 2)
}

pub fn linear(tape: &mut Tape, scope: &Scope<'_>, name: &str, x: Var, gamma: f64) -> Result<Var> {
    let wv = effective_weight(tape, scope, name, gamma)?;
    let bv = scope.get(tape, &b(name))?;
    tape.linear(x, wv, Some(bv))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_lora(rng: &mut ChaCha8Rng) -> (Tensor, LoraParams) {
        let theta0 = Tensor::randn(&[6, 2, 3, 3], 1.0, rng);
        let mut lora = LoraParams::init(6, 18, 4, 0.5, rng).unwrap();
        lora.up = Tensor::randn(&[6, 4], 1.0, rng);
        (theta0, lora)
    }

    #[test]
    fn merge_at_zero_returns_base() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (theta0, lora) = random_lora(&mut rng);
        assert_eq!(merge_lora(&theta0, &lora, 0.0).unwrap(), theta0);
    }

    #[test]
    fn merge_at_one_adds_full_delta() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (theta0, lora) = random_lora(&mut rng);
        let merged = merge_lora(&theta0, &lora, 1.0).unwrap();
        let want = theta0
            .zip(
                &lora.delta().unwrap().reshape(theta0.shape()).unwrap(),
                |a, b| a + b,
            )
            .unwrap();
        assert_eq!(merged, want);
    }

    #[test]
    fn merge_at_half_is_midpoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (theta0, lora) = random_lora(&mut rng);
        let lo = merge_lora(&theta0, &lora, 0.0).unwrap();
        let hi = merge_lora(&theta0, &lora, 1.0).unwrap();
        let mid = merge_lora(&theta0, &lora, 0.5).unwrap();
        let want = lo.zip(&hi, |a, b| 0.5 * (a + b)).unwrap();
        assert!(mid.max_abs_diff(&want) < 1e-6);
    }

    #[test]
    fn merge_leaves_inputs_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (theta0, lora) = random_lora(&mut rng);
        let (t_before, l_before) = (theta0.clone(), lora.clone());
        let _ = merge_lora(&theta0, &lora, 0.7).unwrap();
        assert_eq!(theta0, t_before);
        assert_eq!(lora, l_before);
    }

    #[test]
    fn merge_shape_mismatch_is_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let theta0 = Tensor::randn(&[5, 2, 3, 3], 1.0, &mut rng);
        let lora = LoraParams::init(6, 18, 4, 1.0, &mut rng).unwrap();
        assert!(merge_lora(&theta0, &lora, 1.0).is_err());
    }

    #[test]
    fn rank_is_clamped_to_layer_dims() {
        assert_eq!(clamp_rank(8, 4, 36).unwrap(), 4);
        assert_eq!(clamp_rank(8, 32, 288).unwrap(), 8);
        assert!(clamp_rank(0, 4, 4).is_err());
    }

    #[test]
    fn fresh_lora_has_zero_delta() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let lora = LoraParams::init(8, 72, 8, 1.0, &mut rng).unwrap();
        assert!(lora.delta().unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tape_merge_matches_direct_merge() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (theta0, lora) = random_lora(&mut rng);
        let mut base = ParamStore::new();
        base.insert("l.w", theta0.clone());
        base.insert("l.b", Tensor::zeros(&[6]));
        let mut ad = ParamStore::new();
        ad.insert("l.lora_down", lora.down.clone());
        ad.insert("l.lora_up", lora.up.map(|v| v * lora.scale));
        let scope = Scope::new().with(&base, false).with(&ad, true);
        let mut tape = Tape::new();
        let wv = effective_weight(&mut tape, &scope, "l", 0.3).unwrap();
        let want = merge_lora(&theta0, &lora, 0.3).unwrap();
        assert!(tape.value(wv).max_abs_diff(&want) < 1e-12);
    }
}
