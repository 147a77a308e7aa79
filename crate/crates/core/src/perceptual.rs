//! Fixed random-feature networks and the metrics built on them: a
//! perceptual distance, a structure distance from feature self-similarity,
//! Gaussian feature statistics and the Fréchet distance between them.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{self, Scope};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::types::{batch, TensorImage};

pub const STAGES: usize = 4;
pub const STAGE_CHANNELS: [usize; STAGES] = [8, 16, 32, 32];
pub const STAGE_STRIDES: [usize; STAGES] = [2, 2, 2, 1];
/// Side length images are resized to before statistics are fitted.
pub const STATS_RESOLUTION: usize = 64;
/// Structure distances are reported multiplied by this factor.
pub const DINO_REPORT_SCALE: f64 = 100.0;
const NORM_EPS: f64 = 1e-10;

/// A four-stage convolutional pyramid with weights drawn once from `seed`.
#[derive(Clone, Debug)]
pub struct FeatureNet {
    seed: u64,
    params: ParamStore,
    /// Per-stage `(shift, scale)` per channel; features are standardized as `(f - shift) * scale`.
    norm: Vec<(Vec<f64>, Vec<f64>)>,
}

fn stage_name(s: usize) -> String {
    format!("fnet.s{s}")
}

impl FeatureNet {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut in_c = 3;
        for (s, &c) in STAGE_CHANNELS.iter().enumerate() {
            let fan_in = (in_c * 9) as f64;
            params.insert(
                nn::w(&stage_name(s)),
                Tensor::randn(&[c, in_c, 3, 3], (2.0 / fan_in).sqrt(), &mut rng),
            );
            params.insert(
                nn::b(&stage_name(s)),
                Tensor::uniform(&[c], -0.1, 0.1, &mut rng),
            );
            in_c = c;
        }
        let mut net = FeatureNet {
            seed,
            params,
            norm: Vec::new(),
        };
        net.norm = net.calibrate(&mut rng);
        net
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn pooled_dim(&self) -> usize {
        STAGE_CHANNELS.iter().sum()
    }

    /// Channel statistics over smooth random images, so standardized features
    /// are roughly zero-mean and unit-variance.
    fn calibrate(&self, rng: &mut ChaCha8Rng) -> Vec<(Vec<f64>, Vec<f64>)> {
        let n = 8;
        let side = 32;
        let mut imgs = Vec::with_capacity(n);
        for _ in 0..n {
            let coarse = Tensor::uniform(&[3, side / 4, side / 4], -1.0, 1.0, rng);
            let mut d = vec![0.0; 3 * side * side];
            for c in 0..3 {
                for y in 0..side {
                    for x in 0..side {
                        d[(c * side + y) * side + x] =
                            coarse.data()[(c * (side / 4) + y / 4) * (side / 4) + x / 4];
                    }
                }
            }
            imgs.push(Tensor::new(&[3, side, side], d).unwrap());
        }
        let x = Tensor::stack(&imgs).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let feats = self
            .raw_features(&mut tape, xv)
            .expect("calibration forward");
        feats
            .iter()
            .map(|&f| {
                let t = tape.value(f);
                let (nb, c, plane) = (t.shape()[0], t.shape()[1], t.shape()[2] * t.shape()[3]);
                let mut shift = vec![0.0; c];
                let mut scale = vec![0.0; c];
                for ch in 0..c {
                    let vals: Vec<f64> = (0..nb)
                        .flat_map(|b| {
                            t.data()[(b * c + ch) * plane..(b * c + ch + 1) * plane].to_vec()
                        })
                        .collect();
                    let m = vals.iter().sum::<f64>() / vals.len() as f64;
                    let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
                    shift[ch] = m;
                    scale[ch] = 1.0 / (v.sqrt() + 1e-3);
                }
                (shift, scale)
            })
            .collect()
    }

    fn raw_features(&self, tape: &mut Tape, x: Var) -> Result<Vec<Var>> {
        let scope = Scope::new().with(&self.params, false);
        let mut h = x;
        let mut out = Vec::with_capacity(STAGES);
        for s in 0..STAGES {
            h = nn::conv(tape, &scope, &stage_name(s), h, STAGE_STRIDES[s], 0.0)?;
            h = tape.silu(h);
            out.push(h);
        }
        Ok(out)
    }

    /// Standardized activations of all four stages for a `[N, 3, H, W]` batch.
    pub fn features(&self, tape: &mut Tape, x: Var) -> Result<Vec<Var>> {
        let raw = self.raw_features(tape, x)?;
        let n = tape.shape(x)[0];
        raw.into_iter()
            .zip(&self.norm)
            .map(|(f, (shift, scale))| {
                let c = shift.len();
                let mut sc = Vec::with_capacity(n * c);
                let mut sh = Vec::with_capacity(n * c);
                for _ in 0..n {
                    for ch in 0..c {
                        sc.push(scale[ch] - 1.0);
                        sh.push(-shift[ch] * scale[ch]);
                    }
                }
                let sv = tape.constant(Tensor::new(&[n, c], sc)?);
                let tv = tape.constant(Tensor::new(&[n, c], sh)?);
                tape.film(f, sv, tv)
            })
            .collect()
    }

    /// Spatially pooled standardized features of every stage, `[N, 88]`.
    pub fn pooled(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let feats = self.features(tape, x)?;
        let n = tape.shape(x)[0];
        let mut parts = Vec::with_capacity(STAGES);
        for f in feats {
            let m = tape.spatial_mean(f)?;
            let c = tape.shape(m)[1];
            parts.push(tape.reshape(m, &[n, c, 1, 1])?);
        }
        let cat = tape.concat_channels(&parts)?;
        tape.reshape(cat, &[n, self.pooled_dim()])
    }

    /// Perceptual distance on the tape, averaged over the batch.
    pub fn lpips_var(&self, tape: &mut Tape, x: Var, y: Var) -> Result<Var> {
        if tape.shape(x) != tape.shape(y) {
            return Err(Error::Shape(format!(
                "lpips between {:?} and {:?}",
                tape.shape(x),
                tape.shape(y)
            )));
        }
        let fx = self.features(tape, x)?;
        let fy = self.features(tape, y)?;
        let mut terms = Vec::with_capacity(STAGES);
        for (a, b) in fx.into_iter().zip(fy) {
            let c = tape.shape(a)[1] as f64;
            let na = tape.channel_normalize(a, NORM_EPS)?;
            let nb = tape.channel_normalize(b, NORM_EPS)?;
            let d = tape.sub(na, nb)?;
            let sq = tape.square(d);
            let m = tape.mean(sq);
            terms.push((m, c / STAGES as f64));
        }
        tape.weighted_sum(&terms)
    }

    /// Last-stage tokens of one image as `[C, P]`.
    pub fn final_tokens(&self, img: &TensorImage) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(batch(std::slice::from_ref(img))?);
        let feats = self.features(&mut tape, x)?;
        let t = tape.value(*feats.last().unwrap());
        let (c, plane) = (t.shape()[1], t.shape()[2] * t.shape()[3]);
        t.reshape(&[c, plane])
    }
}

/// Perceptual distance between two images: symmetric, zero for identical inputs.
pub fn lpips_like(net: &FeatureNet, x: &TensorImage, y: &TensorImage) -> Result<f64> {
    x.tensor().expect_same_shape(y.tensor())?;
    let mut tape = Tape::new();
    let xv = tape.constant(batch(std::slice::from_ref(x))?);
    let yv = tape.constant(batch(std::slice::from_ref(y))?);
    let d = net.lpips_var(&mut tape, xv, yv)?;
    Ok(tape.value(d).item().max(0.0))
}

/// Cosine self-similarity of `[C, P]` tokens, `[P, P]` row-major.
fn self_similarity(tokens: &Tensor) -> Vec<f64> {
    let (c, p) = (tokens.shape()[0], tokens.shape()[1]);
    let d = tokens.data();
    let mut unit = vec![0.0; c * p];
    for j in 0..p {
        let norm = (0..c)
            .map(|i| d[i * p + j] * d[i * p + j])
            .sum::<f64>()
            .sqrt()
            .max(1e-12);
        for i in 0..c {
            unit[j * c + i] = d[i * p + j] / norm;
        }
    }
    let mut s = vec![0.0; p * p];
    for a in 0..p {
        for b in 0..p {
            s[a * p + b] = (0..c).map(|i| unit[a * c + i] * unit[b * c + i]).sum();
        }
    }
    s
}

/// Mean absolute difference between the token self-similarity matrices of
/// `x` and `y` (multiply by [`DINO_REPORT_SCALE`] for reporting).
pub fn dino_struct_dist(net: &FeatureNet, x: &TensorImage, y: &TensorImage) -> Result<f64> {
    x.tensor().expect_same_shape(y.tensor())?;
    let sx = self_similarity(&net.final_tokens(x)?);
    let sy = self_similarity(&net.final_tokens(y)?);
    Ok(sx.iter().zip(&sy).map(|(a, b)| (a - b).abs()).sum::<f64>() / sx.len() as f64)
}

/// Gaussian moments of pooled features over an image set.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    /// Row-major `d x d`.
    pub cov: Vec<f64>,
    pub count: usize,
}

impl FeatureStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn from_features(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.len() < 2 {
            return Err(Error::Validation(format!(
                "feature statistics need at least 2 samples, got {}",
                rows.len()
            )));
        }
        let d = rows[0].len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for r in rows {
            mean.iter_mut().zip(r).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut cov = vec![0.0; d * d];
        for r in rows {
            for i in 0..d {
                let di = r[i] - mean[i];
                for j in i..d {
                    cov[i * d + j] += di * (r[j] - mean[j]);
                }
            }
        }
        for i in 0..d {
            for j in i..d {
                let v = cov[i * d + j] / (n - 1.0);
                cov[i * d + j] = v;
                cov[j * d + i] = v;
            }
        }
        Ok(FeatureStats {
            mean,
            cov,
            count: rows.len(),
        })
    }
}

/// Resizes to the statistics resolution with an antialiased bilinear filter.
pub fn resize_for_stats(img: &TensorImage) -> Result<TensorImage> {
    let r = STATS_RESOLUTION;
    if img.height() == r && img.width() == r {
        return Ok(img.clone());
    }
    let (h, w) = (img.height(), img.width());
    let plane = h * w;
    let d = img.tensor().data();
    let src = image::Rgb32FImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        image::Rgb([0, 1, 2].map(|c| d[c * plane + i] as f32))
    });
    let dst = image::imageops::resize(
        &src,
        r as u32,
        r as u32,
        image::imageops::FilterType::Triangle,
    );
    let mut out = vec![0.0; 3 * r * r];
    for (x, y, p) in dst.enumerate_pixels() {
        for c in 0..3 {
            out[c * r * r + y as usize * r + x as usize] = p.0[c] as f64;
        }
    }
    TensorImage::clamped(Tensor::new(&[3, r, r], out)?)
}

/// Pooled feature vector of every image, in input order.
pub fn pooled_features(images: &[TensorImage], net: &FeatureNet) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::with_capacity(images.len());
    for chunk in images.chunks(16) {
        let resized: Vec<TensorImage> =
            chunk.iter().map(resize_for_stats).collect::<Result<_>>()?;
        let mut tape = Tape::new();
        let x = tape.constant(batch(&resized)?);
        let p = net.pooled(&mut tape, x)?;
        let t = tape.value(p);
        let d = t.shape()[1];
        rows.extend(t.data().chunks(d).map(|r| r.to_vec()));
    }
    Ok(rows)
}

pub fn fit_stats(images: &[TensorImage], net: &FeatureNet) -> Result<FeatureStats> {
    if images.len() < 2 {
        return Err(Error::Validation(format!(
            "fit_stats needs at least 2 images, got {}",
            images.len()
        )));
    }
    FeatureStats::from_features(&pooled_features(images, net)?)
}

/// Eigenvalues below this (scaled by the largest magnitude) are a failure;
/// those between it and zero are clamped.
pub const EIG_CLAMP_TOL: f64 = 1e-8;

fn psd_sqrt(m: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(m);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        if *v < -EIG_CLAMP_TOL * scale {
            return Err(Error::Numerical(format!(
                "matrix square root: eigenvalue {} is not PSD within tolerance",
                v
            )));
        }
        *v = v.max(0.0).sqrt();
    }
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose())
}

/// `|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))`, with the trace of
/// the cross term taken as `Tr((S_a^(1/2) S_b S_a^(1/2))^(1/2))`.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    let d = a.dim();
    if b.dim() != d || a.cov.len() != d * d || b.cov.len() != d * d {
        return Err(Error::Shape(format!(
            "frechet distance between dimensions {} and {}",
            a.dim(),
            b.dim()
        )));
    }
    let ma = DVector::from_column_slice(&a.mean);
    let mb = DVector::from_column_slice(&b.mean);
    let sa = DMatrix::from_row_slice(d, d, &a.cov);
    let sb = DMatrix::from_row_slice(d, d, &b.cov);
    let root_a = psd_sqrt(sa.clone())?;
    let mut m = &root_a * &sb * &root_a;
    m = (&m + m.transpose()) * 0.5;
    let cross = psd_sqrt(m)?.trace();
    let diff = (ma - mb).norm_squared();
    Ok((diff + sa.trace() + sb.trace() - 2.0 * cross).max(0.0))
}

/// Fréchet distance between the feature distributions of two image sets.
pub fn fid(a: &[TensorImage], b: &[TensorImage], net: &FeatureNet) -> Result<f64> {
    frechet_distance(&fit_stats(a, net)?, &fit_stats(b, net)?)
}
