//! Synthetic two-domain scenes, edge and sketch extraction, and PNG ingestion.

use std::collections::VecDeque;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::types::TensorImage;

/// Parameters of the synthetic scene generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub seed: u64,
    pub size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub domain_a: String,
    pub domain_b: String,
    /// Mean-luminance drop from domain A to domain B.
    pub luminance_offset: f64,
    /// Std of the per-pixel texture noise added to domain B.
    pub texture_noise: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            seed: 0,
            size: 64,
            min_objects: 2,
            max_objects: 4,
            domain_a: "day".into(),
            domain_b: "night".into(),
            luminance_offset: 0.6,
            texture_noise: 0.04,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Shape {
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    Circle { cx: f64, cy: f64, r: f64 },
    Triangle { pts: [(f64, f64); 3] },
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Rect { x0, y0, x1, y1 } => x >= x0 && x < x1 && y >= y0 && y < y1,
            Shape::Circle { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            Shape::Triangle { pts } => {
                let s = |a: (f64, f64), b: (f64, f64)| {
                    (b.0 - a.0) * (y - a.1) - (b.1 - a.1) * (x - a.0)
                };
                let d = [s(pts[0], pts[1]), s(pts[1], pts[2]), s(pts[2], pts[0])];
                d.iter().all(|v| *v >= 0.0) || d.iter().all(|v| *v <= 0.0)
            }
        }
    }
}

/// Per-pixel region labels shared by both renderings of a scene.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GeometryMask {
    pub size: usize,
    pub labels: Vec<u8>,
}

impl GeometryMask {
    /// Pixels whose 4-neighbourhood contains a different label.
    pub fn boundary(&self) -> Vec<bool> {
        let n = self.size;
        let mut out = vec![false; n * n];
        for y in 0..n {
            for x in 0..n {
                let l = self.labels[y * n + x];
                let diff = |xx: usize, yy: usize| self.labels[yy * n + xx] != l;
                out[y * n + x] = (x > 0 && diff(x - 1, y))
                    || (x + 1 < n && diff(x + 1, y))
                    || (y > 0 && diff(x, y - 1))
                    || (y + 1 < n && diff(x, y + 1));
            }
        }
        out
    }
}

/// One rendered scene in both domains.
#[derive(Clone, Debug)]
pub struct ScenePair {
    pub a: TensorImage,
    pub b: TensorImage,
    pub mask: GeometryMask,
}

/// The generated sets plus the index-level pairing between them.
#[derive(Clone, Debug)]
pub struct TwoDomainDataset {
    pub spec: SceneSpec,
    pub x: Vec<TensorImage>,
    pub y: Vec<TensorImage>,
    pub masks: Vec<GeometryMask>,
    /// `paired[i] = j` means `x[i]` and `y[j]` share geometry.
    pub paired: Vec<usize>,
}

const DAY_PALETTE: [[f64; 3]; 6] = [
    [0.85, 0.25, 0.15],
    [0.20, 0.70, 0.25],
    [0.90, 0.80, 0.20],
    [0.70, 0.30, 0.80],
    [0.25, 0.50, 0.90],
    [0.90, 0.55, 0.30],
];

/// Zero-luminance tint applied to the second domain.
const NIGHT_TINT: [f64; 3] = [-0.08, -0.02, 0.31];

fn render_scene(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> ScenePair {
    let n = spec.size;
    let nf = n as f64;
    let horizon = rng.gen_range(0.35..0.65) * nf;
    let count = rng.gen_range(spec.min_objects..=spec.max_objects.max(spec.min_objects));
    let mut shapes = Vec::with_capacity(count);
    let mut colors = Vec::with_capacity(count);
    for _ in 0..count {
        let cx = rng.gen_range(0.15..0.85) * nf;
        let cy = rng.gen_range(0.2..0.85) * nf;
        let s = rng.gen_range(0.08..0.22) * nf;
        let shape = match rng.gen_range(0..3) {
            0 => Shape::Rect {
                x0: cx - s,
                y0: cy - s * rng.gen_range(0.5..1.5),
                x1: cx + s,
                y1: cy + s * rng.gen_range(0.5..1.5),
            },
            1 => Shape::Circle { cx, cy, r: s },
            _ => Shape::Triangle {
                pts: [
                    (cx, cy - 1.3 * s),
                    (cx - 1.2 * s, cy + s),
                    (cx + 1.2 * s, cy + s),
                ],
            },
        };
        shapes.push(shape);
        colors.push(DAY_PALETTE[rng.gen_range(0..DAY_PALETTE.len())]);
    }
    let sky_top = [0.35, 0.60, 0.95];
    let sky_bottom = [0.75, 0.85, 0.98];
    let ground = [0.30, 0.45, 0.20];

    // Day pixels live in [-1 + reserve, 1] so the night shift rarely clips.
    let reserve = (spec.luminance_offset + 0.25).min(1.0);
    let mut labels = vec![0u8; n * n];
    let mut a = vec![0.0; 3 * n * n];
    for y in 0..n {
        for x in 0..n {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut label = if fy < horizon { 0u8 } else { 1u8 };
            let mut rgb = if label == 0 {
                let t = fy / horizon;
                [0, 1, 2].map(|c| sky_top[c] * (1.0 - t) + sky_bottom[c] * t)
            } else {
                let t = (fy - horizon) / (nf - horizon);
                [0, 1, 2].map(|c| ground[c] * (1.0 - 0.3 * t))
            };
            for (k, s) in shapes.iter().enumerate() {
                if s.contains(fx, fy) {
                    label = 2 + k as u8;
                    let shade = 1.0 - 0.25 * (fy / nf);
                    rgb = colors[k].map(|c| c * shade);
                }
            }
            labels[y * n + x] = label;
            for c in 0..3 {
                a[c * n * n + y * n + x] = rgb[c] * (2.0 - reserve) - 1.0 + reserve;
            }
        }
    }
    // Domain B: same geometry, darker, tinted, with texture noise.
    let mut b = a.clone();
    for i in 0..n * n {
        let noise: f64 = spec.texture_noise * rng.sample::<f64, _>(StandardNormal);
        for c in 0..3 {
            let v = a[c * n * n + i] - spec.luminance_offset + NIGHT_TINT[c] + noise;
            b[c * n * n + i] = v.clamp(-1.0, 1.0);
        }
    }
    ScenePair {
        a: TensorImage::new(Tensor::new(&[3, n, n], a).expect("scene shape")).expect("scene range"),
        b: TensorImage::new(Tensor::new(&[3, n, n], b).expect("scene shape")).expect("scene range"),
        mask: GeometryMask { size: n, labels },
    }
}

/// Renders `n` scenes in both domains. Scene `i` depends only on `(spec, i)`.
pub fn gen_two_domain_dataset(n: usize, spec: &SceneSpec) -> Result<TwoDomainDataset> {
    if n < 1 {
        return Err(Error::Validation("dataset needs at least one scene".into()));
    }
    if spec.size == 0 || spec.min_objects > spec.max_objects {
        return Err(Error::Validation(format!("invalid scene spec {:?}", spec)));
    }
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let mut masks = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng =
            ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(0x9E3779B97F4A7C15) ^ i as u64);
        let pair = render_scene(spec, &mut rng);
        x.push(pair.a);
        y.push(pair.b);
        masks.push(pair.mask);
    }
    Ok(TwoDomainDataset {
        spec: spec.clone(),
        x,
        y,
        masks,
        paired: (0..n).collect(),
    })
}

impl TwoDomainDataset {
    /// Splits off the last `held_out` scenes for evaluation.
    pub fn split(&self, held_out: usize) -> Result<(TwoDomainDataset, TwoDomainDataset)> {
        let n = self.x.len();
        if held_out == 0 || held_out >= n {
            return Err(Error::Validation(format!(
                "cannot hold out {} of {} scenes",
                held_out, n
            )));
        }
        let cut = n - held_out;
        let part = |r: std::ops::Range<usize>| TwoDomainDataset {
            spec: self.spec.clone(),
            x: self.x[r.clone()].to_vec(),
            y: self.y[r.clone()].to_vec(),
            masks: self.masks[r.clone()].to_vec(),
            paired: (0..r.len()).collect(),
        };
        Ok((part(0..cut), part(cut..n)))
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// Seeded subset of `size` scenes, always the same for the same seed.
    pub fn subset(&self, size: usize, seed: u64) -> Result<TwoDomainDataset> {
        if size == 0 || size > self.len() {
            return Err(Error::Validation(format!(
                "subset of {} requested from {} scenes",
                size,
                self.len()
            )));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        if size < self.len() {
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            idx.truncate(size);
            idx.sort_unstable();
        }
        Ok(TwoDomainDataset {
            spec: self.spec.clone(),
            x: idx.iter().map(|&i| self.x[i].clone()).collect(),
            y: idx.iter().map(|&i| self.y[i].clone()).collect(),
            masks: idx.iter().map(|&i| self.masks[i].clone()).collect(),
            paired: (0..size).collect(),
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub size: usize,
    pub domains: Vec<String>,
    pub counts: Vec<usize>,
    pub spec: SceneSpec,
}

/// Writes `<root>/<domain>/<index>.png` for both domains plus `manifest.json`.
pub fn write_dataset(ds: &TwoDomainDataset, root: &Path) -> Result<DatasetManifest> {
    for (domain, images) in [(&ds.spec.domain_a, &ds.x), (&ds.spec.domain_b, &ds.y)] {
        let dir = root.join(domain);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (i, img) in images.iter().enumerate() {
            img.save_png(&dir.join(format!("{i:05}.png")))?;
        }
    }
    let manifest = DatasetManifest {
        seed: ds.spec.seed,
        size: ds.spec.size,
        domains: vec![ds.spec.domain_a.clone(), ds.spec.domain_b.clone()],
        counts: vec![ds.x.len(), ds.y.len()],
        spec: ds.spec.clone(),
    };
    let path = root.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(root: &Path) -> Result<DatasetManifest> {
    let path = root.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Threshold and morphology ranges for edge and sketch extraction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EdgeConfig {
    /// Range the low hysteresis threshold is drawn from (gradient-magnitude units).
    pub low: (f64, f64),
    /// Range the high hysteresis threshold is drawn from.
    pub high: (f64, f64),
    pub nms: bool,
    pub blur_sigma: f64,
    /// Candidate structuring-element sizes for sketch morphology; 1 is a no-op.
    pub morph_kernels: Vec<usize>,
}

impl Default for EdgeConfig {
    fn default() -> Self {
        EdgeConfig {
            low: (0.02, 0.04),
            high: (0.05, 0.1),
            nms: true,
            blur_sigma: 1.0,
            morph_kernels: vec![1, 3],
        }
    }
}

impl EdgeConfig {
    fn validate(&self) -> Result<()> {
        let ok = |r: (f64, f64)| r.0.is_finite() && r.1.is_finite() && r.0 >= 0.0 && r.0 <= r.1;
        if !ok(self.low) || !ok(self.high) || self.low.0 >= self.high.1 {
            return Err(Error::Validation(format!(
                "edge thresholds {:?}/{:?} admit no low < high pair",
                self.low, self.high
            )));
        }
        if self.morph_kernels.iter().any(|&k| k == 0 || k % 2 == 0) {
            return Err(Error::Validation(
                "morphology kernels must be odd and positive".into(),
            ));
        }
        Ok(())
    }

    /// Samples `(low, high)` with `low < high`, resampling degenerate draws.
    pub fn sample_thresholds<R: Rng + ?Sized>(&self, rng: &mut R) -> (f64, f64) {
        let draw = |r: (f64, f64), rng: &mut R| {
            if r.0 == r.1 {
                r.0
            } else {
                rng.gen_range(r.0..r.1)
            }
        };
        loop {
            let lo = draw(self.low, rng);
            let hi = draw(self.high, rng);
            if lo < hi {
                return (lo, hi);
            }
        }
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let r = (2.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

fn at(map: &[f64], h: usize, w: usize, y: isize, x: isize) -> f64 {
    let yy = y.clamp(0, h as isize - 1) as usize;
    let xx = x.clamp(0, w as isize - 1) as usize;
    map[yy * w + xx]
}

/// Separable Gaussian blur with replicated borders.
pub fn blur(map: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * at(map, h, w, y as isize, x as isize + i as isize - r))
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * at(&tmp, h, w, y as isize + i as isize - r, x as isize))
                .sum();
        }
    }
    out
}

/// Sobel gradients `(gx, gy)` with replicated borders, scaled by 1/8.
fn sobel(map: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let p = |dy: isize, dx: isize| at(map, h, w, y + dy, x + dx);
            let i = y as usize * w + x as usize;
            gx[i] =
                (p(-1, 1) + 2.0 * p(0, 1) + p(1, 1) - p(-1, -1) - 2.0 * p(0, -1) - p(1, -1)) / 8.0;
            gy[i] =
                (p(1, -1) + 2.0 * p(1, 0) + p(1, 1) - p(-1, -1) - 2.0 * p(-1, 0) - p(-1, 1)) / 8.0;
        }
    }
    (gx, gy)
}

/// Keeps pixels whose magnitude is not below either neighbour along the
/// quantized gradient direction.
fn non_max_suppress(mag: &[f64], gx: &[f64], gy: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            let m = mag[i];
            if m == 0.0 {
                continue;
            }
            let angle = gy[i].atan2(gx[i]).to_degrees().rem_euclid(180.0);
            let (dy, dx) = if !(22.5..157.5).contains(&angle) {
                (0, 1)
            } else if angle < 67.5 {
                (1, 1)
            } else if angle < 112.5 {
                (1, 0)
            } else {
                (1, -1)
            };
            let n1 = at(mag, h, w, y + dy, x + dx);
            let n2 = at(mag, h, w, y - dy, x - dx);
            if m >= n1 && m >= n2 {
                out[i] = m;
            }
        }
    }
    out
}

fn gradient_magnitude(img: &TensorImage, sigma: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (h, w) = (img.height(), img.width());
    let lum = blur(&img.luminance(), h, w, sigma);
    let (gx, gy) = sobel(&lum, h, w);
    let mag = gx
        .iter()
        .zip(&gy)
        .map(|(a, b)| (a * a + b * b).sqrt())
        .collect();
    (mag, gx, gy)
}

/// A binary `H x W` edge map (values 0 or 1), row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl EdgeMap {
    pub fn coverage(&self, threshold: f64) -> f64 {
        self.values.iter().filter(|v| **v > threshold).count() as f64 / self.values.len() as f64
    }

    pub fn to_image(&self) -> Result<TensorImage> {
        TensorImage::from_gray01(&self.values, self.height, self.width)
    }
}

/// Canny-style edges: blur, Sobel, optional non-maximum suppression, and
/// hysteresis with thresholds drawn from `cfg` under `seed`.
pub fn extract_edges(img: &TensorImage, cfg: &EdgeConfig, seed: u64) -> Result<EdgeMap> {
    cfg.validate()?;
    let (h, w) = (img.height(), img.width());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (low, high) = cfg.sample_thresholds(&mut rng);
    let (mag, gx, gy) = gradient_magnitude(img, cfg.blur_sigma);
    let thin = if cfg.nms {
        non_max_suppress(&mag, &gx, &gy, h, w)
    } else {
        mag
    };
    let mut out = vec![0.0; h * w];
    let mut queue = VecDeque::new();
    for (i, &m) in thin.iter().enumerate() {
        if m > high {
            out[i] = 1.0;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        let (y, x) = ((i / w) as isize, (i % w) as isize);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (yy, xx) = (y + dy, x + dx);
                if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                    continue;
                }
                let j = yy as usize * w + xx as usize;
                if out[j] == 0.0 && thin[j] > low {
                    out[j] = 1.0;
                    queue.push_back(j);
                }
            }
        }
    }
    Ok(EdgeMap {
        height: h,
        width: w,
        values: out,
    })
}

/// Grey-scale dilation with a `k x k` square element.
pub fn dilate(map: &[f64], h: usize, w: usize, k: usize) -> Vec<f64> {
    morph(map, h, w, k, f64::max, f64::NEG_INFINITY)
}

/// Grey-scale erosion with a `k x k` square element.
pub fn erode(map: &[f64], h: usize, w: usize, k: usize) -> Vec<f64> {
    morph(map, h, w, k, f64::min, f64::INFINITY)
}

fn morph(map: &[f64], h: usize, w: usize, k: usize, f: fn(f64, f64) -> f64, init: f64) -> Vec<f64> {
    let r = (k / 2) as isize;
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut acc = init;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (yy, xx) = (y + dy, x + dx);
                    if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                        continue;
                    }
                    acc = f(acc, map[yy as usize * w + xx as usize]);
                }
            }
            out[y as usize * w + x as usize] = acc;
        }
    }
    out
}

/// Soft sketch in `[0, 1]`: a saturating soft-edge response with optional
/// thinning, followed by a random dilation or erosion.
pub fn synth_sketch(img: &TensorImage, cfg: &EdgeConfig, seed: u64) -> Result<EdgeMap> {
    synth_sketch_with(img, cfg, seed, None)
}

/// [`synth_sketch`] with the morphology kernel pinned instead of sampled.
pub fn synth_sketch_with(
    img: &TensorImage,
    cfg: &EdgeConfig,
    seed: u64,
    kernel: Option<usize>,
) -> Result<EdgeMap> {
    cfg.validate()?;
    let (h, w) = (img.height(), img.width());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (low, high) = cfg.sample_thresholds(&mut rng);
    let (mag, gx, gy) = gradient_magnitude(img, cfg.blur_sigma);
    let thin = if cfg.nms {
        non_max_suppress(&mag, &gx, &gy, h, w)
    } else {
        mag
    };
    let soft: Vec<f64> = thin
        .iter()
        .map(|&m| {
            if m <= low {
                0.0
            } else {
                ((m - low) / (high - low)).tanh()
            }
        })
        .collect();
    let k = match kernel {
        Some(k) => k,
        None => *cfg.morph_kernels.choose(&mut rng).unwrap_or(&1),
    };
    let values = if k <= 1 {
        soft
    } else if rng.gen_bool(0.75) || kernel.is_some() {
        dilate(&soft, h, w, k)
    } else {
        erode(&soft, h, w, k)
    };
    Ok(EdgeMap {
        height: h,
        width: w,
        values,
    })
}

fn resize(img: &image::RgbImage, w: u32, h: u32) -> image::RgbImage {
    if img.width() == w && img.height() == h {
        return img.clone();
    }
    image::imageops::resize(img, w, h, image::imageops::FilterType::Triangle)
}

/// One image produced by [`ingest`], with its source and crop offset.
#[derive(Clone, Debug)]
pub struct IngestedImage {
    pub path: PathBuf,
    pub offset: (usize, usize),
    pub image: TensorImage,
}

/// Reads every PNG in `folder` (sorted by name).
///
/// Train mode resizes to `load_size` and takes a seeded random `crop_size`
/// crop; eval mode resizes straight to `crop_size`. Unreadable files are
/// skipped with a warning.
pub fn ingest(
    folder: &Path,
    train_mode: bool,
    load_size: usize,
    crop_size: usize,
    seed: u64,
) -> Result<impl Iterator<Item = IngestedImage>> {
    if train_mode && crop_size > load_size {
        return Err(Error::Validation(format!(
            "crop {} larger than load size {}",
            crop_size, load_size
        )));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(folder)
        .map_err(|e| Error::io(folder, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .map_or(false, |e| e.eq_ignore_ascii_case("png"))
        })
        .collect();
    if files.is_empty() {
        return Err(Error::Validation(format!(
            "no PNG images in {}",
            folder.display()
        )));
    }
    files.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(files.into_iter().filter_map(move |path| {
        let offset = if train_mode {
            crop_offset(load_size, crop_size, &mut rng)
        } else {
            (0, 0)
        };
        let img = match image::open(&path) {
            Ok(i) => i.to_rgb8(),
            Err(e) => {
                log::warn!("skipping unreadable image {}: {}", path.display(), e);
                return None;
            }
        };
        let out = if train_mode {
            let loaded = resize(&img, load_size as u32, load_size as u32);
            image::imageops::crop_imm(
                &loaded,
                offset.1 as u32,
                offset.0 as u32,
                crop_size as u32,
                crop_size as u32,
            )
            .to_image()
        } else {
            resize(&img, crop_size as u32, crop_size as u32)
        };
        let image = TensorImage::from_rgb8(&out).ok()?;
        Some(IngestedImage {
            path,
            offset,
            image,
        })
    }))
}

/// Top-left `(row, col)` of a random crop that lies fully inside the loaded image.
pub fn crop_offset<R: Rng + ?Sized>(
    load_size: usize,
    crop_size: usize,
    rng: &mut R,
) -> (usize, usize) {
    let span = load_size - crop_size;
    (rng.gen_range(0..=span), rng.gen_range(0..=span))
}

/// Every `*.png` directly inside `dir`, in file-name order.
pub fn read_images(dir: &Path) -> Result<Vec<TensorImage>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    paths.iter().map(|p| TensorImage::load_png(p)).collect()
}

/// Edge-map inputs paired with their source images, for paired training.
pub fn edge_pairs(
    images: &[TensorImage],
    cfg: &EdgeConfig,
    seed: u64,
) -> Result<Vec<(TensorImage, TensorImage)>> {
    images
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let e = extract_edges(img, cfg, seed.wrapping_add(i as u64))?;
            Ok((e.to_image()?, img.clone()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step_image(n: usize, col: usize) -> TensorImage {
        let mut d = vec![0.0; 3 * n * n];
        for c in 0..3 {
            for y in 0..n {
                for x in 0..n {
                    d[c * n * n + y * n + x] = if x < col { -1.0 } else { 1.0 };
                }
            }
        }
        TensorImage::new(Tensor::new(&[3, n, n], d).unwrap()).unwrap()
    }

    #[test]
    fn same_seed_same_dataset() {
        let spec = SceneSpec::default();
        let a = gen_two_domain_dataset(4, &spec).unwrap();
        let b = gen_two_domain_dataset(4, &spec).unwrap();
        assert_eq!(a.x, b.x);
        assert_eq!(a.y, b.y);
        assert_eq!(a.masks, b.masks);
    }

    #[test]
    fn single_scene_dataset() {
        let ds = gen_two_domain_dataset(1, &SceneSpec::default()).unwrap();
        assert_eq!((ds.x.len(), ds.y.len()), (1, 1));
        assert!(gen_two_domain_dataset(0, &SceneSpec::default()).is_err());
    }

    #[test]
    fn domains_share_geometry_but_not_luminance() {
        let spec = SceneSpec {
            seed: 9,
            ..SceneSpec::default()
        };
        let ds = gen_two_domain_dataset(6, &spec).unwrap();
        for i in 0..6 {
            // Re-derive both masks from the rendered pixels: label-constant
            // regions must coincide.
            let boundary = ds.masks[i].boundary();
            let diff = ds.x[i].mean_luminance() - ds.y[i].mean_luminance();
            assert!(
                (diff - spec.luminance_offset).abs() < 0.02,
                "scene {i}: luminance gap {diff}"
            );
            assert!(boundary.iter().any(|b| *b));
        }
    }

    #[test]
    fn constant_image_has_no_edges() {
        let img = TensorImage::filled(32, 32, [0.3, -0.2, 0.1]).unwrap();
        let e = extract_edges(&img, &EdgeConfig::default(), 1).unwrap();
        assert!(e.values.iter().all(|v| *v == 0.0));
        let s = synth_sketch(&img, &EdgeConfig::default(), 1).unwrap();
        assert!(s.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn vertical_step_gives_narrow_band() {
        let img = step_image(32, 16);
        let e = extract_edges(&img, &EdgeConfig::default(), 4).unwrap();
        let cols: Vec<usize> = (0..32)
            .filter(|&x| (0..32).any(|y| e.values[y * 32 + x] > 0.0))
            .collect();
        assert!(
            !cols.is_empty() && cols.len() <= 2,
            "edge columns {:?}",
            cols
        );
        assert!(cols.iter().all(|&c| c == 15 || c == 16));
        for &c in &cols {
            assert!((0..32).all(|y| e.values[y * 32 + c] == 1.0));
        }
    }

    #[test]
    fn edges_are_seed_deterministic() {
        let ds = gen_two_domain_dataset(1, &SceneSpec::default()).unwrap();
        let cfg = EdgeConfig::default();
        assert_eq!(
            extract_edges(&ds.x[0], &cfg, 5).unwrap(),
            extract_edges(&ds.x[0], &cfg, 5).unwrap()
        );
        assert_eq!(
            synth_sketch(&ds.x[0], &cfg, 5).unwrap(),
            synth_sketch(&ds.x[0], &cfg, 5).unwrap()
        );
    }

    #[test]
    fn degenerate_threshold_ranges_resample() {
        let cfg = EdgeConfig {
            low: (0.1, 0.5),
            high: (0.2, 0.6),
            ..EdgeConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let (lo, hi) = cfg.sample_thresholds(&mut rng);
            assert!(lo < hi);
        }
        let bad = EdgeConfig {
            low: (0.5, 0.6),
            high: (0.1, 0.2),
            ..EdgeConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn dilation_never_shrinks_strokes() {
        let ds = gen_two_domain_dataset(3, &SceneSpec::default()).unwrap();
        let cfg = EdgeConfig::default();
        for (i, img) in ds.x.iter().enumerate() {
            let thin = synth_sketch_with(img, &cfg, i as u64, Some(1)).unwrap();
            let thick = synth_sketch_with(img, &cfg, i as u64, Some(3)).unwrap();
            assert!(thick.coverage(0.5) >= thin.coverage(0.5));
            assert!(thick.values.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn default_thresholds_find_scene_edges() {
        let ds = gen_two_domain_dataset(4, &SceneSpec::default()).unwrap();
        for (i, img) in ds.x.iter().chain(&ds.y).enumerate() {
            let c = extract_edges(img, &EdgeConfig::default(), i as u64)
                .unwrap()
                .coverage(0.5);
            assert!(c > 0.01 && c < 0.1, "image {i}: coverage {c}");
        }
    }

    #[test]
    fn edges_hug_geometry_boundaries() {
        let ds = gen_two_domain_dataset(4, &SceneSpec::default()).unwrap();
        let cfg = EdgeConfig::default();
        for (i, img) in ds.x.iter().enumerate() {
            let n = img.height();
            let near = dilate(
                &ds.masks[i]
                    .boundary()
                    .iter()
                    .map(|b| if *b { 1.0 } else { 0.0 })
                    .collect::<Vec<_>>(),
                n,
                n,
                5,
            );
            let e = extract_edges(img, &cfg, i as u64).unwrap();
            for (p, v) in e.values.iter().enumerate() {
                if *v > 0.0 {
                    assert!(near[p] > 0.0, "scene {i}: edge pixel {p} far from geometry");
                }
            }
        }
    }

    #[test]
    fn crops_stay_inside() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let (r, c) = crop_offset(286, 256, &mut rng);
            assert!(r + 256 <= 286 && c + 256 <= 286);
        }
    }

    #[test]
    fn subset_is_seed_stable() {
        let ds = gen_two_domain_dataset(12, &SceneSpec::default()).unwrap();
        let a = ds.subset(5, 3).unwrap();
        let b = ds.subset(5, 3).unwrap();
        assert_eq!(a.x, b.x);
        assert!(ds.subset(13, 3).is_err());
        assert_eq!(ds.subset(12, 3).unwrap().x, ds.x);
    }
}
