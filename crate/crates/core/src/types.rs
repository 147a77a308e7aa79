//! Image and latent containers shared by every module.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Total spatial downsampling between an image and its latent.
pub const DOWNSAMPLE: usize = 8;
pub const LATENT_CHANNELS: usize = 4;

/// An RGB image with values in `[-1, 1]`, stored channel-major as `[3, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorImage {
    data: Tensor,
}

impl TensorImage {
    /// Wraps a `[3, H, W]` tensor, rejecting non-finite or out-of-range values.
    pub fn new(data: Tensor) -> Result<Self> {
        let s = data.shape();
        if s.len() != 3 || s[0] != 3 || s[1] == 0 || s[2] == 0 {
            return Err(Error::Shape(format!(
                "image tensor must be [3, H, W], got {:?}",
                s
            )));
        }
        if !data.all_finite() {
            return Err(Error::Validation("image contains non-finite values".into()));
        }
        if data.data().iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(Error::Validation("image values must lie in [-1, 1]".into()));
        }
        Ok(TensorImage { data })
    }

    /// Like [`TensorImage::new`] but clamps into `[-1, 1]` instead of rejecting.
    pub fn clamped(data: Tensor) -> Result<Self> {
        if !data.all_finite() {
            return Err(Error::Validation("image contains non-finite values".into()));
        }
        TensorImage::new(data.map(|v| v.clamp(-1.0, 1.0)))
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Result<Self> {
        let mut data = Vec::with_capacity(3 * height * width);
        for c in rgb {
            data.extend(std::iter::repeat(c).take(height * width));
        }
        TensorImage::new(Tensor::new(&[3, height, width], data)?)
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data.data()[(c * self.height() + y) * self.width() + x]
    }

    /// Errors unless both sides are multiples of the latent downsampling factor.
    pub fn check_latent_compatible(&self) -> Result<()> {
        if self.height() % DOWNSAMPLE != 0 || self.width() % DOWNSAMPLE != 0 {
            return Err(Error::Shape(format!(
                "image {}x{} is not divisible by {}",
                self.height(),
                self.width(),
                DOWNSAMPLE
            )));
        }
        Ok(())
    }

    /// Rec. 601 luminance per pixel, `[H * W]`.
    pub fn luminance(&self) -> Vec<f64> {
        let plane = self.height() * self.width();
        let d = self.data.data();
        (0..plane)
            .map(|i| 0.299 * d[i] + 0.587 * d[plane + i] + 0.114 * d[2 * plane + i])
            .collect()
    }

    pub fn mean_luminance(&self) -> f64 {
        let l = self.luminance();
        l.iter().sum::<f64>() / l.len() as f64
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let (h, w) = (self.height(), self.width());
        let plane = h * w;
        let d = self.data.data();
        image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let i = y as usize * w + x as usize;
            image::Rgb([0, 1, 2].map(|c| to_u8(d[c * plane + i])))
        })
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Result<Self> {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let plane = h * w;
        let mut data = vec![0.0; 3 * plane];
        for (x, y, p) in img.enumerate_pixels() {
            let i = y as usize * w + x as usize;
            for c in 0..3 {
                data[c * plane + i] = from_u8(p.0[c]);
            }
        }
        TensorImage::new(Tensor::new(&[3, h, w], data)?)
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = std::io::Cursor::new(Vec::new());
        self.to_rgb8().write_to(&mut buf, image::ImageFormat::Png)?;
        Ok(buf.into_inner())
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?;
        TensorImage::from_rgb8(&img.to_rgb8())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save(path)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?;
        TensorImage::from_rgb8(&img.to_rgb8())
    }

    /// A single-channel map in `[0, 1]` rendered as a grey image in `[-1, 1]`.
    pub fn from_gray01(map: &[f64], height: usize, width: usize) -> Result<Self> {
        if map.len() != height * width {
            return Err(Error::Shape(format!(
                "map of {} values for {}x{}",
                map.len(),
                height,
                width
            )));
        }
        let mut data = Vec::with_capacity(3 * map.len());
        for _ in 0..3 {
            data.extend(map.iter().map(|v| (2.0 * v - 1.0).clamp(-1.0, 1.0)));
        }
        TensorImage::new(Tensor::new(&[3, height, width], data)?)
    }
}

pub fn to_u8(v: f64) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round()) as u8
}

pub fn from_u8(v: u8) -> f64 {
    v as f64 / 127.5 - 1.0
}

/// Stacks images into an `[N, 3, H, W]` batch.
pub fn batch(images: &[TensorImage]) -> Result<Tensor> {
    let ts: Vec<Tensor> = images.iter().map(|i| i.data.clone()).collect();
    Tensor::stack(&ts)
}

/// Splits an `[N, 3, H, W]` batch back into images, clamping into range.
pub fn unbatch(t: &Tensor) -> Result<Vec<TensorImage>> {
    if t.shape().len() != 4 {
        return Err(Error::Shape(format!(
            "expected [N, 3, H, W], got {:?}",
            t.shape()
        )));
    }
    (0..t.shape()[0])
        .map(|i| TensorImage::clamped(t.index0(i)))
        .collect()
}

/// A `[4, H/8, W/8]` latent, also the shape of the noise map.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentMap {
    data: Tensor,
}

impl LatentMap {
    pub fn new(data: Tensor) -> Result<Self> {
        let s = data.shape();
        if s.len() != 3 || s[0] != LATENT_CHANNELS {
            return Err(Error::Shape(format!(
                "latent must be [{}, h, w], got {:?}",
                LATENT_CHANNELS, s
            )));
        }
        if !data.all_finite() {
            return Err(Error::Validation(
                "latent contains non-finite values".into(),
            ));
        }
        Ok(LatentMap { data })
    }

    /// Standard-normal noise shaped like the latent of an `height x width` image.
    pub fn noise<R: rand::Rng + ?Sized>(height: usize, width: usize, rng: &mut R) -> Self {
        LatentMap {
            data: Tensor::randn(
                &[LATENT_CHANNELS, height / DOWNSAMPLE, width / DOWNSAMPLE],
                1.0,
                rng,
            ),
        }
    }

    pub fn seeded_noise(height: usize, width: usize, seed: u64) -> Self {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Self::noise(height, width, &mut rng)
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    /// Errors unless this latent matches an `height x width` image.
    pub fn check_matches(&self, height: usize, width: usize) -> Result<()> {
        if self.height() * DOWNSAMPLE != height || self.width() * DOWNSAMPLE != width {
            return Err(Error::Shape(format!(
                "latent {}x{} does not match image {}x{}",
                self.height(),
                self.width(),
                height,
                width
            )));
        }
        Ok(())
    }
}

pub fn psnr(a: &TensorImage, b: &TensorImage) -> Result<f64> {
    a.tensor().expect_same_shape(b.tensor())?;
    let mse = a
        .tensor()
        .data()
        .iter()
        .zip(b.tensor().data())
        .map(|(x, y)| {
            let d = (x - y) / 2.0;
            d * d
        })
        .sum::<f64>()
        / a.tensor().numel() as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_images() {
        assert!(TensorImage::new(Tensor::zeros(&[2, 4, 4])).is_err());
        assert!(TensorImage::new(Tensor::full(&[3, 4, 4], 1.5)).is_err());
        assert!(TensorImage::new(Tensor::full(&[3, 4, 4], f64::NAN)).is_err());
        assert!(TensorImage::clamped(Tensor::full(&[3, 4, 4], 1.5)).is_ok());
    }

    #[test]
    fn png_round_trip_within_quantization() {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(5);
        let t = Tensor::uniform(&[3, 8, 8], -1.0, 1.0, &mut rng);
        let img = TensorImage::new(t).unwrap();
        let back = TensorImage::from_png_bytes(&img.to_png_bytes().unwrap()).unwrap();
        assert!(img.tensor().max_abs_diff(back.tensor()) <= 1.0 / 127.5 / 2.0 + 1e-12);
    }

    #[test]
    fn latent_compatibility() {
        assert!(TensorImage::filled(64, 64, [0.0; 3])
            .unwrap()
            .check_latent_compatible()
            .is_ok());
        assert!(TensorImage::filled(63, 63, [0.0; 3])
            .unwrap()
            .check_latent_compatible()
            .is_err());
    }

    #[test]
    fn psnr_of_identical_is_infinite() {
        let a = TensorImage::filled(8, 8, [0.1, 0.2, 0.3]).unwrap();
        assert!(psnr(&a, &a).unwrap().is_infinite());
    }
}
