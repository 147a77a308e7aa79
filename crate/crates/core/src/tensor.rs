//! Dense row-major f64 tensors and the raw kernels the autograd tape is built on.
//!
//! Image batches use NCHW layout throughout the crate.

use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::StandardNormal;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.expect_same_shape(other)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn expect_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::Shape("cannot stack zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            first.expect_same_shape(t)?;
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Tensor::new(&shape, data)
    }

    /// Concatenates along the leading axis.
    pub fn cat0(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::Shape("cannot concatenate zero tensors".into()))?;
        let tail = &first.shape[1..];
        let mut rows = 0;
        let mut data = Vec::new();
        for t in items {
            if &t.shape[1..] != tail {
                return Err(Error::Shape(format!(
                    "cannot concatenate {:?} with {:?}",
                    first.shape, t.shape
                )));
            }
            rows += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(tail);
        Tensor::new(&shape, data)
    }

    /// Item `i` along the leading axis.
    pub fn index0(&self, i: usize) -> Tensor {
        let inner: usize = self.shape[1..].iter().product();
        Tensor {
            shape: self.shape[1..].to_vec(),
            data: self.data[i * inner..(i + 1) * inner].to_vec(),
        }
    }

    /// Rows `[start, end)` along the leading axis.
    pub fn slice0(&self, start: usize, end: usize) -> Tensor {
        let inner: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Tensor {
            shape,
            data: self.data[start * inner..end * inner].to_vec(),
        }
    }

    pub fn checksum(&self) -> u64 {
        // FNV-1a over the raw bit patterns.
        let mut h: u64 = 0xcbf29ce484222325;
        for v in &self.data {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        }
        h
    }
}

/// `c[m x n] (+)= a[m x k] * b[k x n]` with explicit strides (row, col) for each operand.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_rs: isize,
    a_cs: isize,
    b: &[f64],
    b_rs: isize,
    b_cs: isize,
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    // SAFETY: the callers pass slices that cover every index reachable
    // through the given dimensions and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_rs,
            a_cs,
            b.as_ptr(),
            b_rs,
            b_cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(in_c: usize, in_h: usize, in_w: usize, k: usize, stride: usize, pad: usize) -> Self {
        let out_h = (in_h + 2 * pad - k) / stride + 1;
        let out_w = (in_w + 2 * pad - k) / stride + 1;
        ConvGeom {
            in_c,
            in_h,
            in_w,
            k,
            stride,
            pad,
            out_h,
            out_w,
        }
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn cols_rows(&self) -> usize {
        self.in_c * self.k * self.k
    }

    fn cols_len(&self) -> usize {
        self.cols_rows() * self.out_h * self.out_w
    }
}

/// Valid output range `[lo, hi)` along one axis for kernel tap `kt`:
/// outputs whose input coordinate `o * stride + kt - pad` lies in `[0, n)`.
fn valid_range(n: usize, out: usize, kt: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if kt >= pad {
        0
    } else {
        (pad - kt + stride - 1) / stride
    };
    // largest o with o * stride + kt - pad <= n - 1
    let hi = if n + pad < kt + 1 {
        0
    } else {
        ((n + pad - kt - 1) / stride + 1).min(out)
    };
    (lo.min(hi), hi)
}

fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let (oh, ow) = (g.out_h, g.out_w);
    let plane = oh * ow;
    for c in 0..g.in_c {
        let xc = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.k {
            let (ylo, yhi) = valid_range(g.in_h, oh, ky, g.stride, g.pad);
            for kx in 0..g.k {
                let (xlo, xhi) = valid_range(g.in_w, ow, kx, g.stride, g.pad);
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                dst[..ylo * ow].iter_mut().for_each(|v| *v = 0.0);
                dst[yhi * ow..].iter_mut().for_each(|v| *v = 0.0);
                for oy in ylo..yhi {
                    let iy = oy * g.stride + ky - g.pad;
                    let src = &xc[iy * g.in_w..(iy + 1) * g.in_w];
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    drow[..xlo].iter_mut().for_each(|v| *v = 0.0);
                    drow[xhi..].iter_mut().for_each(|v| *v = 0.0);
                    if xhi > xlo {
                        let ix0 = xlo * g.stride + kx - g.pad;
                        if g.stride == 1 {
                            drow[xlo..xhi].copy_from_slice(&src[ix0..ix0 + (xhi - xlo)]);
                        } else {
                            for (j, d) in drow[xlo..xhi].iter_mut().enumerate() {
                                *d = src[ix0 + j * g.stride];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let (oh, ow) = (g.out_h, g.out_w);
    let plane = oh * ow;
    for c in 0..g.in_c {
        let dxc = &mut dx[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.k {
            let (ylo, yhi) = valid_range(g.in_h, oh, ky, g.stride, g.pad);
            for kx in 0..g.k {
                let (xlo, xhi) = valid_range(g.in_w, ow, kx, g.stride, g.pad);
                if xhi <= xlo {
                    continue;
                }
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                let ix0 = xlo * g.stride + kx - g.pad;
                for oy in ylo..yhi {
                    let iy = oy * g.stride + ky - g.pad;
                    let drow = &mut dxc[iy * g.in_w..(iy + 1) * g.in_w];
                    let srow = &src[oy * ow + xlo..oy * ow + xhi];
                    if g.stride == 1 {
                        for (d, s) in drow[ix0..ix0 + srow.len()].iter_mut().zip(srow) {
                            *d += s;
                        }
                    } else {
                        for (j, s) in srow.iter().enumerate() {
                            drow[ix0 + j * g.stride] += s;
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution over a batch; `x` is `[N, C, H, W]`, `w` is `[O, C, k, k]`.
pub(crate) fn conv2d_forward(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor, ConvGeom)> {
    let xs = x.shape();
    let ws = w.shape();
    if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || ws[2] != ws[3] {
        return Err(Error::Shape(format!(
            "conv2d: input {:?} incompatible with kernel {:?}",
            xs, ws
        )));
    }
    if xs[2] + 2 * pad < ws[2] || xs[3] + 2 * pad < ws[3] {
        return Err(Error::Shape(format!(
            "conv2d: input {:?} smaller than kernel {:?}",
            xs, ws
        )));
    }
    let (n, o) = (xs[0], ws[0]);
    let g = ConvGeom::new(xs[1], xs[2], xs[3], ws[2], stride, pad);
    let plane = g.out_h * g.out_w;
    let in_len = g.in_c * g.in_h * g.in_w;
    let kk = g.cols_rows();
    let mut out = vec![0.0; n * o * plane];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; g.cols_len()]
    };
    for s in 0..n {
        let xin = &x.data()[s * in_len..(s + 1) * in_len];
        let src: &[f64] = if g.is_pointwise() {
            xin
        } else {
            im2col(xin, &g, &mut cols);
            &cols
        };
        let dst = &mut out[s * o * plane..(s + 1) * o * plane];
        gemm(
            o,
            kk,
            plane,
            w.data(),
            kk as isize,
            1,
            src,
            plane as isize,
            1,
            dst,
            false,
        );
        if let Some(b) = bias {
            for (oc, &bv) in b.data().iter().enumerate() {
                dst[oc * plane..(oc + 1) * plane]
                    .iter_mut()
                    .for_each(|v| *v += bv);
            }
        }
    }
    Ok((Tensor::new(&[n, o, g.out_h, g.out_w], out)?, g))
}

/// Gradients of a convolution: returns (dx, dw, db).
pub(crate) fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    g: &ConvGeom,
    dout: &Tensor,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Tensor>, Option<Tensor>, Tensor) {
    let n = x.shape()[0];
    let o = w.shape()[0];
    let plane = g.out_h * g.out_w;
    let in_len = g.in_c * g.in_h * g.in_w;
    let kk = g.cols_rows();
    let mut db = vec![0.0; o];
    let mut dw = if need_dw {
        vec![0.0; o * kk]
    } else {
        Vec::new()
    };
    let mut dx = if need_dx {
        vec![0.0; n * in_len]
    } else {
        Vec::new()
    };
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; g.cols_len()]
    };
    let mut dcols = if need_dx && !g.is_pointwise() {
        vec![0.0; g.cols_len()]
    } else {
        Vec::new()
    };
    for s in 0..n {
        let go = &dout.data()[s * o * plane..(s + 1) * o * plane];
        for oc in 0..o {
            db[oc] += go[oc * plane..(oc + 1) * plane].iter().sum::<f64>();
        }
        if need_dw {
            let xin = &x.data()[s * in_len..(s + 1) * in_len];
            let src: &[f64] = if g.is_pointwise() {
                xin
            } else {
                im2col(xin, g, &mut cols);
                &cols
            };
            // dw[o, kk] += go[o, plane] * src[kk, plane]^T
            gemm(
                o,
                plane,
                kk,
                go,
                plane as isize,
                1,
                src,
                1,
                plane as isize,
                &mut dw,
                true,
            );
        }
        if need_dx {
            let dxs = &mut dx[s * in_len..(s + 1) * in_len];
            // dcols[kk, plane] = w[o, kk]^T * go[o, plane]
            if g.is_pointwise() {
                gemm(
                    kk,
                    o,
                    plane,
                    w.data(),
                    1,
                    kk as isize,
                    go,
                    plane as isize,
                    1,
                    dxs,
                    false,
                );
            } else {
                gemm(
                    kk,
                    o,
                    plane,
                    w.data(),
                    1,
                    kk as isize,
                    go,
                    plane as isize,
                    1,
                    &mut dcols,
                    false,
                );
                col2im(&dcols, g, dxs);
            }
        }
    }
    let dx = need_dx.then(|| Tensor::new(x.shape(), dx).expect("dx shape"));
    let dw = need_dw.then(|| Tensor::new(w.shape(), dw).expect("dw shape"));
    (dx, dw, Tensor::new(&[o], db).expect("db shape"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_conv(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (o, k) = (w.shape()[0], w.shape()[2]);
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let mut out = Tensor::zeros(&[n, o, oh, ow]);
        for s in 0..n {
            for oc in 0..o {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ic in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += x.data()
                                        [((s * c + ic) * h + iy as usize) * wd + ix as usize]
                                        * w.data()[((oc * c + ic) * k + ky) * k + kx];
                                }
                            }
                        }
                        out.data_mut()[((s * o + oc) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(k, stride, pad, h) in &[(3, 1, 1, 7), (3, 2, 1, 8), (1, 1, 0, 5), (4, 2, 1, 8)] {
            let x = Tensor::randn(&[2, 3, h, h], 1.0, &mut rng);
            let w = Tensor::randn(&[4, 3, k, k], 1.0, &mut rng);
            let (y, _) = conv2d_forward(&x, &w, None, stride, pad).unwrap();
            let want = naive_conv(&x, &w, stride, pad);
            assert_eq!(y.shape(), want.shape());
            assert!(y.max_abs_diff(&want) < 1e-12);
        }
    }

    #[test]
    fn stack_rejects_mixed_shapes() {
        let a = Tensor::zeros(&[2, 2]);
        let b = Tensor::zeros(&[3]);
        assert!(Tensor::stack(&[a, b]).is_err());
    }
}
