//! A reverse-mode tape.
//!
//! Every op evaluates eagerly and records how to push gradients back to its
//! inputs. Parameters are bound by name, so gradients come back keyed the same
//! way the [`ParamStore`](crate::params::ParamStore) stores them.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{conv2d_backward, conv2d_forward, ConvGeom, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Reshape(Var),
    Silu(Var),
    Tanh(Var),
    Softplus(Var),
    Abs(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    Film {
        x: Var,
        scale: Var,
        shift: Var,
    },
    Upsample2x(Var),
    AvgPool2x(Var),
    SpatialMean(Var),
    ChannelNormalize(Var, f64),
    RowNormalize(Var, f64),
    RowDot(Var, Var),
    GatherRows(Var, Vec<usize>),
    ConcatChannels(Vec<Var>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by variable.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bound: HashMap<String, Var>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    /// Binds a named parameter once per tape; later lookups reuse the same leaf.
    pub fn param(&mut self, store: &ParamStore, name: &str, trainable: bool) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))?
            .clone();
        let v = self.leaf(t, trainable);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn bound_params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.bound.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Collects gradients of every bound trainable parameter by name.
    pub fn param_grads(&self, grads: &Grads) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, v) in &self.bound {
            if !self.rg(*v) {
                continue;
            }
            let g = grads
                .get(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(self.shape(*v)));
            out.insert(name.clone(), g);
        }
        out
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).zip(self.value(b), |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).zip(self.value(b), |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).zip(self.value(b), |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|x| x + s);
        let rg = self.rg(a);
        self.push(t, Op::AddScalar(a), rg)
    }

    /// `s * a + (1 - s) * b`, built from primitive ops.
    pub fn lerp(&mut self, a: Var, b: Var, s: f64) -> Result<Var> {
        let sa = self.scale(a, s);
        let sb = self.scale(b, 1.0 - s);
        self.add(sa, sb)
    }

    /// Weighted sum of scalar losses.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for &(v, w) in terms {
            let s = self.scale(v, w);
            acc = Some(match acc {
                None => s,
                Some(a) => self.add(a, s)?,
            });
        }
        acc.ok_or_else(|| Error::Validation("empty weighted sum".into()))
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let bias = b.map(|b| self.value(b).clone());
        let (t, geom) = conv2d_forward(self.value(x), self.value(w), bias.as_ref(), stride, pad)?;
        let rg = self.rg(x) || self.rg(w) || b.map_or(false, |b| self.rg(b));
        Ok(self.push(t, Op::Conv2d { x, w, b, geom }, rg))
    }

    /// `[m, k] x [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape(format!("matmul {:?} x {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        crate::tensor::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            n as isize,
            1,
            &mut out,
            false,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `x [n, i] * w[o, i]^T + b[o]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(Error::Shape(format!(
                "linear {:?} with weight {:?}",
                sx, sw
            )));
        }
        let (n, i, o) = (sx[0], sx[1], sw[0]);
        let mut out = vec![0.0; n * o];
        crate::tensor::gemm(
            n,
            i,
            o,
            self.value(x).data(),
            i as isize,
            1,
            self.value(w).data(),
            1,
            i as isize,
            &mut out,
            false,
        );
        if let Some(b) = b {
            let bv = self.value(b).data().to_vec();
            if bv.len() != o {
                return Err(Error::Shape(format!(
                    "linear bias {} for {} outputs",
                    bv.len(),
                    o
                )));
            }
            for row in out.chunks_mut(o) {
                row.iter_mut().zip(&bv).for_each(|(v, b)| *v += b);
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.map_or(false, |b| self.rg(b));
        Ok(self.push(Tensor::new(&[n, o], out)?, Op::Linear { x, w, b }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x * sigmoid(x));
        let rg = self.rg(a);
        self.push(t, Op::Silu(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::tanh);
        let rg = self.rg(a);
        self.push(t, Op::Tanh(a), rg)
    }

    /// `ln(1 + e^x)`, evaluated stably.
    pub fn softplus(&mut self, a: Var) -> Var {
        let t = self.value(a).map(softplus);
        let rg = self.rg(a);
        self.push(t, Op::Softplus(a), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::abs);
        let rg = self.rg(a);
        self.push(t, Op::Abs(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x * x);
        let rg = self.rg(a);
        self.push(t, Op::Square(a), rg)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let t = self.value(a).map(|x| x.clamp(lo, hi));
        let rg = self.rg(a);
        self.push(t, Op::Clamp(a, lo, hi), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(t, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).mean());
        let rg = self.rg(a);
        self.push(t, Op::Mean(a), rg)
    }

    /// Feature-wise affine modulation: `x * (1 + scale) + shift` with
    /// `scale`, `shift` of shape `[N, C]` broadcast over space.
    pub fn film(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4
            || self.shape(scale) != [xs[0], xs[1]]
            || self.shape(shift) != [xs[0], xs[1]]
        {
            return Err(Error::Shape(format!(
                "film: {:?} with modulation {:?}/{:?}",
                xs,
                self.shape(scale),
                self.shape(shift)
            )));
        }
        let plane = xs[2] * xs[3];
        let xv = self.value(x).data();
        let sv = self.value(scale).data();
        let tv = self.value(shift).data();
        let mut out = vec![0.0; xv.len()];
        for (nc, chunk) in out.chunks_mut(plane).enumerate() {
            let (s, t) = (1.0 + sv[nc], tv[nc]);
            for (o, &xi) in chunk.iter_mut().zip(&xv[nc * plane..(nc + 1) * plane]) {
                *o = xi * s + t;
            }
        }
        let rg = self.rg(x) || self.rg(scale) || self.rg(shift);
        Ok(self.push(Tensor::new(&xs, out)?, Op::Film { x, scale, shift }, rg))
    }

    pub fn upsample2x(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 {
            return Err(Error::Shape(format!("upsample2x on {:?}", s)));
        }
        let (h, w) = (s[2], s[3]);
        let src = self.value(a).data();
        let mut out = vec![0.0; src.len() * 4];
        for (p, plane) in src.chunks(h * w).enumerate() {
            let dst = &mut out[p * h * w * 4..(p + 1) * h * w * 4];
            for y in 0..2 * h {
                for x in 0..2 * w {
                    dst[y * 2 * w + x] = plane[(y / 2) * w + x / 2];
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(&[s[0], s[1], 2 * h, 2 * w], out)?,
            Op::Upsample2x(a),
            rg,
        ))
    }

    pub fn avg_pool2x(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(Error::Shape(format!("avg_pool2x on {:?}", s)));
        }
        let (h, w) = (s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let src = self.value(a).data();
        let mut out = vec![0.0; src.len() / 4];
        for (p, plane) in src.chunks(h * w).enumerate() {
            let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for y in 0..oh {
                for x in 0..ow {
                    dst[y * ow + x] = 0.25
                        * (plane[2 * y * w + 2 * x]
                            + plane[2 * y * w + 2 * x + 1]
                            + plane[(2 * y + 1) * w + 2 * x]
                            + plane[(2 * y + 1) * w + 2 * x + 1]);
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(&[s[0], s[1], oh, ow], out)?,
            Op::AvgPool2x(a),
            rg,
        ))
    }

    /// `[N, C, H, W] -> [N, C]` global average pooling.
    pub fn spatial_mean(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 {
            return Err(Error::Shape(format!("spatial_mean on {:?}", s)));
        }
        let plane = s[2] * s[3];
        let out: Vec<f64> = self
            .value(a)
            .data()
            .chunks(plane)
            .map(|c| c.iter().sum::<f64>() / plane as f64)
            .collect();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(&[s[0], s[1]], out)?, Op::SpatialMean(a), rg))
    }

    /// Unit-normalizes the channel vector at every pixel: `x / sqrt(|x|^2 + eps)`.
    pub fn channel_normalize(&mut self, a: Var, eps: f64) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 {
            return Err(Error::Shape(format!("channel_normalize on {:?}", s)));
        }
        let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
        let src = self.value(a).data();
        let mut out = vec![0.0; src.len()];
        for b in 0..n {
            for p in 0..plane {
                let mut ss = eps;
                for ch in 0..c {
                    let v = src[(b * c + ch) * plane + p];
                    ss += v * v;
                }
                let inv = 1.0 / ss.sqrt();
                for ch in 0..c {
                    let i = (b * c + ch) * plane + p;
                    out[i] = src[i] * inv;
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(&s, out)?, Op::ChannelNormalize(a, eps), rg))
    }

    /// Unit-normalizes each row of an `[N, D]` matrix.
    pub fn row_normalize(&mut self, a: Var, eps: f64) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(Error::Shape(format!("row_normalize on {:?}", s)));
        }
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(s[1]) {
            let inv = 1.0 / (row.iter().map(|v| v * v).sum::<f64>() + eps).sqrt();
            row.iter_mut().for_each(|v| *v *= inv);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(&s, out)?, Op::RowNormalize(a, eps), rg))
    }

    /// Row-wise inner products of two `[N, D]` matrices, giving `[N]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a).expect_same_shape(self.value(b))?;
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(Error::Shape(format!("row_dot on {:?}", s)));
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .chunks(s[1])
            .zip(self.value(b).data().chunks(s[1]))
            .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum())
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[s[0]], out)?, Op::RowDot(a, b), rg))
    }

    /// Selects rows of a `[K, D]` table.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(Error::Shape(format!("gather_rows on {:?}", s)));
        }
        let d = s[1];
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= s[0] {
                return Err(Error::Shape(format!("row {} out of {} rows", i, s[0])));
            }
            out.extend_from_slice(&self.value(table).data()[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::new(&[idx.len(), d], out)?,
            Op::GatherRows(table, idx.to_vec()),
            rg,
        ))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        let (n, h, w) = (first[0], first[2], first[3]);
        let mut total_c = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 4 || s[0] != n || s[2] != h || s[3] != w {
                return Err(Error::Shape(format!(
                    "concat_channels {:?} with {:?}",
                    first, s
                )));
            }
            total_c += s[1];
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * total_c * plane);
        for b in 0..n {
            for &p in parts {
                let c = self.shape(p)[1];
                out.extend_from_slice(&self.value(p).data()[b * c * plane..(b + 1) * c * plane]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(&[n, total_c, h, w], out)?,
            Op::ConcatChannels(parts.to_vec()),
            rg,
        ))
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, out: Var) -> Result<Grads> {
        if self.value(out).numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar, got {:?}",
                self.shape(out)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(Tensor::full(self.shape(out), 1.0));
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    self.acc(grads, *a, g.zip(vb, |x, y| x * y).unwrap());
                }
                if self.rg(*b) {
                    self.acc(grads, *b, g.zip(va, |x, y| x * y).unwrap());
                }
            }
            Op::Scale(a, s) => self.acc(grads, *a, g.map(|v| v * s)),
            Op::AddScalar(a) => self.acc(grads, *a, g.clone()),
            Op::Conv2d { x, w, b, geom } => {
                let (dx, dw, db) = conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    geom,
                    g,
                    self.rg(*x),
                    self.rg(*w),
                );
                if let Some(dx) = dx {
                    self.acc(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    self.acc(grads, *w, dw);
                }
                if let Some(b) = b {
                    self.acc(grads, *b, db);
                }
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if self.rg(*a) {
                    // da = g [m,n] * b^T [n,k]
                    let mut da = vec![0.0; m * k];
                    crate::tensor::gemm(
                        m,
                        n,
                        k,
                        g.data(),
                        n as isize,
                        1,
                        vb.data(),
                        1,
                        n as isize,
                        &mut da,
                        false,
                    );
                    self.acc(grads, *a, Tensor::new(&[m, k], da).unwrap());
                }
                if self.rg(*b) {
                    // db = a^T [k,m] * g [m,n]
                    let mut db = vec![0.0; k * n];
                    crate::tensor::gemm(
                        k,
                        m,
                        n,
                        va.data(),
                        1,
                        k as isize,
                        g.data(),
                        n as isize,
                        1,
                        &mut db,
                        false,
                    );
                    self.acc(grads, *b, Tensor::new(&[k, n], db).unwrap());
                }
            }
            Op::Linear { x, w, b } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (n, i, o) = (vx.shape()[0], vx.shape()[1], vw.shape()[0]);
                if self.rg(*x) {
                    // dx = g [n,o] * w [o,i]
                    let mut dx = vec![0.0; n * i];
                    crate::tensor::gemm(
                        n,
                        o,
                        i,
                        g.data(),
                        o as isize,
                        1,
                        vw.data(),
                        i as isize,
                        1,
                        &mut dx,
                        false,
                    );
                    self.acc(grads, *x, Tensor::new(&[n, i], dx).unwrap());
                }
                if self.rg(*w) {
                    // dw = g^T [o,n] * x [n,i]
                    let mut dw = vec![0.0; o * i];
                    crate::tensor::gemm(
                        o,
                        n,
                        i,
                        g.data(),
                        1,
                        o as isize,
                        vx.data(),
                        i as isize,
                        1,
                        &mut dw,
                        false,
                    );
                    self.acc(grads, *w, Tensor::new(&[o, i], dw).unwrap());
                }
                if let Some(b) = b {
                    let mut db = vec![0.0; o];
                    for row in g.data().chunks(o) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    self.acc(grads, *b, Tensor::new(&[o], db).unwrap());
                }
            }
            Op::Reshape(a) => {
                self.acc(grads, *a, g.reshape(self.shape(*a)).unwrap());
            }
            Op::Silu(a) => {
                let d = g
                    .zip(self.value(*a), |gv, x| {
                        let s = sigmoid(x);
                        gv * (s + x * s * (1.0 - s))
                    })
                    .unwrap();
                self.acc(grads, *a, d);
            }
            Op::Tanh(a) => {
                let d = g.zip(out, |gv, y| gv * (1.0 - y * y)).unwrap();
                self.acc(grads, *a, d);
            }
            Op::Softplus(a) => {
                let d = g.zip(self.value(*a), |gv, x| gv * sigmoid(x)).unwrap();
                self.acc(grads, *a, d);
            }
            Op::Abs(a) => {
                let d = g.zip(self.value(*a), |gv, x| gv * sign(x)).unwrap();
                self.acc(grads, *a, d);
            }
            Op::Square(a) => {
                let d = g.zip(self.value(*a), |gv, x| 2.0 * gv * x).unwrap();
                self.acc(grads, *a, d);
            }
            Op::Clamp(a, lo, hi) => {
                let d = g
                    .zip(
                        self.value(*a),
                        |gv, x| if x < *lo || x > *hi { 0.0 } else { gv },
                    )
                    .unwrap();
                self.acc(grads, *a, d);
            }
            Op::Sum(a) => {
                self.acc(grads, *a, Tensor::full(self.shape(*a), g.item()));
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel() as f64;
                self.acc(grads, *a, Tensor::full(self.shape(*a), g.item() / n));
            }
            Op::Film { x, scale, shift } => {
                let s = self.shape(*x);
                let plane = s[2] * s[3];
                let xv = self.value(*x).data();
                let sv = self.value(*scale).data();
                if self.rg(*x) {
                    let mut dx = vec![0.0; xv.len()];
                    for (nc, chunk) in dx.chunks_mut(plane).enumerate() {
                        let f = 1.0 + sv[nc];
                        for (d, &gv) in chunk
                            .iter_mut()
                            .zip(&g.data()[nc * plane..(nc + 1) * plane])
                        {
                            *d = gv * f;
                        }
                    }
                    self.acc(grads, *x, Tensor::new(s, dx).unwrap());
                }
                let nc_len = s[0] * s[1];
                if self.rg(*scale) {
                    let ds: Vec<f64> = (0..nc_len)
                        .map(|nc| {
                            let r = nc * plane..(nc + 1) * plane;
                            g.data()[r.clone()]
                                .iter()
                                .zip(&xv[r])
                                .map(|(a, b)| a * b)
                                .sum()
                        })
                        .collect();
                    self.acc(grads, *scale, Tensor::new(&[s[0], s[1]], ds).unwrap());
                }
                if self.rg(*shift) {
                    let dt: Vec<f64> = g.data().chunks(plane).map(|c| c.iter().sum()).collect();
                    self.acc(grads, *shift, Tensor::new(&[s[0], s[1]], dt).unwrap());
                }
            }
            Op::Upsample2x(a) => {
                let s = self.shape(*a);
                let (h, w) = (s[2], s[3]);
                let mut d = vec![0.0; self.value(*a).numel()];
                for (p, plane) in d.chunks_mut(h * w).enumerate() {
                    let src = &g.data()[p * h * w * 4..(p + 1) * h * w * 4];
                    for y in 0..2 * h {
                        for x in 0..2 * w {
                            plane[(y / 2) * w + x / 2] += src[y * 2 * w + x];
                        }
                    }
                }
                self.acc(grads, *a, Tensor::new(s, d).unwrap());
            }
            Op::AvgPool2x(a) => {
                let s = self.shape(*a);
                let (h, w) = (s[2], s[3]);
                let (oh, ow) = (h / 2, w / 2);
                let mut d = vec![0.0; self.value(*a).numel()];
                for (p, plane) in d.chunks_mut(h * w).enumerate() {
                    let src = &g.data()[p * oh * ow..(p + 1) * oh * ow];
                    for y in 0..h {
                        for x in 0..w {
                            plane[y * w + x] = 0.25 * src[(y / 2) * ow + x / 2];
                        }
                    }
                }
                self.acc(grads, *a, Tensor::new(s, d).unwrap());
            }
            Op::SpatialMean(a) => {
                let s = self.shape(*a);
                let plane = s[2] * s[3];
                let mut d = vec![0.0; self.value(*a).numel()];
                for (nc, chunk) in d.chunks_mut(plane).enumerate() {
                    let v = g.data()[nc] / plane as f64;
                    chunk.iter_mut().for_each(|x| *x = v);
                }
                self.acc(grads, *a, Tensor::new(s, d).unwrap());
            }
            Op::ChannelNormalize(a, eps) => {
                let s = self.shape(*a);
                let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
                let xv = self.value(*a).data();
                let yv = out.data();
                let mut d = vec![0.0; xv.len()];
                for b in 0..n {
                    for p in 0..plane {
                        let mut ss = *eps;
                        let mut gy = 0.0;
                        for ch in 0..c {
                            let i = (b * c + ch) * plane + p;
                            ss += xv[i] * xv[i];
                            gy += g.data()[i] * yv[i];
                        }
                        let inv = 1.0 / ss.sqrt();
                        for ch in 0..c {
                            let i = (b * c + ch) * plane + p;
                            d[i] = inv * (g.data()[i] - yv[i] * gy);
                        }
                    }
                }
                self.acc(grads, *a, Tensor::new(s, d).unwrap());
            }
            Op::RowNormalize(a, eps) => {
                let s = self.shape(*a);
                let dcols = s[1];
                let xv = self.value(*a).data();
                let yv = out.data();
                let mut d = vec![0.0; xv.len()];
                for r in 0..s[0] {
                    let rg = r * dcols..(r + 1) * dcols;
                    let ss: f64 = xv[rg.clone()].iter().map(|v| v * v).sum::<f64>() + eps;
                    let gy: f64 = g.data()[rg.clone()]
                        .iter()
                        .zip(&yv[rg.clone()])
                        .map(|(a, b)| a * b)
                        .sum();
                    let inv = 1.0 / ss.sqrt();
                    for i in rg {
                        d[i] = inv * (g.data()[i] - yv[i] * gy);
                    }
                }
                self.acc(grads, *a, Tensor::new(s, d).unwrap());
            }
            Op::RowDot(a, b) => {
                let s = self.shape(*a);
                let dcols = s[1];
                let (va, vb) = (self.value(*a), self.value(*b));
                let expand = |other: &Tensor| {
                    let mut d = other.data().to_vec();
                    for (r, row) in d.chunks_mut(dcols).enumerate() {
                        let gv = g.data()[r];
                        row.iter_mut().for_each(|v| *v *= gv);
                    }
                    Tensor::new(s, d).unwrap()
                };
                if self.rg(*a) {
                    self.acc(grads, *a, expand(vb));
                }
                if self.rg(*b) {
                    self.acc(grads, *b, expand(va));
                }
            }
            Op::GatherRows(table, idx) => {
                let s = self.shape(*table);
                let dcols = s[1];
                let mut d = vec![0.0; s[0] * dcols];
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..dcols {
                        d[i * dcols + j] += g.data()[r * dcols + j];
                    }
                }
                self.acc(grads, *table, Tensor::new(s, d).unwrap());
            }
            Op::ConcatChannels(parts) => {
                let s = out.shape();
                let (n, plane) = (s[0], s[2] * s[3]);
                let total_c = s[1];
                let mut offset = 0;
                for &p in parts {
                    let c = self.shape(p)[1];
                    if self.rg(p) {
                        let mut d = Vec::with_capacity(n * c * plane);
                        for b in 0..n {
                            let start = (b * total_c + offset) * plane;
                            d.extend_from_slice(&g.data()[start..start + c * plane]);
                        }
                        self.acc(grads, p, Tensor::new(self.shape(p), d).unwrap());
                    }
                    offset += c;
                }
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}
