//! Minimal CPU tensor kit: 3x3/1x1 convolutions via im2col + GEMM, pooling,
//! nearest upsampling, parameter sets, optimizers and a binary archive format.
//!
//! All reductions run in a fixed order so training is bit-reproducible.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Feature map with shape `(c, h, w)`, channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), c * h * w, "tensor buffer length");
        Self { c, h, w, data }
    }

    pub fn hw(&self) -> usize {
        self.h * self.w
    }

    pub fn channel(&self, k: usize) -> &[f64] {
        &self.data[k * self.hw()..(k + 1) * self.hw()]
    }

    pub fn relu_inplace(&mut self) {
        for v in &mut self.data {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
    }

    /// Zeroes gradient entries where the forward activation was clipped.
    pub fn relu_backward_inplace(&mut self, activated: &Tensor) {
        for (g, a) in self.data.iter_mut().zip(&activated.data) {
            if *a <= 0.0 {
                *g = 0.0;
            }
        }
    }

    /// Mean over the spatial dimensions of each channel.
    pub fn global_avg_pool(&self) -> Vec<f64> {
        let hw = self.hw() as f64;
        (0..self.c).map(|k| self.channel(k).iter().sum::<f64>() / hw).collect()
    }

    pub fn concat(parts: &[&Tensor]) -> Tensor {
        let (h, w) = (parts[0].h, parts[0].w);
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.data.len()).sum());
        let mut c = 0;
        for p in parts {
            assert_eq!((p.h, p.w), (h, w), "concat spatial dims");
            data.extend_from_slice(&p.data);
            c += p.c;
        }
        Tensor { c, h, w, data }
    }

    /// Splits along channels into pieces of the given sizes.
    pub fn split(&self, sizes: &[usize]) -> Vec<Tensor> {
        let hw = self.hw();
        let mut off = 0;
        sizes
            .iter()
            .map(|&c| {
                let t = Tensor::from_vec(c, self.h, self.w, self.data[off * hw..(off + c) * hw].to_vec());
                off += c;
                t
            })
            .collect()
    }

    /// Average pooling with a square window and equal stride.
    pub fn avg_pool(&self, f: usize) -> Tensor {
        if f == 1 {
            return self.clone();
        }
        let (ho, wo) = (self.h / f, self.w / f);
        let mut out = Tensor::zeros(self.c, ho, wo);
        let norm = 1.0 / (f * f) as f64;
        for k in 0..self.c {
            let src = self.channel(k);
            for y in 0..ho {
                for x in 0..wo {
                    let mut s = 0.0;
                    for dy in 0..f {
                        for dx in 0..f {
                            s += src[(y * f + dy) * self.w + x * f + dx];
                        }
                    }
                    out.data[(k * ho + y) * wo + x] = s * norm;
                }
            }
        }
        out
    }

    /// Adjoint of [`Tensor::avg_pool`]: spreads each gradient over its window.
    pub fn avg_pool_backward(&self, f: usize, h: usize, w: usize) -> Tensor {
        if f == 1 {
            return self.clone();
        }
        let mut out = Tensor::zeros(self.c, h, w);
        let norm = 1.0 / (f * f) as f64;
        for k in 0..self.c {
            for y in 0..h {
                for x in 0..w {
                    let (py, px) = (y / f, x / f);
                    if py < self.h && px < self.w {
                        out.data[(k * h + y) * w + x] = self.data[(k * self.h + py) * self.w + px] * norm;
                    }
                }
            }
        }
        out
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample(&self, f: usize) -> Tensor {
        if f == 1 {
            return self.clone();
        }
        let (ho, wo) = (self.h * f, self.w * f);
        let mut out = Tensor::zeros(self.c, ho, wo);
        for k in 0..self.c {
            for y in 0..ho {
                for x in 0..wo {
                    out.data[(k * ho + y) * wo + x] = self.data[(k * self.h + y / f) * self.w + x / f];
                }
            }
        }
        out
    }

    /// Adjoint of [`Tensor::upsample`]: sums each block.
    pub fn upsample_backward(&self, f: usize) -> Tensor {
        if f == 1 {
            return self.clone();
        }
        let (ho, wo) = (self.h / f, self.w / f);
        let mut out = Tensor::zeros(self.c, ho, wo);
        for k in 0..self.c {
            for y in 0..self.h {
                for x in 0..self.w {
                    out.data[(k * ho + y / f) * wo + x / f] += self.data[(k * self.h + y) * self.w + x];
                }
            }
        }
        out
    }
}

/// Row-major `C = op(A) op(B) + beta C` with `C` of shape `m x n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above describe in-bounds row-major views of `a`
    // (m x k), `b` (k x n) and `c` (m x n), whose lengths are checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Shape of a square-kernel convolution with "same" padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvShape {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
}

impl ConvShape {
    pub fn new(c_in: usize, c_out: usize, k: usize, stride: usize) -> Self {
        Self { c_in, c_out, k, stride }
    }

    pub fn weight_len(&self) -> usize {
        self.c_out * self.c_in * self.k * self.k
    }

    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let pad = self.k / 2;
        (
            (h + 2 * pad - self.k) / self.stride + 1,
            (w + 2 * pad - self.k) / self.stride + 1,
        )
    }

    fn im2col(&self, input: &Tensor) -> Vec<f64> {
        let (ho, wo) = self.out_dims(input.h, input.w);
        let pad = self.k as isize / 2;
        let n = ho * wo;
        let mut cols = vec![0.0; self.c_in * self.k * self.k * n];
        for ci in 0..self.c_in {
            let src = input.channel(ci);
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    for oy in 0..ho {
                        let iy = (oy * self.stride) as isize + ky as isize - pad;
                        if iy < 0 || iy >= input.h as isize {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = (ox * self.stride) as isize + kx as isize - pad;
                            if ix >= 0 && ix < input.w as isize {
                                dst[oy * wo + ox] = src[iy as usize * input.w + ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64], h: usize, w: usize) -> Tensor {
        let (ho, wo) = self.out_dims(h, w);
        let pad = self.k as isize / 2;
        let n = ho * wo;
        let mut out = Tensor::zeros(self.c_in, h, w);
        for ci in 0..self.c_in {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    let src = &cols[row * n..(row + 1) * n];
                    for oy in 0..ho {
                        let iy = (oy * self.stride) as isize + ky as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = (ox * self.stride) as isize + kx as isize - pad;
                            if ix >= 0 && ix < w as isize {
                                out.data[(ci * h + iy as usize) * w + ix as usize] += src[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Returns the output and the im2col buffer needed by the backward pass.
    pub fn forward(&self, input: &Tensor, weight: &[f64], bias: Option<&[f64]>) -> (Tensor, Vec<f64>) {
        assert_eq!(input.c, self.c_in, "conv input channels");
        let (ho, wo) = self.out_dims(input.h, input.w);
        let n = ho * wo;
        let kk = self.c_in * self.k * self.k;
        let cols = self.im2col(input);
        let mut out = Tensor::zeros(self.c_out, ho, wo);
        if let Some(b) = bias {
            for (co, bv) in b.iter().enumerate() {
                out.data[co * n..(co + 1) * n].iter_mut().for_each(|v| *v = *bv);
            }
        }
        gemm(
            self.c_out,
            kk,
            n,
            weight,
            false,
            &cols,
            false,
            if bias.is_some() { 1.0 } else { 0.0 },
            &mut out.data,
        );
        (out, cols)
    }

    /// Accumulates weight/bias gradients and optionally returns the input gradient.
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        cols: &[f64],
        in_h: usize,
        in_w: usize,
        dout: &Tensor,
        weight: &[f64],
        dweight: &mut [f64],
        dbias: Option<&mut [f64]>,
        need_input_grad: bool,
    ) -> Option<Tensor> {
        let n = dout.hw();
        let kk = self.c_in * self.k * self.k;
        gemm(self.c_out, n, kk, &dout.data, false, cols, true, 1.0, dweight);
        if let Some(db) = dbias {
            for (co, d) in db.iter_mut().enumerate() {
                *d += dout.data[co * n..(co + 1) * n].iter().sum::<f64>();
            }
        }
        if !need_input_grad {
            return None;
        }
        let mut dcols = vec![0.0; kk * n];
        gemm(kk, self.c_out, n, weight, true, &dout.data, false, 0.0, &mut dcols);
        Some(self.col2im(&dcols, in_h, in_w))
    }
}

/// Named flat tensors; used for parameters, gradients and optimizer moments.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    pub names: Vec<String>,
    pub shapes: Vec<Vec<usize>>,
    pub data: Vec<Vec<f64>>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            shapes: Vec::new(),
            data: Vec::new(),
        }
    }

    /// Appends a tensor and returns its slot index.
    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> usize {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "param shape");
        self.names.push(name.into());
        self.shapes.push(shape);
        self.data.push(data);
        self.data.len() - 1
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            names: self.names.clone(),
            shapes: self.shapes.clone(),
            data: self.data.iter().map(|d| vec![0.0; d.len()]).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &ParamSet) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().flatten().for_each(|v| *v *= s);
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn n_values(&self) -> usize {
        self.data.iter().map(Vec::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().flatten().all(|v| v.is_finite())
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

/// He-normal initialization for a conv weight.
pub fn he_init<R: Rng + ?Sized>(rng: &mut R, shape: &ConvShape) -> Vec<f64> {
    let fan_in = (shape.c_in * shape.k * shape.k) as f64;
    normal_vec(rng, shape.weight_len(), (2.0 / fan_in).sqrt())
}

pub fn normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize, std: f64) -> Vec<f64> {
    let dist = Normal::new(0.0, std).expect("positive std");
    (0..n).map(|_| dist.sample(rng)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// First-order optimizer with its moment buffers.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    m: ParamSet,
    v: ParamSet,
    step: u64,
}

const MOMENTUM: f64 = 0.9;
const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(kind: OptimizerKind, params: &ParamSet) -> Self {
        Self {
            kind,
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet, lr: f64) {
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for ((p, g), m) in params.data.iter_mut().zip(&grads.data).zip(&mut self.m.data) {
                    for ((pv, gv), mv) in p.iter_mut().zip(g).zip(m.iter_mut()) {
                        *mv = MOMENTUM * *mv + gv;
                        *pv -= lr * *mv;
                    }
                }
            }
            OptimizerKind::Adam => {
                let t = self.step as i32;
                let c1 = 1.0 - BETA1.powi(t);
                let c2 = 1.0 - BETA2.powi(t);
                for (((p, g), m), v) in params
                    .data
                    .iter_mut()
                    .zip(&grads.data)
                    .zip(&mut self.m.data)
                    .zip(&mut self.v.data)
                {
                    for (((pv, gv), mv), vv) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mv = BETA1 * *mv + (1.0 - BETA1) * gv;
                        *vv = BETA2 * *vv + (1.0 - BETA2) * gv * gv;
                        *pv -= lr * (*mv / c1) / ((*vv / c2).sqrt() + ADAM_EPS);
                    }
                }
            }
        }
    }
}

/// Polynomial decay `lr0 (1 - it/max_it)^power`.
pub fn poly_lr(lr0: f64, power: f64, it: usize, max_it: usize) -> f64 {
    if power == 0.0 || max_it == 0 {
        return lr0;
    }
    lr0 * (1.0 - it as f64 / max_it as f64).max(0.0).powf(power)
}

const MAGIC: &[u8; 8] = b"CONTAPRM";

#[derive(Serialize, Deserialize)]
struct ArchiveHeader {
    spec: serde_json::Value,
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
}

/// Writes `MAGIC | u64 header_len | header JSON | f64 LE payload`.
pub fn write_archive(path: &Path, spec: &serde_json::Value, params: &ParamSet) -> Result<()> {
    crate::raster::ensure_parent(path)?;
    let header = serde_json::to_vec(&ArchiveHeader {
        spec: spec.clone(),
        names: params.names.clone(),
        shapes: params.shapes.clone(),
    })?;
    let mut buf = Vec::with_capacity(16 + header.len() + 8 * params.n_values());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for v in params.data.iter().flatten() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_archive(path: &Path) -> Result<(serde_json::Value, ParamSet)> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Validation(format!("{}: {m}", path.display()));
    if buf.len() < 16 || &buf[..8] != MAGIC {
        return Err(bad("not a parameter archive"));
    }
    let hlen = u64::from_le_bytes(buf[8..16].try_into().unwrap()) as usize;
    let body = buf.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: ArchiveHeader = serde_json::from_slice(body)?;
    let mut off = 16 + hlen;
    let mut params = ParamSet::new();
    for (name, shape) in header.names.into_iter().zip(header.shapes) {
        let n: usize = shape.iter().product();
        let bytes = buf.get(off..off + 8 * n).ok_or_else(|| bad("truncated payload"))?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        off += 8 * n;
        params.push(name, shape, data);
    }
    if off != buf.len() {
        return Err(bad("trailing bytes"));
    }
    Ok((header.spec, params))
}
