//! Confounder set of class-average masks and the image-specific context map
//! `M = Σ_i α_i c_i P(c_i)` with `α = softmax((W1 x)ᵀ(W2 c_i) / √n)`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{ClassMask, LabelSet, RgbImage, IGNORE};

/// Which masks the class averages are taken over.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfounderSource {
    SegMask,
    PseudoMask,
}

/// Class-average masks `c_1..c_n`, flattened row-major, with a uniform prior.
///
/// Entries are held at single precision (widened to `f64`) so the on-disk
/// archive reproduces them exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfounderSet {
    pub height: usize,
    pub width: usize,
    pub entries: Vec<Vec<f64>>,
    pub source: ConfounderSource,
    /// Number of images averaged for each class.
    pub counts: Vec<usize>,
    pub warnings: Vec<String>,
}

impl ConfounderSet {
    pub fn n(&self) -> usize {
        self.entries.len()
    }

    pub fn hw(&self) -> usize {
        self.height * self.width
    }

    pub fn prior(&self) -> f64 {
        1.0 / self.n() as f64
    }

    /// Archive: `CONTACNF | u64 header_len | JSON header | n*h*w f32 LE`.
    pub fn save(&self, path: &Path) -> Result<()> {
        crate::raster::ensure_parent(path)?;
        let header = serde_json::to_vec(&ConfounderHeader {
            n: self.n(),
            h: self.height,
            w: self.width,
            source: self.source,
            counts: self.counts.clone(),
        })?;
        let mut buf = Vec::new();
        buf.extend_from_slice(CONF_MAGIC);
        buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
        buf.extend_from_slice(&header);
        for v in self.entries.iter().flatten() {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |m: &str| Error::Validation(format!("{}: {m}", path.display()));
        if buf.len() < 16 || &buf[..8] != CONF_MAGIC {
            return Err(bad("not a confounder archive"));
        }
        let hlen = u64::from_le_bytes(buf[8..16].try_into().unwrap()) as usize;
        let header: ConfounderHeader = serde_json::from_slice(buf.get(16..16 + hlen).ok_or_else(|| bad("truncated"))?)?;
        let hw = header.h * header.w;
        let payload = &buf[16 + hlen..];
        if payload.len() != 4 * header.n * hw {
            return Err(bad("payload size does not match header"));
        }
        let values: Vec<f64> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Ok(Self {
            height: header.h,
            width: header.w,
            entries: values.chunks(hw.max(1)).map(<[f64]>::to_vec).collect(),
            source: header.source,
            counts: header.counts,
            warnings: Vec::new(),
        })
    }
}

const CONF_MAGIC: &[u8; 8] = b"CONTACNF";

#[derive(Serialize, Deserialize)]
struct ConfounderHeader {
    n: usize,
    h: usize,
    w: usize,
    source: ConfounderSource,
    counts: Vec<usize>,
}

/// Averages the binary indicator `[pixel == i]` over images labelled with
/// class `i`. IGNORE pixels count as "not class i".
pub fn build_confounder_set(
    masks: &[ClassMask],
    labels: &[LabelSet],
    n_classes: usize,
    source: ConfounderSource,
) -> Result<ConfounderSet> {
    if masks.is_empty() {
        return Err(Error::Validation("confounder set over an empty dataset".into()));
    }
    if masks.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} masks but {} label sets",
            masks.len(),
            labels.len()
        )));
    }
    let (h, w) = masks[0].dims();
    if let Some(m) = masks.iter().find(|m| m.dims() != (h, w)) {
        return Err(Error::Shape(format!("mask {:?} differs from {:?}", m.dims(), (h, w))));
    }
    let mut sums = vec![vec![0u32; h * w]; n_classes];
    let mut counts = vec![0usize; n_classes];
    for (mask, ls) in masks.iter().zip(labels) {
        for &class in ls {
            let i = class as usize - 1;
            if i >= n_classes {
                return Err(Error::Validation(format!("label {class} > {n_classes}")));
            }
            counts[i] += 1;
            for (s, &v) in sums[i].iter_mut().zip(mask.values()) {
                if v == class {
                    *s += 1;
                }
            }
        }
    }
    let mut warnings = Vec::new();
    let entries = sums
        .iter()
        .zip(&counts)
        .enumerate()
        .map(|(i, (row, &k))| {
            if k == 0 {
                let msg = format!("class {} has no supporting image; using a zero mask", i + 1);
                log::warn!("{msg}");
                warnings.push(msg);
                return vec![0.0; h * w];
            }
            row.iter().map(|&s| (s as f64 / k as f64) as f32 as f64).collect()
        })
        .collect();
    Ok(ConfounderSet {
        height: h,
        width: w,
        entries,
        source,
        counts,
        warnings,
    })
}

/// Learnable projections `W1, W2`, each `n x hw` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionPair {
    pub n: usize,
    pub hw: usize,
    pub w1: Vec<f64>,
    pub w2: Vec<f64>,
}

impl ProjectionPair {
    pub fn new(n: usize, hw: usize, w1: Vec<f64>, w2: Vec<f64>) -> Result<Self> {
        if w1.len() != n * hw || w2.len() != n * hw {
            return Err(Error::Shape(format!("projection matrices must both be {n}x{hw}")));
        }
        if w1.iter().chain(&w2).any(|v| !v.is_finite()) {
            return Err(Error::Validation("projection has non-finite entries".into()));
        }
        Ok(Self { n, hw, w1, w2 })
    }

    pub fn zeros(n: usize, hw: usize) -> Self {
        Self {
            n,
            hw,
            w1: vec![0.0; n * hw],
            w2: vec![0.0; n * hw],
        }
    }
}

/// `h x w` context map, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl ContextMap {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![0.0; height * width],
        }
    }

    /// Binary foreground map of a mask, used directly as context by the
    /// segmentation-mask control arm.
    pub fn foreground(mask: &ClassMask) -> Self {
        Self {
            height: mask.height(),
            width: mask.width(),
            values: foreground_vector(mask),
        }
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    /// Raw little-endian f64 dump, for exact persistence.
    pub fn save(&self, path: &Path) -> Result<()> {
        crate::raster::ensure_parent(path)?;
        let mut buf = Vec::with_capacity(16 + 8 * self.values.len());
        buf.extend_from_slice(&(self.height as u64).to_le_bytes());
        buf.extend_from_slice(&(self.width as u64).to_le_bytes());
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        if buf.len() < 16 {
            return Err(Error::Validation(format!("{}: truncated", path.display())));
        }
        let h = u64::from_le_bytes(buf[..8].try_into().unwrap()) as usize;
        let w = u64::from_le_bytes(buf[8..16].try_into().unwrap()) as usize;
        if buf.len() != 16 + 8 * h * w {
            return Err(Error::Validation(format!("{}: bad size", path.display())));
        }
        let values = buf[16..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            height: h,
            width: w,
            values,
        })
    }

    /// 8-bit preview scaled by the map's own maximum.
    pub fn save_preview_png(&self, path: &Path) -> Result<()> {
        let mx = self.max();
        let scale = if mx > 0.0 { 254.0 / mx } else { 0.0 };
        let bytes = self.values.iter().map(|v| (v * scale).round() as u8).collect();
        ClassMask::from_vec(self.height, self.width, bytes)?.save_png(path)
    }
}

/// `1` where the mask holds a foreground class, `0` on background and IGNORE.
pub fn foreground_vector(mask: &ClassMask) -> Vec<f64> {
    mask.values()
        .iter()
        .map(|&v| if v != 0 && v != IGNORE { 1.0 } else { 0.0 })
        .collect()
}

/// Intermediate values of one context-map evaluation, kept for backprop.
#[derive(Clone, Debug)]
pub struct ContextForward {
    x_fg: Vec<f64>,
    /// `W1 x`.
    query: Vec<f64>,
    /// `W2 c_i` for each i.
    keys: Vec<Vec<f64>>,
    pub alpha: Vec<f64>,
    /// Map before optional max-normalization.
    raw: Vec<f64>,
    /// `(max, argmax)` when the output was max-normalized.
    norm: Option<(f64, usize)>,
    pub map: Vec<f64>,
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let mx = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn check_shapes(x_len: usize, conf: &ConfounderSet, proj: &ProjectionPair) -> Result<()> {
    let n = conf.n();
    if n == 0 {
        return Err(Error::Shape("empty confounder set".into()));
    }
    if proj.n != n || proj.hw != conf.hw() || x_len != conf.hw() {
        return Err(Error::Shape(format!(
            "mask has {x_len} pixels, confounders {n}x{}, projection {}x{}",
            conf.hw(),
            proj.n,
            proj.hw
        )));
    }
    Ok(())
}

/// Evaluates the attention-weighted context map for a foreground vector.
pub fn context_forward(
    x_fg: &[f64],
    conf: &ConfounderSet,
    proj: &ProjectionPair,
    normalize_max: bool,
) -> Result<ContextForward> {
    check_shapes(x_fg.len(), conf, proj)?;
    let n = conf.n();
    let hw = conf.hw();
    let dot = |row: &[f64], v: &[f64]| row.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
    let query: Vec<f64> = (0..n).map(|k| dot(&proj.w1[k * hw..(k + 1) * hw], x_fg)).collect();
    let keys: Vec<Vec<f64>> = conf
        .entries
        .iter()
        .map(|c| (0..n).map(|k| dot(&proj.w2[k * hw..(k + 1) * hw], c)).collect())
        .collect();
    let scale = (n as f64).sqrt();
    let logits: Vec<f64> = keys.iter().map(|kv| dot(&query, kv) / scale).collect();
    let alpha = softmax(&logits);
    let prior = conf.prior();
    let mut raw = vec![0.0; hw];
    for (a, c) in alpha.iter().zip(&conf.entries) {
        let wgt = a * prior;
        for (m, cv) in raw.iter_mut().zip(c) {
            *m += wgt * cv;
        }
    }
    let (map, norm) = if normalize_max {
        let (arg, mx) = raw
            .iter()
            .copied()
            .enumerate()
            .fold((0, 0.0), |acc, (i, v)| if v > acc.1 { (i, v) } else { acc });
        if mx > 0.0 {
            (raw.iter().map(|v| v / mx).collect(), Some((mx, arg)))
        } else {
            (raw.clone(), None)
        }
    } else {
        (raw.clone(), None)
    };
    Ok(ContextForward {
        x_fg: x_fg.to_vec(),
        query,
        keys,
        alpha,
        raw,
        norm,
        map,
    })
}

impl ContextForward {
    /// Gradients of a scalar loss w.r.t. `W1` and `W2`, given its gradient
    /// w.r.t. the output map. Accumulated into `dw1`, `dw2`.
    pub fn backward(&self, dmap: &[f64], conf: &ConfounderSet, dw1: &mut [f64], dw2: &mut [f64]) {
        let n = conf.n();
        let hw = conf.hw();
        let mut draw = dmap.to_vec();
        if let Some((mx, arg)) = self.norm {
            let s: f64 = dmap.iter().zip(&self.raw).map(|(g, r)| g * r).sum();
            draw.iter_mut().for_each(|g| *g /= mx);
            draw[arg] -= s / (mx * mx);
        }
        let prior = conf.prior();
        let dalpha: Vec<f64> = conf
            .entries
            .iter()
            .map(|c| prior * c.iter().zip(&draw).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        let inner: f64 = self.alpha.iter().zip(&dalpha).map(|(a, d)| a * d).sum();
        let scale = (n as f64).sqrt();
        let dlogit: Vec<f64> = self
            .alpha
            .iter()
            .zip(&dalpha)
            .map(|(a, d)| a * (d - inner) / scale)
            .collect();
        // logit_i = query · keys_i
        let mut dquery = vec![0.0; n];
        for (dl, key) in dlogit.iter().zip(&self.keys) {
            for (dq, kv) in dquery.iter_mut().zip(key) {
                *dq += dl * kv;
            }
        }
        for k in 0..n {
            let row = &mut dw1[k * hw..(k + 1) * hw];
            if dquery[k] != 0.0 {
                for (d, x) in row.iter_mut().zip(&self.x_fg) {
                    *d += dquery[k] * x;
                }
            }
            let row = &mut dw2[k * hw..(k + 1) * hw];
            for (dl, c) in dlogit.iter().zip(&conf.entries) {
                let g = dl * self.query[k];
                if g != 0.0 {
                    for (d, cv) in row.iter_mut().zip(c) {
                        *d += g * cv;
                    }
                }
            }
        }
    }
}

/// Context map for a predicted mask. The `1/n` prior scale is kept; no
/// renormalization is applied.
pub fn compute_context_map(x_m: &ClassMask, conf: &ConfounderSet, proj: &ProjectionPair) -> Result<ContextMap> {
    if x_m.dims() != (conf.height, conf.width) {
        return Err(Error::Shape(format!(
            "mask {:?} vs confounders {:?}",
            x_m.dims(),
            (conf.height, conf.width)
        )));
    }
    let fwd = context_forward(&foreground_vector(x_m), conf, proj, false)?;
    Ok(ContextMap {
        height: conf.height,
        width: conf.width,
        values: fwd.map,
    })
}

/// One forward pass with the averaged context against `n` passes with each
/// stratum's `α_i c_i`, averaged with weights `P(c_i)` at the probability level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NwgmCheck {
    pub approx_scores: Vec<f64>,
    pub exact_scores: Vec<f64>,
    /// Per-class `|exact − approx|` on sigmoid probabilities.
    pub gap: Vec<f64>,
}

impl NwgmCheck {
    pub fn max_gap(&self) -> f64 {
        self.gap.iter().copied().fold(0.0, f64::max)
    }
}

pub fn nwgm_forward_check(
    classifier: &crate::models::Classifier,
    image: &RgbImage,
    x_m: &ClassMask,
    conf: &ConfounderSet,
) -> Result<NwgmCheck> {
    use crate::scm::sigmoid;
    let proj = classifier.projection();
    let fwd = context_forward(&foreground_vector(x_m), conf, &proj, false)?;
    let approx_logits = classifier.scores_with_map(image, &fwd.map)?;
    let prior = conf.prior();
    let mut exact = vec![0.0; approx_logits.len()];
    for (a, c) in fwd.alpha.iter().zip(&conf.entries) {
        let stratum: Vec<f64> = c.iter().map(|v| a * v).collect();
        let s = classifier.scores_with_map(image, &stratum)?;
        for (e, sv) in exact.iter_mut().zip(&s) {
            *e += prior * sigmoid(*sv);
        }
    }
    let approx: Vec<f64> = approx_logits.iter().map(|s| sigmoid(*s)).collect();
    let gap = exact.iter().zip(&approx).map(|(e, a)| (e - a).abs()).collect();
    Ok(NwgmCheck {
        approx_scores: approx,
        exact_scores: exact,
        gap,
    })
}
