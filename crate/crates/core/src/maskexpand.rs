//! Seed expansion by a random walk over a fixed colour/position affinity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{ClassMask, LabelSet, RgbImage, SeedMask, IGNORE};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffinityParams {
    /// L-infinity neighbourhood radius in pixels.
    pub gamma: usize,
    /// Elementwise power applied to the affinities.
    pub beta: f64,
    pub sigma_rgb: f64,
    pub sigma_xy: f64,
    /// Random-walk iterations.
    pub t_iters: usize,
}

impl Default for AffinityParams {
    fn default() -> Self {
        Self {
            gamma: 5,
            beta: 8.0,
            sigma_rgb: 0.5,
            sigma_xy: 6.0,
            t_iters: 32,
        }
    }
}

impl AffinityParams {
    pub fn validate(&self) -> Result<()> {
        if self.gamma < 1 {
            return Err(Error::Config("affinity radius must be at least 1".into()));
        }
        for (name, v) in [
            ("beta", self.beta),
            ("sigma_rgb", self.sigma_rgb),
            ("sigma_xy", self.sigma_xy),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Row-stochastic sparse transition matrix. Row `p` lists `(q, T[p,q])`
/// for every `q` within the radius, including `p` itself.
#[derive(Clone, Debug, PartialEq)]
pub struct AffinityGraph {
    pub height: usize,
    pub width: usize,
    pub params: AffinityParams,
    pub rows: Vec<Vec<(u32, f64)>>,
}

impl AffinityGraph {
    pub fn n_pixels(&self) -> usize {
        self.height * self.width
    }

    /// Dense copy of the transition matrix; for small graphs only.
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let n = self.n_pixels();
        let mut d = vec![vec![0.0; n]; n];
        for (p, row) in self.rows.iter().enumerate() {
            for &(q, v) in row {
                d[p][q as usize] = v;
            }
        }
        d
    }

    /// Transition whose every row is the self-loop.
    pub fn identity(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            params: AffinityParams::default(),
            rows: (0..height * width).map(|p| vec![(p as u32, 1.0)]).collect(),
        }
    }
}

pub fn build_affinity(image: &RgbImage, params: &AffinityParams) -> Result<AffinityGraph> {
    params.validate()?;
    let (h, w) = image.dims();
    let g = params.gamma as isize;
    let (ic, ix) = (
        1.0 / (2.0 * params.sigma_rgb * params.sigma_rgb),
        1.0 / (2.0 * params.sigma_xy * params.sigma_xy),
    );
    let mut rows = Vec::with_capacity(h * w);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let cp = image.pixel(y as usize, x as usize);
            let mut row = Vec::new();
            for qy in (y - g).max(0)..=(y + g).min(h as isize - 1) {
                for qx in (x - g).max(0)..=(x + g).min(w as isize - 1) {
                    let cq = image.pixel(qy as usize, qx as usize);
                    let dc: f64 = cp.iter().zip(&cq).map(|(a, b)| (a - b) * (a - b)).sum();
                    let dxy = ((qy - y) * (qy - y) + (qx - x) * (qx - x)) as f64;
                    // A^beta taken inside the exponent
                    let a = (-params.beta * (dc * ic + dxy * ix)).exp();
                    row.push(((qy as usize * w + qx as usize) as u32, a));
                }
            }
            let s: f64 = row.iter().map(|r| r.1).sum();
            // the self-loop has affinity 1, so s >= 1
            row.iter_mut().for_each(|r| r.1 /= s);
            rows.push(row);
        }
    }
    Ok(AffinityGraph {
        height: h,
        width: w,
        params: *params,
        rows,
    })
}

/// Score maps after `t_iters` steps of `score <- T^T score`, one per class in
/// `classes`, stored pixel-major (`scores[p * k + j]`).
pub fn propagate(graph: &AffinityGraph, seeds: &SeedMask, classes: &[u8], t_iters: usize) -> Result<Vec<f64>> {
    if seeds.dims() != (graph.height, graph.width) {
        return Err(Error::Shape(format!(
            "seed mask {:?} vs graph {}x{}",
            seeds.dims(),
            graph.height,
            graph.width
        )));
    }
    let k = classes.len();
    let n = graph.n_pixels();
    let mut score = vec![0.0; n * k];
    for (p, &s) in seeds.values().iter().enumerate() {
        if let Some(j) = classes.iter().position(|&c| c == s) {
            score[p * k + j] = 1.0;
        }
    }
    let mut next = vec![0.0; n * k];
    for _ in 0..t_iters {
        next.iter_mut().for_each(|v| *v = 0.0);
        for (p, row) in graph.rows.iter().enumerate() {
            let src = &score[p * k..(p + 1) * k];
            if src.iter().all(|v| *v == 0.0) {
                continue;
            }
            for &(q, t) in row {
                let dst = &mut next[q as usize * k..(q as usize + 1) * k];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += t * s;
                }
            }
        }
        std::mem::swap(&mut score, &mut next);
    }
    Ok(score)
}

/// Expands seeds for background and the image's labelled classes.
pub fn random_walk_expand(
    graph: &AffinityGraph,
    seeds: &SeedMask,
    labels: &LabelSet,
    t_iters: usize,
) -> Result<ClassMask> {
    let classes: Vec<u8> = std::iter::once(0)
        .chain(labels.iter().copied().filter(|&l| l != 0))
        .collect();
    let score = propagate(graph, seeds, &classes, t_iters)?;
    let k = classes.len();
    let values = score
        .chunks(k)
        .map(|s| {
            let mut best = 0;
            for j in 1..k {
                if s[j] > s[best] {
                    best = j;
                }
            }
            if s[best] > 0.0 {
                classes[best]
            } else {
                IGNORE
            }
        })
        .collect();
    ClassMask::from_vec(graph.height, graph.width, values)
}
