//! Exact inference on the four-node discrete causal model
//! `C → X`, `C → M ← X`, `X → Y ← M`.
//!
//! Every quantity is computed by enumeration, so the identities checked here
//! (interventional distribution vs. stratified adjustment, and the gap left
//! by moving an expectation inside a sigmoid) hold to rounding error.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest supported cardinality of any variable.
pub const MAX_CARD: usize = 8;

const ROW_TOL: f64 = 1e-12;
const DIST_TOL: f64 = 1e-10;

/// Gap threshold below which the adjustment identity is considered to hold.
pub const BACKDOOR_TOL: f64 = 1e-10;

/// A normalized distribution over the outcomes of one variable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistTable(Vec<f64>);

impl DistTable {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Validation("empty distribution".into()));
        }
        let sum: f64 = values.iter().sum();
        if values
            .iter()
            .any(|v| !v.is_finite() || *v < -DIST_TOL || *v > 1.0 + DIST_TOL)
            || (sum - 1.0).abs() > DIST_TOL
        {
            return Err(Error::Validation(format!("not a distribution (sum {sum}): {values:?}")));
        }
        Ok(Self(values.into_iter().map(|v| v.clamp(0.0, 1.0)).collect()))
    }

    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    /// Point mass on outcome `k` of `n`.
    pub fn point(n: usize, k: usize) -> Self {
        let mut v = vec![0.0; n];
        v[k] = 1.0;
        Self(v)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn total_variation(&self, other: &DistTable) -> f64 {
        0.5 * self.0.iter().zip(&other.0).map(|(a, b)| (a - b).abs()).sum::<f64>()
    }
}

/// Conditional probability tables for the model. Fields mirror the JSON document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteScm {
    /// Cardinalities of (C, X, M, Y).
    pub cards: [usize; 4],
    pub p_c: Vec<f64>,
    /// Indexed `[c][x]`.
    pub p_x_given_c: Vec<Vec<f64>>,
    /// Indexed `[x][c][m]`.
    pub p_m_given_xc: Vec<Vec<Vec<f64>>>,
    /// Indexed `[x][m][y]`.
    pub p_y_given_xm: Vec<Vec<Vec<f64>>>,
    /// Deterministic mediator `m = f[x][c]`, when the mediator has no noise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f: Option<Vec<Vec<usize>>>,
}

/// Joint distribution over `(c, x, m, y)`.
#[derive(Clone, Debug)]
pub struct Joint {
    cards: [usize; 4],
    data: Vec<f64>,
}

impl Joint {
    fn index(&self, c: usize, x: usize, m: usize, y: usize) -> usize {
        let [_, nx, nm, ny] = self.cards;
        ((c * nx + x) * nm + m) * ny + y
    }

    pub fn get(&self, c: usize, x: usize, m: usize, y: usize) -> f64 {
        self.data[self.index(c, x, m, y)]
    }

    pub fn cards(&self) -> [usize; 4] {
        self.cards
    }

    pub fn total(&self) -> f64 {
        self.data.iter().sum()
    }

    /// P(X = x).
    pub fn marginal_x(&self, x: usize) -> f64 {
        let [nc, _, nm, ny] = self.cards;
        let mut s = 0.0;
        for c in 0..nc {
            for m in 0..nm {
                for y in 0..ny {
                    s += self.get(c, x, m, y);
                }
            }
        }
        s
    }
}

/// Result of checking the adjustment formula against the interventional distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackdoorReport {
    pub max_abs_gap: f64,
    pub pass: bool,
}

/// Exact and sigmoid-of-expectation values for one set of stratum scores.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NwgmGap {
    pub exact: f64,
    pub approx: f64,
    pub gap: f64,
}

fn check_row(name: &str, row: &[f64], expect_len: usize) -> Result<()> {
    if row.len() != expect_len {
        return Err(Error::Validation(format!(
            "{name} has {} entries, expected {expect_len}",
            row.len()
        )));
    }
    if let Some(v) = row.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::Validation(format!("{name} has invalid entry {v}")));
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > ROW_TOL {
        return Err(Error::Validation(format!("{name} is not stochastic: sums to {sum}")));
    }
    Ok(())
}

fn check_len<T>(name: &str, v: &[T], expect: usize) -> Result<()> {
    if v.len() != expect {
        return Err(Error::Validation(format!(
            "{name} has {} rows, expected {expect}",
            v.len()
        )));
    }
    Ok(())
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl DiscreteScm {
    /// Validates every table; error messages name the offending row.
    pub fn validate(&self) -> Result<()> {
        let [nc, nx, nm, ny] = self.cards;
        for (name, n) in [("C", nc), ("X", nx), ("M", nm), ("Y", ny)] {
            if n == 0 || n > MAX_CARD {
                return Err(Error::Validation(format!(
                    "cardinality of {name} is {n}, must be in 1..={MAX_CARD}"
                )));
            }
        }
        check_row("p_c", &self.p_c, nc)?;
        check_len("p_x_given_c", &self.p_x_given_c, nc)?;
        for (c, row) in self.p_x_given_c.iter().enumerate() {
            check_row(&format!("p_x_given_c[{c}]"), row, nx)?;
        }
        check_len("p_m_given_xc", &self.p_m_given_xc, nx)?;
        for (x, rows) in self.p_m_given_xc.iter().enumerate() {
            check_len(&format!("p_m_given_xc[{x}]"), rows, nc)?;
            for (c, row) in rows.iter().enumerate() {
                check_row(&format!("p_m_given_xc[{x}][{c}]"), row, nm)?;
            }
        }
        check_len("p_y_given_xm", &self.p_y_given_xm, nx)?;
        for (x, rows) in self.p_y_given_xm.iter().enumerate() {
            check_len(&format!("p_y_given_xm[{x}]"), rows, nm)?;
            for (m, row) in rows.iter().enumerate() {
                check_row(&format!("p_y_given_xm[{x}][{m}]"), row, ny)?;
            }
        }
        if let Some(f) = &self.f {
            check_len("f", f, nx)?;
            for (x, row) in f.iter().enumerate() {
                check_len(&format!("f[{x}]"), row, nc)?;
                for (c, &m) in row.iter().enumerate() {
                    if m >= nm {
                        return Err(Error::Validation(format!("f[{x}][{c}] = {m} out of range for M")));
                    }
                    for (mm, &p) in self.p_m_given_xc[x][c].iter().enumerate() {
                        let want = if mm == m { 1.0 } else { 0.0 };
                        if p != want {
                            return Err(Error::Validation(format!(
                                "p_m_given_xc[{x}][{c}] disagrees with f[{x}][{c}] = {m}"
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let scm: Self = serde_json::from_str(s)?;
        scm.validate()?;
        Ok(scm)
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&s)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("scm serializes")
    }

    fn check_x(&self, x: usize) -> Result<()> {
        if x >= self.cards[1] {
            return Err(Error::Validation(format!("x = {x} out of range 0..{}", self.cards[1])));
        }
        Ok(())
    }

    /// Factorized joint `P(c) P(x|c) P(m|x,c) P(y|x,m)`.
    pub fn joint(&self) -> Result<Joint> {
        self.validate()?;
        let [nc, nx, nm, ny] = self.cards;
        let mut data = Vec::with_capacity(nc * nx * nm * ny);
        for c in 0..nc {
            for x in 0..nx {
                let pcx = self.p_c[c] * self.p_x_given_c[c][x];
                for m in 0..nm {
                    let pcxm = pcx * self.p_m_given_xc[x][c][m];
                    for y in 0..ny {
                        data.push(pcxm * self.p_y_given_xm[x][m][y]);
                    }
                }
            }
        }
        Ok(Joint {
            cards: self.cards,
            data,
        })
    }

    /// Observational conditional P(Y | X = x).
    pub fn observe(&self, x: usize) -> Result<DistTable> {
        self.check_x(x)?;
        let joint = self.joint()?;
        let [nc, _, nm, ny] = self.cards;
        let mut out = vec![0.0; ny];
        for c in 0..nc {
            for m in 0..nm {
                for (y, o) in out.iter_mut().enumerate() {
                    *o += joint.get(c, x, m, y);
                }
            }
        }
        let px: f64 = out.iter().sum();
        if px <= 0.0 {
            return Err(Error::NullEvent(format!("P(X={x}) = 0")));
        }
        DistTable::new(out.into_iter().map(|v| v / px).collect())
    }

    /// Interventional P(Y | do(X = x)) by truncated factorization: the
    /// `P(x|c)` factor is dropped and `C` keeps its prior.
    pub fn intervene(&self, x: usize) -> Result<DistTable> {
        self.validate()?;
        self.check_x(x)?;
        let [nc, _, nm, ny] = self.cards;
        // P(m | do(x)) first, then push through the outcome mechanism.
        let mut p_m = vec![0.0; nm];
        for c in 0..nc {
            for (m, pm) in p_m.iter_mut().enumerate() {
                *pm += self.p_c[c] * self.p_m_given_xc[x][c][m];
            }
        }
        let mut out = vec![0.0; ny];
        for (m, pm) in p_m.iter().enumerate() {
            for (y, o) in out.iter_mut().enumerate() {
                *o += pm * self.p_y_given_xm[x][m][y];
            }
        }
        DistTable::new(out)
    }

    /// Stratified adjustment `Σ_c P(y | x, m = f(x,c)) P(c)` where the
    /// conditional is read off this model's own joint.
    pub fn backdoor_adjust(&self, x: usize) -> Result<DistTable> {
        self.check_x(x)?;
        let f = self
            .f
            .as_ref()
            .ok_or_else(|| Error::Unsupported("backdoor adjustment needs a deterministic mediator f".into()))?;
        let joint = self.joint()?;
        let [nc, _, _, ny] = self.cards;
        let mut out = vec![0.0; ny];
        for c in 0..nc {
            if self.p_c[c] == 0.0 {
                continue;
            }
            let m = f[x][c];
            let mut cond = vec![0.0; ny];
            for cc in 0..nc {
                for (y, v) in cond.iter_mut().enumerate() {
                    *v += joint.get(cc, x, m, y);
                }
            }
            let pxm: f64 = cond.iter().sum();
            if pxm <= 0.0 {
                return Err(Error::Positivity { x, c });
            }
            for (o, v) in out.iter_mut().zip(&cond) {
                *o += self.p_c[c] * v / pxm;
            }
        }
        DistTable::new(out)
    }

    /// Largest `|adjusted − interventional|` over all `(x, y)`.
    pub fn verify_backdoor(&self) -> Result<BackdoorReport> {
        let mut max_abs_gap: f64 = 0.0;
        for x in 0..self.cards[1] {
            let adj = self.backdoor_adjust(x)?;
            let int = self.intervene(x)?;
            for (a, b) in adj.values().iter().zip(int.values()) {
                max_abs_gap = max_abs_gap.max((a - b).abs());
            }
        }
        Ok(BackdoorReport {
            max_abs_gap,
            pass: max_abs_gap <= BACKDOOR_TOL,
        })
    }

    /// Largest total-variation distance between `P(Y|x)` and `P(Y|do(x))`,
    /// over values of `x` with positive probability.
    pub fn confounding_gap(&self) -> Result<f64> {
        let joint = self.joint()?;
        let mut best: f64 = 0.0;
        for x in 0..self.cards[1] {
            if joint.marginal_x(x) <= 0.0 {
                continue;
            }
            best = best.max(self.observe(x)?.total_variation(&self.intervene(x)?));
        }
        Ok(best)
    }

    /// Random model with strictly positive tables. With `deterministic`, the
    /// mediator is a random function of `(x, c)`.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, cards: [usize; 4], deterministic: bool) -> Self {
        let [nc, nx, nm, ny] = cards;
        let row = |n: usize, rng: &mut R| -> Vec<f64> {
            let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
            let s: f64 = raw.iter().sum();
            raw.into_iter().map(|v| v / s).collect()
        };
        let p_c = row(nc, rng);
        let p_x_given_c = (0..nc).map(|_| row(nx, rng)).collect();
        let (p_m_given_xc, f) = if deterministic {
            let f: Vec<Vec<usize>> = (0..nx)
                .map(|_| (0..nc).map(|_| rng.random_range(0..nm)).collect())
                .collect();
            let p = f
                .iter()
                .map(|fx| {
                    fx.iter()
                        .map(|&m| (0..nm).map(|k| if k == m { 1.0 } else { 0.0 }).collect())
                        .collect()
                })
                .collect();
            (p, Some(f))
        } else {
            let p = (0..nx).map(|_| (0..nc).map(|_| row(nm, rng)).collect()).collect();
            (p, None)
        };
        let p_y_given_xm = (0..nx).map(|_| (0..nm).map(|_| row(ny, rng)).collect()).collect();
        Self {
            cards,
            p_c,
            p_x_given_c,
            p_m_given_xc,
            p_y_given_xm,
            f,
        }
    }

    /// Random cardinalities in `2..=max_card` (C may be as small as 1).
    pub fn random_cards<R: Rng + ?Sized>(rng: &mut R, max_card: usize) -> [usize; 4] {
        let max_card = max_card.clamp(2, MAX_CARD);
        [
            rng.random_range(1..=max_card),
            rng.random_range(2..=max_card),
            rng.random_range(2..=max_card),
            rng.random_range(2..=max_card),
        ]
    }

    /// Shipped model with strong `C → X` and `C → M → Y` paths, where
    /// conditioning and intervening disagree by a wide margin.
    pub fn confounded_example() -> Self {
        Self::from_json_str(include_str!("../data/confounded_scm.json")).expect("shipped example is valid")
    }
}

/// Exact vs. approximated probability for one positive term, with the
/// negative score fixed at zero: `Σ_c σ(s[c]) P(c)` against `σ(Σ_c s[c] P(c))`.
pub fn nwgm_gap(scores: &[f64], prior: &DistTable) -> Result<NwgmGap> {
    if scores.len() != prior.len() {
        return Err(Error::Shape(format!(
            "{} scores for a prior over {} strata",
            scores.len(),
            prior.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Validation("scores must be finite".into()));
    }
    // Only strata with positive prior mass matter; when they all share one
    // score both sides are that score's sigmoid, with no rounding residue.
    let mut support = scores
        .iter()
        .zip(prior.values())
        .filter(|(_, p)| **p > 0.0)
        .map(|(s, _)| *s);
    let first = support.next().expect("a distribution has positive mass");
    if support.all(|s| s == first) {
        let v = sigmoid(first);
        return Ok(NwgmGap {
            exact: v,
            approx: v,
            gap: 0.0,
        });
    }
    let exact: f64 = scores.iter().zip(prior.values()).map(|(s, p)| sigmoid(*s) * p).sum();
    let mean: f64 = scores.iter().zip(prior.values()).map(|(s, p)| s * p).sum();
    let approx = sigmoid(mean);
    let exact = exact.clamp(0.0, 1.0);
    Ok(NwgmGap {
        exact,
        approx,
        gap: (exact - approx).abs(),
    })
}

/// Scores pulled toward their prior-weighted mean: `mean + λ (s − mean)`.
pub fn contract_scores(scores: &[f64], prior: &DistTable, lambda: f64) -> Vec<f64> {
    let mean: f64 = scores.iter().zip(prior.values()).map(|(s, p)| s * p).sum();
    scores.iter().map(|s| mean + lambda * (s - mean)).collect()
}
