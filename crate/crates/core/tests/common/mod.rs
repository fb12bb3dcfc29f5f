//! Reference implementations written against the definitions, plus shared
//! fixtures.

#![allow(dead_code)]

use conta::context::{ConfounderSet, ConfounderSource};
use conta::models::{BlockSpec, Classifier, ClassifierSample, ClassifierSpec, ConcatSite, ContextInput};
use conta::scm::DiscreteScm;
use conta::{ClassMask, LabelSet, RgbImage, IGNORE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// P(c) P(x|c) P(m|x,c) P(y|x,m).
pub fn joint_entry(s: &DiscreteScm, c: usize, x: usize, m: usize, y: usize) -> f64 {
    s.p_c[c] * s.p_x_given_c[c][x] * s.p_m_given_xc[x][c][m] * s.p_y_given_xm[x][m][y]
}

/// P(Y | X = x) by summing the joint.
pub fn observe_oracle(s: &DiscreteScm, x: usize) -> Vec<f64> {
    let [nc, _, nm, ny] = s.cards;
    let mut num = vec![0.0; ny];
    for (y, v) in num.iter_mut().enumerate() {
        for c in 0..nc {
            for m in 0..nm {
                *v += joint_entry(s, c, x, m, y);
            }
        }
    }
    let z: f64 = num.iter().sum();
    num.iter().map(|v| v / z).collect()
}

/// P(Y | do(X = x)): drop the P(x|c) factor and sum out c and m.
pub fn intervene_oracle(s: &DiscreteScm, x: usize) -> Vec<f64> {
    let [nc, _, nm, ny] = s.cards;
    let mut out = vec![0.0; ny];
    for c in 0..nc {
        for m in 0..nm {
            for (y, o) in out.iter_mut().enumerate() {
                *o += s.p_c[c] * s.p_m_given_xc[x][c][m] * s.p_y_given_xm[x][m][y];
            }
        }
    }
    out
}

/// Σ_c P(y | x, m = f(x,c)) P(c), with P(y|x,m) read off the joint.
pub fn backdoor_oracle(s: &DiscreteScm, x: usize) -> Vec<f64> {
    let [nc, _, _, ny] = s.cards;
    let f = s.f.as_ref().expect("deterministic mediator");
    let mut out = vec![0.0; ny];
    for c in 0..nc {
        let m = f[x][c];
        let mut cond = vec![0.0; ny];
        for (y, v) in cond.iter_mut().enumerate() {
            for c2 in 0..nc {
                *v += joint_entry(s, c2, x, m, y);
            }
        }
        let z: f64 = cond.iter().sum();
        for y in 0..ny {
            out[y] += s.p_c[c] * cond[y] / z;
        }
    }
    out
}

/// Π_i σ(s_i) for i ∈ Y and (1 − σ(s_i)) otherwise.
pub fn multilabel_product(scores: &[f64], labels: &LabelSet) -> f64 {
    let mut p = 1.0;
    for (i, &s) in scores.iter().enumerate() {
        let on = labels.contains(&(i as u8 + 1));
        p *= if on { sigmoid(s) } else { 1.0 - sigmoid(s) };
    }
    p
}

/// Context map from the explicit formula: similarities, softmax, then the
/// prior-weighted sum. Returns `(alpha, map)`.
pub fn context_oracle(x: &[f64], c: &[Vec<f64>], w1: &[f64], w2: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = c.len();
    let hw = x.len();
    let mut q = vec![0.0; n];
    for k in 0..n {
        for p in 0..hw {
            q[k] += w1[k * hw + p] * x[p];
        }
    }
    let mut sims = vec![0.0; n];
    for i in 0..n {
        let mut key = vec![0.0; n];
        for k in 0..n {
            for p in 0..hw {
                key[k] += w2[k * hw + p] * c[i][p];
            }
        }
        sims[i] = (0..n).map(|k| q[k] * key[k]).sum::<f64>() / (n as f64).sqrt();
    }
    let e: Vec<f64> = sims.iter().map(|s| s.exp()).collect();
    let z: f64 = e.iter().sum();
    let alpha: Vec<f64> = e.iter().map(|v| v / z).collect();
    let mut map = vec![0.0; hw];
    for i in 0..n {
        for p in 0..hw {
            map[p] += alpha[i] * c[i][p] / n as f64;
        }
    }
    (alpha, map)
}

/// Per-class IoU by visiting every pixel once per class.
pub fn miou_oracle(pred: &[u8], gt: &[u8], n_classes: usize) -> (Vec<Option<f64>>, f64) {
    let mut per = Vec::new();
    for k in 0..=n_classes as u8 {
        let (mut inter, mut union) = (0usize, 0usize);
        for (&p, &g) in pred.iter().zip(gt) {
            if g == IGNORE {
                continue;
            }
            if p == k && g == k {
                inter += 1;
            }
            if p == k || g == k {
                union += 1;
            }
        }
        per.push((union > 0).then(|| inter as f64 / union as f64));
    }
    let vals: Vec<f64> = per.iter().flatten().copied().collect();
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    (per, mean)
}

/// Seed rule at one pixel given each class's value there.
pub fn seed_oracle(values: &[f64], present: &LabelSet, fg: f64, bg: f64) -> u8 {
    let mut best: Option<(u8, f64)> = None;
    let mut mx: f64 = 0.0;
    for (i, &v) in values.iter().enumerate() {
        let class = i as u8 + 1;
        if !present.contains(&class) {
            continue;
        }
        mx = mx.max(v);
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((class, v));
        }
    }
    match best {
        Some((class, v)) if v >= fg => class,
        _ if mx <= bg => 0,
        _ => IGNORE,
    }
}

pub fn random_mask(r: &mut ChaCha8Rng, h: usize, w: usize, n_classes: u8, ignore: bool) -> ClassMask {
    let values = (0..h * w)
        .map(|_| {
            if ignore && r.random_bool(0.1) {
                IGNORE
            } else {
                r.random_range(0..=n_classes)
            }
        })
        .collect();
    ClassMask::from_vec(h, w, values).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn toy_spec(concat: ConcatSite) -> ClassifierSpec {
    let b = |channels, stride| BlockSpec { channels, stride };
    ClassifierSpec {
        n_classes: 2,
        height: 4,
        width: 4,
        blocks: vec![b(3, 1), b(4, 2), b(4, 1), b(3, 2), b(3, 1)],
        concat,
        context_channels: 1,
    }
}

pub fn random_image(r: &mut rand_chacha::ChaCha8Rng, h: usize, w: usize) -> RgbImage {
    RgbImage::from_chw(h, w, (0..3 * h * w).map(|_| r.random::<f64>()).collect()).unwrap()
}

/// Worst relative error between backprop and central differences over every
/// parameter of a toy classifier with the adjusted context branch live.
pub fn toy_gradient_check(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut model = Classifier::init(toy_spec(ConcatSite::Dense), seed).unwrap();
    for (name, data) in model.params.names.clone().iter().zip(model.params.data.iter_mut()) {
        if name.starts_with("ctx") || name.starts_with("proj") {
            data.iter_mut().for_each(|v| *v = r.random_range(-0.5..0.5));
        }
    }
    let img = random_image(&mut r, 4, 4);
    let conf = ConfounderSet {
        height: 4,
        width: 4,
        entries: (0..2).map(|_| (0..16).map(|_| r.random::<f64>()).collect()).collect(),
        source: ConfounderSource::SegMask,
        counts: vec![1, 1],
        warnings: vec![],
    };
    let x_fg: Vec<f64> = (0..16).map(|i| (i % 3 == 0) as u8 as f64).collect();
    let labels: LabelSet = [1].into();
    let sample = ClassifierSample {
        image: &img,
        labels: &labels,
        context: ContextInput::Adjusted {
            x_fg: &x_fg,
            conf: &conf,
            normalize_max: false,
        },
    };
    let (_, grads) = model.loss_and_grad(&sample).unwrap();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for t in 0..model.params.data.len() {
        for i in 0..model.params.data[t].len() {
            let mut p = model.clone();
            p.params.data[t][i] += h;
            let mut m = model.clone();
            m.params.data[t][i] -= h;
            let fd = (p.loss_and_grad(&sample).unwrap().0 - m.loss_and_grad(&sample).unwrap().0) / (2.0 * h);
            let an = grads.data[t][i];
            // tiny gradients are compared absolutely
            let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-4);
            worst = worst.max(err);
        }
    }
    worst
}
