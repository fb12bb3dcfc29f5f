use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{TrainConfig, TrainReport};
use crate::error::{Error, Result};
use crate::nn::{self, ConvShape, Optimizer, ParamSet, Tensor};
use crate::raster::{ClassMask, RgbImage, IGNORE};

/// Three-level encoder-decoder with skip connections. Outputs `n_classes + 1`
/// logits per pixel (background is id 0).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmenterSpec {
    pub n_classes: usize,
    pub height: usize,
    pub width: usize,
    /// Encoder widths at full, 1/2 and 1/4 resolution.
    pub widths: [usize; 3],
}

impl SegmenterSpec {
    pub fn standard(n_classes: usize, height: usize, width: usize) -> Self {
        Self {
            n_classes,
            height,
            width,
            widths: [8, 16, 16],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 || self.n_classes >= IGNORE as usize {
            return Err(Error::Config(format!(
                "segmenter cannot have {} classes",
                self.n_classes
            )));
        }
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(4) || !self.width.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "segmenter input {}x{} must be a positive multiple of 4",
                self.height, self.width
            )));
        }
        if self.widths.contains(&0) {
            return Err(Error::Config("segmenter widths must be positive".into()));
        }
        Ok(())
    }

    fn convs(&self) -> [ConvShape; 6] {
        let [a, b, c] = self.widths;
        [
            ConvShape::new(3, a, 3, 1),
            ConvShape::new(a, b, 3, 1),
            ConvShape::new(b, c, 3, 1),
            ConvShape::new(c + b, b, 3, 1),
            ConvShape::new(b + a, a, 3, 1),
            ConvShape::new(a, self.n_classes + 1, 1, 1),
        ]
    }
}

const NAMES: [&str; 6] = ["enc1", "enc2", "enc3", "dec2", "dec1", "head"];

#[derive(Clone, Debug, PartialEq)]
pub struct Segmenter {
    pub spec: SegmenterSpec,
    pub params: ParamSet,
}

struct Cache {
    /// Inputs and outputs of each conv, in `NAMES` order.
    inputs: Vec<Tensor>,
    outputs: Vec<Tensor>,
    cols: Vec<Vec<f64>>,
}

/// Outcome of [`train_segmenter`].
#[derive(Clone, Debug, PartialEq)]
pub struct SegmenterTraining {
    pub model: Segmenter,
    pub report: TrainReport,
    /// Indices of samples without a single labelled pixel.
    pub skipped: Vec<usize>,
}

impl Segmenter {
    pub fn init(spec: SegmenterSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for (name, s) in NAMES.iter().zip(spec.convs()) {
            params.push(
                format!("{name}.w"),
                vec![s.c_out, s.c_in, s.k, s.k],
                nn::he_init(&mut rng, &s),
            );
            params.push(format!("{name}.b"), vec![s.c_out], vec![0.0; s.c_out]);
        }
        Ok(Self { spec, params })
    }

    fn check_image(&self, image: &RgbImage) -> Result<()> {
        if image.dims() != (self.spec.height, self.spec.width) {
            return Err(Error::Shape(format!(
                "image {:?} vs segmenter input {}x{}",
                image.dims(),
                self.spec.height,
                self.spec.width
            )));
        }
        Ok(())
    }

    fn forward_cached(&self, image: &RgbImage) -> Result<Cache> {
        self.check_image(image)?;
        let convs = self.spec.convs();
        let p = &self.params.data;
        let mut inputs = Vec::with_capacity(6);
        let mut outputs = Vec::with_capacity(6);
        let mut cols = Vec::with_capacity(6);
        let mut run = |i: usize, x: Tensor, relu: bool| {
            let (mut y, c) = convs[i].forward(&x, &p[2 * i], Some(&p[2 * i + 1]));
            if relu {
                y.relu_inplace();
            }
            inputs.push(x);
            cols.push(c);
            outputs.push(y.clone());
            y
        };
        let x = Tensor::from_vec(3, self.spec.height, self.spec.width, image.data().to_vec());
        let e1 = run(0, x, true);
        let e2 = run(1, e1.avg_pool(2), true);
        let e3 = run(2, e2.avg_pool(2), true);
        let d2 = run(3, Tensor::concat(&[&e3.upsample(2), &e2]), true);
        let d1 = run(4, Tensor::concat(&[&d2.upsample(2), &e1]), true);
        run(5, d1, false);
        Ok(Cache { inputs, outputs, cols })
    }

    /// Per-pixel logits, shape `(n+1, h, w)`.
    pub fn logits(&self, image: &RgbImage) -> Result<Tensor> {
        Ok(self.forward_cached(image)?.outputs.pop().expect("six convs"))
    }

    /// Per-pixel class posteriors, shape `(n+1, h, w)`.
    pub fn posteriors(&self, image: &RgbImage) -> Result<Tensor> {
        let mut t = self.logits(image)?;
        let hw = t.hw();
        for p in 0..hw {
            let mx = (0..t.c).map(|k| t.data[k * hw + p]).fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for k in 0..t.c {
                let e = (t.data[k * hw + p] - mx).exp();
                t.data[k * hw + p] = e;
                s += e;
            }
            for k in 0..t.c {
                t.data[k * hw + p] /= s;
            }
        }
        Ok(t)
    }

    /// Arg-max labelling; ties go to the smaller id.
    pub fn predict(&self, image: &RgbImage) -> Result<ClassMask> {
        let t = self.logits(image)?;
        let hw = t.hw();
        let values = (0..hw)
            .map(|p| {
                let mut best = 0;
                for k in 1..t.c {
                    if t.data[k * hw + p] > t.data[best * hw + p] {
                        best = k;
                    }
                }
                best as u8
            })
            .collect();
        ClassMask::from_vec(t.h, t.w, values)
    }

    /// Mean cross-entropy over labelled pixels and its gradient. `None` when
    /// the target has no labelled pixel.
    pub fn loss_and_grad(&self, image: &RgbImage, target: &ClassMask) -> Result<Option<(f64, ParamSet)>> {
        if target.dims() != (self.spec.height, self.spec.width) {
            return Err(Error::Shape("target mask does not match the segmenter input".into()));
        }
        target.check_ids(self.spec.n_classes)?;
        let valid = target.values().iter().filter(|&&v| v != IGNORE).count();
        if valid == 0 {
            return Ok(None);
        }
        let cache = self.forward_cached(image)?;
        let logits = &cache.outputs[5];
        let hw = logits.hw();
        let k = logits.c;
        let mut dlogits = Tensor::zeros(k, logits.h, logits.w);
        let mut loss = 0.0;
        let inv = 1.0 / valid as f64;
        for (p, &t) in target.values().iter().enumerate() {
            if t == IGNORE {
                continue;
            }
            let mx = (0..k)
                .map(|c| logits.data[c * hw + p])
                .fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..k).map(|c| (logits.data[c * hw + p] - mx).exp()).sum();
            loss += (mx + z.ln() - logits.data[t as usize * hw + p]) * inv;
            for c in 0..k {
                let pr = (logits.data[c * hw + p] - mx).exp() / z;
                dlogits.data[c * hw + p] = (pr - if c == t as usize { 1.0 } else { 0.0 }) * inv;
            }
        }
        let mut grads = self.params.zeros_like();
        let convs = self.spec.convs();
        let back = |i: usize, dy: &Tensor, grads: &mut ParamSet| -> Tensor {
            let x = &cache.inputs[i];
            let (lo, hi) = grads.data.split_at_mut(2 * i + 1);
            convs[i]
                .backward(
                    &cache.cols[i],
                    x.h,
                    x.w,
                    dy,
                    &self.params.data[2 * i],
                    &mut lo[2 * i],
                    Some(&mut hi[0]),
                    i > 0,
                )
                .unwrap_or_else(|| Tensor::zeros(0, 0, 0))
        };
        let [a, b, _] = self.spec.widths;
        let mut dd1 = back(5, &dlogits, &mut grads);
        dd1.relu_backward_inplace(&cache.outputs[4]);
        let parts = back(4, &dd1, &mut grads).split(&[b, a]);
        let mut dd2 = parts[0].upsample_backward(2);
        let mut de1 = parts[1].clone();
        dd2.relu_backward_inplace(&cache.outputs[3]);
        let parts = back(3, &dd2, &mut grads).split(&[self.spec.widths[2], b]);
        let mut de3 = parts[0].upsample_backward(2);
        let mut de2 = parts[1].clone();
        de3.relu_backward_inplace(&cache.outputs[2]);
        let g = back(2, &de3, &mut grads);
        let e2 = &cache.outputs[1];
        de2.data
            .iter_mut()
            .zip(&g.avg_pool_backward(2, e2.h, e2.w).data)
            .for_each(|(d, v)| *d += v);
        de2.relu_backward_inplace(e2);
        let g = back(1, &de2, &mut grads);
        let e1 = &cache.outputs[0];
        de1.data
            .iter_mut()
            .zip(&g.avg_pool_backward(2, e1.h, e1.w).data)
            .for_each(|(d, v)| *d += v);
        de1.relu_backward_inplace(e1);
        back(0, &de1, &mut grads);
        Ok(Some((loss, grads)))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let spec = serde_json::json!({ "model": "segmenter", "spec": self.spec });
        nn::write_archive(path, &spec, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, params) = nn::read_archive(path)?;
        if header.get("model").and_then(|m| m.as_str()) != Some("segmenter") {
            return Err(Error::Validation(format!("{} is not a segmenter", path.display())));
        }
        let spec: SegmenterSpec = serde_json::from_value(header["spec"].clone())?;
        let want = Segmenter::init(spec.clone(), 0)?;
        if want.params.names != params.names || want.params.shapes != params.shapes {
            return Err(Error::Validation(format!(
                "{}: parameters do not match the embedded spec",
                path.display()
            )));
        }
        Ok(Self { spec, params })
    }
}

/// Trains on `(image, mask)` pairs. Masks that are entirely IGNORE are
/// skipped with a warning; if every mask is, training fails.
pub fn train_segmenter(
    samples: &[(&RgbImage, &ClassMask)],
    spec: &SegmenterSpec,
    cfg: &TrainConfig,
) -> Result<SegmenterTraining> {
    cfg.validate()?;
    let model0 = Segmenter::init(spec.clone(), cfg.seed)?;
    let mut usable = Vec::new();
    let mut skipped = Vec::new();
    for (i, (img, mask)) in samples.iter().enumerate() {
        model0.check_image(img)?;
        if mask.dims() != img.dims() {
            return Err(Error::Shape(format!("sample {i}: mask and image sizes differ")));
        }
        mask.check_ids(spec.n_classes)?;
        if mask.values().iter().all(|&v| v == IGNORE) {
            log::warn!("segmenter sample {i} has no labelled pixel; skipped");
            skipped.push(i);
        } else {
            usable.push(i);
        }
    }
    if usable.is_empty() {
        return Err(Error::Training("every segmentation target is entirely IGNORE".into()));
    }
    let mut model = model0;
    let mut opt = Optimizer::new(cfg.optimizer, &model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7365_676d);
    let per_epoch = usable.len().div_ceil(cfg.batch_size);
    let max_it = cfg.epochs * per_epoch;
    let mut it = 0;
    let mut report = TrainReport::default();
    for _ in 0..cfg.epochs {
        usable.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in usable.chunks(cfg.batch_size) {
            let results: Vec<Result<Option<(f64, ParamSet)>>> = batch
                .par_iter()
                .map(|&i| model.loss_and_grad(samples[i].0, samples[i].1))
                .collect();
            let mut grads = model.params.zeros_like();
            for r in results {
                let (l, g) = r?.expect("usable samples have labelled pixels");
                epoch_loss += l;
                grads.add_assign(&g);
            }
            grads.scale(1.0 / batch.len() as f64);
            let lr = nn::poly_lr(cfg.learning_rate, cfg.poly_power, it, max_it);
            opt.step(&mut model.params, &grads, lr);
            it += 1;
        }
        let mean = epoch_loss / usable.len() as f64;
        if !mean.is_finite() || !model.params.is_finite() {
            return Err(Error::Training("segmenter diverged".into()));
        }
        report.epoch_losses.push(mean);
    }
    Ok(SegmenterTraining { model, report, skipped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::OptimizerKind;
    use rand::Rng;

    fn toy() -> (SegmenterSpec, RgbImage, ClassMask) {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = SegmenterSpec {
            n_classes: 2,
            height: 4,
            width: 8,
            widths: [2, 3, 2],
        };
        let img = RgbImage::from_chw(4, 8, (0..96).map(|_| rng.random::<f64>()).collect()).unwrap();
        let mut vals: Vec<u8> = (0..32).map(|i| (i % 3) as u8).collect();
        vals[5] = IGNORE;
        (spec, img, ClassMask::from_vec(4, 8, vals).unwrap())
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (spec, img, mask) = toy();
        let model = Segmenter::init(spec, 3).unwrap();
        let (_, grads) = model.loss_and_grad(&img, &mask).unwrap().unwrap();
        let h = 1e-6;
        for t in 0..model.params.data.len() {
            let len = model.params.data[t].len();
            for i in [0, len / 2, len - 1] {
                let mut p = model.clone();
                p.params.data[t][i] += h;
                let mut m = model.clone();
                m.params.data[t][i] -= h;
                let lp = p.loss_and_grad(&img, &mask).unwrap().unwrap().0;
                let lm = m.loss_and_grad(&img, &mask).unwrap().unwrap().0;
                let fd = (lp - lm) / (2.0 * h);
                let an = grads.data[t][i];
                let denom = fd.abs().max(an.abs()).max(1e-6);
                assert!(
                    (fd - an).abs() / denom < 1e-4,
                    "{}[{i}]: fd {fd} vs analytic {an}",
                    model.params.names[t]
                );
            }
        }
    }

    #[test]
    fn ignore_pixels_do_not_affect_the_loss() {
        let (spec, img, mask) = toy();
        let model = Segmenter::init(spec, 3).unwrap();
        let mut other = mask.clone();
        other.values_mut()[5] = IGNORE;
        let a = model.loss_and_grad(&img, &mask).unwrap().unwrap();
        let b = model.loss_and_grad(&img, &other).unwrap().unwrap();
        assert_eq!(a.0, b.0);
    }

    #[test]
    fn posteriors_sum_to_one_and_predict_is_argmax() {
        let (spec, img, _) = toy();
        let model = Segmenter::init(spec, 3).unwrap();
        let post = model.posteriors(&img).unwrap();
        let pred = model.predict(&img).unwrap();
        let hw = post.hw();
        for p in 0..hw {
            let s: f64 = (0..post.c).map(|k| post.data[k * hw + p]).sum();
            assert!((s - 1.0).abs() < 1e-12);
            let best = pred.values()[p] as usize;
            assert!((0..post.c).all(|k| post.data[k * hw + p] <= post.data[best * hw + p]));
        }
    }

    #[test]
    fn all_ignore_targets_are_skipped_or_rejected() {
        let (spec, img, mask) = toy();
        let blank = ClassMask::filled(4, 8, IGNORE);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 2,
            learning_rate: 0.01,
            poly_power: 0.0,
            seed: 0,
            optimizer: OptimizerKind::Adam,
        };
        let out = train_segmenter(&[(&img, &blank), (&img, &mask)], &spec, &cfg).unwrap();
        assert_eq!(out.skipped, vec![0]);
        assert!(matches!(
            train_segmenter(&[(&img, &blank)], &spec, &cfg),
            Err(Error::Training(_))
        ));
    }

    #[test]
    fn learns_a_constant_mask() {
        let (spec, img, _) = toy();
        let target = ClassMask::filled(4, 8, 2);
        let cfg = TrainConfig {
            epochs: 60,
            batch_size: 1,
            learning_rate: 0.05,
            poly_power: 0.0,
            seed: 0,
            optimizer: OptimizerKind::Adam,
        };
        let out = train_segmenter(&[(&img, &target)], &spec, &cfg).unwrap();
        assert_eq!(out.model.predict(&img).unwrap(), target);
    }

    #[test]
    fn archive_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let s = Segmenter::init(SegmenterSpec::standard(4, 32, 32), 2).unwrap();
        let p = dir.path().join("s.bin");
        s.save(&p).unwrap();
        assert_eq!(Segmenter::load(&p).unwrap(), s);
    }
}
