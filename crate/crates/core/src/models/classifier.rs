use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{multilabel_loss, multilabel_loss_grad, TrainConfig, TrainReport};
use crate::context::{context_forward, ConfounderSet, ContextForward, ProjectionPair};
use crate::error::{Error, Result};
use crate::nn::{self, ConvShape, Optimizer, ParamSet, Tensor};
use crate::raster::{LabelSet, RgbImage};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub channels: usize,
    pub stride: usize,
}

/// Where the context channel joins the backbone. `block-k` concatenates the
/// (down-sampled) map with the input of block `k`; `dense` does so at
/// blocks 2 through 5.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ConcatSite {
    #[serde(rename = "none")]
    None,
    #[serde(rename = "block-2")]
    Block2,
    #[serde(rename = "block-3")]
    Block3,
    #[serde(rename = "block-4")]
    Block4,
    #[serde(rename = "block-5")]
    Block5,
    #[serde(rename = "dense")]
    Dense,
}

impl ConcatSite {
    /// 1-based block numbers that receive the context channel.
    pub fn blocks(self) -> &'static [usize] {
        match self {
            ConcatSite::None => &[],
            ConcatSite::Block2 => &[2],
            ConcatSite::Block3 => &[3],
            ConcatSite::Block4 => &[4],
            ConcatSite::Block5 => &[5],
            ConcatSite::Dense => &[2, 3, 4, 5],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ConcatSite::None => "none",
            ConcatSite::Block2 => "block-2",
            ConcatSite::Block3 => "block-3",
            ConcatSite::Block4 => "block-4",
            ConcatSite::Block5 => "block-5",
            ConcatSite::Dense => "dense",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierSpec {
    pub n_classes: usize,
    pub height: usize,
    pub width: usize,
    pub blocks: Vec<BlockSpec>,
    pub concat: ConcatSite,
    #[serde(default = "one")]
    pub context_channels: usize,
}

fn one() -> usize {
    1
}

impl ClassifierSpec {
    /// Five 3x3 conv blocks of {8,16,32,32,32} channels, stride 2 at block 2.
    pub fn standard(n_classes: usize, height: usize, width: usize, concat: ConcatSite) -> Self {
        let b = |channels, stride| BlockSpec { channels, stride };
        Self {
            n_classes,
            height,
            width,
            blocks: vec![b(8, 1), b(16, 2), b(32, 1), b(32, 1), b(32, 1)],
            concat,
            context_channels: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 {
            return Err(Error::Config("classifier needs at least one class".into()));
        }
        if self.blocks.len() != 5 {
            return Err(Error::Config(format!(
                "classifier has {} blocks, expected 5",
                self.blocks.len()
            )));
        }
        if self.context_channels != 1 {
            return Err(Error::Config("context_channels must be 1".into()));
        }
        let mut f = 1;
        for (i, b) in self.blocks.iter().enumerate() {
            if b.channels == 0 || !(b.stride == 1 || b.stride == 2) {
                return Err(Error::Config(format!("block-{} is malformed: {b:?}", i + 1)));
            }
            f *= b.stride;
        }
        if !self.height.is_multiple_of(f) || !self.width.is_multiple_of(f) || self.height == 0 || self.width == 0 {
            return Err(Error::Config(format!(
                "input {}x{} not divisible by total stride {f}",
                self.height, self.width
            )));
        }
        Ok(())
    }

    fn conv(&self, i: usize) -> ConvShape {
        let c_in = if i == 0 { 3 } else { self.blocks[i - 1].channels };
        ConvShape::new(c_in, self.blocks[i].channels, 3, self.blocks[i].stride)
    }

    fn ctx_conv(&self, i: usize) -> ConvShape {
        ConvShape::new(1, self.blocks[i].channels, 3, self.blocks[i].stride)
    }

    /// Down-sampling factor of the input to block `i` (0-based).
    fn input_factor(&self, i: usize) -> usize {
        self.blocks[..i].iter().map(|b| b.stride).product()
    }

    pub fn feature_dim(&self) -> usize {
        self.blocks[4].channels
    }

    pub fn feature_dims(&self) -> (usize, usize) {
        let f = self.input_factor(5);
        (self.height / f, self.width / f)
    }

    pub fn hw(&self) -> usize {
        self.height * self.width
    }
}

/// Context fed to the classifier for one image.
#[derive(Clone, Debug)]
pub enum ContextInput<'a> {
    /// No context (round zero). The context branch contributes exactly nothing.
    Zero,
    /// A fixed full-resolution map.
    Fixed(&'a [f64]),
    /// Map computed from a foreground vector through the projections, so the
    /// projections receive gradients.
    Adjusted {
        x_fg: &'a [f64],
        conf: &'a ConfounderSet,
        normalize_max: bool,
    },
}

#[derive(Clone, Debug)]
pub struct ClassifierOutput {
    pub scores: Vec<f64>,
    /// Output of the final block, shape `(d, h', w')`.
    pub features: Tensor,
    /// Row-major `n x d`.
    pub head_weights: Vec<f64>,
}

/// Training example: image, image-level labels, context.
#[derive(Clone, Debug)]
pub struct ClassifierSample<'a> {
    pub image: &'a RgbImage,
    pub labels: &'a LabelSet,
    pub context: ContextInput<'a>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub spec: ClassifierSpec,
    pub params: ParamSet,
}

struct Slots {
    conv_w: [usize; 5],
    conv_b: [usize; 5],
    ctx_w: [Option<usize>; 5],
    head: usize,
    w1: usize,
    w2: usize,
}

struct Cache {
    inputs: Vec<Tensor>,
    outputs: Vec<Tensor>,
    cols: Vec<Vec<f64>>,
    ctx_cols: Vec<Option<Vec<f64>>>,
    pooled: Vec<f64>,
    scores: Vec<f64>,
    context: Option<ContextForward>,
}

impl Classifier {
    /// Seeded initialization. Context-branch weights start at zero so a
    /// zero context leaves the network identical to one without the branch.
    pub fn init(spec: ClassifierSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for i in 0..5 {
            let s = spec.conv(i);
            params.push(
                format!("block{}.w", i + 1),
                vec![s.c_out, s.c_in, 3, 3],
                nn::he_init(&mut rng, &s),
            );
            params.push(format!("block{}.b", i + 1), vec![s.c_out], vec![0.0; s.c_out]);
        }
        let d = spec.feature_dim();
        let n = spec.n_classes;
        params.push(
            "head.w",
            vec![n, d],
            nn::normal_vec(&mut rng, n * d, (1.0 / d as f64).sqrt()),
        );
        // projections draw from their own stream so the backbone init does
        // not depend on the canvas size
        let mut prng = ChaCha8Rng::seed_from_u64(seed ^ 0x7072_6f6a);
        let hw = spec.hw();
        let std = (1.0 / hw as f64).sqrt();
        params.push("proj.w1", vec![n, hw], nn::normal_vec(&mut prng, n * hw, std));
        params.push("proj.w2", vec![n, hw], nn::normal_vec(&mut prng, n * hw, std));
        for &k in spec.concat.blocks() {
            let s = spec.ctx_conv(k - 1);
            params.push(format!("ctx{k}.w"), vec![s.c_out, 1, 3, 3], vec![0.0; s.weight_len()]);
        }
        Ok(Self { spec, params })
    }

    fn slots(&self) -> Slots {
        let p = &self.params;
        let ix = |name: &str| p.index_of(name).unwrap_or_else(|| panic!("missing parameter {name}"));
        Slots {
            conv_w: std::array::from_fn(|i| ix(&format!("block{}.w", i + 1))),
            conv_b: std::array::from_fn(|i| ix(&format!("block{}.b", i + 1))),
            ctx_w: std::array::from_fn(|i| p.index_of(&format!("ctx{}.w", i + 1))),
            head: ix("head.w"),
            w1: ix("proj.w1"),
            w2: ix("proj.w2"),
        }
    }

    pub fn head_weights(&self) -> &[f64] {
        &self.params.data[self.params.index_of("head.w").expect("head")]
    }

    pub fn head_weights_mut(&mut self) -> &mut [f64] {
        let i = self.params.index_of("head.w").expect("head");
        &mut self.params.data[i]
    }

    pub fn projection(&self) -> ProjectionPair {
        let s = self.slots();
        ProjectionPair {
            n: self.spec.n_classes,
            hw: self.spec.hw(),
            w1: self.params.data[s.w1].clone(),
            w2: self.params.data[s.w2].clone(),
        }
    }

    pub fn set_projection(&mut self, proj: &ProjectionPair) -> Result<()> {
        if proj.n != self.spec.n_classes || proj.hw != self.spec.hw() {
            return Err(Error::Shape("projection does not match classifier".into()));
        }
        let s = self.slots();
        self.params.data[s.w1] = proj.w1.clone();
        self.params.data[s.w2] = proj.w2.clone();
        Ok(())
    }

    fn check_image(&self, image: &RgbImage) -> Result<()> {
        if image.dims() != (self.spec.height, self.spec.width) {
            return Err(Error::Shape(format!(
                "image {:?} vs classifier input {}x{}",
                image.dims(),
                self.spec.height,
                self.spec.width
            )));
        }
        Ok(())
    }

    fn resolve_context(&self, ctx: &ContextInput) -> Result<(Option<Vec<f64>>, Option<ContextForward>)> {
        match ctx {
            ContextInput::Zero => Ok((None, None)),
            ContextInput::Fixed(m) => {
                if m.len() != self.spec.hw() {
                    return Err(Error::Shape(format!(
                        "context map has {} values, expected {}",
                        m.len(),
                        self.spec.hw()
                    )));
                }
                Ok((Some(m.to_vec()), None))
            }
            ContextInput::Adjusted {
                x_fg,
                conf,
                normalize_max,
            } => {
                if (conf.height, conf.width) != (self.spec.height, self.spec.width) {
                    return Err(Error::Shape("confounder masks do not match the image".into()));
                }
                let f = context_forward(x_fg, conf, &self.projection(), *normalize_max)?;
                Ok((Some(f.map.clone()), Some(f)))
            }
        }
    }

    fn forward_cached(&self, image: &RgbImage, ctx: &ContextInput) -> Result<Cache> {
        self.check_image(image)?;
        let slots = self.slots();
        let (map, context) = self.resolve_context(ctx)?;
        let full = map.map(|m| Tensor::from_vec(1, self.spec.height, self.spec.width, m));
        let mut x = Tensor::from_vec(3, self.spec.height, self.spec.width, image.data().to_vec());
        let mut inputs = Vec::with_capacity(5);
        let mut outputs = Vec::with_capacity(5);
        let mut cols = Vec::with_capacity(5);
        let mut ctx_cols = Vec::with_capacity(5);
        for i in 0..5 {
            let conv = self.spec.conv(i);
            let (mut y, c) = conv.forward(
                &x,
                &self.params.data[slots.conv_w[i]],
                Some(&self.params.data[slots.conv_b[i]]),
            );
            let mut cc = None;
            if let (Some(wi), Some(m)) = (slots.ctx_w[i], full.as_ref()) {
                let pooled = m.avg_pool(self.spec.input_factor(i));
                let (yc, c2) = self.spec.ctx_conv(i).forward(&pooled, &self.params.data[wi], None);
                for (a, b) in y.data.iter_mut().zip(&yc.data) {
                    *a += b;
                }
                cc = Some(c2);
            }
            y.relu_inplace();
            inputs.push(x);
            cols.push(c);
            ctx_cols.push(cc);
            x = y.clone();
            outputs.push(y);
        }
        let pooled = outputs[4].global_avg_pool();
        let d = pooled.len();
        let head = &self.params.data[slots.head];
        let scores = (0..self.spec.n_classes)
            .map(|k| head[k * d..(k + 1) * d].iter().zip(&pooled).map(|(w, g)| w * g).sum())
            .collect();
        Ok(Cache {
            inputs,
            outputs,
            cols,
            ctx_cols,
            pooled,
            scores,
            context,
        })
    }

    pub fn forward(&self, image: &RgbImage, ctx: &ContextInput) -> Result<ClassifierOutput> {
        let mut cache = self.forward_cached(image, ctx)?;
        Ok(ClassifierOutput {
            scores: cache.scores,
            features: cache.outputs.pop().expect("five blocks"),
            head_weights: self.head_weights().to_vec(),
        })
    }

    /// Scores for an explicit full-resolution context map.
    pub fn scores_with_map(&self, image: &RgbImage, map: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_cached(image, &ContextInput::Fixed(map))?.scores)
    }

    fn backward(&self, cache: &Cache, dscores: &[f64], ctx: &ContextInput, grads: &mut ParamSet) {
        let slots = self.slots();
        let d = cache.pooled.len();
        {
            let dh = &mut grads.data[slots.head];
            for (k, ds) in dscores.iter().enumerate() {
                for (g, p) in dh[k * d..(k + 1) * d].iter_mut().zip(&cache.pooled) {
                    *g += ds * p;
                }
            }
        }
        let head = &self.params.data[slots.head];
        let last = &cache.outputs[4];
        let hw = last.hw() as f64;
        let mut dy = Tensor::zeros(last.c, last.h, last.w);
        for j in 0..d {
            let g: f64 = dscores
                .iter()
                .enumerate()
                .map(|(k, ds)| ds * head[k * d + j])
                .sum::<f64>()
                / hw;
            dy.data[j * last.hw()..(j + 1) * last.hw()]
                .iter_mut()
                .for_each(|v| *v = g);
        }
        let mut dmap: Option<Tensor> = None;
        for i in (0..5).rev() {
            dy.relu_backward_inplace(&cache.outputs[i]);
            let input = &cache.inputs[i];
            if let (Some(wi), Some(cc)) = (slots.ctx_w[i], cache.ctx_cols[i].as_ref()) {
                let f = self.spec.input_factor(i);
                let (ph, pw) = (self.spec.height / f, self.spec.width / f);
                let need = cache.context.is_some();
                let dpooled = self.spec.ctx_conv(i).backward(
                    cc,
                    ph,
                    pw,
                    &dy,
                    &self.params.data[wi],
                    &mut grads.data[wi],
                    None,
                    need,
                );
                if let Some(dp) = dpooled {
                    let up = dp.avg_pool_backward(f, self.spec.height, self.spec.width);
                    match dmap.as_mut() {
                        Some(acc) => acc.data.iter_mut().zip(&up.data).for_each(|(a, b)| *a += b),
                        None => dmap = Some(up),
                    }
                }
            }
            let conv = self.spec.conv(i);
            let (dw, db) = two_mut(&mut grads.data, slots.conv_w[i], slots.conv_b[i]);
            let dx = conv.backward(
                &cache.cols[i],
                input.h,
                input.w,
                &dy,
                &self.params.data[slots.conv_w[i]],
                dw,
                Some(db),
                i > 0,
            );
            if let Some(dx) = dx {
                dy = dx;
            }
        }
        if let (Some(fwd), Some(dm), ContextInput::Adjusted { conf, .. }) = (&cache.context, &dmap, ctx) {
            let (dw1, dw2) = two_mut(&mut grads.data, slots.w1, slots.w2);
            fwd.backward(&dm.data, conf, dw1, dw2);
        }
    }

    /// Loss and parameter gradients for one example.
    pub fn loss_and_grad(&self, sample: &ClassifierSample) -> Result<(f64, ParamSet)> {
        let cache = self.forward_cached(sample.image, &sample.context)?;
        let loss = multilabel_loss(&cache.scores, sample.labels);
        let ds = multilabel_loss_grad(&cache.scores, sample.labels);
        let mut grads = self.params.zeros_like();
        self.backward(&cache, &ds, &sample.context, &mut grads);
        Ok((loss, grads))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let spec = serde_json::json!({ "model": "classifier", "spec": self.spec });
        nn::write_archive(path, &spec, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, params) = nn::read_archive(path)?;
        if header.get("model").and_then(|m| m.as_str()) != Some("classifier") {
            return Err(Error::Validation(format!("{} is not a classifier", path.display())));
        }
        let spec: ClassifierSpec = serde_json::from_value(header["spec"].clone())?;
        let want = Classifier::init(spec.clone(), 0)?;
        if want.params.names != params.names || want.params.shapes != params.shapes {
            return Err(Error::Validation(format!(
                "{}: parameters do not match the embedded spec",
                path.display()
            )));
        }
        Ok(Self { spec, params })
    }
}

fn two_mut(data: &mut [Vec<f64>], a: usize, b: usize) -> (&mut [f64], &mut [f64]) {
    assert_ne!(a, b);
    if a < b {
        let (lo, hi) = data.split_at_mut(b);
        (&mut lo[a], &mut hi[0])
    } else {
        let (lo, hi) = data.split_at_mut(a);
        (&mut hi[0], &mut lo[b])
    }
}

/// Mini-batch training of the classifier (and, for adjusted contexts, the
/// projections). Per-example gradients may be computed in parallel; they are
/// summed in batch order, so results do not depend on scheduling.
pub fn train_classifier(
    samples: &[ClassifierSample],
    spec: &ClassifierSpec,
    cfg: &TrainConfig,
    init: Option<Classifier>,
) -> Result<(Classifier, TrainReport)> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Training("no training samples".into()));
    }
    let mut model = match init {
        Some(m) => {
            if &m.spec != spec {
                return Err(Error::Config("initial classifier has a different spec".into()));
            }
            m
        }
        None => Classifier::init(spec.clone(), cfg.seed)?,
    };
    let mut opt = Optimizer::new(cfg.optimizer, &model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7368_7566);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let per_epoch = samples.len().div_ceil(cfg.batch_size);
    let max_it = cfg.epochs * per_epoch;
    let mut it = 0;
    let mut report = TrainReport::default();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<Result<(f64, ParamSet)>> =
                batch.par_iter().map(|&i| model.loss_and_grad(&samples[i])).collect();
            let mut grads = model.params.zeros_like();
            for r in results {
                let (l, g) = r?;
                epoch_loss += l;
                grads.add_assign(&g);
            }
            grads.scale(1.0 / batch.len() as f64);
            let lr = nn::poly_lr(cfg.learning_rate, cfg.poly_power, it, max_it);
            opt.step(&mut model.params, &grads, lr);
            it += 1;
        }
        let mean = epoch_loss / samples.len() as f64;
        if !mean.is_finite() || !model.params.is_finite() {
            return Err(Error::Training("classifier diverged".into()));
        }
        report.epoch_losses.push(mean);
    }
    Ok((model, report))
}
