mod common;

use common::*;
use conta::models::{
    multilabel_loss, multilabel_loss_grad, train_segmenter, Classifier, ClassifierSample, ClassifierSpec, ConcatSite,
    ContextInput, Segmenter, SegmenterSpec, TrainConfig,
};
use conta::nn::OptimizerKind;
use conta::{ClassMask, LabelSet, RgbImage, IGNORE};
use rand::Rng;

fn param<'a>(m: &'a Classifier, name: &str) -> &'a [f64] {
    &m.params.data[m.params.index_of(name).unwrap()]
}

/// 3x3 convolution, zero padding 1, given stride; weight `[co][ci][ky][kx]`.
fn conv3(input: &[Vec<Vec<f64>>], w: &[f64], b: Option<&[f64]>, c_out: usize, stride: usize) -> Vec<Vec<Vec<f64>>> {
    let c_in = input.len();
    let (h, wd) = (input[0].len(), input[0][0].len());
    let (ho, wo) = ((h - 1) / stride + 1, (wd - 1) / stride + 1);
    let mut out = vec![vec![vec![0.0; wo]; ho]; c_out];
    for co in 0..c_out {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = b.map_or(0.0, |b| b[co]);
                for ci in 0..c_in {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = (oy * stride + ky) as isize - 1;
                            let ix = (ox * stride + kx) as isize - 1;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                acc += w[((co * c_in + ci) * 3 + ky) * 3 + kx] * input[ci][iy as usize][ix as usize];
                            }
                        }
                    }
                }
                out[co][oy][ox] = acc;
            }
        }
    }
    out
}

fn avg_pool(m: &[Vec<f64>], f: usize) -> Vec<Vec<f64>> {
    let (h, w) = (m.len() / f, m[0].len() / f);
    (0..h)
        .map(|y| {
            (0..w)
                .map(|x| {
                    let mut s = 0.0;
                    for dy in 0..f {
                        for dx in 0..f {
                            s += m[y * f + dy][x * f + dx];
                        }
                    }
                    s / (f * f) as f64
                })
                .collect()
        })
        .collect()
}

/// Scores by direct loops over the parameter tensors.
fn forward_oracle(m: &Classifier, image: &RgbImage, map: Option<&[f64]>) -> Vec<f64> {
    let spec = &m.spec;
    let (h, w) = image.dims();
    let mut x: Vec<Vec<Vec<f64>>> = (0..3)
        .map(|c| {
            (0..h)
                .map(|y| (0..w).map(|xx| image.pixel(y, xx)[c]).collect())
                .collect()
        })
        .collect();
    let map2d: Option<Vec<Vec<f64>>> = map.map(|v| (0..h).map(|y| v[y * w..(y + 1) * w].to_vec()).collect());
    let mut factor = 1;
    for (i, b) in spec.blocks.iter().enumerate() {
        let k = i + 1;
        let mut y = conv3(
            &x,
            param(m, &format!("block{k}.w")),
            Some(param(m, &format!("block{k}.b"))),
            b.channels,
            b.stride,
        );
        if let (Some(idx), Some(mm)) = (m.params.index_of(&format!("ctx{k}.w")), map2d.as_ref()) {
            let pooled = avg_pool(mm, factor);
            let yc = conv3(&[pooled], &m.params.data[idx], None, b.channels, b.stride);
            for (a, c) in y.iter_mut().flatten().flatten().zip(yc.iter().flatten().flatten()) {
                *a += c;
            }
        }
        y.iter_mut().flatten().flatten().for_each(|v| *v = v.max(0.0));
        x = y;
        factor *= b.stride;
    }
    let gap: Vec<f64> = x
        .iter()
        .map(|ch| ch.iter().flatten().sum::<f64>() / (ch.len() * ch[0].len()) as f64)
        .collect();
    let head = param(m, "head.w");
    let d = gap.len();
    (0..spec.n_classes)
        .map(|c| (0..d).map(|j| head[c * d + j] * gap[j]).sum())
        .collect()
}

#[test]
fn loss_equals_negative_log_of_the_label_product() {
    let mut r = rng(2);
    for case in 0..100 {
        let n = 4;
        let s: Vec<f64> = (0..n).map(|_| r.random_range(-6.0..6.0)).collect();
        let labels: LabelSet = if case == 0 {
            [1, 3].into()
        } else {
            (1..=n as u8).filter(|_| r.random_bool(0.5)).collect()
        };
        let direct = multilabel_product(&s, &labels);
        assert!(
            ((-multilabel_loss(&s, &labels)).exp() - direct).abs() < 1e-9,
            "case {case}"
        );
    }
}

#[test]
fn loss_gradient_matches_central_differences() {
    let mut r = rng(3);
    for _ in 0..20 {
        let s: Vec<f64> = (0..4).map(|_| r.random_range(-4.0..4.0)).collect();
        let labels: LabelSet = (1..=4u8).filter(|_| r.random_bool(0.5)).collect();
        let g = multilabel_loss_grad(&s, &labels);
        let h = 1e-6;
        for i in 0..4 {
            let (mut p, mut m) = (s.clone(), s.clone());
            p[i] += h;
            m[i] -= h;
            let fd = (multilabel_loss(&p, &labels) - multilabel_loss(&m, &labels)) / (2.0 * h);
            assert!((fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-8) < 1e-4);
        }
    }
}

#[test]
fn forward_matches_loop_oracle_on_toy_spec() {
    let mut r = rng(4);
    for concat in [ConcatSite::None, ConcatSite::Block2, ConcatSite::Dense] {
        let mut m = Classifier::init(toy_spec(concat), 17).unwrap();
        for (name, data) in m.params.names.clone().iter().zip(m.params.data.iter_mut()) {
            if name.starts_with("ctx") {
                data.iter_mut().for_each(|v| *v = r.random_range(-0.5..0.5));
            }
        }
        let img = random_image(&mut r, 4, 4);
        let map: Vec<f64> = (0..16).map(|_| r.random::<f64>()).collect();
        let got = m.forward(&img, &ContextInput::Fixed(&map)).unwrap().scores;
        let want = forward_oracle(&m, &img, Some(&map));
        assert!(max_abs_diff(&got, &want) < 1e-6, "{concat:?}");
        let got = m.forward(&img, &ContextInput::Zero).unwrap().scores;
        assert!(max_abs_diff(&got, &forward_oracle(&m, &img, None)) < 1e-6);
    }
}

#[test]
fn parameter_gradients_match_finite_differences_on_toy_spec() {
    let worst = toy_gradient_check(5);
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn scores_are_head_times_pooled_features() {
    let mut r = rng(6);
    let m = Classifier::init(ClassifierSpec::standard(4, 32, 32, ConcatSite::Block5), 1).unwrap();
    let img = random_image(&mut r, 32, 32);
    let map: Vec<f64> = (0..1024).map(|_| r.random::<f64>() * 0.25).collect();
    let out = m.forward(&img, &ContextInput::Fixed(&map)).unwrap();
    let g = out.features.global_avg_pool();
    let d = g.len();
    for (k, s) in out.scores.iter().enumerate() {
        let want: f64 = (0..d).map(|j| out.head_weights[k * d + j] * g[j]).sum();
        assert!((s - want).abs() < 1e-5);
    }
}

#[test]
fn classifier_training_is_deterministic() {
    let mut r = rng(7);
    let spec = toy_spec(ConcatSite::Block5);
    let imgs: Vec<RgbImage> = (0..6).map(|_| random_image(&mut r, 4, 4)).collect();
    let labels: Vec<LabelSet> = (0..6).map(|k| [(k % 2 + 1) as u8].into()).collect();
    let samples: Vec<ClassifierSample> = imgs
        .iter()
        .zip(&labels)
        .map(|(image, labels)| ClassifierSample {
            image,
            labels,
            context: ContextInput::Zero,
        })
        .collect();
    let cfg = TrainConfig {
        epochs: 5,
        batch_size: 4,
        learning_rate: 0.01,
        poly_power: 0.9,
        seed: 3,
        optimizer: OptimizerKind::Adam,
    };
    let (a, ra) = conta::models::train_classifier(&samples, &spec, &cfg, None).unwrap();
    let (b, rb) = conta::models::train_classifier(&samples, &spec, &cfg, None).unwrap();
    assert_eq!(a, b);
    assert_eq!(ra.epoch_losses, rb.epoch_losses);
}

#[test]
fn prediction_is_argmax_of_posteriors() {
    let mut r = rng(8);
    let seg = Segmenter::init(SegmenterSpec::standard(3, 16, 16), 2).unwrap();
    let img = random_image(&mut r, 16, 16);
    let post = seg.posteriors(&img).unwrap();
    let pred = seg.predict(&img).unwrap();
    for p in 0..256 {
        let mut best = 0;
        for k in 1..post.c {
            if post.data[k * 256 + p] > post.data[best * 256 + p] {
                best = k;
            }
        }
        assert_eq!(pred.values()[p] as usize, best);
    }
}

#[test]
fn segmenter_fits_a_colour_partition() {
    // left half red = class 1, right half blue-ish background = class 0
    let (h, w) = (16, 16);
    let mut r = rng(9);
    let mut imgs = Vec::new();
    let mut masks = Vec::new();
    for _ in 0..4 {
        let split = r.random_range(4..12);
        let mut data = vec![0.0; 3 * h * w];
        let mut m = vec![0u8; h * w];
        for y in 0..h {
            for x in 0..w {
                let fg = x < split;
                let rgb = if fg { [0.9, 0.2, 0.2] } else { [0.2, 0.3, 0.8] };
                for c in 0..3 {
                    data[c * h * w + y * w + x] = rgb[c] + r.random_range(-0.05..0.05);
                }
                m[y * w + x] = fg as u8;
            }
        }
        imgs.push(RgbImage::from_chw(h, w, data).unwrap());
        masks.push(ClassMask::from_vec(h, w, m).unwrap());
    }
    let all_ignore = ClassMask::filled(h, w, IGNORE);
    let mut pairs: Vec<(&RgbImage, &ClassMask)> = imgs.iter().zip(&masks).collect();
    pairs.push((&imgs[0], &all_ignore));
    let cfg = TrainConfig {
        epochs: 40,
        batch_size: 2,
        learning_rate: 0.01,
        poly_power: 0.0,
        seed: 1,
        optimizer: OptimizerKind::Adam,
    };
    let out = train_segmenter(&pairs, &SegmenterSpec::standard(1, h, w), &cfg).unwrap();
    assert_eq!(out.skipped.len(), 1);
    let (mut right, mut total) = (0, 0);
    for (img, m) in imgs.iter().zip(&masks) {
        let p = out.model.predict(img).unwrap();
        right += p.values().iter().zip(m.values()).filter(|(a, b)| a == b).count();
        total += h * w;
    }
    assert!(right as f64 / total as f64 >= 0.95, "{right}/{total}");
    assert!(out.report.epoch_losses.last() < out.report.epoch_losses.first());
}

#[test]
fn default_classifier_fits_the_benchmark_labels() {
    let dir = tempfile::tempdir().unwrap();
    conta::scenegen::generate_dataset(&conta::scenegen::SceneConfig::default(), dir.path()).unwrap();
    let data = conta::pipeline::Dataset::load(dir.path()).unwrap();
    let cfg = conta::pipeline::RunConfig::default();
    let spec = ClassifierSpec::standard(data.n_classes, data.height, data.width, cfg.concat_block);
    let samples: Vec<ClassifierSample> = data
        .train
        .iter()
        .map(|s| ClassifierSample {
            image: &s.image,
            labels: &s.labels,
            context: ContextInput::Zero,
        })
        .collect();
    let (model, report) = conta::models::train_classifier(&samples, &spec, &cfg.classifier, None).unwrap();
    let losses = &report.epoch_losses;
    assert!(losses.last().unwrap() < losses.first().unwrap(), "{losses:?}");
    let mut correct = 0;
    for s in &data.train {
        let scores = model.forward(&s.image, &ContextInput::Zero).unwrap().scores;
        for (k, z) in scores.iter().enumerate() {
            correct += ((*z > 0.0) == s.labels.contains(&(k as u8 + 1))) as usize;
        }
    }
    let acc = correct as f64 / (data.train.len() * data.n_classes) as f64;
    assert!(acc >= 0.9, "training-set multi-label accuracy {acc}");
}
