//! Class activation maps and their thresholding into seed masks.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::raster::{ensure_parent, ClassMask, LabelSet, SeedMask, IGNORE};

/// Per-class activation maps at feature resolution, each max-normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct CamStack {
    pub height: usize,
    pub width: usize,
    /// `maps[i]` belongs to class `i + 1`.
    pub maps: Vec<Vec<f64>>,
    pub present_classes: LabelSet,
}

impl CamStack {
    pub fn n(&self) -> usize {
        self.maps.len()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Upsample {
    #[default]
    Nearest,
    Bilinear,
}

/// `relu(W F)` per labelled class, divided by its maximum when positive.
pub fn compute_cam(features: &Tensor, head_weights: &[f64], labels: &LabelSet) -> Result<CamStack> {
    let d = features.c;
    if d == 0 || !head_weights.len().is_multiple_of(d) {
        return Err(Error::Shape(format!(
            "head weights of length {} do not fit {d} feature channels",
            head_weights.len()
        )));
    }
    let n = head_weights.len() / d;
    if let Some(&bad) = labels.iter().find(|&&l| l == 0 || l as usize > n) {
        return Err(Error::Shape(format!("label {bad} outside 1..={n}")));
    }
    let hw = features.hw();
    let mut maps = vec![vec![0.0; hw]; n];
    for &l in labels {
        let k = l as usize - 1;
        let w = &head_weights[k * d..(k + 1) * d];
        let m = &mut maps[k];
        for (j, wj) in w.iter().enumerate() {
            for (v, f) in m.iter_mut().zip(features.channel(j)) {
                *v += wj * f;
            }
        }
        let mut mx = 0.0f64;
        for v in m.iter_mut() {
            *v = v.max(0.0);
            mx = mx.max(*v);
        }
        if mx > 0.0 {
            m.iter_mut().for_each(|v| *v /= mx);
        }
    }
    Ok(CamStack {
        height: features.h,
        width: features.w,
        maps,
        present_classes: labels.clone(),
    })
}

fn resize(map: &[f64], h: usize, w: usize, out: (usize, usize), mode: Upsample) -> Vec<f64> {
    let (oh, ow) = out;
    let mut v = Vec::with_capacity(oh * ow);
    match mode {
        Upsample::Nearest => {
            for y in 0..oh {
                let sy = y * h / oh;
                for x in 0..ow {
                    v.push(map[sy * w + x * w / ow]);
                }
            }
        }
        Upsample::Bilinear => {
            let coord = |i: usize, n_in: usize, n_out: usize| {
                let s = ((i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = s.floor() as usize;
                (i0, (i0 + 1).min(n_in - 1), s - i0 as f64)
            };
            for y in 0..oh {
                let (y0, y1, fy) = coord(y, h, oh);
                for x in 0..ow {
                    let (x0, x1, fx) = coord(x, w, ow);
                    let top = map[y0 * w + x0] * (1.0 - fx) + map[y0 * w + x1] * fx;
                    let bot = map[y1 * w + x0] * (1.0 - fx) + map[y1 * w + x1] * fx;
                    v.push(top * (1.0 - fy) + bot * fy);
                }
            }
        }
    }
    v
}

/// Seeding thresholds on normalized CAM values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedThresholds {
    pub theta_fg: f64,
    pub theta_bg: f64,
    #[serde(default)]
    pub upsample: Upsample,
}

impl Default for SeedThresholds {
    fn default() -> Self {
        Self {
            theta_fg: 0.30,
            theta_bg: 0.05,
            upsample: Upsample::Nearest,
        }
    }
}

impl SeedThresholds {
    pub fn validate(&self) -> Result<()> {
        let ok = |t: f64| t > 0.0 && t < 1.0;
        if !ok(self.theta_fg) || !ok(self.theta_bg) {
            return Err(Error::Config("seed thresholds must lie in (0, 1)".into()));
        }
        if self.theta_bg >= self.theta_fg {
            return Err(Error::Config(format!(
                "theta_bg ({}) must be below theta_fg ({})",
                self.theta_bg, self.theta_fg
            )));
        }
        Ok(())
    }

    /// Writes the JSON sidecar stored next to seed masks.
    pub fn write_sidecar(&self, path: &Path) -> Result<()> {
        ensure_parent(path)?;
        let s = serde_json::to_string_pretty(self)?;
        std::fs::write(path, s + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Per-class maps resized to `out`.
pub fn upsample_cams(cams: &CamStack, out: (usize, usize), mode: Upsample) -> Vec<Vec<f64>> {
    cams.maps
        .iter()
        .map(|m| resize(m, cams.height, cams.width, out, mode))
        .collect()
}

fn argmax_first(maps: &[Vec<f64>], p: usize) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (k, m) in maps.iter().enumerate() {
        if m[p] > best.1 {
            best = (k, m[p]);
        }
    }
    best
}

/// Seeds with nearest-neighbour upsampling.
pub fn threshold_seeds(cams: &CamStack, theta_fg: f64, theta_bg: f64, out: (usize, usize)) -> Result<SeedMask> {
    threshold_seeds_with(
        cams,
        &SeedThresholds {
            theta_fg,
            theta_bg,
            upsample: Upsample::Nearest,
        },
        out,
    )
}

/// Foreground where the strongest class reaches `theta_fg`, background where
/// every class stays at or below `theta_bg`, IGNORE in between.
pub fn threshold_seeds_with(cams: &CamStack, t: &SeedThresholds, out: (usize, usize)) -> Result<SeedMask> {
    t.validate()?;
    let maps = upsample_cams(cams, out, t.upsample);
    let n_px = out.0 * out.1;
    let values = (0..n_px)
        .map(|p| {
            if maps.is_empty() {
                return 0;
            }
            let (k, v) = argmax_first(&maps, p);
            if v >= t.theta_fg {
                (k + 1) as u8
            } else if v <= t.theta_bg {
                0
            } else {
                IGNORE
            }
        })
        .collect();
    ClassMask::from_vec(out.0, out.1, values)
}

/// Dense labelling used to score CAMs: the strongest class where it reaches
/// `theta`, background elsewhere.
pub fn cam_labelling(cams: &CamStack, theta: f64, out: (usize, usize), mode: Upsample) -> Result<ClassMask> {
    let maps = upsample_cams(cams, out, mode);
    let values = (0..out.0 * out.1)
        .map(|p| {
            if maps.is_empty() {
                return 0;
            }
            let (k, v) = argmax_first(&maps, p);
            if v >= theta {
                (k + 1) as u8
            } else {
                0
            }
        })
        .collect();
    ClassMask::from_vec(out.0, out.1, values)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stack(maps: Vec<Vec<f64>>, h: usize, w: usize) -> CamStack {
        let present = (1..=maps.len() as u8).collect();
        CamStack {
            height: h,
            width: w,
            maps,
            present_classes: present,
        }
    }

    #[test]
    fn zero_weight_row_gives_zero_map() {
        let f = Tensor::from_vec(2, 2, 2, vec![1.0, 2.0, 3.0, 4.0, 0.5, 0.5, 0.5, 0.5]);
        let cams = compute_cam(&f, &[0.0, 0.0, 1.0, 1.0], &[1, 2].into()).unwrap();
        assert!(cams.maps[0].iter().all(|v| *v == 0.0));
        assert_eq!(cams.maps[1].iter().copied().fold(0.0, f64::max), 1.0);
    }

    #[test]
    fn constant_feature_normalizes_to_one() {
        let f = Tensor::from_vec(1, 3, 3, vec![1.0; 9]);
        let cams = compute_cam(&f, &[1.0], &[1].into()).unwrap();
        assert!(cams.maps[0].iter().all(|v| *v == 1.0));
    }

    #[test]
    fn unlabelled_classes_are_zero() {
        let f = Tensor::from_vec(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let cams = compute_cam(&f, &[1.0, 1.0], &[2].into()).unwrap();
        assert!(cams.maps[0].iter().all(|v| *v == 0.0));
        assert!(compute_cam(&f, &[1.0, 1.0], &[3].into()).is_err());
        assert!(compute_cam(&f, &[1.0, 1.0, 1.0], &[1].into()).is_ok());
    }

    #[test]
    fn all_zero_cams_seed_background() {
        let s = threshold_seeds(&stack(vec![vec![0.0; 4]], 2, 2), 0.3, 0.05, (4, 4)).unwrap();
        assert!(s.values().iter().all(|v| *v == 0));
    }

    #[test]
    fn full_class_seeds_everywhere() {
        let s = threshold_seeds(&stack(vec![vec![0.0; 4], vec![1.0; 4]], 2, 2), 0.3, 0.05, (4, 4)).unwrap();
        assert!(s.values().iter().all(|v| *v == 2));
    }

    #[test]
    fn ties_go_to_the_smaller_id_and_middle_is_ignored() {
        let s = threshold_seeds(&stack(vec![vec![0.5, 0.1], vec![0.5, 0.1]], 1, 2), 0.3, 0.05, (1, 2)).unwrap();
        assert_eq!(s.values(), &[1, IGNORE]);
    }

    #[test]
    fn inverted_thresholds_are_a_config_error() {
        let c = stack(vec![vec![0.0]], 1, 1);
        assert!(matches!(threshold_seeds(&c, 0.3, 0.3, (1, 1)), Err(Error::Config(_))));
        assert!(matches!(threshold_seeds(&c, 0.2, 0.4, (1, 1)), Err(Error::Config(_))));
    }

    #[test]
    fn nearest_upsampling_replicates_blocks() {
        let c = stack(vec![vec![1.0, 0.0, 0.0, 0.0]], 2, 2);
        let s = threshold_seeds(&c, 0.3, 0.05, (4, 4)).unwrap();
        let ones: Vec<usize> = (0..16).filter(|&p| s.values()[p] == 1).collect();
        assert_eq!(ones, vec![0, 1, 4, 5]);
    }

    #[test]
    fn bilinear_preserves_constants() {
        let c = stack(vec![vec![0.7; 4]], 2, 2);
        let up = upsample_cams(&c, (8, 8), Upsample::Bilinear);
        assert!(up[0].iter().all(|v| (v - 0.7).abs() < 1e-12));
    }
}
