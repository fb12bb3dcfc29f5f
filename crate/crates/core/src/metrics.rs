//! Mean intersection-over-union.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{ClassMask, IGNORE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Miou {
    /// IoU for ids `0..=n`; `None` where the union is empty.
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

/// Intersection and union counts accumulated over any number of mask pairs.
/// Pixels whose ground truth is IGNORE are skipped; an IGNORE prediction
/// counts as predicting no class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MiouAccumulator {
    n_classes: usize,
    inter: Vec<u64>,
    union: Vec<u64>,
}

impl MiouAccumulator {
    pub fn new(n_classes: usize) -> Self {
        Self {
            n_classes,
            inter: vec![0; n_classes + 1],
            union: vec![0; n_classes + 1],
        }
    }

    pub fn add(&mut self, pred: &ClassMask, gt: &ClassMask) -> Result<()> {
        if pred.dims() != gt.dims() {
            return Err(Error::Shape(format!(
                "prediction {:?} vs ground truth {:?}",
                pred.dims(),
                gt.dims()
            )));
        }
        pred.check_ids(self.n_classes)?;
        gt.check_ids(self.n_classes)?;
        for (&p, &g) in pred.values().iter().zip(gt.values()) {
            if g == IGNORE {
                continue;
            }
            if p == g {
                self.inter[g as usize] += 1;
                self.union[g as usize] += 1;
            } else {
                self.union[g as usize] += 1;
                if p != IGNORE {
                    self.union[p as usize] += 1;
                }
            }
        }
        Ok(())
    }

    pub fn result(&self) -> Miou {
        let per_class: Vec<Option<f64>> = self
            .inter
            .iter()
            .zip(&self.union)
            .map(|(&i, &u)| (u > 0).then(|| i as f64 / u as f64))
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let mean = if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        Miou { per_class, mean }
    }
}

pub fn miou(pred: &ClassMask, gt: &ClassMask, n_classes: usize) -> Result<Miou> {
    let mut acc = MiouAccumulator::new(n_classes);
    acc.add(pred, gt)?;
    Ok(acc.result())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_masks_score_one() {
        let m = ClassMask::from_vec(2, 2, vec![0, 1, 2, 1]).unwrap();
        assert_eq!(miou(&m, &m, 2).unwrap().mean, 1.0);
    }

    #[test]
    fn all_background_against_all_foreground_scores_zero() {
        let p = ClassMask::filled(4, 4, 0);
        let g = ClassMask::filled(4, 4, 1);
        let r = miou(&p, &g, 1).unwrap();
        assert_eq!(r.per_class, vec![Some(0.0), Some(0.0)]);
        assert_eq!(r.mean, 0.0);
    }

    #[test]
    fn ignore_in_gt_is_excluded_everywhere() {
        let p = ClassMask::from_vec(1, 2, vec![1, 1]).unwrap();
        let g = ClassMask::from_vec(1, 2, vec![1, IGNORE]).unwrap();
        let r = miou(&p, &g, 1).unwrap();
        assert_eq!(r.per_class, vec![None, Some(1.0)]);
        assert_eq!(r.mean, 1.0);
    }

    #[test]
    fn dims_and_ids_are_checked() {
        let a = ClassMask::filled(2, 2, 0);
        assert!(miou(&a, &ClassMask::filled(2, 3, 0), 1).is_err());
        assert!(miou(&ClassMask::filled(2, 2, 4), &a, 3).is_err());
    }
}
