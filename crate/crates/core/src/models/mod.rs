//! Trainable components: the multi-label classifier over `[X, M]` and the
//! per-pixel segmentation network.

mod classifier;
mod segmenter;

pub use classifier::{
    train_classifier, BlockSpec, Classifier, ClassifierOutput, ClassifierSample, ClassifierSpec, ConcatSite,
    ContextInput,
};
pub use segmenter::{train_segmenter, Segmenter, SegmenterSpec, SegmenterTraining};

pub use crate::context::ProjectionPair;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::OptimizerKind;
use crate::raster::LabelSet;
use crate::scm::sigmoid;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Exponent of the polynomial learning-rate decay; 0 keeps it constant.
    #[serde(default)]
    pub poly_power: f64,
    pub seed: u64,
    pub optimizer: OptimizerKind,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.poly_power.is_finite() && self.poly_power >= 0.0) {
            return Err(Error::Config("poly_power must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Mean loss per epoch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
}

/// `ln(1 + e^z)` without overflow.
pub(crate) fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Negative log of the product of per-class sigmoid terms:
/// `Σ_i [i∈Y] ln(1+e^{-s_i}) + [i∉Y] ln(1+e^{s_i})`. Class `i+1` is `scores[i]`.
pub fn multilabel_loss(scores: &[f64], labels: &LabelSet) -> f64 {
    scores
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            if labels.contains(&((i + 1) as u8)) {
                softplus(-s)
            } else {
                softplus(s)
            }
        })
        .sum()
}

/// Gradient of [`multilabel_loss`] with respect to the scores.
pub fn multilabel_loss_grad(scores: &[f64], labels: &LabelSet) -> Vec<f64> {
    scores
        .iter()
        .enumerate()
        .map(|(i, &s)| sigmoid(s) - if labels.contains(&((i + 1) as u8)) { 1.0 } else { 0.0 })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_at_zero_scores() {
        let l = multilabel_loss(&[0.0, 0.0], &[1].into());
        assert!((l - 2.0 * std::f64::consts::LN_2).abs() < 1e-15);
        assert!((l - 1.38629).abs() < 1e-5);
    }

    #[test]
    fn saturated_correct_score_costs_nothing() {
        assert!(multilabel_loss(&[20.0], &[1].into()) <= 1e-8);
        assert!(multilabel_loss(&[-40.0, 40.0], &[2].into()) < 1e-16);
    }

    #[test]
    fn extreme_scores_stay_finite() {
        let l = multilabel_loss(&[1e4, -1e4], &[2].into());
        assert!((l - 2e4).abs() < 1e-6);
    }
}
