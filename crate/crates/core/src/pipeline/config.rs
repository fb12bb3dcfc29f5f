use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::camseed::SeedThresholds;
use crate::context::ConfounderSource;
use crate::error::{Error, Result};
use crate::maskexpand::AffinityParams;
use crate::models::{ConcatSite, TrainConfig};
use crate::nn::OptimizerKind;

/// Everything a run depends on. Serialized verbatim as the run's `config.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Directory produced by dataset generation (holds `train.jsonl`, `eval.jsonl`, `dataset.json`).
    pub dataset: PathBuf,
    /// Number of context rounds after the round-0 baseline.
    pub rounds: usize,
    pub concat_block: ConcatSite,
    pub confounder_source: ConfounderSource,
    /// Feed the previous segmentation foreground directly as context instead
    /// of the attention-weighted confounder map.
    pub q1_control: bool,
    /// Divide each context map by its maximum.
    pub normalize_context: bool,
    /// Start each round's classifier from the previous round's weights.
    pub warm_start: bool,
    pub seeds: SeedThresholds,
    /// Activation level at which a CAM pixel counts as its class when CAMs
    /// are scored directly.
    pub cam_eval_threshold: f64,
    pub affinity: AffinityParams,
    pub classifier: TrainConfig,
    pub segmenter: TrainConfig,
    /// Training images used for the single-pass versus per-stratum check.
    pub nwgm_probe_images: usize,
    pub seed: u64,
    /// Score CAMs, pseudo-masks and segmentation against ground truth.
    pub evaluate: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("data/synthetic"),
            rounds: 3,
            concat_block: ConcatSite::Block5,
            confounder_source: ConfounderSource::SegMask,
            q1_control: false,
            normalize_context: false,
            warm_start: true,
            seeds: SeedThresholds::default(),
            cam_eval_threshold: 0.30,
            affinity: AffinityParams::default(),
            classifier: TrainConfig {
                epochs: 25,
                batch_size: 8,
                learning_rate: 0.003,
                poly_power: 0.9,
                seed: 0,
                optimizer: OptimizerKind::Adam,
            },
            segmenter: TrainConfig {
                epochs: 12,
                batch_size: 8,
                learning_rate: 0.005,
                poly_power: 0.9,
                seed: 0,
                optimizer: OptimizerKind::Adam,
            },
            nwgm_probe_images: 8,
            seed: 2020,
            evaluate: true,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be at least 1".into()));
        }
        self.seeds.validate()?;
        self.affinity.validate()?;
        self.classifier.validate()?;
        self.segmenter.validate()?;
        if !(self.cam_eval_threshold > 0.0 && self.cam_eval_threshold < 1.0) {
            return Err(Error::Config("cam_eval_threshold must lie in (0, 1)".into()));
        }
        if self.q1_control && self.concat_block == ConcatSite::None {
            return Err(Error::Config("q1_control needs a concat block".into()));
        }
        Ok(())
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Config(format!("config {} not found", path.display())),
            _ => Error::io(path, e),
        })?;
        Self::from_json_str(&s).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    /// Seed for one pipeline stage; identical across rounds so that rounds
    /// differ only through their context.
    pub(crate) fn stage_seed(&self, stage: u64) -> u64 {
        let mut z = self.seed ^ stage.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
}
