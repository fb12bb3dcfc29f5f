//! The round loop: classify with context, seed and expand CAMs, train the
//! segmenter on the pseudo-masks, rebuild the confounder set and context.

mod ablate;
mod config;

pub use ablate::{run_ablation, AblationAxis, AblationRow, AblationTable};
pub use config::RunConfig;

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camseed::{cam_labelling, compute_cam, threshold_seeds_with};
use crate::context::{
    build_confounder_set, compute_context_map, foreground_vector, nwgm_forward_check, ConfounderSet, ContextMap,
};
use crate::error::{Error, Result};
use crate::maskexpand::{build_affinity, random_walk_expand};
use crate::metrics::MiouAccumulator;
use crate::models::{
    train_classifier, train_segmenter, Classifier, ClassifierSample, ClassifierSpec, ContextInput, Segmenter,
    SegmenterSpec, TrainConfig,
};
use crate::raster::{ClassMask, LabelSet, RgbImage};
use crate::scenegen::{DatasetManifest, SceneConfig, CONFIG_FILE, EVAL_FILE, TRAIN_FILE};

pub const RUN_CONFIG_FILE: &str = "config.json";
pub const REPORT_FILE: &str = "report.json";
pub const LOCK_FILE: &str = "run.lock";
pub const STATE_DIR: &str = "state";
pub const ROUND_STATE_FILE: &str = "state.json";

/// Relative path of a round's checkpoint directory inside a run directory.
pub fn round_dir_name(round: usize) -> String {
    format!("{STATE_DIR}/round_{round}")
}

/// One image held in memory. Ground truth stays on disk until scoring.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub image: RgbImage,
    pub labels: LabelSet,
    pub gt_path: PathBuf,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub n_classes: usize,
    pub height: usize,
    pub width: usize,
    pub train: Vec<Sample>,
    pub eval: Vec<Sample>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let cfg_path = dir.join(CONFIG_FILE);
        if !cfg_path.exists() {
            return Err(Error::NotFound(format!(
                "dataset {} (no {CONFIG_FILE}; generate it first)",
                dir.display()
            )));
        }
        let scene = SceneConfig::from_json_file(&cfg_path)?;
        let [height, width] = scene.canvas;
        let load = |file: &str| -> Result<Vec<Sample>> {
            let m = DatasetManifest::load(&dir.join(file))?;
            m.records
                .iter()
                .map(|r| {
                    let image = m.load_image(r)?;
                    if image.dims() != (height, width) {
                        return Err(Error::Validation(format!(
                            "{}: image size differs from the canvas",
                            r.id
                        )));
                    }
                    Ok(Sample {
                        id: r.id.clone(),
                        image,
                        labels: r.label_set(),
                        gt_path: m.gt_path(r),
                    })
                })
                .collect()
        };
        let train = load(TRAIN_FILE)?;
        let eval = load(EVAL_FILE)?;
        if train.is_empty() {
            return Err(Error::Validation(format!("{}: empty training split", dir.display())));
        }
        Ok(Self {
            root: dir.to_path_buf(),
            n_classes: scene.n_classes,
            height,
            width,
            train,
            eval,
        })
    }

    pub fn load_gt(&self, s: &Sample) -> Result<ClassMask> {
        if !s.gt_path.exists() {
            return Err(Error::Eval(format!("ground truth {} is missing", s.gt_path.display())));
        }
        let m = ClassMask::load_png(&s.gt_path)?;
        m.check_ids(self.n_classes)?;
        Ok(m)
    }

    pub fn find_train(&self, id: &str) -> Option<&Sample> {
        self.train.iter().find(|s| s.id == id)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NwgmSummary {
    pub images: usize,
    pub mean_gap: f64,
    pub max_gap: f64,
}

/// Metrics of one round. mIoU values are percentages; CAM and pseudo-mask
/// scores are on the training split, segmentation on the eval split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub cam_miou: Option<f64>,
    pub pseudo_miou: Option<f64>,
    pub seg_miou: Option<f64>,
    pub classifier_loss: f64,
    pub segmenter_loss: f64,
    pub nwgm: Option<NwgmSummary>,
    pub warnings: Vec<String>,
}

/// In-memory result of the most recent completed round.
#[derive(Clone, Debug, Default)]
pub struct PipelineState {
    pub history: Vec<RoundMetrics>,
    pub classifier: Option<Classifier>,
    pub segmenter: Option<Segmenter>,
    pub confounders: Option<ConfounderSet>,
    /// Segmenter predictions on the training images.
    pub x_m: Vec<ClassMask>,
    pub pseudo: Vec<ClassMask>,
    /// Context for the next round, one per training image.
    pub context: Vec<ContextMap>,
}

impl PipelineState {
    pub fn fresh() -> Self {
        Self::default()
    }

    /// Index of the last completed round.
    pub fn round(&self) -> Option<usize> {
        self.history.len().checked_sub(1)
    }
}

#[derive(Serialize, Deserialize)]
struct RoundStateFile {
    round: usize,
    history: Vec<RoundMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rounds: usize,
    pub dataset: PathBuf,
    pub concat_block: String,
    pub history: Vec<RoundMetrics>,
    /// Checkpoint directory of each round, relative to the run directory.
    pub artifacts: Vec<String>,
}

enum Stage {
    Classifier = 1,
    Segmenter = 2,
}

fn fmt_pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.2}"))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    crate::raster::ensure_parent(path)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn with_seed(c: &TrainConfig, seed: u64) -> TrainConfig {
    TrainConfig { seed, ..c.clone() }
}

/// Per-image outputs of Step 2.
struct Step2 {
    cam: ClassMask,
    seeds: ClassMask,
    pseudo: ClassMask,
}

/// Runs the next round (`state.history.len()`) and writes its checkpoint
/// under `run_dir`. The checkpoint is assembled in a scratch directory and
/// renamed into place only after every stage succeeded.
pub fn run_round(state: &mut PipelineState, cfg: &RunConfig, data: &Dataset, run_dir: &Path) -> Result<()> {
    cfg.validate()?;
    let r = state.history.len();
    if r > cfg.rounds {
        return Err(Error::Config(format!(
            "round {r} exceeds the configured {} rounds",
            cfg.rounds
        )));
    }
    let (n, h, w) = (data.n_classes, data.height, data.width);
    let train = &data.train;
    let clock = std::time::Instant::now();
    log::info!("round {r}: step 1 (classifier)");

    // Step 1: classifier on [X, M_t].
    let adjusted = r > 0 && !cfg.q1_control;
    let prev_fg: Vec<Vec<f64>> = state.x_m.iter().map(foreground_vector).collect();
    if r > 0 && prev_fg.len() != train.len() {
        return Err(Error::Validation(
            "previous round's masks do not cover the training set".into(),
        ));
    }
    let prev_conf = if adjusted {
        Some(
            state
                .confounders
                .as_ref()
                .ok_or_else(|| Error::Validation("previous round left no confounder set".into()))?,
        )
    } else {
        None
    };
    let ctx_for = |i: usize| -> ContextInput {
        if r == 0 {
            ContextInput::Zero
        } else if let Some(conf) = prev_conf {
            ContextInput::Adjusted {
                x_fg: &prev_fg[i],
                conf,
                normalize_max: cfg.normalize_context,
            }
        } else {
            ContextInput::Fixed(&prev_fg[i])
        }
    };
    let spec = ClassifierSpec::standard(n, h, w, cfg.concat_block);
    let cls_seed = cfg.stage_seed(Stage::Classifier as u64);
    let mut init = match (&state.classifier, cfg.warm_start) {
        (Some(prev), true) => prev.clone(),
        _ => Classifier::init(spec.clone(), cls_seed)?,
    };
    if let (Some(prev), true) = (&state.classifier, adjusted) {
        init.set_projection(&prev.projection())?;
    }
    let samples: Vec<ClassifierSample> = train
        .iter()
        .enumerate()
        .map(|(i, s)| ClassifierSample {
            image: &s.image,
            labels: &s.labels,
            context: ctx_for(i),
        })
        .collect();
    let (classifier, cls_report) =
        train_classifier(&samples, &spec, &with_seed(&cfg.classifier, cls_seed), Some(init))?;

    // Step 2: CAM -> seeds -> random-walk pseudo-masks.
    log::info!("round {r}: step 2 (seeds and expansion) at {:.1?}", clock.elapsed());
    let step2: Vec<Step2> = (0..train.len())
        .into_par_iter()
        .map(|i| {
            let s = &train[i];
            let out = classifier.forward(&s.image, &ctx_for(i))?;
            let cams = compute_cam(&out.features, &out.head_weights, &s.labels)?;
            let cam = cam_labelling(&cams, cfg.cam_eval_threshold, (h, w), cfg.seeds.upsample)?;
            let seeds = threshold_seeds_with(&cams, &cfg.seeds, (h, w))?;
            let graph = build_affinity(&s.image, &cfg.affinity)?;
            let pseudo = random_walk_expand(&graph, &seeds, &s.labels, cfg.affinity.t_iters)?;
            Ok(Step2 { cam, seeds, pseudo })
        })
        .collect::<Result<_>>()?;

    // Step 3: segmenter on pseudo-masks, then X_m for every training image.
    log::info!("round {r}: step 3 (segmenter) at {:.1?}", clock.elapsed());
    let seg_samples: Vec<(&RgbImage, &ClassMask)> =
        train.iter().zip(&step2).map(|(s, o)| (&s.image, &o.pseudo)).collect();
    let seg_spec = SegmenterSpec::standard(n, h, w);
    let seg_cfg = with_seed(&cfg.segmenter, cfg.stage_seed(Stage::Segmenter as u64));
    let seg = train_segmenter(&seg_samples, &seg_spec, &seg_cfg)?;
    let mut warnings: Vec<String> = seg
        .skipped
        .iter()
        .map(|&i| format!("{}: pseudo-mask entirely IGNORE, skipped by the segmenter", train[i].id))
        .collect();
    let segmenter = seg.model;
    let x_m: Vec<ClassMask> = train
        .par_iter()
        .map(|s| segmenter.predict(&s.image))
        .collect::<Result<_>>()?;
    let eval_pred: Vec<ClassMask> = data
        .eval
        .par_iter()
        .map(|s| segmenter.predict(&s.image))
        .collect::<Result<_>>()?;

    // Step 4: confounder set and M_{t+1}.
    log::info!("round {r}: step 4 (context) at {:.1?}", clock.elapsed());
    let (confounders, context) = if cfg.q1_control {
        (None, x_m.iter().map(ContextMap::foreground).collect::<Vec<_>>())
    } else {
        let source: Vec<ClassMask> = match cfg.confounder_source {
            crate::context::ConfounderSource::SegMask => x_m.clone(),
            crate::context::ConfounderSource::PseudoMask => step2.iter().map(|o| o.pseudo.clone()).collect(),
        };
        let labels: Vec<LabelSet> = train.iter().map(|s| s.labels.clone()).collect();
        let conf = build_confounder_set(&source, &labels, n, cfg.confounder_source)?;
        warnings.extend(conf.warnings.iter().cloned());
        let proj = classifier.projection();
        let maps: Vec<ContextMap> = x_m
            .par_iter()
            .map(|m| {
                let mut c = compute_context_map(m, &conf, &proj)?;
                let mx = c.max();
                if cfg.normalize_context && mx > 0.0 {
                    c.values.iter_mut().for_each(|v| *v /= mx);
                }
                Ok(c)
            })
            .collect::<Result<_>>()?;
        (Some(conf), maps)
    };

    // Single-pass versus per-stratum probabilities for the context this round consumed.
    let nwgm = match prev_conf {
        Some(conf) if cfg.nwgm_probe_images > 0 && cfg.concat_block != crate::models::ConcatSite::None => {
            let k = cfg.nwgm_probe_images.min(train.len());
            let gaps: Vec<f64> = (0..k)
                .map(|i| Ok(nwgm_forward_check(&classifier, &train[i].image, &state.x_m[i], conf)?.max_gap()))
                .collect::<Result<_>>()?;
            Some(NwgmSummary {
                images: k,
                mean_gap: gaps.iter().sum::<f64>() / k as f64,
                max_gap: gaps.iter().copied().fold(0.0, f64::max),
            })
        }
        _ => None,
    };

    // Persist into a scratch directory.
    let final_dir = run_dir.join(round_dir_name(r));
    let tmp = run_dir.join(format!("{STATE_DIR}/.round_{r}.partial"));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    classifier.save(&tmp.join("classifier.bin"))?;
    segmenter.save(&tmp.join("segmenter.bin"))?;
    if let Some(c) = &confounders {
        c.save(&tmp.join("confounders.bin"))?;
    }
    cfg.seeds.write_sidecar(&tmp.join("seeds/thresholds.json"))?;
    for ((s, o), (xm, m)) in train.iter().zip(&step2).zip(x_m.iter().zip(&context)) {
        o.cam.save_png(&tmp.join(format!("cam/{}.png", s.id)))?;
        o.seeds.save_png(&tmp.join(format!("seeds/{}.png", s.id)))?;
        o.pseudo.save_png(&tmp.join(format!("pseudo/{}.png", s.id)))?;
        xm.save_png(&tmp.join(format!("segpred/{}.png", s.id)))?;
        m.save(&tmp.join(format!("context/{}.bin", s.id)))?;
        m.save_preview_png(&tmp.join(format!("context/{}.png", s.id)))?;
    }
    for (s, p) in data.eval.iter().zip(&eval_pred) {
        p.save_png(&tmp.join(format!("evalpred/{}.png", s.id)))?;
    }

    let mut metrics = RoundMetrics {
        round: r,
        cam_miou: None,
        pseudo_miou: None,
        seg_miou: None,
        classifier_loss: *cls_report.epoch_losses.last().expect("at least one epoch"),
        segmenter_loss: *seg.report.epoch_losses.last().expect("at least one epoch"),
        nwgm,
        warnings,
    };
    if cfg.evaluate {
        let cams: Vec<&ClassMask> = step2.iter().map(|o| &o.cam).collect();
        let pseudo: Vec<&ClassMask> = step2.iter().map(|o| &o.pseudo).collect();
        let evalp: Vec<&ClassMask> = eval_pred.iter().collect();
        let s = score(data, &cams, &pseudo, &evalp)?;
        [metrics.cam_miou, metrics.pseudo_miou, metrics.seg_miou] = s;
    }
    log::info!(
        "round {r}: cam {} pseudo {} seg {}",
        fmt_pct(metrics.cam_miou),
        fmt_pct(metrics.pseudo_miou),
        fmt_pct(metrics.seg_miou)
    );
    let mut history = state.history.clone();
    history.push(metrics);
    let sf = RoundStateFile {
        round: r,
        history: history.clone(),
    };
    write_file(
        &tmp.join(ROUND_STATE_FILE),
        (serde_json::to_string_pretty(&sf)? + "\n").as_bytes(),
    )?;
    if final_dir.exists() {
        fs::remove_dir_all(&final_dir).map_err(|e| Error::io(&final_dir, e))?;
    }
    fs::rename(&tmp, &final_dir).map_err(|e| Error::io(&final_dir, e))?;

    *state = PipelineState {
        history,
        classifier: Some(classifier),
        segmenter: Some(segmenter),
        confounders,
        x_m,
        pseudo: step2.into_iter().map(|o| o.pseudo).collect(),
        context,
    };
    Ok(())
}

/// `[cam, pseudo, seg]` mIoU in percent; seg is `None` for an empty eval split.
fn score(
    data: &Dataset,
    cams: &[&ClassMask],
    pseudo: &[&ClassMask],
    eval_pred: &[&ClassMask],
) -> Result<[Option<f64>; 3]> {
    let n = data.n_classes;
    let mut acc_cam = MiouAccumulator::new(n);
    let mut acc_pseudo = MiouAccumulator::new(n);
    for ((s, c), p) in data.train.iter().zip(cams).zip(pseudo) {
        let gt = data.load_gt(s)?;
        acc_cam.add(c, &gt)?;
        acc_pseudo.add(p, &gt)?;
    }
    let mut acc_seg = MiouAccumulator::new(n);
    for (s, p) in data.eval.iter().zip(eval_pred) {
        acc_seg.add(p, &data.load_gt(s)?)?;
    }
    Ok([
        Some(100.0 * acc_cam.result().mean),
        Some(100.0 * acc_pseudo.result().mean),
        (!data.eval.is_empty()).then(|| 100.0 * acc_seg.result().mean),
    ])
}

fn read_masks(dir: &Path, samples: &[Sample]) -> Result<Vec<ClassMask>> {
    samples
        .iter()
        .map(|s| ClassMask::load_png(&dir.join(format!("{}.png", s.id))))
        .collect()
}

/// Reloads the checkpoint of `round` from `run_dir`.
pub fn load_round(run_dir: &Path, round: usize, data: &Dataset) -> Result<PipelineState> {
    let dir = run_dir.join(round_dir_name(round));
    let sf_path = dir.join(ROUND_STATE_FILE);
    let sf: RoundStateFile = serde_json::from_slice(&fs::read(&sf_path).map_err(|e| Error::io(&sf_path, e))?)?;
    if sf.round != round || sf.history.len() != round + 1 {
        return Err(Error::Validation(format!(
            "{}: inconsistent round state",
            sf_path.display()
        )));
    }
    let conf_path = dir.join("confounders.bin");
    let confounders = if conf_path.exists() {
        Some(ConfounderSet::load(&conf_path)?)
    } else {
        None
    };
    let context = data
        .train
        .iter()
        .map(|s| ContextMap::load(&dir.join(format!("context/{}.bin", s.id))))
        .collect::<Result<_>>()?;
    Ok(PipelineState {
        history: sf.history,
        classifier: Some(Classifier::load(&dir.join("classifier.bin"))?),
        segmenter: Some(Segmenter::load(&dir.join("segmenter.bin"))?),
        confounders,
        x_m: read_masks(&dir.join("segpred"), &data.train)?,
        pseudo: read_masks(&dir.join("pseudo"), &data.train)?,
        context,
    })
}

/// Highest round with a complete checkpoint.
pub fn latest_round(run_dir: &Path) -> Option<usize> {
    (0..)
        .take_while(|&k| run_dir.join(round_dir_name(k)).join(ROUND_STATE_FILE).exists())
        .last()
}

/// Exclusive ownership of a run directory for the guard's lifetime.
pub struct RunLock(PathBuf);

impl RunLock {
    pub fn acquire(run_dir: &Path) -> Result<Self> {
        fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
        let path = run_dir.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                use std::io::Write;
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(path)),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

/// Runs rounds `0..=cfg.rounds` into `run_dir` and writes `report.json`.
/// With `resume`, continues after the last complete checkpoint; the stored
/// `config.json` must match `cfg`.
pub fn run_conta(cfg: &RunConfig, run_dir: &Path, resume: bool) -> Result<Report> {
    cfg.validate()?;
    let data = Dataset::load(&cfg.dataset)?;
    run_conta_with(cfg, &data, run_dir, resume)
}

/// As [`run_conta`] with an already loaded dataset.
pub fn run_conta_with(cfg: &RunConfig, data: &Dataset, run_dir: &Path, resume: bool) -> Result<Report> {
    cfg.validate()?;
    let _lock = RunLock::acquire(run_dir)?;
    let cfg_path = run_dir.join(RUN_CONFIG_FILE);
    let mut state = if resume {
        let stored = RunConfig::from_json_file(&cfg_path)?;
        if &stored != cfg {
            return Err(Error::Config(format!(
                "{} differs from the requested config",
                cfg_path.display()
            )));
        }
        match latest_round(run_dir) {
            Some(k) if k > cfg.rounds => {
                return Err(Error::Validation(format!(
                    "run already has {k} rounds, more than configured"
                )))
            }
            Some(k) => load_round(run_dir, k, data)?,
            None => PipelineState::fresh(),
        }
    } else {
        if run_dir.join(STATE_DIR).exists() {
            return Err(Error::Config(format!(
                "{} already holds a run; resume it or choose another output directory",
                run_dir.display()
            )));
        }
        write_file(&cfg_path, cfg.to_json_string().as_bytes())?;
        PipelineState::fresh()
    };
    while state.history.len() <= cfg.rounds {
        let r = state.history.len();
        run_round(&mut state, cfg, data, run_dir)?;
        // continue from the checkpoint so resumed and uninterrupted runs agree
        state = load_round(run_dir, r, data)?;
    }
    let report = Report {
        rounds: cfg.rounds,
        dataset: cfg.dataset.clone(),
        concat_block: cfg.concat_block.name().into(),
        history: state.history,
        artifacts: (0..=cfg.rounds).map(round_dir_name).collect(),
    };
    write_file(
        &run_dir.join(REPORT_FILE),
        (serde_json::to_string_pretty(&report)? + "\n").as_bytes(),
    )?;
    Ok(report)
}

/// mIoU of persisted masks, recomputed from a run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rescore {
    pub round: usize,
    pub cam_miou: f64,
    pub pseudo_miou: f64,
    pub seg_miou: Option<f64>,
}

/// Scores every completed round's saved CAM, pseudo-mask and eval
/// predictions against ground truth.
pub fn rescore_run(run_dir: &Path) -> Result<Vec<Rescore>> {
    let cfg = RunConfig::from_json_file(&run_dir.join(RUN_CONFIG_FILE))?;
    let data = Dataset::load(&cfg.dataset)?;
    let last =
        latest_round(run_dir).ok_or_else(|| Error::NotFound(format!("no completed round in {}", run_dir.display())))?;
    (0..=last)
        .map(|r| {
            let dir = run_dir.join(round_dir_name(r));
            let cams = read_masks(&dir.join("cam"), &data.train)?;
            let pseudo = read_masks(&dir.join("pseudo"), &data.train)?;
            let evalp = read_masks(&dir.join("evalpred"), &data.eval)?;
            let s = score(
                &data,
                &cams.iter().collect::<Vec<_>>(),
                &pseudo.iter().collect::<Vec<_>>(),
                &evalp.iter().collect::<Vec<_>>(),
            )?;
            Ok(Rescore {
                round: r,
                cam_miou: s[0].expect("train split is nonempty"),
                pseudo_miou: s[1].expect("train split is nonempty"),
                seg_miou: s[2],
            })
        })
        .collect()
}
