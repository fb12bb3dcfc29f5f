//! Synthetic multi-object scenes with a controllable co-occurrence confound.
//!
//! Each image has a latent context id (its *anchor* class). The context
//! decides which other classes join the scene and which background texture
//! is painted, so both the pixels and the label set depend on it. Ground
//! truth masks go to their own directory and are only read for evaluation.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{ClassMask, LabelSet, RgbImage};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Disc,
    Triangle,
    Bar,
    Ring,
}

/// Geometry and color range for one class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    /// Half-extent range in pixels, inclusive.
    pub size: [u32; 2],
    /// Per-channel lower and upper bounds of the fill color.
    pub color: [[f64; 3]; 2],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    HorizontalStripes,
    VerticalStripes,
    Checker,
    Blotches,
}

/// Two-tone textured background fill.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackgroundStyle {
    pub pattern: Pattern,
    pub color_a: [f64; 3],
    pub color_b: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub n_classes: usize,
    /// `[height, width]` in pixels.
    pub canvas: [usize; 2],
    /// `cooccurrence[i][j]`: chance that class `j+1` appears in a scene whose
    /// context is class `i+1`, at full confound strength.
    pub cooccurrence: Vec<Vec<f64>>,
    /// Blend between the co-occurrence matrix (1) and `base_rate` (0).
    pub confound_strength: f64,
    /// Inclusion chance of a non-anchor class when the confound is off.
    pub base_rate: f64,
    /// Per-class weights over a 3x3 grid of canvas regions, row-major.
    pub placement_prior: Vec<[f64; 9]>,
    pub shapes: Vec<ShapeSpec>,
    /// Indexed by context id modulo the list length.
    pub background_styles: Vec<BackgroundStyle>,
    /// Amplitude of the uniform per-pixel texture noise.
    pub noise: f64,
    pub n_images: usize,
    pub seed: u64,
    /// Train and eval fractions for the manifest split.
    pub split: [f64; 2],
}

impl Default for SceneConfig {
    fn default() -> Self {
        let gray = |t: [f64; 3], a: f64| -> [f64; 3] {
            [
                0.5 * (1.0 - a) + t[0] * a,
                0.5 * (1.0 - a) + t[1] * a,
                0.5 * (1.0 - a) + t[2] * a,
            ]
        };
        let tints = [
            [0.85, 0.25, 0.25],
            [0.25, 0.75, 0.3],
            [0.25, 0.35, 0.8],
            [0.88, 0.82, 0.22],
        ];
        let patterns = [
            Pattern::HorizontalStripes,
            Pattern::VerticalStripes,
            Pattern::Checker,
            Pattern::Blotches,
        ];
        let background_styles = tints
            .iter()
            .zip(patterns)
            .map(|(t, pattern)| BackgroundStyle {
                pattern,
                color_a: gray(*t, 0.1),
                color_b: gray(*t, 0.05).map(|v| v * 0.8),
            })
            .collect();
        let left = [3.0, 1.0, 1.0, 3.0, 1.0, 1.0, 3.0, 1.0, 1.0];
        let center = [1.0, 2.0, 1.0, 2.0, 3.0, 2.0, 1.0, 2.0, 1.0];
        let top = [3.0, 3.0, 3.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0];
        let bottom = [1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 3.0, 3.0, 3.0];
        let span = |c: [f64; 3]| [c.map(|v| (v - 0.1f64).max(0.0)), c.map(|v| (v + 0.1f64).min(1.0))];
        Self {
            n_classes: 4,
            canvas: [32, 32],
            cooccurrence: vec![
                vec![1.0, 1.0, 0.1, 0.1],
                vec![1.0, 1.0, 0.1, 0.1],
                vec![0.1, 0.1, 1.0, 0.8],
                vec![0.1, 0.1, 0.8, 1.0],
            ],
            confound_strength: 0.9,
            base_rate: 0.25,
            placement_prior: vec![left, center, top, bottom],
            shapes: vec![
                ShapeSpec {
                    kind: ShapeKind::Disc,
                    size: [4, 7],
                    color: span(tints[0]),
                },
                ShapeSpec {
                    kind: ShapeKind::Triangle,
                    size: [5, 8],
                    color: span(tints[1]),
                },
                ShapeSpec {
                    kind: ShapeKind::Bar,
                    size: [6, 9],
                    color: span(tints[2]),
                },
                ShapeSpec {
                    kind: ShapeKind::Ring,
                    size: [5, 8],
                    color: span(tints[3]),
                },
            ],
            background_styles,
            noise: 0.06,
            n_images: 250,
            seed: 2020,
            split: [0.8, 0.2],
        }
    }
}

fn prob_ok(p: f64) -> bool {
    p.is_finite() && (0.0..=1.0).contains(&p)
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let n = self.n_classes;
        let bad = |m: String| Err(Error::Config(m));
        if !(2..=254).contains(&n) {
            return bad(format!("n_classes = {n}, need 2..=254"));
        }
        let [h, w] = self.canvas;
        if h < 16 || w < 16 {
            return bad(format!("canvas {h}x{w} is smaller than 16x16"));
        }
        if !prob_ok(self.confound_strength) {
            return bad(format!("confound_strength = {} not in [0, 1]", self.confound_strength));
        }
        if !prob_ok(self.base_rate) {
            return bad(format!("base_rate = {} not in [0, 1]", self.base_rate));
        }
        if self.cooccurrence.len() != n || self.cooccurrence.iter().any(|r| r.len() != n) {
            return bad(format!("cooccurrence must be {n}x{n}"));
        }
        for (i, row) in self.cooccurrence.iter().enumerate() {
            if row.iter().any(|p| !prob_ok(*p)) {
                return bad(format!("cooccurrence[{i}] has entries outside [0, 1]"));
            }
            if row[i] != 1.0 {
                return bad(format!("cooccurrence[{i}][{i}] must be 1"));
            }
        }
        if self.placement_prior.len() != n {
            return bad(format!("placement_prior needs {n} rows"));
        }
        for (i, row) in self.placement_prior.iter().enumerate() {
            if row.iter().any(|p| !p.is_finite() || *p < 0.0) || row.iter().sum::<f64>() <= 0.0 {
                return bad(format!("placement_prior[{i}] must be nonnegative with positive mass"));
            }
        }
        if self.shapes.len() != n {
            return bad(format!("shapes needs {n} entries"));
        }
        for (i, s) in self.shapes.iter().enumerate() {
            if s.size[0] == 0 || s.size[0] > s.size[1] {
                return bad(format!("shapes[{i}].size must satisfy 0 < min <= max"));
            }
            if s.color.iter().flatten().any(|c| !prob_ok(*c)) || (0..3).any(|k| s.color[0][k] > s.color[1][k]) {
                return bad(format!("shapes[{i}].color must be an ordered range in [0, 1]"));
            }
            if 2 * s.size[1] as usize + 1 > h.min(w) {
                return Err(Error::Placement(format!(
                    "class {} shapes up to half-extent {} do not fit a {h}x{w} canvas",
                    i + 1,
                    s.size[1]
                )));
            }
        }
        if self.background_styles.is_empty() {
            return bad("background_styles is empty".into());
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return bad("noise must be nonnegative".into());
        }
        if self.n_images == 0 {
            return bad("n_images must be positive".into());
        }
        check_fractions(self.split)?;
        Ok(())
    }

    /// Effective inclusion chance of class `j` given context `i` (0-based).
    pub fn inclusion_prob(&self, i: usize, j: usize) -> f64 {
        if i == j {
            return 1.0;
        }
        let rho = self.confound_strength;
        rho * self.cooccurrence[i][j] + (1.0 - rho) * self.base_rate
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One generated scene, before it is written to disk.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub image: RgbImage,
    pub labels: LabelSet,
    pub gt_mask: ClassMask,
    /// Latent context id (1-based anchor class).
    pub context: u8,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    pub image: String,
    pub gt_mask: String,
    pub labels: Vec<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<u8>,
}

impl Record {
    pub fn label_set(&self) -> LabelSet {
        self.labels.iter().copied().collect()
    }
}

/// Records plus the directory their relative paths resolve against.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub records: Vec<Record>,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const TRAIN_FILE: &str = "train.jsonl";
pub const EVAL_FILE: &str = "eval.jsonl";
pub const CONFIG_FILE: &str = "dataset.json";

impl DatasetManifest {
    pub fn image_path(&self, r: &Record) -> PathBuf {
        self.root.join(&r.image)
    }

    pub fn gt_path(&self, r: &Record) -> PathBuf {
        self.root.join(&r.gt_mask)
    }

    pub fn load_image(&self, r: &Record) -> Result<RgbImage> {
        RgbImage::load_png(&self.image_path(r))
    }

    pub fn load_gt(&self, r: &Record) -> Result<ClassMask> {
        ClassMask::load_png(&self.gt_path(r))
    }

    pub fn find(&self, id: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.id == id)
    }

    /// Reads a JSON-lines manifest; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound(format!("manifest {}", path.display())),
            _ => Error::io(path, e),
        })?;
        let mut records = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line)?);
        }
        Ok(Self {
            root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
            records,
        })
    }

    pub fn write_jsonl(records: &[Record], path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for r in records {
            serde_json::to_writer(&mut out, r)?;
            out.push(b'\n');
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    }
}

// Per-class irrational strides for the label sequence: fractional parts of
// square roots of primes.
const PRIMES: [f64; 16] = [
    2.0, 3.0, 5.0, 7.0, 11.0, 13.0, 17.0, 19.0, 23.0, 29.0, 31.0, 37.0, 41.0, 43.0, 47.0, 53.0,
];

fn stride(j: usize) -> f64 {
    let p = PRIMES[j % PRIMES.len()] + 59.0 * (j / PRIMES.len()) as f64;
    p.sqrt().fract()
}

/// Label set of image `index`: its anchor plus every class whose
/// low-discrepancy uniform falls under the inclusion probability. Pairs
/// forced to probability one are closed transitively.
fn sample_labels(cfg: &SceneConfig, index: usize, offsets: &[f64]) -> (u8, LabelSet) {
    let n = cfg.n_classes;
    let anchor = index % n;
    let k = (index / n) as f64;
    let mut present = vec![false; n];
    present[anchor] = true;
    for j in 0..n {
        if j == anchor {
            continue;
        }
        let u = (offsets[j] + k * stride(j)).fract();
        if u < cfg.inclusion_prob(anchor, j) {
            present[j] = true;
        }
    }
    loop {
        let mut changed = false;
        for i in 0..n {
            if !present[i] {
                continue;
            }
            for j in 0..n {
                if !present[j] && cfg.inclusion_prob(i, j) >= 1.0 {
                    present[j] = true;
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    let labels = (0..n).filter(|&j| present[j]).map(|j| (j + 1) as u8).collect();
    (anchor as u8 + 1, labels)
}

fn label_offsets(cfg: &SceneConfig) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6c61_6265_6c73);
    (0..cfg.n_classes).map(|_| rng.random::<f64>()).collect()
}

#[derive(Clone, Copy, Debug)]
struct Placed {
    class: u8,
    kind: ShapeKind,
    cy: f64,
    cx: f64,
    size: f64,
    vertical: bool,
    color: [f64; 3],
}

impl Placed {
    fn covers(&self, y: usize, x: usize) -> bool {
        let py = y as f64 + 0.5 - self.cy;
        let px = x as f64 + 0.5 - self.cx;
        let s = self.size;
        match self.kind {
            ShapeKind::Disc => px * px + py * py <= s * s,
            ShapeKind::Ring => {
                let d2 = px * px + py * py;
                let inner = s - (s / 2.5).max(2.0);
                d2 <= s * s && d2 >= inner * inner
            }
            ShapeKind::Bar => {
                let (along, across) = if self.vertical { (py, px) } else { (px, py) };
                along.abs() <= s && across.abs() <= (s / 3.0).max(1.5)
            }
            ShapeKind::Triangle => {
                // apex up; base at +s, apex at -s, base half-width s
                if py < -s || py > s {
                    return false;
                }
                let half = s * (py + s) / (2.0 * s);
                px.abs() <= half
            }
        }
    }
}

const PLACEMENT_TRIES: usize = 64;
const MIN_VISIBLE: f64 = 0.4;

/// Renders scene `index`. Pure function of `(cfg, index)`.
pub fn render_scene(cfg: &SceneConfig, index: usize) -> Result<LabeledImage> {
    render_with_offsets(cfg, index, &label_offsets(cfg))
}

fn render_with_offsets(cfg: &SceneConfig, index: usize, offsets: &[f64]) -> Result<LabeledImage> {
    let [h, w] = cfg.canvas;
    let (context, labels) = sample_labels(cfg, index, offsets);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64 + 1);

    let mut order: Vec<u8> = labels.iter().copied().collect();
    let mut placed: Vec<Placed> = Vec::new();
    let mut owner = vec![0u8; h * w];
    let mut ok = false;
    for _ in 0..PLACEMENT_TRIES {
        order.shuffle(&mut rng);
        placed.clear();
        for &class in &order {
            let spec = &cfg.shapes[class as usize - 1];
            let size = rng.random_range(spec.size[0]..=spec.size[1]) as f64;
            let prior = &cfg.placement_prior[class as usize - 1];
            let total: f64 = prior.iter().sum();
            let mut u = rng.random::<f64>() * total;
            let mut cell = 8;
            for (i, p) in prior.iter().enumerate() {
                if u < *p {
                    cell = i;
                    break;
                }
                u -= p;
            }
            let (gy, gx) = (cell / 3, cell % 3);
            let cy = (gy as f64 + rng.random::<f64>()) * h as f64 / 3.0;
            let cx = (gx as f64 + rng.random::<f64>()) * w as f64 / 3.0;
            let color = std::array::from_fn(|k| rng.random_range(spec.color[0][k]..=spec.color[1][k]));
            placed.push(Placed {
                class,
                kind: spec.kind,
                cy: cy.clamp(size, h as f64 - size),
                cx: cx.clamp(size, w as f64 - size),
                size,
                vertical: rng.random::<bool>(),
                color,
            });
        }
        // z-order: later shapes own the pixel
        owner.iter_mut().for_each(|o| *o = 0);
        let mut area = vec![0usize; placed.len()];
        for (z, s) in placed.iter().enumerate() {
            for y in 0..h {
                for x in 0..w {
                    if s.covers(y, x) {
                        owner[y * w + x] = z as u8 + 1;
                        area[z] += 1;
                    }
                }
            }
        }
        let mut visible = vec![0usize; placed.len()];
        for &o in &owner {
            if o > 0 {
                visible[o as usize - 1] += 1;
            }
        }
        if area
            .iter()
            .zip(&visible)
            .all(|(&a, &v)| a > 0 && v as f64 >= MIN_VISIBLE * a as f64)
        {
            ok = true;
            break;
        }
    }
    if !ok {
        return Err(Error::Placement(format!(
            "could not place classes {:?} on a {h}x{w} canvas for image {index}",
            order
        )));
    }

    let style = &cfg.background_styles[(context as usize - 1) % cfg.background_styles.len()];
    let phase_y = rng.random_range(0..8usize);
    let phase_x = rng.random_range(0..8usize);
    let blob_c: Vec<(f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.random::<f64>() * h as f64,
                rng.random::<f64>() * w as f64,
                rng.random_range(3.0..7.0),
            )
        })
        .collect();
    let hw = h * w;
    let mut data = vec![0.0; 3 * hw];
    let mut mask = vec![0u8; hw];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let noise = if cfg.noise > 0.0 {
                rng.random_range(-cfg.noise..=cfg.noise)
            } else {
                0.0
            };
            let rgb = match owner[p] {
                0 => {
                    let alt = match style.pattern {
                        Pattern::HorizontalStripes => ((y + phase_y) / 3) % 2 == 1,
                        Pattern::VerticalStripes => ((x + phase_x) / 3) % 2 == 1,
                        Pattern::Checker => ((y + phase_y) / 4 + (x + phase_x) / 4) % 2 == 1,
                        Pattern::Blotches => blob_c.iter().any(|(by, bx, r)| {
                            let dy = y as f64 + 0.5 - by;
                            let dx = x as f64 + 0.5 - bx;
                            dy * dy + dx * dx <= r * r
                        }),
                    };
                    if alt {
                        style.color_b
                    } else {
                        style.color_a
                    }
                }
                z => {
                    let s = &placed[z as usize - 1];
                    mask[p] = s.class;
                    s.color
                }
            };
            for k in 0..3 {
                data[k * hw + p] = (rgb[k] + noise).clamp(0.0, 1.0);
            }
        }
    }
    // quantize now so the in-memory raster equals what the PNG holds
    let image = RgbImage::from_chw(h, w, data)?;
    let image = RgbImage::from_rgb8(h, w, &image.to_rgb8())?;
    let gt_mask = ClassMask::from_vec(h, w, mask)?;
    debug_assert_eq!(gt_mask.foreground_ids(), labels);
    Ok(LabeledImage {
        image,
        labels,
        gt_mask,
        context,
    })
}

/// Writes every scene plus `manifest.jsonl`, the train/eval split files and a
/// copy of the config under `out_dir`.
pub fn generate_dataset(cfg: &SceneConfig, out_dir: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    let offsets = label_offsets(cfg);
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut records = Vec::with_capacity(cfg.n_images);
    for index in 0..cfg.n_images {
        let scene = render_with_offsets(cfg, index, &offsets)?;
        let id = format!("img_{index:05}");
        let image = format!("images/{id}.png");
        let gt_mask = format!("gt/{id}.png");
        scene.image.save_png(&out_dir.join(&image))?;
        scene.gt_mask.save_png(&out_dir.join(&gt_mask))?;
        records.push(Record {
            id,
            image,
            gt_mask,
            labels: scene.labels.into_iter().collect(),
            context: Some(scene.context),
        });
    }
    let manifest = DatasetManifest {
        root: out_dir.to_path_buf(),
        records,
    };
    DatasetManifest::write_jsonl(&manifest.records, &out_dir.join(MANIFEST_FILE))?;
    let (train, eval) = split_manifest(&manifest, cfg.split, cfg.seed)?;
    DatasetManifest::write_jsonl(&train.records, &out_dir.join(TRAIN_FILE))?;
    DatasetManifest::write_jsonl(&eval.records, &out_dir.join(EVAL_FILE))?;
    let cfg_path = out_dir.join(CONFIG_FILE);
    fs::write(&cfg_path, serde_json::to_string_pretty(cfg)?).map_err(|e| Error::io(&cfg_path, e))?;
    Ok(manifest)
}

fn check_fractions(f: [f64; 2]) -> Result<()> {
    if f.iter().any(|v| !v.is_finite() || *v <= 0.0) || f[0] + f[1] > 1.0 + 1e-12 {
        return Err(Error::Config(format!(
            "split fractions {f:?} must be positive and sum to at most 1"
        )));
    }
    Ok(())
}

/// Seeded disjoint split into train and eval parts.
pub fn split_manifest(
    manifest: &DatasetManifest,
    fractions: [f64; 2],
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest)> {
    check_fractions(fractions)?;
    let n = manifest.records.len();
    let n_train = (fractions[0] * n as f64).round() as usize;
    let n_eval = ((fractions[1] * n as f64).round() as usize).min(n - n_train.min(n));
    if n_train == 0 || n_eval == 0 {
        return Err(Error::Config(format!(
            "split {fractions:?} of {n} records leaves an empty part"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x73_706c_6974));
    let mut train: Vec<usize> = idx[..n_train].to_vec();
    let mut eval: Vec<usize> = idx[n_train..n_train + n_eval].to_vec();
    train.sort_unstable();
    eval.sort_unstable();
    let pick = |ix: &[usize]| DatasetManifest {
        root: manifest.root.clone(),
        records: ix.iter().map(|&i| manifest.records[i].clone()).collect(),
    };
    Ok((pick(&train), pick(&eval)))
}

/// Empirical `P(class j present | context i)` from records carrying a context.
pub fn measured_cooccurrence(records: &[Record], n_classes: usize) -> Vec<Vec<f64>> {
    let mut hits = vec![vec![0usize; n_classes]; n_classes];
    let mut totals = vec![0usize; n_classes];
    for r in records {
        let Some(c) = r.context else { continue };
        let i = c as usize - 1;
        totals[i] += 1;
        for &l in &r.labels {
            hits[i][l as usize - 1] += 1;
        }
    }
    hits.iter()
        .zip(&totals)
        .map(|(row, &t)| {
            row.iter()
                .map(|&k| if t == 0 { 0.0 } else { k as f64 / t as f64 })
                .collect()
        })
        .collect()
}

/// Empirical `P(j present | i present)` over all records.
pub fn conditional_presence(records: &[Record], i: u8, j: u8) -> f64 {
    let with_i: Vec<&Record> = records.iter().filter(|r| r.labels.contains(&i)).collect();
    if with_i.is_empty() {
        return 0.0;
    }
    with_i.iter().filter(|r| r.labels.contains(&j)).count() as f64 / with_i.len() as f64
}
