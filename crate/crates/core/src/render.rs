//! Raster outputs for inspecting a run: per-image mask overlays and a
//! per-round mIoU plot.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::pipeline::{latest_round, round_dir_name, Dataset, Report, RunConfig, REPORT_FILE, RUN_CONFIG_FILE};
use crate::raster::{ClassMask, RgbImage, IGNORE};

const SCALE: usize = 4;
const GAP: usize = 2;

/// Class colours; id 0 is background, IGNORE renders white.
pub fn class_color(id: u8) -> [f64; 3] {
    const PALETTE: [[f64; 3]; 8] = [
        [0.90, 0.10, 0.10],
        [0.10, 0.75, 0.20],
        [0.15, 0.30, 0.95],
        [0.95, 0.80, 0.05],
        [0.80, 0.20, 0.85],
        [0.05, 0.80, 0.85],
        [0.95, 0.50, 0.10],
        [0.55, 0.35, 0.15],
    ];
    match id {
        0 => [0.0, 0.0, 0.0],
        IGNORE => [1.0, 1.0, 1.0],
        k => PALETTE[(k as usize - 1) % PALETTE.len()],
    }
}

struct Canvas {
    h: usize,
    w: usize,
    rgb: Vec<[f64; 3]>,
}

impl Canvas {
    fn new(h: usize, w: usize, fill: [f64; 3]) -> Self {
        Self {
            h,
            w,
            rgb: vec![fill; h * w],
        }
    }

    fn put(&mut self, y: usize, x: usize, c: [f64; 3]) {
        if y < self.h && x < self.w {
            self.rgb[y * self.w + x] = c;
        }
    }

    fn line(&mut self, (y0, x0): (i64, i64), (y1, x1): (i64, i64), c: [f64; 3]) {
        let steps = (y1 - y0).abs().max((x1 - x0).abs()).max(1);
        for s in 0..=steps {
            let y = y0 + (y1 - y0) * s / steps;
            let x = x0 + (x1 - x0) * s / steps;
            for (dy, dx) in [(0, 0), (1, 0), (0, 1)] {
                if y + dy >= 0 && x + dx >= 0 {
                    self.put((y + dy) as usize, (x + dx) as usize, c);
                }
            }
        }
    }

    fn save(&self, path: &Path) -> Result<()> {
        let mut data = vec![0.0; 3 * self.h * self.w];
        for (p, c) in self.rgb.iter().enumerate() {
            for k in 0..3 {
                data[k * self.h * self.w + p] = c[k];
            }
        }
        RgbImage::from_chw(self.h, self.w, data)?.save_png(path)
    }
}

/// The image beside overlays of each mask, upscaled by nearest neighbour,
/// as interleaved 8-bit RGB.
pub fn composite(image: &RgbImage, masks: &[&ClassMask]) -> Result<Vec<u8>> {
    let (h, w) = image.dims();
    if let Some(m) = masks.iter().find(|m| m.dims() != (h, w)) {
        return Err(Error::Shape(format!("mask {:?} vs image {:?}", m.dims(), (h, w))));
    }
    let panels = masks.len() + 1;
    let ph = h * SCALE;
    let pw = w * SCALE;
    let mut c = Canvas::new(ph, panels * pw + (panels - 1) * GAP, [1.0; 3]);
    for k in 0..panels {
        let x0 = k * (pw + GAP);
        for y in 0..ph {
            for x in 0..pw {
                let px = image.pixel(y / SCALE, x / SCALE);
                let col = if k == 0 {
                    px
                } else {
                    let id = masks[k - 1].get(y / SCALE, x / SCALE);
                    let m = class_color(id);
                    match id {
                        0 => px.map(|v| 0.35 * v),
                        _ => [0, 1, 2].map(|i| 0.35 * px[i] + 0.65 * m[i]),
                    }
                };
                c.put(y, x0 + x, col);
            }
        }
    }
    Ok(c.rgb
        .iter()
        .flat_map(|v| v.map(|x| (x * 255.0).round() as u8))
        .collect())
}

fn write_composite(path: &Path, image: &RgbImage, masks: &[&ClassMask]) -> Result<()> {
    let (h, w) = image.dims();
    let panels = masks.len() + 1;
    let cw = panels * w * SCALE + (panels - 1) * GAP;
    let bytes = composite(image, masks)?;
    RgbImage::from_rgb8(h * SCALE, cw, &bytes)?.save_png(path)
}

/// Line plot of CAM (red), pseudo-mask (green) and segmentation (blue)
/// mIoU over rounds, on a 0–100 axis.
pub fn plot_history(report: &Report, path: &Path) -> Result<()> {
    let (h, w) = (240usize, 360usize);
    let (top, left, bottom, right) = (10i64, 20i64, 220i64, 345i64);
    let mut c = Canvas::new(h, w, [1.0; 3]);
    let axis = [0.2; 3];
    c.line((bottom, left), (bottom, right), axis);
    c.line((top, left), (bottom, left), axis);
    for k in 1..10 {
        let y = bottom - (bottom - top) * k / 10;
        for x in (left..right).step_by(6) {
            c.put(y as usize, x as usize, [0.85; 3]);
        }
    }
    let n = report.history.len();
    let xs = |i: usize| {
        if n <= 1 {
            (left + right) / 2
        } else {
            left + 10 + (right - left - 20) * i as i64 / (n as i64 - 1)
        }
    };
    let ys = |v: f64| bottom - ((bottom - top) as f64 * v.clamp(0.0, 100.0) / 100.0).round() as i64;
    type Series = (fn(&crate::pipeline::RoundMetrics) -> Option<f64>, [f64; 3]);
    let series: [Series; 3] = [
        (|m| m.cam_miou, [0.85, 0.1, 0.1]),
        (|m| m.pseudo_miou, [0.1, 0.65, 0.15]),
        (|m| m.seg_miou, [0.1, 0.25, 0.9]),
    ];
    for (get, col) in series {
        let pts: Vec<(i64, i64)> = report
            .history
            .iter()
            .enumerate()
            .filter_map(|(i, m)| get(m).map(|v| (ys(v), xs(i))))
            .collect();
        for pair in pts.windows(2) {
            c.line(pair[0], pair[1], col);
        }
        for &(y, x) in &pts {
            for dy in -2..=2 {
                for dx in -2..=2 {
                    c.put((y + dy) as usize, (x + dx) as usize, col);
                }
            }
        }
    }
    c.save(path)
}

/// Writes `<id>_round<k>.png` (image, seed, pseudo-mask, segmentation,
/// ground truth) and `miou.png` under `out_dir`. `round` defaults to the
/// last completed round.
pub fn render_run(run_dir: &Path, image_id: &str, round: Option<usize>, out_dir: &Path) -> Result<(PathBuf, PathBuf)> {
    let cfg = RunConfig::from_json_file(&run_dir.join(RUN_CONFIG_FILE))?;
    let data = Dataset::load(&cfg.dataset)?;
    let sample = data
        .find_train(image_id)
        .ok_or_else(|| Error::NotFound(format!("training image {image_id:?}")))?;
    let last =
        latest_round(run_dir).ok_or_else(|| Error::NotFound(format!("no completed round in {}", run_dir.display())))?;
    let r = round.unwrap_or(last);
    if r > last {
        return Err(Error::NotFound(format!("round {r} (last completed is {last})")));
    }
    let dir = run_dir.join(round_dir_name(r));
    let load = |sub: &str| ClassMask::load_png(&dir.join(sub).join(format!("{image_id}.png")));
    let seeds = load("seeds")?;
    let pseudo = load("pseudo")?;
    let seg = load("segpred")?;
    let gt =
        ClassMask::load_png(&sample.gt_path).unwrap_or_else(|_| ClassMask::filled(data.height, data.width, IGNORE));
    let comp = out_dir.join(format!("{image_id}_round{r}.png"));
    write_composite(&comp, &sample.image, &[&seeds, &pseudo, &seg, &gt])?;

    let report_path = run_dir.join(REPORT_FILE);
    let report: Report = if report_path.exists() {
        serde_json::from_slice(&std::fs::read(&report_path).map_err(|e| Error::io(&report_path, e))?)?
    } else {
        let state = crate::pipeline::load_round(run_dir, last, &data)?;
        Report {
            rounds: cfg.rounds,
            dataset: cfg.dataset.clone(),
            concat_block: cfg.concat_block.name().into(),
            history: state.history,
            artifacts: (0..=last).map(round_dir_name).collect(),
        }
    };
    let plot = out_dir.join("miou.png");
    plot_history(&report, &plot)?;
    Ok((comp, plot))
}
