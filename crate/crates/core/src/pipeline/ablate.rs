use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{run_conta_with, write_file, Dataset, Report, RoundMetrics, RunConfig, RUN_CONFIG_FILE};
use crate::context::ConfounderSource;
use crate::error::{Error, Result};
use crate::models::ConcatSite;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    Rounds,
    Block,
    ConfounderSource,
    Q1,
    All,
}

impl std::str::FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rounds" => Ok(Self::Rounds),
            "block" => Ok(Self::Block),
            "confounder_source" => Ok(Self::ConfounderSource),
            "q1" => Ok(Self::Q1),
            "all" => Ok(Self::All),
            other => Err(Error::Config(format!(
                "unknown ablation axis {other:?} (expected rounds, block, confounder_source, q1 or all)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    /// `baseline`, `Q1`, `Q2`, `Q3` or `Q4`.
    pub group: String,
    pub setting: String,
    /// Arm directory (relative to the ablation output) the row was read from.
    pub arm: String,
    pub round: usize,
    pub cam_miou: Option<f64>,
    pub pseudo_miou: Option<f64>,
    pub seg_miou: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub axis: AblationAxis,
    pub rows: Vec<AblationRow>,
    /// Whether every arm reproduced the same round-0 metrics.
    pub shared_baseline: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct ArmKey {
    concat: &'static str,
    source: &'static str,
    q1: bool,
}

fn arm_name(k: &ArmKey) -> String {
    if k.q1 {
        format!("q1_{}", k.concat)
    } else {
        format!("{}_{}", k.concat, k.source)
    }
}

fn source_name(s: ConfounderSource) -> &'static str {
    match s {
        ConfounderSource::SegMask => "seg_mask",
        ConfounderSource::PseudoMask => "pseudo_mask",
    }
}

struct Planned {
    group: &'static str,
    setting: String,
    cfg: RunConfig,
    round: usize,
}

fn key_of(c: &RunConfig) -> ArmKey {
    ArmKey {
        concat: c.concat_block.name(),
        source: source_name(c.confounder_source),
        q1: c.q1_control,
    }
}

fn plan(base: &RunConfig, axis: AblationAxis) -> Vec<Planned> {
    let t = base.rounds;
    let mut out = Vec::new();
    let all = axis == AblationAxis::All;
    if all || axis == AblationAxis::Q1 {
        out.push(Planned {
            group: "Q1",
            setting: "M_t <- Seg. Mask".into(),
            cfg: RunConfig {
                q1_control: true,
                ..base.clone()
            },
            round: t,
        });
    }
    if all || axis == AblationAxis::Rounds {
        let cfg = RunConfig {
            rounds: 4,
            ..base.clone()
        };
        for r in 1..=4 {
            out.push(Planned {
                group: "Q2",
                setting: format!("Round = {r}"),
                cfg: cfg.clone(),
                round: r,
            });
        }
    }
    if all || axis == AblationAxis::Block {
        for site in [
            ConcatSite::Block2,
            ConcatSite::Block3,
            ConcatSite::Block4,
            ConcatSite::Block5,
            ConcatSite::Dense,
        ] {
            let mut name = site.name().to_string();
            name[..1].make_ascii_uppercase();
            out.push(Planned {
                group: "Q3",
                setting: name,
                cfg: RunConfig {
                    concat_block: site,
                    ..base.clone()
                },
                round: t,
            });
        }
    }
    if all || axis == AblationAxis::ConfounderSource {
        for (src, label) in [
            (ConfounderSource::PseudoMask, "C_Pseudo-Mask"),
            (ConfounderSource::SegMask, "C_Seg. Mask"),
        ] {
            out.push(Planned {
                group: "Q4",
                setting: label.into(),
                cfg: RunConfig {
                    confounder_source: src,
                    ..base.clone()
                },
                round: t,
            });
        }
    }
    out
}

fn row(group: &str, setting: &str, arm: &str, m: &RoundMetrics) -> AblationRow {
    AblationRow {
        group: group.into(),
        setting: setting.into(),
        arm: arm.into(),
        round: m.round,
        cam_miou: m.cam_miou,
        pseudo_miou: m.pseudo_miou,
        seg_miou: m.seg_miou,
    }
}

/// Runs the arms of `axis` on a shared seed under `out_dir/arms/` and writes
/// `ablation.json` and `ablation.txt`. Arms already finished in `out_dir`
/// are reused. An arm whose rounds cover another's reuses its history.
pub fn run_ablation(base: &RunConfig, axis: AblationAxis, out_dir: &Path) -> Result<AblationTable> {
    base.validate()?;
    let data = Dataset::load(&base.dataset)?;
    let planned = plan(base, axis);
    // one run per arm, with enough rounds for every row that reads it
    let mut arms: BTreeMap<ArmKey, RunConfig> = BTreeMap::new();
    for p in &planned {
        let e = arms.entry(key_of(&p.cfg)).or_insert_with(|| p.cfg.clone());
        e.rounds = e.rounds.max(p.cfg.rounds);
    }
    let mut reports: BTreeMap<ArmKey, Report> = BTreeMap::new();
    for (key, cfg) in &arms {
        let dir = out_dir.join("arms").join(arm_name(key));
        log::info!("ablation arm {}", arm_name(key));
        let resume = dir.join(RUN_CONFIG_FILE).exists();
        reports.insert(*key, run_conta_with(cfg, &data, &dir, resume)?);
    }
    let first = reports.values().next().expect("at least one arm");
    let base_m = &first.history[0];
    let shared_baseline = reports.values().all(|r| &r.history[0] == base_m);
    let mut rows = vec![row("baseline", "Baseline", "", base_m)];
    rows[0].arm = format!("arms/{}", arm_name(reports.keys().next().unwrap()));
    for p in &planned {
        let key = key_of(&p.cfg);
        let rep = &reports[&key];
        rows.push(row(
            p.group,
            &p.setting,
            &format!("arms/{}", arm_name(&key)),
            &rep.history[p.round],
        ));
    }
    let table = AblationTable {
        axis,
        rows,
        shared_baseline,
    };
    write_file(
        &out_dir.join("ablation.json"),
        (serde_json::to_string_pretty(&table)? + "\n").as_bytes(),
    )?;
    write_file(&out_dir.join("ablation.txt"), table.to_text().as_bytes())?;
    Ok(table)
}

impl AblationTable {
    /// Fixed-width grid: setting, CAM, Pseudo-Mask, Seg. Mask.
    pub fn to_text(&self) -> String {
        let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.1}"));
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<6} {:<18} | {:>6} | {:>11} | {:>9}",
            "", "Setting", "CAM", "Pseudo-Mask", "Seg. Mask"
        );
        let _ = writeln!(s, "{}", "-".repeat(61));
        let mut last = "";
        for r in &self.rows {
            let g = if r.group == last || r.group == "baseline" {
                String::new()
            } else {
                format!("({})", r.group)
            };
            if r.group != last && !last.is_empty() {
                let _ = writeln!(s, "{}", "-".repeat(61));
            }
            last = &r.group;
            let _ = writeln!(
                s,
                "{:<6} {:<18} | {:>6} | {:>11} | {:>9}",
                g,
                r.setting,
                cell(r.cam_miou),
                cell(r.pseudo_miou),
                cell(r.seg_miou)
            );
        }
        s
    }
}
