//! Command-line front end.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::pipeline::{rescore_run, run_ablation, run_conta, AblationAxis, RunConfig, REPORT_FILE};
use crate::scenegen::{generate_dataset, SceneConfig, MANIFEST_FILE};

#[derive(Debug, Parser)]
#[command(
    name = "conta",
    version,
    about = "Context-adjusted weakly supervised segmentation on synthetic confounded scenes"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// JSON config file (scene config for `gen`, run config otherwise).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output location.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset.
    Gen,
    /// Run the round loop and write report.json.
    Run {
        /// Continue after the last completed round in the output directory.
        #[arg(long)]
        resume: bool,
        /// Dataset directory (overrides the config).
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Run one ablation axis: rounds, block, confounder_source, q1 or all.
    Ablate {
        #[arg(long)]
        axis: String,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Check the adjustment identity and the single-pass approximation.
    Verify {
        /// Extra model files to check.
        #[arg(long = "scm")]
        scm: Vec<PathBuf>,
        /// Number of seeded random models.
        #[arg(long, default_value_t = 100)]
        count: usize,
    },
    /// Write overlays for one training image and the mIoU plot.
    Render {
        run_dir: PathBuf,
        image_id: String,
        #[arg(long)]
        round: Option<usize>,
    },
    /// Re-score the masks persisted in a run directory.
    Eval { run_dir: PathBuf },
}

fn load_run_config(g: &Global, dataset: Option<PathBuf>) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::from_json_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(d) = dataset {
        cfg.dataset = d;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

pub fn execute(cli: Cli) -> Result<()> {
    let g = &cli.global;
    match cli.command {
        Command::Gen => {
            let mut cfg = match &g.config {
                Some(p) => SceneConfig::from_json_file(p)?,
                None => SceneConfig::default(),
            };
            if let Some(s) = g.seed {
                cfg.seed = s;
            }
            let out = g.out.clone().unwrap_or_else(|| PathBuf::from("data/synthetic"));
            generate_dataset(&cfg, &out)?;
            println!("{}", out.join(MANIFEST_FILE).display());
        }
        Command::Run { resume, dataset } => {
            let cfg = load_run_config(g, dataset)?;
            let out = g.out.clone().unwrap_or_else(|| PathBuf::from("runs/default"));
            let report = run_conta(&cfg, &out, resume)?;
            for m in &report.history {
                log::info!(
                    "round {}: cam {:?} pseudo {:?} seg {:?}",
                    m.round,
                    m.cam_miou,
                    m.pseudo_miou,
                    m.seg_miou
                );
            }
            println!("{}", out.join(REPORT_FILE).display());
        }
        Command::Ablate { axis, dataset } => {
            let axis: AblationAxis = axis.parse()?;
            let cfg = load_run_config(g, dataset)?;
            let out = g.out.clone().unwrap_or_else(|| PathBuf::from("runs/ablation"));
            let table = run_ablation(&cfg, axis, &out)?;
            print!("{}", table.to_text());
        }
        Command::Verify { scm, count } => {
            let report = crate::verify::verify_suite(g.seed.unwrap_or(0), count, &scm);
            match &g.out {
                Some(p) => write_json(p, &report)?,
                None => print_json(&report)?,
            }
            if !report.pass {
                let names: Vec<&str> = report.failures().iter().map(|c| c.name.as_str()).collect();
                let what = if names.is_empty() {
                    "sigmoid-approximation suite".to_string()
                } else {
                    names.join(", ")
                };
                return Err(Error::Verify(what));
            }
        }
        Command::Render {
            run_dir,
            image_id,
            round,
        } => {
            let out = g.out.clone().unwrap_or_else(|| run_dir.join("render"));
            let (comp, plot) = crate::render::render_run(&run_dir, &image_id, round, &out)?;
            println!("{}", comp.display());
            println!("{}", plot.display());
        }
        Command::Eval { run_dir } => {
            let scores = rescore_run(&run_dir)?;
            match &g.out {
                Some(p) => write_json(p, &scores)?,
                None => print_json(&scores)?,
            }
        }
    }
    Ok(())
}

fn write_json<T: serde::Serialize>(path: &Path, v: &T) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, serde_json::to_string_pretty(v)? + "\n").map_err(|e| Error::io(path, e))
}

/// Exit status for an error: 2 for bad input, 3 for runtime failures.
pub fn exit_code(e: &Error) -> i32 {
    if e.is_config_error() {
        2
    } else {
        3
    }
}

/// Parses arguments, runs the command and returns the process exit status.
/// Errors are reported as one `CODE: message` line on stderr.
pub fn main_entry() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg
                .lines()
                .next()
                .unwrap_or("invalid arguments")
                .trim_start_matches("error: ");
            eprintln!("E_USAGE: {first}");
            return 2;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}: {}", e.code(), e.to_string().replace('\n', " "));
            exit_code(&e)
        }
    }
}
