//! Command-line entry points: `synth` writes a benchmark dataset, `track`
//! runs the tracker over a dataset directory, `eval` scores a pose log
//! against ground truth.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 tracking degraded
//! (at least one coasted frame). `BT_THREADS` caps worker threads
//! (0 = auto).

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use objtrack_core::dataset::RunConfig;
use objtrack_core::harness::{self, HarnessError};
use objtrack_core::se3::Vec3;
use std::path::PathBuf;
use std::process::ExitCode;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_DEGRADED: u8 = 3;

#[derive(Parser)]
#[command(name = "objtrack", about = "Model-free 6-DoF object pose tracking for RGB-D sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic benchmark dataset (orbit, manipulate, dropped, perturbed).
    Synth {
        /// Scene name.
        scene: String,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        /// Override the scene's fixed seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Track an object through a dataset directory.
    Track {
        /// Dataset directory (see README for the layout).
        dataset: PathBuf,
        /// Output directory for poses.txt, energy.csv and timing.csv.
        #[arg(long)]
        out: PathBuf,
        /// Run configuration file (flat key = value).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a pose log against per-frame ground-truth files.
    Eval {
        /// poses.txt produced by `track`.
        poses: PathBuf,
        /// Directory holding gt_pose_%06d.txt files.
        gt_dir: PathBuf,
        /// Model point file (x y z per line).
        #[arg(long)]
        model: PathBuf,
        /// Object bounding box dimensions `x,y,z` in meters; defaults to the
        /// model's axis-aligned extent.
        #[arg(long)]
        bbox: Option<String>,
        /// Output directory for metrics.txt, curves.csv and frames.csv.
        #[arg(long)]
        out: PathBuf,
    },
}

fn init_threads() -> Result<(), String> {
    let Ok(raw) = std::env::var("BT_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .map_err(|_| format!("BT_THREADS must be a number, got `{raw}`"))?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| e.to_string())?;
    }
    Ok(())
}

fn parse_bbox(raw: &str) -> Result<Vec3, String> {
    let parts: Vec<&str> = raw.split(',').collect();
    if parts.len() != 3 {
        return Err(format!("--bbox expects `x,y,z`, got `{raw}`"));
    }
    let mut dims = [0.0f64; 3];
    for (i, p) in parts.iter().enumerate() {
        dims[i] = p
            .trim()
            .parse()
            .map_err(|_| format!("bad bbox component `{p}`"))?;
    }
    Ok(Vec3::new(dims[0], dims[1], dims[2]))
}

fn data_exit(err: &HarnessError) -> u8 {
    match err {
        HarnessError::UnknownScene(_) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

fn run() -> u8 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return code;
        }
    };
    if let Err(message) = init_threads() {
        eprintln!("error: {message}");
        return EXIT_USAGE;
    }

    match cli.command {
        Command::Synth { scene, out, seed } => match harness::run_synth(&scene, &out, seed) {
            Ok(frames) => {
                println!("wrote {frames} frames to {}", out.display());
                0
            }
            Err(e) => {
                eprintln!("error: {e}");
                data_exit(&e)
            }
        },
        Command::Track {
            dataset,
            out,
            config,
            seed,
        } => {
            let mut run_config = match config {
                Some(path) => match RunConfig::parse_file(&path) {
                    Ok(c) => c,
                    Err(e) => {
                        eprintln!("error: {e}");
                        return EXIT_DATA;
                    }
                },
                None => RunConfig::default(),
            };
            if let Some(seed) = seed {
                run_config.seed = seed;
            }
            match harness::run_track(&dataset, &run_config, &out) {
                Ok(summary) => {
                    println!(
                        "tracked {} frames ({} coasted); results in {}",
                        summary.frames,
                        summary.coasted,
                        out.display()
                    );
                    if summary.coasted > 0 {
                        EXIT_DEGRADED
                    } else {
                        0
                    }
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    data_exit(&e)
                }
            }
        }
        Command::Eval {
            poses,
            gt_dir,
            model,
            bbox,
            out,
        } => {
            let bbox = match bbox.as_deref().map(parse_bbox).transpose() {
                Ok(b) => b,
                Err(message) => {
                    eprintln!("error: {message}");
                    return EXIT_USAGE;
                }
            };
            match harness::run_eval(&poses, &gt_dir, &model, bbox, &out) {
                Ok(report) => {
                    println!(
                        "frames: {}  5deg5cm: {:.2}%  IoU25: {:.2}%  ADD-AUC: {:.4}  ADD-S-AUC: {:.4}",
                        report.per_frame.len(),
                        report.five_deg_five_cm_pct,
                        report.iou25_pct,
                        report.add_auc,
                        report.adds_auc
                    );
                    0
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    data_exit(&e)
                }
            }
        }
    }
}

fn main() -> ExitCode {
    ExitCode::from(run())
}
