//! High-level runs behind the CLI: export synthetic datasets, track a
//! dataset directory, evaluate a pose log against ground truth.

use crate::dataset::{
    self, Dataset, DatasetError, KeypointProviderKind, MaskProviderKind, RunConfig,
};
use crate::detect::HarrisKeypointProvider;
use crate::features::{FileKeypointProvider, KeypointProvider};
use crate::frame::Mask;
use crate::metrics::{self, MetricReport, ModelPoints};
use crate::se3::Vec3;
use crate::segmentation::{
    MaskProvider, PlaneRemovalParams, PlaneRemovalProvider, PrecomputedMaskProvider,
    SegmentationError,
};
use crate::synth::{scene_by_name, RenderError, SyntheticScene};
use crate::tracker::{FrameOutput, FrameStatus, Tracker, TrackerConfig, TrackerError};
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;
use thiserror::Error;

/// Model points written by `run_synth`.
pub const SYNTH_MODEL_POINTS: usize = 500;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Tracker(#[from] TrackerError),
    #[error(transparent)]
    Segmentation(#[from] SegmentationError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error("unknown scene `{0}` (expected orbit, manipulate, dropped or perturbed)")]
    UnknownScene(String),
    #[error("no ground-truth pose for frame ids {0:?}")]
    MissingGroundTruth(Vec<u64>),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

fn io_err(path: &Path, e: impl ToString) -> HarnessError {
    HarnessError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Write a scene to the dataset layout, including ground-truth poses, the
/// sampled model points and the object bounding box dimensions.
pub fn write_scene_dataset(scene: &SyntheticScene, out_dir: &Path) -> Result<usize, HarnessError> {
    std::fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    dataset::write_intrinsics(&out_dir.join("intrinsics.txt"), &scene.intrinsics)?;
    for t in 0..scene.len() {
        let rendered = scene.render(t)?;
        let id = t as u64;
        dataset::write_color_png(
            &out_dir.join(dataset::color_name(id)),
            &rendered.color,
            scene.intrinsics.width,
            scene.intrinsics.height,
        )?;
        dataset::write_depth_png(&out_dir.join(dataset::depth_name(id)), &rendered.depth)?;
        dataset::write_mask_png(&out_dir.join(dataset::mask_name(id)), &rendered.mask)?;
        dataset::write_pose(&out_dir.join(dataset::gt_pose_name(id)), &rendered.gt_pose)?;
    }
    dataset::write_pose(&out_dir.join("init_pose.txt"), &scene.initial_pose())?;
    dataset::write_model_points(
        &out_dir.join("model.txt"),
        &scene.model_points(SYNTH_MODEL_POINTS),
    )?;
    let dims = scene.surface.bbox_dims();
    std::fs::write(
        out_dir.join("bbox.txt"),
        format!("{} {} {}\n", dims.x, dims.y, dims.z),
    )
    .map_err(|e| io_err(out_dir, e))?;
    Ok(scene.len())
}

/// `synth` command: write one of the standard benchmark scenes to disk.
pub fn run_synth(
    scene_name: &str,
    out_dir: &Path,
    seed: Option<u64>,
) -> Result<usize, HarnessError> {
    let mut scene =
        scene_by_name(scene_name).ok_or_else(|| HarnessError::UnknownScene(scene_name.into()))?;
    if let Some(seed) = seed {
        scene.seed = seed;
    }
    write_scene_dataset(&scene, out_dir)
}

#[derive(Debug, Clone, Copy)]
pub struct TrackSummary {
    pub frames: usize,
    pub coasted: usize,
}

fn mask_or_coast(
    provider: &dyn MaskProvider,
    frame_id: u64,
    depth: &crate::frame::DepthMap,
    intrinsics: &crate::se3::Intrinsics,
) -> Result<Mask, HarnessError> {
    match provider.mask_for(frame_id, depth, intrinsics) {
        Ok(mask) => Ok(mask),
        // The segmenter finding nothing is a per-frame condition the
        // tracker coasts through, not a dataset failure.
        Err(SegmentationError::EmptyMask { .. }) | Err(SegmentationError::TooFewPoints { .. }) => {
            Ok(Mask::zeros(depth.width, depth.height))
        }
        Err(e) => Err(e.into()),
    }
}

/// `track` command: run the tracker over a dataset directory and write
/// `poses.txt`, `energy.csv` and `timing.csv` into `out_dir`.
pub fn run_track(
    dataset_dir: &Path,
    config: &RunConfig,
    out_dir: &Path,
) -> Result<TrackSummary, HarnessError> {
    let data = Dataset::open(dataset_dir)?;
    std::fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;

    let mask_provider: Box<dyn MaskProvider> = match config.mask_provider {
        MaskProviderKind::Precomputed => Box::new(PrecomputedMaskProvider {
            dir: dataset_dir.to_path_buf(),
        }),
        MaskProviderKind::PlaneRemoval => Box::new(PlaneRemovalProvider {
            params: PlaneRemovalParams {
                seed: config.seed,
                ..PlaneRemovalParams::default()
            },
        }),
    };
    let keypoint_provider: Arc<dyn KeypointProvider> = match config.keypoint_provider {
        KeypointProviderKind::Harris => Arc::new(HarrisKeypointProvider),
        KeypointProviderKind::Files => Arc::new(FileKeypointProvider {
            dir: dataset_dir.to_path_buf(),
        }),
    };

    let mut tracker =
        Tracker::with_provider(config.tracker_config(), data.intrinsics, keypoint_provider)?;
    let init_pose = data.init_pose()?;

    let mut energy_csv = String::from("frame,iter,E_f,E_g,E_total\n");
    let mut timing_csv = String::from(
        "frame,mask_ms,ingest_ms,detect_ms,register_ms,select_ms,edges_ms,optimize_ms,total_ms\n",
    );
    let mut coasted = 0usize;
    for t in 0..data.frame_count {
        let id = t as u64;
        let color = data.load_color(id)?;
        let depth = data.load_depth(id)?;
        let mask_start = Instant::now();
        let mask = mask_or_coast(mask_provider.as_ref(), id, &depth, &data.intrinsics)?;
        let mask_ms = mask_start.elapsed().as_secs_f64() * 1e3;
        let output = if t == 0 {
            tracker.initialize(id, color, depth, mask, init_pose)?
        } else {
            tracker.process_frame(id, color, depth, mask)?
        };
        if output.record.status == FrameStatus::Coasted {
            coasted += 1;
        }
        for it in &output.energy_log {
            let _ = writeln!(
                energy_csv,
                "{id},{},{},{},{}",
                it.iter, it.energy_feature, it.energy_geometric, it.energy_total
            );
        }
        let tm = &output.timings;
        let _ = writeln!(
            timing_csv,
            "{id},{mask_ms:.3},{:.3},{:.3},{:.3},{:.3},{:.3},{:.3},{:.3}",
            tm.ingest_ms,
            tm.detect_ms,
            tm.register_ms,
            tm.select_ms,
            tm.edges_ms,
            tm.optimize_ms,
            tm.total_ms + mask_ms
        );
    }

    let log: Vec<(u64, crate::se3::Pose, FrameStatus)> = tracker
        .log()
        .iter()
        .map(|r| (r.frame_id, r.pose, r.status))
        .collect();
    dataset::write_pose_log(&out_dir.join("poses.txt"), &log)?;
    std::fs::write(out_dir.join("energy.csv"), energy_csv)
        .map_err(|e| io_err(&out_dir.join("energy.csv"), e))?;
    std::fs::write(out_dir.join("timing.csv"), timing_csv)
        .map_err(|e| io_err(&out_dir.join("timing.csv"), e))?;
    Ok(TrackSummary {
        frames: data.frame_count,
        coasted,
    })
}

/// Track a scene fully in memory with an explicit keypoint provider.
/// Used by benchmarks and tests that drive the tracker without a dataset
/// on disk.
pub fn track_scene(
    scene: &SyntheticScene,
    config: TrackerConfig,
    provider: Arc<dyn KeypointProvider>,
) -> Result<Vec<FrameOutput>, HarnessError> {
    let mut tracker = Tracker::with_provider(config, scene.intrinsics, provider)?;
    let mut outputs = Vec::with_capacity(scene.len());
    for t in 0..scene.len() {
        let rendered = scene.render(t)?;
        let output = if t == 0 {
            tracker.initialize(
                0,
                rendered.color,
                rendered.depth,
                rendered.mask,
                scene.initial_pose(),
            )?
        } else {
            tracker.process_frame(t as u64, rendered.color, rendered.depth, rendered.mask)?
        };
        outputs.push(output);
    }
    Ok(outputs)
}

/// `eval` command: compare a pose log against per-frame ground truth files
/// and write `metrics.txt`, `curves.csv` and `frames.csv`.
pub fn run_eval(
    poses_path: &Path,
    gt_dir: &Path,
    model_path: &Path,
    bbox: Option<Vec3>,
    out_dir: &Path,
) -> Result<MetricReport, HarnessError> {
    let log = dataset::read_pose_log(poses_path)?;
    if log.is_empty() {
        return Err(HarnessError::Io {
            path: poses_path.display().to_string(),
            message: "pose log is empty".to_string(),
        });
    }
    let model = ModelPoints::new(dataset::read_model_points(model_path)?);
    let bbox = bbox.unwrap_or_else(|| model.bbox_dims());

    let mut missing = Vec::new();
    let mut frames = Vec::new();
    for (id, pose, _) in &log {
        let gt_path = gt_dir.join(dataset::gt_pose_name(*id));
        if !gt_path.exists() {
            missing.push(*id);
            continue;
        }
        frames.push((*id, *pose, dataset::read_pose(&gt_path)?));
    }
    if !missing.is_empty() {
        return Err(HarnessError::MissingGroundTruth(missing));
    }

    let report = metrics::aggregate(&frames, &model, &bbox, metrics::DEFAULT_AUC_MAX);
    std::fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;

    let mut text = String::new();
    let _ = writeln!(text, "frames = {}", report.per_frame.len());
    let _ = writeln!(text, "five_deg_five_cm_pct = {}", report.five_deg_five_cm_pct);
    let _ = writeln!(text, "iou25_pct = {}", report.iou25_pct);
    if let Some(r) = report.mean_rotation_error_deg {
        let _ = writeln!(text, "mean_rotation_error_deg = {r}");
    }
    if let Some(t) = report.mean_translation_error_cm {
        let _ = writeln!(text, "mean_translation_error_cm = {t}");
    }
    let _ = writeln!(text, "add_auc = {}", report.add_auc);
    let _ = writeln!(text, "adds_auc = {}", report.adds_auc);
    let _ = writeln!(text, "auc_max_threshold = {}", report.auc_max_threshold);
    std::fs::write(out_dir.join("metrics.txt"), text)
        .map_err(|e| io_err(&out_dir.join("metrics.txt"), e))?;

    let adds: Vec<f64> = report.per_frame.iter().map(|f| f.add).collect();
    let adds_s: Vec<f64> = report.per_frame.iter().map(|f| f.adds).collect();
    let add_curve = metrics::accuracy_curve(&adds, report.auc_max_threshold, 100);
    let adds_curve = metrics::accuracy_curve(&adds_s, report.auc_max_threshold, 100);
    let mut curves = String::from("threshold,add_accuracy,adds_accuracy\n");
    for (a, s) in add_curve.iter().zip(adds_curve.iter()) {
        let _ = writeln!(curves, "{},{},{}", a.0, a.1, s.1);
    }
    std::fs::write(out_dir.join("curves.csv"), curves)
        .map_err(|e| io_err(&out_dir.join("curves.csv"), e))?;

    let mut per_frame = String::from(
        "frame,add_m,adds_m,rotation_error_deg,translation_error_cm,five_deg_five_cm,iou25\n",
    );
    for f in &report.per_frame {
        let _ = writeln!(
            per_frame,
            "{},{},{},{},{},{},{}",
            f.frame_id,
            f.add,
            f.adds,
            f.rotation_error_deg,
            f.translation_error_cm,
            f.five_deg_five_cm,
            f.iou25
        );
    }
    std::fs::write(out_dir.join("frames.csv"), per_frame)
        .map_err(|e| io_err(&out_dir.join("frames.csv"), e))?;
    Ok(report)
}
