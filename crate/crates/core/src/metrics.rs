//! Pose accuracy metrics: ADD, ADD-S, 5°5cm, 3D bounding-box IoU, and their
//! sequence aggregates with accuracy-threshold AUC.

use crate::se3::{rotation_geodesic, Pose, Vec3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Fixed seed for the Monte Carlo IoU; results are deterministic and within
/// about ±0.01 of the analytic volume ratio.
const IOU_SEED: u64 = 0x10C0;
const IOU_SAMPLES: usize = 100_000;

/// Default upper threshold for the ADD / ADD-S accuracy AUC, meters.
pub const DEFAULT_AUC_MAX: f64 = 0.1;

/// Object model as a sampled point set in the object frame.
#[derive(Debug, Clone)]
pub struct ModelPoints {
    pub points: Vec<Vec3>,
}

impl ModelPoints {
    pub fn new(points: Vec<Vec3>) -> Self {
        assert!(!points.is_empty());
        Self { points }
    }

    /// Axis-aligned bounding box dimensions of the model points.
    pub fn bbox_dims(&self) -> Vec3 {
        let mut lo = Vec3::from_element(f64::INFINITY);
        let mut hi = Vec3::from_element(f64::NEG_INFINITY);
        for p in &self.points {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        hi - lo
    }
}

/// Mean displacement of model points under the two poses (exact matching).
pub fn add_error(est: &Pose, gt: &Pose, model: &ModelPoints) -> f64 {
    let sum: f64 = model
        .points
        .iter()
        .map(|x| (gt.transform(x) - est.transform(x)).norm())
        .sum();
    sum / model.points.len() as f64
}

/// Mean closest-point displacement (symmetric objects). Brute force over
/// all model point pairs.
pub fn adds_error(est: &Pose, gt: &Pose, model: &ModelPoints) -> f64 {
    let est_points: Vec<Vec3> = model.points.iter().map(|x| est.transform(x)).collect();
    let sum: f64 = model
        .points
        .iter()
        .map(|x| {
            let g = gt.transform(x);
            est_points
                .iter()
                .map(|e| (g - e).norm())
                .fold(f64::INFINITY, f64::min)
        })
        .sum();
    sum / model.points.len() as f64
}

pub fn rotation_error_deg(est: &Pose, gt: &Pose) -> f64 {
    rotation_geodesic(&est.rotation, &gt.rotation).to_degrees()
}

pub fn translation_error_m(est: &Pose, gt: &Pose) -> f64 {
    (est.translation - gt.translation).norm()
}

/// Orientation error under 5 degrees and translation error under 5 cm.
pub fn five_deg_five_cm(est: &Pose, gt: &Pose) -> bool {
    rotation_error_deg(est, gt) < 5.0 && translation_error_m(est, gt) < 0.05
}

fn inside_box(pose_inv: &Pose, half: &Vec3, p: &Vec3) -> bool {
    let q = pose_inv.transform(p);
    q.x.abs() <= half.x && q.y.abs() <= half.y && q.z.abs() <= half.z
}

/// Monte Carlo IoU of two oriented boxes (the object-frame axis-aligned box
/// of dimensions `bbox_dims`, posed by each pose). Seeded and deterministic.
pub fn box_iou(est: &Pose, gt: &Pose, bbox_dims: &Vec3) -> f64 {
    let half = 0.5 * bbox_dims;
    // Sampling region: AABB of both boxes' corners.
    let mut lo = Vec3::from_element(f64::INFINITY);
    let mut hi = Vec3::from_element(f64::NEG_INFINITY);
    for pose in [est, gt] {
        for ix in [-1.0, 1.0] {
            for iy in [-1.0, 1.0] {
                for iz in [-1.0, 1.0] {
                    let corner =
                        pose.transform(&Vec3::new(ix * half.x, iy * half.y, iz * half.z));
                    lo = lo.inf(&corner);
                    hi = hi.sup(&corner);
                }
            }
        }
    }
    let extent = hi - lo;
    let est_inv = est.inverse();
    let gt_inv = gt.inverse();
    let mut rng = ChaCha8Rng::seed_from_u64(IOU_SEED);
    let mut either = 0usize;
    let mut both = 0usize;
    for _ in 0..IOU_SAMPLES {
        let p = Vec3::new(
            lo.x + rng.random::<f64>() * extent.x,
            lo.y + rng.random::<f64>() * extent.y,
            lo.z + rng.random::<f64>() * extent.z,
        );
        let in_est = inside_box(&est_inv, &half, &p);
        let in_gt = inside_box(&gt_inv, &half, &p);
        if in_est || in_gt {
            either += 1;
        }
        if in_est && in_gt {
            both += 1;
        }
    }
    if either == 0 {
        return 0.0;
    }
    both as f64 / either as f64
}

/// Bounding-box overlap above 25% of the union.
pub fn iou25(est: &Pose, gt: &Pose, bbox_dims: &Vec3) -> bool {
    box_iou(est, gt, bbox_dims) > 0.25
}

/// Accuracy-threshold AUC: the normalized integral over thresholds in
/// `[0, max_threshold]` of the fraction of frames whose error is below the
/// threshold.
pub fn accuracy_auc(errors: &[f64], max_threshold: f64) -> f64 {
    if errors.is_empty() {
        return 0.0;
    }
    let sum: f64 = errors
        .iter()
        .map(|&e| (max_threshold - e.min(max_threshold)).max(0.0))
        .sum();
    sum / (errors.len() as f64 * max_threshold)
}

/// Fraction of errors below each of `steps` evenly spaced thresholds,
/// for plotting the accuracy curve behind the AUC.
pub fn accuracy_curve(errors: &[f64], max_threshold: f64, steps: usize) -> Vec<(f64, f64)> {
    (0..=steps)
        .map(|i| {
            let threshold = max_threshold * i as f64 / steps as f64;
            let frac = if errors.is_empty() {
                0.0
            } else {
                errors.iter().filter(|&&e| e < threshold).count() as f64 / errors.len() as f64
            };
            (threshold, frac)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct FrameMetrics {
    pub frame_id: u64,
    pub add: f64,
    pub adds: f64,
    pub rotation_error_deg: f64,
    pub translation_error_cm: f64,
    pub five_deg_five_cm: bool,
    pub iou25: bool,
}

#[derive(Debug, Clone)]
pub struct MetricReport {
    pub per_frame: Vec<FrameMetrics>,
    pub five_deg_five_cm_pct: f64,
    pub iou25_pct: f64,
    /// Mean orientation error in degrees over frames passing IoU25; absent
    /// when no frame qualifies.
    pub mean_rotation_error_deg: Option<f64>,
    /// Mean translation error in centimeters over frames passing IoU25.
    pub mean_translation_error_cm: Option<f64>,
    pub add_auc: f64,
    pub adds_auc: f64,
    pub auc_max_threshold: f64,
}

/// Per-frame metrics and sequence aggregates for (estimate, ground truth)
/// pose pairs. Frames failing IoU25 are excluded from the R/T error means.
pub fn aggregate(
    frames: &[(u64, Pose, Pose)],
    model: &ModelPoints,
    bbox_dims: &Vec3,
    auc_max: f64,
) -> MetricReport {
    assert!(!frames.is_empty());
    let per_frame: Vec<FrameMetrics> = frames
        .iter()
        .map(|(id, est, gt)| FrameMetrics {
            frame_id: *id,
            add: add_error(est, gt, model),
            adds: adds_error(est, gt, model),
            rotation_error_deg: rotation_error_deg(est, gt),
            translation_error_cm: translation_error_m(est, gt) * 100.0,
            five_deg_five_cm: five_deg_five_cm(est, gt),
            iou25: iou25(est, gt, bbox_dims),
        })
        .collect();

    let n = per_frame.len() as f64;
    let five_pct = per_frame.iter().filter(|f| f.five_deg_five_cm).count() as f64 / n * 100.0;
    let iou_pct = per_frame.iter().filter(|f| f.iou25).count() as f64 / n * 100.0;
    let qualified: Vec<&FrameMetrics> = per_frame.iter().filter(|f| f.iou25).collect();
    let (mean_rot, mean_trans) = if qualified.is_empty() {
        (None, None)
    } else {
        let m = qualified.len() as f64;
        (
            Some(qualified.iter().map(|f| f.rotation_error_deg).sum::<f64>() / m),
            Some(qualified.iter().map(|f| f.translation_error_cm).sum::<f64>() / m),
        )
    };
    let adds: Vec<f64> = per_frame.iter().map(|f| f.add).collect();
    let adds_s: Vec<f64> = per_frame.iter().map(|f| f.adds).collect();

    MetricReport {
        five_deg_five_cm_pct: five_pct,
        iou25_pct: iou_pct,
        mean_rotation_error_deg: mean_rot,
        mean_translation_error_cm: mean_trans,
        add_auc: accuracy_auc(&adds, auc_max),
        adds_auc: accuracy_auc(&adds_s, auc_max),
        auc_max_threshold: auc_max,
        per_frame,
    }
}
