//! On-disk dataset layout and run configuration.
//!
//! A dataset directory holds `intrinsics.txt` (fx fy cx cy width height),
//! `color_%06d.png` (8-bit RGB), `depth_%06d.png` (16-bit grayscale
//! millimeters, 0 = invalid), `mask_%06d.png` (8-bit, nonzero = object),
//! `init_pose.txt` (16 row-major values), and optionally per-frame
//! `gt_pose_%06d.txt` and `keypoints_%06d.txt`. Frame ids are contiguous
//! from 0. Run configuration is a flat `key = value` text file; unknown keys
//! are rejected with their line number.

use crate::frame::{DepthMap, Mask};
use crate::se3::{Intrinsics, Pose, Vec3};
use crate::solver::SolverConfig;
use crate::tracker::{FrameStatus, TrackerConfig};
use image::{ImageBuffer, Luma, Rgb};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {message}")]
    File { path: String, message: String },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("dataset {0} has no frames (missing color_000000.png)")]
    Empty(String),
}

fn file_err(path: &Path, message: impl ToString) -> DatasetError {
    DatasetError::File {
        path: path.display().to_string(),
        message: message.to_string(),
    }
}

pub fn color_name(id: u64) -> String {
    format!("color_{id:06}.png")
}

pub fn depth_name(id: u64) -> String {
    format!("depth_{id:06}.png")
}

pub fn mask_name(id: u64) -> String {
    format!("mask_{id:06}.png")
}

pub fn gt_pose_name(id: u64) -> String {
    format!("gt_pose_{id:06}.txt")
}

// -- primitive file formats --------------------------------------------------

pub fn write_color_png(path: &Path, color: &[[u8; 3]], w: usize, h: usize) -> Result<(), DatasetError> {
    let mut raw = Vec::with_capacity(w * h * 3);
    for px in color {
        raw.extend_from_slice(px);
    }
    let img: ImageBuffer<Rgb<u8>, Vec<u8>> =
        ImageBuffer::from_raw(w as u32, h as u32, raw).expect("sized buffer");
    img.save(path).map_err(|e| file_err(path, e))
}

pub fn read_color_png(path: &Path) -> Result<(Vec<[u8; 3]>, usize, usize), DatasetError> {
    let img = image::open(path).map_err(|e| file_err(path, e))?.into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let color = img.pixels().map(|p| p.0).collect();
    Ok((color, w, h))
}

/// Depth is stored as 16-bit millimeters; 0 marks invalid pixels.
pub fn write_depth_png(path: &Path, depth: &DepthMap) -> Result<(), DatasetError> {
    let raw: Vec<u16> = depth
        .values
        .iter()
        .map(|&m| {
            if m <= 0.0 {
                0u16
            } else {
                (m * 1000.0).round().clamp(0.0, 65535.0) as u16
            }
        })
        .collect();
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(depth.width as u32, depth.height as u32, raw).expect("sized buffer");
    img.save(path).map_err(|e| file_err(path, e))
}

pub fn read_depth_png(path: &Path) -> Result<DepthMap, DatasetError> {
    let img = image::open(path).map_err(|e| file_err(path, e))?.into_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let values = img.pixels().map(|p| p.0[0] as f64 / 1000.0).collect();
    Ok(DepthMap::new(w, h, values))
}

pub fn write_mask_png(path: &Path, mask: &Mask) -> Result<(), DatasetError> {
    let raw: Vec<u8> = mask.values.iter().map(|&v| if v != 0 { 255 } else { 0 }).collect();
    let img: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(mask.width as u32, mask.height as u32, raw).expect("sized buffer");
    img.save(path).map_err(|e| file_err(path, e))
}

pub fn write_intrinsics(path: &Path, k: &Intrinsics) -> Result<(), DatasetError> {
    let text = format!("{} {} {} {} {} {}\n", k.fx, k.fy, k.cx, k.cy, k.width, k.height);
    std::fs::write(path, text).map_err(|e| file_err(path, e))
}

pub fn read_intrinsics(path: &Path) -> Result<Intrinsics, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|e| file_err(path, e))?;
    let fields: Vec<&str> = text.split_whitespace().collect();
    if fields.len() != 6 {
        return Err(file_err(path, format!("expected 6 values, got {}", fields.len())));
    }
    let parse = |s: &str| -> Result<f64, DatasetError> {
        s.parse().map_err(|_| file_err(path, format!("bad number `{s}`")))
    };
    Ok(Intrinsics::new(
        parse(fields[0])?,
        parse(fields[1])?,
        parse(fields[2])?,
        parse(fields[3])?,
        parse(fields[4])? as usize,
        parse(fields[5])? as usize,
    ))
}

/// A pose file holds 16 whitespace-separated row-major matrix entries.
pub fn write_pose(path: &Path, pose: &Pose) -> Result<(), DatasetError> {
    let m = pose.to_matrix_row_major();
    let mut text = String::new();
    for row in 0..4 {
        let r: Vec<String> = (0..4).map(|c| format!("{}", m[row * 4 + c])).collect();
        let _ = writeln!(text, "{}", r.join(" "));
    }
    std::fs::write(path, text).map_err(|e| file_err(path, e))
}

pub fn read_pose(path: &Path) -> Result<Pose, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|e| file_err(path, e))?;
    let fields: Vec<&str> = text.split_whitespace().collect();
    if fields.len() != 16 {
        return Err(file_err(path, format!("expected 16 values, got {}", fields.len())));
    }
    let mut m = [0.0f64; 16];
    for (i, f) in fields.iter().enumerate() {
        m[i] = f
            .parse()
            .map_err(|_| file_err(path, format!("bad number `{f}`")))?;
    }
    Ok(Pose::from_matrix_row_major(&m))
}

/// Tracker output log: one line per frame, the frame id, 16 row-major pose
/// entries and a status flag (`ok` or `coasted`).
pub fn write_pose_log(
    path: &Path,
    log: &[(u64, Pose, FrameStatus)],
) -> Result<(), DatasetError> {
    let mut text = String::new();
    for (id, pose, status) in log {
        let m = pose.to_matrix_row_major();
        let entries: Vec<String> = m.iter().map(|v| format!("{v}")).collect();
        let _ = writeln!(text, "{id} {} {}", entries.join(" "), status.as_str());
    }
    std::fs::write(path, text).map_err(|e| file_err(path, e))
}

pub fn read_pose_log(path: &Path) -> Result<Vec<(u64, Pose, FrameStatus)>, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|e| file_err(path, e))?;
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: &str| DatasetError::Parse {
            path: path.display().to_string(),
            line: ln + 1,
            message: message.to_string(),
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 18 {
            return Err(parse_err(&format!("expected 18 fields, got {}", fields.len())));
        }
        let id: u64 = fields[0].parse().map_err(|_| parse_err("bad frame id"))?;
        let mut m = [0.0f64; 16];
        for i in 0..16 {
            m[i] = fields[1 + i].parse().map_err(|_| parse_err("bad pose entry"))?;
        }
        let status = match fields[17] {
            "ok" => FrameStatus::Ok,
            "coasted" => FrameStatus::Coasted,
            other => return Err(parse_err(&format!("bad status `{other}`"))),
        };
        out.push((id, Pose::from_matrix_row_major(&m), status));
    }
    Ok(out)
}

/// Model point file: one `x y z` triple per line, meters.
pub fn write_model_points(path: &Path, points: &[Vec3]) -> Result<(), DatasetError> {
    let mut text = String::new();
    for p in points {
        let _ = writeln!(text, "{} {} {}", p.x, p.y, p.z);
    }
    std::fs::write(path, text).map_err(|e| file_err(path, e))
}

pub fn read_model_points(path: &Path) -> Result<Vec<Vec3>, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|e| file_err(path, e))?;
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let parse_err = || DatasetError::Parse {
            path: path.display().to_string(),
            line: ln + 1,
            message: "expected `x y z`".to_string(),
        };
        if fields.len() != 3 {
            return Err(parse_err());
        }
        let x: f64 = fields[0].parse().map_err(|_| parse_err())?;
        let y: f64 = fields[1].parse().map_err(|_| parse_err())?;
        let z: f64 = fields[2].parse().map_err(|_| parse_err())?;
        out.push(Vec3::new(x, y, z));
    }
    Ok(out)
}

// -- dataset directory --------------------------------------------------------

/// Lazily-read dataset directory with contiguous frame ids from 0.
pub struct Dataset {
    pub dir: PathBuf,
    pub intrinsics: Intrinsics,
    pub frame_count: usize,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Dataset, DatasetError> {
        let intrinsics = read_intrinsics(&dir.join("intrinsics.txt"))?;
        let mut frame_count = 0usize;
        while dir.join(color_name(frame_count as u64)).exists() {
            frame_count += 1;
        }
        if frame_count == 0 {
            return Err(DatasetError::Empty(dir.display().to_string()));
        }
        Ok(Dataset {
            dir: dir.to_path_buf(),
            intrinsics,
            frame_count,
        })
    }

    pub fn load_color(&self, id: u64) -> Result<Vec<[u8; 3]>, DatasetError> {
        let path = self.dir.join(color_name(id));
        let (color, w, h) = read_color_png(&path)?;
        if w != self.intrinsics.width || h != self.intrinsics.height {
            return Err(file_err(
                &path,
                format!(
                    "color {w}x{h} does not match intrinsics {}x{}",
                    self.intrinsics.width, self.intrinsics.height
                ),
            ));
        }
        Ok(color)
    }

    pub fn load_depth(&self, id: u64) -> Result<DepthMap, DatasetError> {
        let path = self.dir.join(depth_name(id));
        let depth = read_depth_png(&path)?;
        if depth.width != self.intrinsics.width || depth.height != self.intrinsics.height {
            return Err(file_err(
                &path,
                format!(
                    "depth {}x{} does not match intrinsics {}x{}",
                    depth.width, depth.height, self.intrinsics.width, self.intrinsics.height
                ),
            ));
        }
        Ok(depth)
    }

    pub fn init_pose(&self) -> Result<Pose, DatasetError> {
        read_pose(&self.dir.join("init_pose.txt"))
    }

    pub fn gt_pose(&self, id: u64) -> Result<Pose, DatasetError> {
        read_pose(&self.dir.join(gt_pose_name(id)))
    }

    pub fn has_gt_pose(&self, id: u64) -> bool {
        self.dir.join(gt_pose_name(id)).exists()
    }
}

// -- run configuration ---------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskProviderKind {
    Precomputed,
    PlaneRemoval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeypointProviderKind {
    Harris,
    Files,
}

#[derive(Debug, Clone, Copy)]
pub struct RunConfig {
    pub seed: u64,
    pub tracker: TrackerConfig,
    pub mask_provider: MaskProviderKind,
    pub keypoint_provider: KeypointProviderKind,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            tracker: TrackerConfig {
                // Speed-run default; tests that need full density set 1.
                solver: SolverConfig {
                    dense_stride: 4,
                    ..SolverConfig::default()
                },
                ..TrackerConfig::default()
            },
            mask_provider: MaskProviderKind::Precomputed,
            keypoint_provider: KeypointProviderKind::Harris,
        }
    }
}

impl RunConfig {
    /// The tracker configuration with the run seed folded in.
    pub fn tracker_config(&self) -> TrackerConfig {
        let mut config = self.tracker;
        config.ransac.seed = self.seed;
        config
    }

    /// Parse a flat `key = value` file. `#` starts a comment; unknown or
    /// duplicate keys are rejected with their line number.
    pub fn parse(text: &str, origin: &str) -> Result<RunConfig, DatasetError> {
        let mut config = RunConfig::default();
        let mut seen: Vec<String> = Vec::new();
        for (ln, raw_line) in text.lines().enumerate() {
            let line = raw_line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| DatasetError::Parse {
                path: origin.to_string(),
                line: ln + 1,
                message,
            };
            let Some((key, value)) = line.split_once('=') else {
                return Err(err(format!("expected `key = value`, got `{line}`")));
            };
            let key = key.trim();
            let value = value.trim();
            if seen.iter().any(|k| k == key) {
                return Err(err(format!("duplicate key `{key}`")));
            }
            seen.push(key.to_string());

            macro_rules! num {
                ($ty:ty) => {
                    value
                        .parse::<$ty>()
                        .map_err(|_| err(format!("bad value `{value}` for `{key}`")))?
                };
            }
            let parse_bool = |v: &str| match v {
                "true" => Ok(true),
                "false" => Ok(false),
                _ => Err(err(format!("bad boolean `{v}` for `{key}`"))),
            };

            let t = &mut config.tracker;
            match key {
                "seed" => config.seed = num!(u64),
                "k_pool" => t.pool_cap = num!(usize),
                "n_keypoints" => t.n_keypoints = num!(usize),
                "ransac_delta" => t.ransac.delta = num!(f64),
                "ransac_alpha_deg" => t.ransac.alpha = num!(f64).to_radians(),
                "ransac_iterations" => t.ransac.iterations = num!(usize),
                "ransac_min_inliers" => t.ransac.min_inliers = num!(usize),
                "novelty_threshold_deg" => t.novelty_threshold = num!(f64).to_radians(),
                "lambda1" => t.solver.lambda1 = num!(f64),
                "lambda2" => t.solver.lambda2 = num!(f64),
                "huber_delta_feature" => t.solver.huber.delta_feature = num!(f64),
                "huber_delta_geometric" => t.solver.huber.delta_geometric = num!(f64),
                "dense_distance_gate" => t.solver.gates.distance = num!(f64),
                "dense_angle_gate_deg" => t.solver.gates.angle = num!(f64).to_radians(),
                "dense_stride" => t.solver.dense_stride = num!(usize),
                "gn_iterations" => t.solver.gn_iterations = num!(usize),
                "pcg_tolerance" => t.solver.pcg_tolerance = num!(f64),
                "pcg_max_iterations" => t.solver.pcg_max_iterations = num!(usize),
                "disable_pose_graph" => t.disable_pose_graph = parse_bool(value)?,
                "disable_e_f" => t.solver.enable_feature = !parse_bool(value)?,
                "disable_e_g" => t.solver.enable_geometric = !parse_bool(value)?,
                "mask_provider" => {
                    config.mask_provider = match value {
                        "precomputed" => MaskProviderKind::Precomputed,
                        "plane_removal" => MaskProviderKind::PlaneRemoval,
                        _ => return Err(err(format!("unknown mask provider `{value}`"))),
                    }
                }
                "keypoint_provider" => {
                    config.keypoint_provider = match value {
                        "harris" => KeypointProviderKind::Harris,
                        "files" => KeypointProviderKind::Files,
                        _ => return Err(err(format!("unknown keypoint provider `{value}`"))),
                    }
                }
                _ => return Err(err(format!("unknown key `{key}`"))),
            }
        }
        Ok(config)
    }

    pub fn parse_file(path: &Path) -> Result<RunConfig, DatasetError> {
        let text = std::fs::read_to_string(path).map_err(|e| file_err(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }
}
