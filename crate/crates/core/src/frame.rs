//! RGB-D frame ingestion: per-pixel point cloud from masked depth and
//! camera-facing surface normals from central differences.

use crate::features::Keypoint;
use crate::se3::{unproject, Intrinsics, Vec3};
use thiserror::Error;

/// Neighboring depth difference above which a normal is not trusted;
/// prevents normals that straddle occlusion boundaries.
pub const DEPTH_JUMP: f64 = 0.05;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Per-pixel depth in meters; 0 encodes an invalid measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), width * height);
        Self {
            width,
            height,
            values,
        }
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self::new(width, height, vec![0.0; width * height])
    }

    #[inline]
    pub fn at(&self, u: usize, v: usize) -> f64 {
        self.values[v * self.width + u]
    }

    #[inline]
    pub fn is_valid(&self, u: usize, v: usize) -> bool {
        self.at(u, v) > 0.0
    }
}

/// Binary object mask, one byte per pixel in {0, 1}.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub values: Vec<u8>,
}

impl Mask {
    pub fn new(width: usize, height: usize, values: Vec<u8>) -> Self {
        assert_eq!(values.len(), width * height);
        debug_assert!(values.iter().all(|&v| v <= 1));
        Self {
            width,
            height,
            values,
        }
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self::new(width, height, vec![0; width * height])
    }

    pub fn ones(width: usize, height: usize) -> Self {
        Self::new(width, height, vec![1; width * height])
    }

    #[inline]
    pub fn at(&self, u: usize, v: usize) -> bool {
        self.values[v * self.width + u] != 0
    }

    pub fn count_ones(&self) -> usize {
        self.values.iter().filter(|&&v| v != 0).count()
    }
}

/// One masked observation: pixel, camera-frame point, unit normal.
#[derive(Debug, Clone, Copy)]
pub struct MaskedPoint {
    pub u: u32,
    pub v: u32,
    pub point: Vec3,
    pub normal: Vec3,
}

/// A single ingested RGB-D observation.
///
/// The point cloud is derived on demand from the stored depth so that
/// `point_at(u, v)` always equals `unproject(u, v, depth[u, v])`. Normals are
/// stored per pixel with the zero vector marking "undefined". Keypoints are
/// filled in by a keypoint provider after ingestion; the tracked pose lives
/// with the tracker, not the frame.
#[derive(Debug, Clone)]
pub struct Frame {
    pub id: u64,
    pub color: Vec<[u8; 3]>,
    pub depth: DepthMap,
    pub mask: Mask,
    pub intrinsics: Intrinsics,
    normals: Vec<[f32; 3]>,
    masked: Vec<(u32, u32)>,
    pub keypoints: Vec<Keypoint>,
}

/// Per-pixel normals from central differences of the unprojected cloud.
///
/// A pixel gets a normal only when itself and its four neighbors carry valid
/// depth and no neighbor jumps more than [`DEPTH_JUMP`] away. Normals are
/// unit length and oriented toward the camera (`n · p < 0`). Invalid pixels
/// hold the zero vector.
pub fn estimate_normals(depth: &DepthMap, k: &Intrinsics) -> Vec<[f32; 3]> {
    let w = depth.width;
    let h = depth.height;
    let unproj = |u: usize, v: usize| -> Option<Vec3> {
        let d = depth.at(u, v);
        unproject(u as f64, v as f64, d, k)
    };
    let mut normals = vec![[0.0f32; 3]; w * h];
    if w < 3 || h < 3 {
        return normals;
    }
    for v in 1..h - 1 {
        for u in 1..w - 1 {
            let d = depth.at(u, v);
            if d <= 0.0 {
                continue;
            }
            let neighbors = [
                depth.at(u - 1, v),
                depth.at(u + 1, v),
                depth.at(u, v - 1),
                depth.at(u, v + 1),
            ];
            if neighbors
                .iter()
                .any(|&n| n <= 0.0 || (n - d).abs() > DEPTH_JUMP)
            {
                continue;
            }
            let (Some(px0), Some(px1), Some(py0), Some(py1)) = (
                unproj(u - 1, v),
                unproj(u + 1, v),
                unproj(u, v - 1),
                unproj(u, v + 1),
            ) else {
                continue;
            };
            let tangent_u = px1 - px0;
            let tangent_v = py1 - py0;
            let mut n = tangent_u.cross(&tangent_v);
            let norm = n.norm();
            if norm < 1e-12 {
                continue;
            }
            n /= norm;
            let p = unproj(u, v).expect("valid depth");
            if n.dot(&p) > 0.0 {
                n = -n;
            }
            normals[v * w + u] = [n.x as f32, n.y as f32, n.z as f32];
        }
    }
    normals
}

impl Frame {
    /// Build a frame from raw observations. Computes normals and the list of
    /// usable masked pixels; keypoints start empty.
    pub fn ingest(
        id: u64,
        color: Vec<[u8; 3]>,
        depth: DepthMap,
        mask: Mask,
        intrinsics: Intrinsics,
    ) -> Result<Frame, IngestError> {
        if depth.width != intrinsics.width || depth.height != intrinsics.height {
            return Err(IngestError::DimensionMismatch(format!(
                "depth {}x{} vs intrinsics {}x{}",
                depth.width, depth.height, intrinsics.width, intrinsics.height
            )));
        }
        if mask.width != depth.width || mask.height != depth.height {
            return Err(IngestError::DimensionMismatch(format!(
                "mask {}x{} vs depth {}x{}",
                mask.width, mask.height, depth.width, depth.height
            )));
        }
        if color.len() != depth.width * depth.height {
            return Err(IngestError::DimensionMismatch(format!(
                "color {} pixels vs {}x{}",
                color.len(),
                depth.width,
                depth.height
            )));
        }
        let normals = estimate_normals(&depth, &intrinsics);
        let mut masked = Vec::new();
        for v in 0..depth.height {
            for u in 0..depth.width {
                if mask.at(u, v) && depth.is_valid(u, v) && normals[v * depth.width + u] != [0.0; 3]
                {
                    masked.push((u as u32, v as u32));
                }
            }
        }
        Ok(Frame {
            id,
            color,
            depth,
            mask,
            intrinsics,
            normals,
            masked,
            keypoints: Vec::new(),
        })
    }

    /// Camera-frame point at a masked pixel with valid depth.
    pub fn point_at(&self, u: usize, v: usize) -> Option<Vec3> {
        if u >= self.depth.width || v >= self.depth.height || !self.mask.at(u, v) {
            return None;
        }
        unproject(u as f64, v as f64, self.depth.at(u, v), &self.intrinsics)
    }

    /// Unit normal at a pixel, if one was estimated there.
    pub fn normal_at(&self, u: usize, v: usize) -> Option<Vec3> {
        if u >= self.depth.width || v >= self.depth.height {
            return None;
        }
        let n = self.normals[v * self.depth.width + u];
        if n == [0.0; 3] {
            return None;
        }
        Some(Vec3::new(n[0] as f64, n[1] as f64, n[2] as f64))
    }

    /// Masked pixels with valid depth and normal, subsampled by `stride` on
    /// the global pixel grid, in row-major order.
    pub fn masked_points(&self, stride: usize) -> Vec<MaskedPoint> {
        assert!(stride >= 1);
        self.masked
            .iter()
            .filter(|&&(u, v)| u as usize % stride == 0 && v as usize % stride == 0)
            .map(|&(u, v)| MaskedPoint {
                u,
                v,
                point: self
                    .point_at(u as usize, v as usize)
                    .expect("masked pixel has valid depth"),
                normal: self
                    .normal_at(u as usize, v as usize)
                    .expect("masked pixel has valid normal"),
            })
            .collect()
    }

    /// Number of pixels usable by `masked_points(1)`.
    pub fn masked_count(&self) -> usize {
        self.masked.len()
    }

    pub fn grayscale(&self) -> Vec<f32> {
        self.color
            .iter()
            .map(|&[r, g, b]| 0.299 * r as f32 + 0.587 * g as f32 + 0.114 * b as f32)
            .collect()
    }
}
