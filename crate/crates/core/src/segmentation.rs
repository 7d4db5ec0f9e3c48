//! Object mask providers.
//!
//! Masks either come from per-frame files on disk (how any external
//! segmenter's output gets injected) or from a classical tabletop pipeline:
//! RANSAC plane fit and removal followed by single-linkage Euclidean
//! clustering, keeping the largest off-plane cluster.

use crate::frame::{DepthMap, Mask};
use crate::se3::{unproject, Intrinsics, Vec3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SegmentationError {
    #[error("read {path}: {message}")]
    File { path: String, message: String },
    #[error("mask {got_w}x{got_h} does not match frame {want_w}x{want_h}")]
    DimensionMismatch {
        got_w: usize,
        got_h: usize,
        want_w: usize,
        want_h: usize,
    },
    #[error("need at least {min} valid depth points, got {got}")]
    TooFewPoints { min: usize, got: usize },
    #[error("no off-plane cluster of at least {min} points")]
    EmptyMask { min: usize },
}

#[derive(Debug, Clone, Copy)]
pub struct PlaneRemovalParams {
    /// Point-to-plane distance that counts as a plane inlier, meters.
    pub plane_inlier_dist: f64,
    pub plane_iterations: usize,
    /// Single-linkage radius for Euclidean clustering, meters.
    pub linkage_radius: f64,
    /// Smallest cluster accepted as the object.
    pub min_cluster: usize,
    pub min_points: usize,
    pub seed: u64,
}

impl Default for PlaneRemovalParams {
    fn default() -> Self {
        Self {
            plane_inlier_dist: 0.01,
            plane_iterations: 500,
            linkage_radius: 0.02,
            min_cluster: 50,
            min_points: 100,
            seed: 0,
        }
    }
}

/// Supplies the binary object mask for each frame.
pub trait MaskProvider: Send + Sync {
    fn mask_for(
        &self,
        frame_id: u64,
        depth: &DepthMap,
        intrinsics: &Intrinsics,
    ) -> Result<Mask, SegmentationError>;
}

/// Load and binarize an 8-bit grayscale mask image; nonzero means object.
pub fn mask_from_file(path: &Path, width: usize, height: usize) -> Result<Mask, SegmentationError> {
    let img = image::open(path).map_err(|e| SegmentationError::File {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let gray = img.into_luma8();
    if gray.width() as usize != width || gray.height() as usize != height {
        return Err(SegmentationError::DimensionMismatch {
            got_w: gray.width() as usize,
            got_h: gray.height() as usize,
            want_w: width,
            want_h: height,
        });
    }
    let values = gray.pixels().map(|p| u8::from(p.0[0] != 0)).collect();
    Ok(Mask::new(width, height, values))
}

/// Reads `mask_%06d.png` from a directory.
pub struct PrecomputedMaskProvider {
    pub dir: PathBuf,
}

impl MaskProvider for PrecomputedMaskProvider {
    fn mask_for(
        &self,
        frame_id: u64,
        depth: &DepthMap,
        _intrinsics: &Intrinsics,
    ) -> Result<Mask, SegmentationError> {
        let path = self.dir.join(format!("mask_{frame_id:06}.png"));
        mask_from_file(&path, depth.width, depth.height)
    }
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, x: usize) -> usize {
        let mut root = x;
        while self.parent[root] != root {
            root = self.parent[root];
        }
        let mut cur = x;
        while self.parent[cur] != root {
            let next = self.parent[cur];
            self.parent[cur] = root;
            cur = next;
        }
        root
    }

    fn union(&mut self, a: usize, b: usize) {
        let ra = self.find(a);
        let rb = self.find(b);
        if ra != rb {
            // Smaller root index wins, for reproducible labels.
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

fn fit_plane_ransac(
    points: &[Vec3],
    params: &PlaneRemovalParams,
) -> (Vec3, f64, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let n = points.len();
    let mut best: Option<(usize, Vec3, f64)> = None;
    for _ in 0..params.plane_iterations {
        let i = rng.random_range(0..n);
        let j = rng.random_range(0..n);
        let k = rng.random_range(0..n);
        if i == j || j == k || i == k {
            continue;
        }
        let normal = (points[j] - points[i]).cross(&(points[k] - points[i]));
        let norm = normal.norm();
        if norm < 1e-12 {
            continue;
        }
        let normal = normal / norm;
        let d = -normal.dot(&points[i]);
        let count = points
            .iter()
            .filter(|p| (normal.dot(p) + d).abs() <= params.plane_inlier_dist)
            .count();
        if best.as_ref().map_or(true, |&(bc, _, _)| count > bc) {
            best = Some((count, normal, d));
        }
    }
    let (_, normal, d) = best.expect("plane_iterations > 0");

    // Least-squares refit on the consensus set, then re-gate once.
    let inliers: Vec<&Vec3> = points
        .iter()
        .filter(|p| (normal.dot(p) + d).abs() <= params.plane_inlier_dist)
        .collect();
    let (normal, d) = if inliers.len() >= 3 {
        let centroid = inliers.iter().copied().sum::<Vec3>() / inliers.len() as f64;
        let mut cov = crate::se3::Mat3::zeros();
        for p in &inliers {
            let q = *p - centroid;
            cov += q * q.transpose();
        }
        let eig = cov.symmetric_eigen();
        let mut k = 0;
        for idx in 1..3 {
            if eig.eigenvalues[idx] < eig.eigenvalues[k] {
                k = idx;
            }
        }
        let refined: Vec3 = eig.eigenvectors.column(k).into();
        let refined = if refined.dot(&normal) < 0.0 {
            -refined
        } else {
            refined
        };
        (refined, -refined.dot(&centroid))
    } else {
        (normal, d)
    };
    let flags = points
        .iter()
        .map(|p| (normal.dot(p) + d).abs() <= params.plane_inlier_dist)
        .collect();
    (normal, d, flags)
}

/// Single-linkage Euclidean clustering. Returns a cluster label per point.
/// Cell size is chosen so same-cell points are provably within the linkage
/// radius; cross-cell links are found by pairwise checks between nearby
/// cells, short-circuited once two cells' clusters are joined.
fn euclidean_clusters(points: &[Vec3], radius: f64) -> Vec<usize> {
    let cell = radius / 3.0f64.sqrt();
    let key = |p: &Vec3| -> (i64, i64, i64) {
        (
            (p.x / cell).floor() as i64,
            (p.y / cell).floor() as i64,
            (p.z / cell).floor() as i64,
        )
    };
    let mut grid: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
    for (idx, p) in points.iter().enumerate() {
        grid.entry(key(p)).or_default().push(idx);
    }
    let mut uf = UnionFind::new(points.len());
    // Same-cell points are at most sqrt(3)*cell = radius apart.
    for members in grid.values() {
        for &m in &members[1..] {
            uf.union(members[0], m);
        }
    }
    let mut keys: Vec<(i64, i64, i64)> = grid.keys().copied().collect();
    keys.sort_unstable();
    let r2 = radius * radius;
    for &(kx, ky, kz) in &keys {
        let cell_a = &grid[&(kx, ky, kz)];
        for dz in 0..=2i64 {
            for dy in -2i64..=2 {
                for dx in -2i64..=2 {
                    // Visit each unordered cell pair once.
                    if (dz, dy, dx) <= (0, 0, 0) {
                        continue;
                    }
                    let Some(cell_b) = grid.get(&(kx + dx, ky + dy, kz + dz)) else {
                        continue;
                    };
                    if uf.find(cell_a[0]) == uf.find(cell_b[0]) {
                        continue;
                    }
                    'link: for &a in cell_a {
                        for &b in cell_b {
                            if (points[a] - points[b]).norm_squared() <= r2 {
                                uf.union(a, b);
                                break 'link;
                            }
                        }
                    }
                }
            }
        }
    }
    (0..points.len()).map(|i| uf.find(i)).collect()
}

/// Classical tabletop segmentation: fit and remove the dominant plane, then
/// keep the largest remaining Euclidean cluster as the object mask.
pub fn plane_removal_mask(
    depth: &DepthMap,
    intrinsics: &Intrinsics,
    params: &PlaneRemovalParams,
) -> Result<Mask, SegmentationError> {
    let mut pixels = Vec::new();
    let mut points = Vec::new();
    for v in 0..depth.height {
        for u in 0..depth.width {
            let d = depth.at(u, v);
            if let Some(p) = unproject(u as f64, v as f64, d, intrinsics) {
                pixels.push((u, v));
                points.push(p);
            }
        }
    }
    if points.len() < params.min_points {
        return Err(SegmentationError::TooFewPoints {
            min: params.min_points,
            got: points.len(),
        });
    }

    let (_, _, plane_flags) = fit_plane_ransac(&points, params);
    let off_plane: Vec<usize> = (0..points.len()).filter(|&i| !plane_flags[i]).collect();
    if off_plane.len() < params.min_cluster {
        return Err(SegmentationError::EmptyMask {
            min: params.min_cluster,
        });
    }

    let cluster_points: Vec<Vec3> = off_plane.iter().map(|&i| points[i]).collect();
    let labels = euclidean_clusters(&cluster_points, params.linkage_radius);
    let mut sizes: HashMap<usize, usize> = HashMap::new();
    for &label in &labels {
        *sizes.entry(label).or_insert(0) += 1;
    }
    // Largest cluster wins; ties go to the one seen first in scan order,
    // which is the one with the smallest label under this union-find.
    let mut best: Option<(usize, usize)> = None;
    for (&label, &size) in &sizes {
        let better = match best {
            None => true,
            Some((bs, bl)) => size > bs || (size == bs && label < bl),
        };
        if better {
            best = Some((size, label));
        }
    }
    let (size, label) = best.expect("nonempty clusters");
    if size < params.min_cluster {
        return Err(SegmentationError::EmptyMask {
            min: params.min_cluster,
        });
    }

    let mut mask = Mask::zeros(depth.width, depth.height);
    for (ci, &pi) in off_plane.iter().enumerate() {
        if labels[ci] == label {
            let (u, v) = pixels[pi];
            mask.values[v * depth.width + u] = 1;
        }
    }
    Ok(mask)
}

/// Plane-removal segmentation as a provider.
pub struct PlaneRemovalProvider {
    pub params: PlaneRemovalParams,
}

impl MaskProvider for PlaneRemovalProvider {
    fn mask_for(
        &self,
        _frame_id: u64,
        depth: &DepthMap,
        intrinsics: &Intrinsics,
    ) -> Result<Mask, SegmentationError> {
        plane_removal_mask(depth, intrinsics, &self.params)
    }
}
