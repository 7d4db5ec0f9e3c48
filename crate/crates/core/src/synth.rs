//! Synthetic RGB-D sequence generator with exact ground truth.
//!
//! Objects are analytic surfaces (box, sphere, cylinder) ray-cast at full
//! pixel precision with a procedural checker texture, so rendered depth,
//! masks, visibility and correspondences are all exact up to the configured
//! noise. Everything is a pure function of the scene seed.

use crate::features::{Keypoint, KeypointProvider, MatchSet, DESCRIPTOR_LEN};
use crate::frame::{DepthMap, Frame, Mask};
use crate::se3::{exp_map, project, Intrinsics, Pose, Twist, Vec2, Vec3};
use crate::solver::mix_seed;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;
use thiserror::Error;

const SEED_TAG_DEPTH_NOISE: u64 = 0xD1;
const SEED_TAG_SAMPLES: u64 = 0xD2;
const SEED_TAG_OUTLIERS: u64 = 0xD3;
const SEED_TAG_MODEL: u64 = 0xD4;
const SEED_TAG_DESCRIPTORS: u64 = 0xD5;
const SEED_TAG_DROP: u64 = 0xD6;
const SEED_TAG_PERTURB: u64 = 0xD7;

/// Injected outliers are rewired to a surface location at least this far
/// from the true one, so they cannot pass the registration gates by luck.
const OUTLIER_MIN_OFFSET: f64 = 0.05;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("frame {0} is beyond the trajectory")]
    OutOfTrajectory(usize),
    #[error("object fully outside the frustum at frame {0}")]
    OutsideFrustum(usize),
}

/// Analytic object surface in its own frame.
#[derive(Debug, Clone, Copy)]
pub enum Surface {
    Box { half_extents: Vec3 },
    Sphere { radius: f64 },
    Cylinder { radius: f64, half_height: f64 },
}

impl Surface {
    /// Nearest positive ray parameter and outward surface normal; the ray
    /// direction need not be normalized (the parameter scale is the
    /// caller's).
    pub fn intersect(&self, origin: &Vec3, dir: &Vec3) -> Option<(f64, Vec3)> {
        match *self {
            Surface::Box { half_extents } => {
                // Slab method.
                let mut t_near = f64::NEG_INFINITY;
                let mut t_far = f64::INFINITY;
                let mut near_axis = 0usize;
                for axis in 0..3 {
                    let o = origin[axis];
                    let d = dir[axis];
                    let h = half_extents[axis];
                    if d.abs() < 1e-15 {
                        if o.abs() > h {
                            return None;
                        }
                        continue;
                    }
                    let mut t0 = (-h - o) / d;
                    let mut t1 = (h - o) / d;
                    if t0 > t1 {
                        std::mem::swap(&mut t0, &mut t1);
                    }
                    if t0 > t_near {
                        t_near = t0;
                        near_axis = axis;
                    }
                    t_far = t_far.min(t1);
                    if t_near > t_far {
                        return None;
                    }
                }
                if t_near <= 0.0 {
                    return None;
                }
                let hit = origin + dir * t_near;
                let mut normal = Vec3::zeros();
                normal[near_axis] = hit[near_axis].signum();
                Some((t_near, normal))
            }
            Surface::Sphere { radius } => {
                let a = dir.norm_squared();
                let b = 2.0 * origin.dot(dir);
                let c = origin.norm_squared() - radius * radius;
                let disc = b * b - 4.0 * a * c;
                if disc < 0.0 {
                    return None;
                }
                let sqrt_disc = disc.sqrt();
                let t = (-b - sqrt_disc) / (2.0 * a);
                if t <= 0.0 {
                    return None;
                }
                let hit = origin + dir * t;
                Some((t, hit.normalize()))
            }
            Surface::Cylinder {
                radius,
                half_height,
            } => {
                let mut best: Option<(f64, Vec3)> = None;
                // Lateral surface: x² + y² = r² within |z| <= h.
                let a = dir.x * dir.x + dir.y * dir.y;
                if a > 1e-15 {
                    let b = 2.0 * (origin.x * dir.x + origin.y * dir.y);
                    let c = origin.x * origin.x + origin.y * origin.y - radius * radius;
                    let disc = b * b - 4.0 * a * c;
                    if disc >= 0.0 {
                        let t = (-b - disc.sqrt()) / (2.0 * a);
                        if t > 0.0 {
                            let hit = origin + dir * t;
                            if hit.z.abs() <= half_height {
                                best = Some((t, Vec3::new(hit.x, hit.y, 0.0).normalize()));
                            }
                        }
                    }
                }
                // End caps.
                if dir.z.abs() > 1e-15 {
                    for sign in [-1.0f64, 1.0] {
                        let t = (sign * half_height - origin.z) / dir.z;
                        if t <= 0.0 {
                            continue;
                        }
                        let hit = origin + dir * t;
                        if hit.x * hit.x + hit.y * hit.y <= radius * radius
                            && best.is_none_or(|(bt, _)| t < bt)
                        {
                            best = Some((t, Vec3::new(0.0, 0.0, sign)));
                        }
                    }
                }
                best
            }
        }
    }

    /// Uniform-ish surface sample (point, outward normal), area weighted.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> (Vec3, Vec3) {
        match *self {
            Surface::Box { half_extents } => {
                let h = half_extents;
                let areas = [h.y * h.z, h.x * h.z, h.x * h.y];
                let total: f64 = areas.iter().sum::<f64>();
                let mut pick = rng.random::<f64>() * total;
                let mut axis = 0usize;
                for (i, a) in areas.iter().enumerate() {
                    if pick < *a {
                        axis = i;
                        break;
                    }
                    pick -= a;
                }
                let sign = if rng.random::<f64>() < 0.5 { -1.0 } else { 1.0 };
                let mut p = Vec3::new(
                    (rng.random::<f64>() * 2.0 - 1.0) * h.x,
                    (rng.random::<f64>() * 2.0 - 1.0) * h.y,
                    (rng.random::<f64>() * 2.0 - 1.0) * h.z,
                );
                p[axis] = sign * h[axis];
                let mut n = Vec3::zeros();
                n[axis] = sign;
                (p, n)
            }
            Surface::Sphere { radius } => {
                let n = random_direction(rng);
                (n * radius, n)
            }
            Surface::Cylinder {
                radius,
                half_height,
            } => {
                let lateral = 2.0 * std::f64::consts::PI * radius * 2.0 * half_height;
                let caps = 2.0 * std::f64::consts::PI * radius * radius;
                if rng.random::<f64>() * (lateral + caps) < lateral {
                    let angle = rng.random::<f64>() * 2.0 * std::f64::consts::PI;
                    let z = (rng.random::<f64>() * 2.0 - 1.0) * half_height;
                    (
                        Vec3::new(radius * angle.cos(), radius * angle.sin(), z),
                        Vec3::new(angle.cos(), angle.sin(), 0.0),
                    )
                } else {
                    let sign = if rng.random::<f64>() < 0.5 { -1.0 } else { 1.0 };
                    let r = radius * rng.random::<f64>().sqrt();
                    let angle = rng.random::<f64>() * 2.0 * std::f64::consts::PI;
                    (
                        Vec3::new(r * angle.cos(), r * angle.sin(), sign * half_height),
                        Vec3::new(0.0, 0.0, sign),
                    )
                }
            }
        }
    }

    /// Axis-aligned bounding box dimensions in the object frame.
    pub fn bbox_dims(&self) -> Vec3 {
        match *self {
            Surface::Box { half_extents } => 2.0 * half_extents,
            Surface::Sphere { radius } => Vec3::from_element(2.0 * radius),
            Surface::Cylinder {
                radius,
                half_height,
            } => Vec3::new(2.0 * radius, 2.0 * radius, 2.0 * half_height),
        }
    }

    /// Signed distance-like surface error used by the oracle tests.
    pub fn surface_error(&self, p: &Vec3) -> f64 {
        match *self {
            Surface::Box { half_extents } => {
                let r = Vec3::new(
                    p.x.abs() / half_extents.x,
                    p.y.abs() / half_extents.y,
                    p.z.abs() / half_extents.z,
                );
                (r.max() - 1.0).abs()
            }
            Surface::Sphere { radius } => (p.norm() - radius).abs() / radius,
            Surface::Cylinder {
                radius,
                half_height,
            } => {
                let radial = ((p.x * p.x + p.y * p.y).sqrt() - radius).abs() / radius;
                let axial = (p.z.abs() - half_height).abs() / half_height;
                radial.min(axial)
            }
        }
    }
}

fn random_direction(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = Vec3::new(
            rng.random::<f64>() * 2.0 - 1.0,
            rng.random::<f64>() * 2.0 - 1.0,
            rng.random::<f64>() * 2.0 - 1.0,
        );
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Optional static tabletop plane, expressed in the camera frame as a
/// finite disk.
#[derive(Debug, Clone, Copy)]
pub struct TablePlane {
    pub point: Vec3,
    pub normal: Vec3,
    pub radius: f64,
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub name: String,
    pub surface: Surface,
    /// Ground-truth object-to-camera pose per frame.
    pub trajectory: Vec<Pose>,
    pub intrinsics: Intrinsics,
    pub table: Option<TablePlane>,
    /// Per-pixel Gaussian depth noise, meters.
    pub depth_sigma: f64,
    /// Fraction of each frame's synthetic keypoints whose geometry is
    /// rewired to a wrong surface location (descriptor kept), turning them
    /// into outlier matches against every other frame.
    pub outlier_fraction: f64,
    /// Translation applied to the ground-truth pose of frame 0 when the
    /// scene is exported or tracked, exercising noisy initialization.
    pub init_offset: Vec3,
    pub seed: u64,
    /// Checker texture cell size, meters.
    pub texture_cell: f64,
    /// Size of the global surface sample set behind synthetic keypoints.
    pub surface_samples: usize,
}

pub struct Rendered {
    pub color: Vec<[u8; 3]>,
    pub depth: DepthMap,
    pub mask: Mask,
    pub gt_pose: Pose,
}

fn cell_hash(x: i64, y: i64, z: i64) -> u8 {
    let mut h = mix_seed(0xC0FFEE, x as u64 ^ (z as u64) << 21, y as u64);
    h ^= h >> 17;
    (h % 97) as u8
}

/// Checker for corner strength plus a finer surface-anchored hash layer so
/// nearby corners stay locally distinguishable (a plain checker is periodic
/// and breeds lattice-shifted mismatches).
fn checker_color(p_obj: &Vec3, cell: f64) -> [u8; 3] {
    let cx = (p_obj.x / cell).floor() as i64;
    let cy = (p_obj.y / cell).floor() as i64;
    let cz = (p_obj.z / cell).floor() as i64;
    let base: i64 = if (cx + cy + cz).rem_euclid(2) == 0 {
        75
    } else {
        170
    };
    let fine = cell / 3.0;
    let fx = (p_obj.x / fine).floor() as i64;
    let fy = (p_obj.y / fine).floor() as i64;
    let fz = (p_obj.z / fine).floor() as i64;
    let detail = (cell_hash(fx, fy, fz) % 51) as i64 - 25;
    let value = (base + detail).clamp(0, 255) as u8;
    [value, value, value]
}

impl SyntheticScene {
    pub fn len(&self) -> usize {
        self.trajectory.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectory.is_empty()
    }

    /// The pose handed to the tracker at initialization: ground truth of
    /// frame 0 shifted by the scene's init offset (camera frame).
    pub fn initial_pose(&self) -> Pose {
        let mut pose = self.trajectory[0];
        pose.translation += self.init_offset;
        pose
    }

    /// Analytic ray-cast of the posed object (plus optional table) with
    /// seeded depth noise. The mask marks pixels whose nearest hit is the
    /// object.
    pub fn render(&self, t: usize) -> Result<Rendered, RenderError> {
        let Some(gt_pose) = self.trajectory.get(t).copied() else {
            return Err(RenderError::OutOfTrajectory(t));
        };
        let k = &self.intrinsics;
        let cam_in_obj = gt_pose.inverse();
        let origin_obj = cam_in_obj.translation;
        let n_px = k.width * k.height;
        let mut color = vec![[25u8; 3]; n_px];
        let mut depth_values = vec![0.0f64; n_px];
        let mut mask = Mask::zeros(k.width, k.height);
        let mut noise_rng =
            ChaCha8Rng::seed_from_u64(mix_seed(self.seed, SEED_TAG_DEPTH_NOISE, t as u64));
        let mut object_pixels = 0usize;
        for v in 0..k.height {
            for u in 0..k.width {
                let idx = v * k.width + u;
                // dir_cam.z = 1, so the ray parameter equals z-depth.
                let dir_cam = Vec3::new(
                    (u as f64 - k.cx) / k.fx,
                    (v as f64 - k.cy) / k.fy,
                    1.0,
                );
                let dir_obj = cam_in_obj.rotate(&dir_cam);
                let object_hit = self.surface.intersect(&origin_obj, &dir_obj);
                let table_hit = self.table.and_then(|table| {
                    let denom = table.normal.dot(&dir_cam);
                    if denom.abs() < 1e-12 {
                        return None;
                    }
                    let s = table.normal.dot(&table.point) / denom;
                    if s <= 0.0 {
                        return None;
                    }
                    let hit = dir_cam * s;
                    if (hit - table.point).norm() > table.radius {
                        return None;
                    }
                    Some(s)
                });

                let (s, is_object) = match (object_hit, table_hit) {
                    (Some((so, _)), Some(st)) if so <= st => (so, true),
                    (Some(_), Some(st)) => (st, false),
                    (Some((so, _)), None) => (so, true),
                    (None, Some(st)) => (st, false),
                    (None, None) => continue,
                };
                let noisy = if self.depth_sigma > 0.0 {
                    s + self.depth_sigma * gaussian(&mut noise_rng)
                } else {
                    s
                };
                if noisy <= 0.0 {
                    continue;
                }
                depth_values[idx] = noisy;
                if is_object {
                    mask.values[idx] = 1;
                    object_pixels += 1;
                    let hit_obj = origin_obj + dir_obj * s;
                    color[idx] = checker_color(&hit_obj, self.texture_cell);
                } else {
                    // Fainter checker so the table is textured but distinct.
                    let hit_cam = dir_cam * s;
                    let c = checker_color(&hit_cam, self.texture_cell * 2.0);
                    color[idx] = [c[0] / 2 + 20, c[1] / 2 + 20, c[2] / 2 + 20];
                }
            }
        }
        if object_pixels == 0 {
            return Err(RenderError::OutsideFrustum(t));
        }
        Ok(Rendered {
            color,
            depth: DepthMap::new(k.width, k.height, depth_values),
            mask,
            gt_pose,
        })
    }

    /// Render frame `t` and ingest it.
    pub fn ingest(&self, t: usize) -> Result<(Frame, Pose), RenderError> {
        let rendered = self.render(t)?;
        let frame = Frame::ingest(
            t as u64,
            rendered.color,
            rendered.depth,
            rendered.mask,
            self.intrinsics,
        )
        .expect("rendered dimensions are consistent");
        Ok((frame, rendered.gt_pose))
    }

    /// The fixed global surface sample set (object frame) used by the
    /// synthetic keypoint provider.
    pub fn surface_sample_set(&self) -> Vec<(Vec3, Vec3)> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed, SEED_TAG_SAMPLES, 0));
        (0..self.surface_samples)
            .map(|_| self.surface.sample(&mut rng))
            .collect()
    }

    /// Seeded model point sample for evaluation.
    pub fn model_points(&self, count: usize) -> Vec<Vec3> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed, SEED_TAG_MODEL, 0));
        (0..count).map(|_| self.surface.sample(&mut rng).0).collect()
    }

    /// Is an object-frame surface point visible at frame `t`: in front of
    /// the camera, inside the image with margin, and on a camera-facing part
    /// of the (convex) surface, not hidden by the table.
    pub fn visible(&self, p_obj: &Vec3, n_obj: &Vec3, t: usize) -> bool {
        let pose = &self.trajectory[t];
        let p_cam = pose.transform(p_obj);
        if p_cam.z < 0.05 {
            return false;
        }
        let Some(px) = project(&p_cam, &self.intrinsics) else {
            return false;
        };
        let margin = 2.0;
        if px.x < margin
            || px.y < margin
            || px.x >= (self.intrinsics.width as f64 - margin)
            || px.y >= (self.intrinsics.height as f64 - margin)
        {
            return false;
        }
        let cam_in_obj = pose.inverse().translation;
        if n_obj.dot(&(cam_in_obj - p_obj)) <= 1e-6 {
            return false;
        }
        if let Some(table) = self.table {
            let denom = table.normal.dot(&p_cam);
            if denom.abs() > 1e-12 {
                let s = table.normal.dot(&table.point) / denom;
                if s > 0.0 && s < 1.0 - 1e-9 && (p_cam * s - table.point).norm() <= table.radius {
                    return false;
                }
            }
        }
        true
    }

    /// Exact co-visible correspondences between two frames, with an optional
    /// fraction of matches rewired to wrong partners. Returns keypoints in
    /// both camera frames plus the match set; fewer than `n` co-visible
    /// samples simply yields a shorter set.
    pub fn ground_truth_correspondences(
        &self,
        t1: usize,
        t2: usize,
        n: usize,
        outlier_frac: f64,
        seed: u64,
    ) -> (Vec<Keypoint>, Vec<Keypoint>, MatchSet) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples = self.surface_sample_set();
        let visible: Vec<usize> = (0..samples.len())
            .filter(|&i| {
                self.visible(&samples[i].0, &samples[i].1, t1)
                    && self.visible(&samples[i].0, &samples[i].1, t2)
            })
            .take(n)
            .collect();
        let make_kp = |idx: usize, t: usize| -> Keypoint {
            let (p_obj, n_obj) = samples[idx];
            let pose = &self.trajectory[t];
            let p_cam = pose.transform(&p_obj);
            Keypoint {
                pixel: project(&p_cam, &self.intrinsics).expect("visible"),
                point: p_cam,
                normal: pose.rotate(&n_obj),
                descriptor: [0.0; DESCRIPTOR_LEN],
            }
        };
        let kps_a: Vec<Keypoint> = visible.iter().map(|&i| make_kp(i, t1)).collect();
        let kps_b: Vec<Keypoint> = visible.iter().map(|&i| make_kp(i, t2)).collect();
        let mut pairs: Vec<(usize, usize)> = (0..visible.len()).map(|i| (i, i)).collect();
        if outlier_frac > 0.0 && visible.len() > 1 {
            for i in 0..pairs.len() {
                if rng.random::<f64>() < outlier_frac {
                    // A rewired partner must be genuinely wrong: far enough
                    // from the true correspondence that no pose gate can
                    // accidentally accept it.
                    let mut wrong = i;
                    let mut farthest = (i, 0.0f64);
                    for _ in 0..32 {
                        let cand = rng.random_range(0..visible.len());
                        if cand == i {
                            continue;
                        }
                        let d = (kps_b[cand].point - kps_b[i].point).norm();
                        if d > farthest.1 {
                            farthest = (cand, d);
                        }
                        if d >= OUTLIER_MIN_OFFSET {
                            wrong = cand;
                            break;
                        }
                    }
                    if wrong == i {
                        wrong = farthest.0;
                    }
                    if wrong != i {
                        pairs[i].1 = wrong;
                    }
                }
            }
        }
        let scores = vec![0.0; pairs.len()];
        (kps_a, kps_b, MatchSet { pairs, scores })
    }
}

/// Keypoint provider backed by the scene's ground truth.
///
/// Every global surface sample owns one random unit descriptor shared across
/// frames, so descriptor matching recovers the true correspondence.
/// A seeded per-frame subset of keypoints has its geometry swapped to a
/// different visible surface location while keeping its descriptor; those
/// keypoints become outlier matches against every other frame.
pub struct SyntheticKeypointProvider {
    scene: Arc<SyntheticScene>,
    samples: Vec<(Vec3, Vec3)>,
    descriptors: Vec<[f32; DESCRIPTOR_LEN]>,
}

impl SyntheticKeypointProvider {
    pub fn new(scene: Arc<SyntheticScene>) -> Self {
        let samples = scene.surface_sample_set();
        let mut rng =
            ChaCha8Rng::seed_from_u64(mix_seed(scene.seed, SEED_TAG_DESCRIPTORS, 0));
        let descriptors = (0..samples.len())
            .map(|_| {
                let mut d = [0.0f32; DESCRIPTOR_LEN];
                let mut norm = 0.0f32;
                for value in d.iter_mut() {
                    *value = rng.random::<f32>() - 0.5;
                    norm += *value * *value;
                }
                let norm = norm.sqrt();
                for value in d.iter_mut() {
                    *value /= norm;
                }
                d
            })
            .collect();
        Self {
            scene,
            samples,
            descriptors,
        }
    }
}

impl KeypointProvider for SyntheticKeypointProvider {
    fn detect(&self, frame: &Frame, target_n: usize) -> Result<Vec<Keypoint>, String> {
        let t = frame.id as usize;
        if t >= self.scene.len() {
            return Err(format!("frame {t} beyond trajectory"));
        }
        let visible: Vec<usize> = (0..self.samples.len())
            .filter(|&i| self.scene.visible(&self.samples[i].0, &self.samples[i].1, t))
            .collect();
        let mut rng =
            ChaCha8Rng::seed_from_u64(mix_seed(self.scene.seed, SEED_TAG_OUTLIERS, t as u64));
        let mut out = Vec::new();
        for &i in &visible {
            if out.len() >= target_n {
                break;
            }
            // Outlier injection: keep the descriptor, take the geometry of a
            // different (far enough) visible sample.
            let geom_idx = if rng.random::<f64>() < self.scene.outlier_fraction
                && visible.len() > 1
            {
                let mut wrong = i;
                let mut farthest = (i, 0.0f64);
                for _ in 0..32 {
                    let cand = visible[rng.random_range(0..visible.len())];
                    if cand == i {
                        continue;
                    }
                    let d = (self.samples[cand].0 - self.samples[i].0).norm();
                    if d > farthest.1 {
                        farthest = (cand, d);
                    }
                    if d >= OUTLIER_MIN_OFFSET {
                        wrong = cand;
                        break;
                    }
                }
                if wrong == i {
                    farthest.0
                } else {
                    wrong
                }
            } else {
                i
            };
            let p_cam = self.scene.trajectory[t].transform(&self.samples[geom_idx].0);
            let Some(px) = project(&p_cam, &self.scene.intrinsics) else {
                continue;
            };
            let (u, v) = (px.x.round() as usize, px.y.round() as usize);
            // Ground the keypoint in the frame's own (noisy) observations.
            let Some(point) = frame.point_at(u, v) else {
                continue;
            };
            let Some(normal) = frame.normal_at(u, v) else {
                continue;
            };
            out.push(Keypoint {
                pixel: Vec2::new(u as f64, v as f64),
                point,
                normal,
                descriptor: self.descriptors[i],
            });
        }
        Ok(out)
    }
}

fn default_intrinsics() -> Intrinsics {
    Intrinsics::new(525.0, 525.0, 319.5, 239.5, 640, 480)
}

fn default_box() -> Surface {
    Surface::Box {
        half_extents: Vec3::new(0.07, 0.05, 0.04),
    }
}

const BENCHMARK_SEED: u64 = 0x0B5E55ED;
/// Benchmarks carry 2 mm depth noise and 20% injected outlier matches.
const BENCHMARK_DEPTH_SIGMA: f64 = 0.002;
const BENCHMARK_OUTLIER_FRACTION: f64 = 0.2;

fn scene_defaults(name: &str, trajectory: Vec<Pose>) -> SyntheticScene {
    SyntheticScene {
        name: name.to_string(),
        surface: default_box(),
        trajectory,
        intrinsics: default_intrinsics(),
        table: None,
        depth_sigma: BENCHMARK_DEPTH_SIGMA,
        outlier_fraction: BENCHMARK_OUTLIER_FRACTION,
        init_offset: Vec3::zeros(),
        seed: BENCHMARK_SEED,
        texture_cell: 0.009,
        surface_samples: 1500,
    }
}

/// Camera circles a static object: 100 frames, 2 degrees per frame, fixed
/// distance.
pub fn orbit_scene() -> SyntheticScene {
    let trajectory = (0..100)
        .map(|t| {
            let spin = exp_map(&Twist::new(
                Vec3::zeros(),
                Vec3::new(0.0, (2.0 * t as f64).to_radians(), 0.0),
            ));
            Pose::new(spin.rotation, Vec3::new(0.0, 0.0, 0.9))
        })
        .collect();
    scene_defaults("orbit", trajectory)
}

/// Static camera, manipulated object: rotates 2 degrees and translates 2 mm
/// per frame.
pub fn manipulate_scene() -> SyntheticScene {
    let axis = Vec3::new(0.25, 1.0, 0.35).normalize();
    let step = Vec3::new(1.0, 0.4, -0.3).normalize() * 0.002;
    let start = Vec3::new(-0.06, -0.03, 0.85);
    let trajectory = (0..100)
        .map(|t| {
            let spin = exp_map(&Twist::new(
                Vec3::zeros(),
                axis * (2.0 * t as f64).to_radians(),
            ));
            Pose::new(spin.rotation, start + step * t as f64)
        })
        .collect();
    scene_defaults("manipulate", trajectory)
}

/// Orbit with 15% of the frames removed (uniformly, seeded; frame 0 kept).
pub fn dropped_scene() -> SyntheticScene {
    let orbit = orbit_scene();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(BENCHMARK_SEED, SEED_TAG_DROP, 0));
    let mut removable: Vec<usize> = (1..orbit.trajectory.len()).collect();
    // Seeded uniform choice of 15 distinct frames to drop.
    let mut dropped = Vec::new();
    for _ in 0..15 {
        let pick = rng.random_range(0..removable.len());
        dropped.push(removable.swap_remove(pick));
    }
    let trajectory: Vec<Pose> = orbit
        .trajectory
        .iter()
        .enumerate()
        .filter(|(i, _)| !dropped.contains(i))
        .map(|(_, p)| *p)
        .collect();
    SyntheticScene {
        name: "dropped".to_string(),
        trajectory,
        ..orbit
    }
}

/// Orbit with the initial pose offset by a random translation of up to 4 cm.
pub fn perturbed_scene() -> SyntheticScene {
    let orbit = orbit_scene();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(BENCHMARK_SEED, SEED_TAG_PERTURB, 0));
    // Uniform in the 4 cm ball, by rejection.
    let offset = loop {
        let v = Vec3::new(
            rng.random::<f64>() * 2.0 - 1.0,
            rng.random::<f64>() * 2.0 - 1.0,
            rng.random::<f64>() * 2.0 - 1.0,
        ) * 0.04;
        if v.norm() <= 0.04 {
            break v;
        }
    };
    SyntheticScene {
        name: "perturbed".to_string(),
        init_offset: offset,
        ..orbit
    }
}

/// The fixed-seed benchmark suite.
pub fn standard_benchmarks() -> Vec<SyntheticScene> {
    vec![
        orbit_scene(),
        manipulate_scene(),
        dropped_scene(),
        perturbed_scene(),
    ]
}

/// Reduced-scale orbit: 320x240 at 2 degrees per frame, sized for unit and
/// integration tests that cannot afford full-resolution rendering.
pub fn small_orbit_scene(
    frames: usize,
    depth_sigma: f64,
    outlier_fraction: f64,
) -> SyntheticScene {
    let trajectory = (0..frames)
        .map(|t| {
            let spin = exp_map(&Twist::new(
                Vec3::zeros(),
                Vec3::new(0.0, (2.0 * t as f64).to_radians(), 0.0),
            ));
            Pose::new(spin.rotation, Vec3::new(0.0, 0.0, 0.9))
        })
        .collect();
    let mut scene = scene_defaults("small-orbit", trajectory);
    scene.intrinsics = Intrinsics::new(280.0, 280.0, 159.5, 119.5, 320, 240);
    scene.depth_sigma = depth_sigma;
    scene.outlier_fraction = outlier_fraction;
    scene.surface_samples = 900;
    scene
}

/// Static object, static camera: every frame identical. Pixel rounding then
/// cancels across frames, making synthetic correspondences exactly
/// consistent.
pub fn small_static_scene(frames: usize) -> SyntheticScene {
    let pose = Pose::new(crate::se3::Mat3::identity(), Vec3::new(0.0, 0.0, 0.9));
    let mut scene = scene_defaults("small-static", vec![pose; frames]);
    scene.intrinsics = Intrinsics::new(280.0, 280.0, 159.5, 119.5, 320, 240);
    scene.depth_sigma = 0.0;
    scene.outlier_fraction = 0.0;
    scene.surface_samples = 900;
    scene
}

pub fn scene_by_name(name: &str) -> Option<SyntheticScene> {
    match name {
        "orbit" => Some(orbit_scene()),
        "manipulate" => Some(manipulate_scene()),
        "dropped" => Some(dropped_scene()),
        "perturbed" => Some(perturbed_scene()),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{ransac_register, RansacParams};
    use crate::se3::rotation_geodesic;
    use approx::assert_relative_eq;

    fn small_box_scene() -> SyntheticScene {
        let mut scene = scene_defaults(
            "test",
            vec![
                Pose::new(crate::se3::Mat3::identity(), Vec3::new(0.0, 0.0, 1.0)),
                Pose::new(
                    exp_map(&Twist::new(
                        Vec3::zeros(),
                        Vec3::new(0.0, 10.0f64.to_radians(), 0.0),
                    ))
                    .rotation,
                    Vec3::new(0.0, 0.0, 1.0),
                ),
            ],
        );
        scene.intrinsics = Intrinsics::new(300.0, 300.0, 159.5, 119.5, 320, 240);
        scene.depth_sigma = 0.0;
        scene.outlier_fraction = 0.0;
        scene
    }

    #[test]
    fn box_center_pixel_depth_is_front_face() {
        let scene = small_box_scene();
        let rendered = scene.render(0).unwrap();
        assert!(rendered.mask.count_ones() > 100);
        // Optical axis hits the front face of the box at z = 1 - 0.04.
        let center = rendered.depth.at(160, 120);
        assert_relative_eq!(center, 1.0 - 0.04, epsilon = 1e-12);
        assert!(rendered.mask.at(160, 120));
    }

    #[test]
    fn render_is_deterministic() {
        let mut scene = small_box_scene();
        scene.depth_sigma = 0.002;
        let a = scene.render(0).unwrap();
        let b = scene.render(0).unwrap();
        assert_eq!(a.depth.values, b.depth.values);
        assert_eq!(a.mask.values, b.mask.values);
        assert_eq!(a.color, b.color);
    }

    #[test]
    fn render_rejects_out_of_trajectory() {
        let scene = small_box_scene();
        assert!(matches!(
            scene.render(5),
            Err(RenderError::OutOfTrajectory(5))
        ));
    }

    #[test]
    fn render_rejects_object_outside_frustum() {
        let mut scene = small_box_scene();
        scene.trajectory = vec![Pose::new(
            crate::se3::Mat3::identity(),
            Vec3::new(5.0, 0.0, 1.0),
        )];
        assert!(matches!(
            scene.render(0),
            Err(RenderError::OutsideFrustum(0))
        ));
    }

    #[test]
    fn rendered_depth_lies_on_the_surface() {
        // Independent oracle: unprojected mask pixels must satisfy the
        // sphere's implicit equation.
        let mut scene = small_box_scene();
        scene.surface = Surface::Sphere { radius: 0.06 };
        let rendered = scene.render(0).unwrap();
        let cam_in_obj = rendered.gt_pose.inverse();
        let k = scene.intrinsics;
        let mut checked = 0;
        for v in 0..k.height {
            for u in 0..k.width {
                if !rendered.mask.at(u, v) {
                    continue;
                }
                let p =
                    crate::se3::unproject(u as f64, v as f64, rendered.depth.at(u, v), &k)
                        .unwrap();
                let p_obj = cam_in_obj.transform(&p);
                assert!(scene.surface.surface_error(&p_obj) < 1e-9);
                checked += 1;
            }
        }
        assert!(checked > 500);
    }

    #[test]
    fn cylinder_ray_cast_on_surface() {
        let mut scene = small_box_scene();
        scene.surface = Surface::Cylinder {
            radius: 0.05,
            half_height: 0.07,
        };
        let rendered = scene.render(1).unwrap();
        let cam_in_obj = rendered.gt_pose.inverse();
        let k = scene.intrinsics;
        for v in (0..k.height).step_by(7) {
            for u in (0..k.width).step_by(7) {
                if !rendered.mask.at(u, v) {
                    continue;
                }
                let p =
                    crate::se3::unproject(u as f64, v as f64, rendered.depth.at(u, v), &k)
                        .unwrap();
                let p_obj = cam_in_obj.transform(&p);
                assert!(scene.surface.surface_error(&p_obj) < 1e-9);
            }
        }
    }

    #[test]
    fn gt_correspondences_register_exactly() {
        let scene = small_box_scene();
        let (kps_a, kps_b, matches) = scene.ground_truth_correspondences(0, 1, 200, 0.0, 5);
        assert!(matches.len() > 50);
        let reg = ransac_register(&matches, &kps_a, &kps_b, &RansacParams::default()).unwrap();
        // True relative camera motion for object points: T_1 T_0^-1.
        let truth = scene.trajectory[1].compose(&scene.trajectory[0].inverse());
        assert!(rotation_geodesic(&reg.relative_pose.rotation, &truth.rotation) < 1e-6);
        assert!((reg.relative_pose.translation - truth.translation).norm() < 1e-6);
    }

    #[test]
    fn gt_correspondences_all_outliers_fail_registration() {
        let scene = small_box_scene();
        let (kps_a, kps_b, matches) = scene.ground_truth_correspondences(0, 1, 200, 1.0, 6);
        assert!(ransac_register(&matches, &kps_a, &kps_b, &RansacParams::default()).is_err());
    }

    #[test]
    fn gt_correspondences_empty_request() {
        let scene = small_box_scene();
        let (kps_a, kps_b, matches) = scene.ground_truth_correspondences(0, 1, 0, 0.0, 7);
        assert!(kps_a.is_empty() && kps_b.is_empty() && matches.is_empty());
    }

    #[test]
    fn gt_correspondences_reproject_exactly() {
        let scene = small_box_scene();
        let (kps_a, kps_b, matches) = scene.ground_truth_correspondences(0, 1, 150, 0.0, 8);
        let relative = scene.trajectory[1].compose(&scene.trajectory[0].inverse());
        for &(i, j) in &matches.pairs {
            let mapped = relative.transform(&kps_a[i].point);
            assert!((mapped - kps_b[j].point).norm() < 1e-9);
        }
    }

    #[test]
    fn synthetic_provider_is_deterministic_and_masked() {
        let mut scene = small_box_scene();
        scene.depth_sigma = 0.002;
        scene.outlier_fraction = 0.2;
        let scene = Arc::new(scene);
        let provider = SyntheticKeypointProvider::new(scene.clone());
        let (frame, _) = scene.ingest(0).unwrap();
        let a = provider.detect(&frame, 500).unwrap();
        let b = provider.detect(&frame, 500).unwrap();
        assert!(!a.is_empty());
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.pixel, y.pixel);
            assert_eq!(x.descriptor, y.descriptor);
            assert!(frame.mask.at(x.pixel.x as usize, x.pixel.y as usize));
        }
    }

    #[test]
    fn benchmark_shapes() {
        let orbit = orbit_scene();
        assert_eq!(orbit.len(), 100);
        let per_frame = rotation_geodesic(
            &orbit.trajectory[0].rotation,
            &orbit.trajectory[1].rotation,
        );
        assert_relative_eq!(per_frame, 2.0f64.to_radians(), epsilon = 1e-12);

        let dropped = dropped_scene();
        assert_eq!(dropped.len(), 85);

        let perturbed = perturbed_scene();
        assert!(perturbed.init_offset.norm() <= 0.04);
        assert!(perturbed.init_offset.norm() > 0.0);

        assert_eq!(manipulate_scene().len(), 100);
        assert_eq!(standard_benchmarks().len(), 4);
    }

    #[test]
    fn scene_lookup_by_name() {
        assert!(scene_by_name("orbit").is_some());
        assert!(scene_by_name("nonsense").is_none());
    }
}
