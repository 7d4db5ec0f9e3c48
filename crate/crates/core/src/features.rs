//! Keypoint matching and robust pairwise registration.
//!
//! Matching is mutual nearest neighbor in descriptor space with a 0.8 ratio
//! test. Registration samples 3-pair hypotheses, solves each in closed form
//! (Kabsch), gates inliers on point distance and normal agreement, and refits
//! on the winning consensus set.

use crate::frame::Frame;
use crate::se3::{Pose, Vec2, Vec3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::path::Path;
use thiserror::Error;

pub const DESCRIPTOR_LEN: usize = 128;

/// Lowe ratio applied to mutual nearest-neighbor matches.
pub const MATCH_RATIO: f32 = 0.8;

/// Hypotheses evaluated per parallel batch before the early-exit check.
const RANSAC_BATCH: usize = 256;

#[derive(Debug, Error)]
pub enum RegistrationError {
    #[error("need at least 3 matches, got {0}")]
    TooFewMatches(usize),
    #[error("degenerate sample: points coincident or collinear")]
    DegenerateSample,
    #[error("no consensus: best hypothesis had {0} inliers")]
    NoConsensus(usize),
}

#[derive(Debug, Error)]
pub enum KeypointFileError {
    #[error("read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}:{line}: expected `u v` plus {DESCRIPTOR_LEN} descriptor values")]
    Malformed { path: String, line: usize },
}

/// A detected keypoint with its back-projected 3D point, surface normal and
/// 128-d descriptor.
#[derive(Debug, Clone)]
pub struct Keypoint {
    pub pixel: Vec2,
    pub point: Vec3,
    pub normal: Vec3,
    pub descriptor: [f32; DESCRIPTOR_LEN],
}

/// Index pairs between two keypoint lists plus their descriptor distances.
/// Mutual nearest-neighbor construction guarantees no index repeats on
/// either side.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchSet {
    pub pairs: Vec<(usize, usize)>,
    pub scores: Vec<f32>,
}

impl MatchSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// The same matches viewed from the other side.
    pub fn flipped(&self) -> MatchSet {
        MatchSet {
            pairs: self.pairs.iter().map(|&(a, b)| (b, a)).collect(),
            scores: self.scores.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RegistrationResult {
    /// Maps frame-a camera points onto frame-b camera points:
    /// `p_b = relative_pose * p_a`.
    pub relative_pose: Pose,
    pub inliers: MatchSet,
    pub inlier_count: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct RansacParams {
    /// Inlier gate on point pair distance, meters.
    pub delta: f64,
    /// Inlier gate on the angle between transformed normals, radians.
    pub alpha: f64,
    pub iterations: usize,
    /// Smallest consensus accepted as a registration; never below 3.
    /// Dense surface point sets let a few hundred wrong pairs produce 5-10
    /// accidentally consistent inliers under some pose across 2000
    /// hypotheses, so the default stays clear of that tail.
    pub min_inliers: usize,
    pub seed: u64,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self {
            delta: 0.005,
            alpha: 45.0f64.to_radians(),
            iterations: 2000,
            min_inliers: 12,
            seed: 0,
        }
    }
}

fn distance_sq(a: &[f32; DESCRIPTOR_LEN], b: &[f32; DESCRIPTOR_LEN]) -> f32 {
    let mut acc = 0.0f32;
    for k in 0..DESCRIPTOR_LEN {
        let d = a[k] - b[k];
        acc += d * d;
    }
    acc
}

/// Mutual nearest neighbors in descriptor space, filtered by the Lowe ratio
/// test. Pairs come out sorted by the first index.
pub fn match_descriptors(a: &[Keypoint], b: &[Keypoint]) -> MatchSet {
    if a.is_empty() || b.is_empty() {
        return MatchSet::default();
    }
    // Forward pass: nearest and second nearest in b for every a.
    let forward: Vec<(usize, f32, f32)> = a
        .par_iter()
        .map(|ka| {
            let mut best = (0usize, f32::INFINITY);
            let mut second = f32::INFINITY;
            for (j, kb) in b.iter().enumerate() {
                let d = distance_sq(&ka.descriptor, &kb.descriptor);
                if d < best.1 {
                    second = best.1;
                    best = (j, d);
                } else if d < second {
                    second = d;
                }
            }
            (best.0, best.1, second)
        })
        .collect();
    // Backward pass: nearest in a for every b.
    let backward: Vec<usize> = b
        .par_iter()
        .map(|kb| {
            let mut best = (0usize, f32::INFINITY);
            for (i, ka) in a.iter().enumerate() {
                let d = distance_sq(&ka.descriptor, &kb.descriptor);
                if d < best.1 {
                    best = (i, d);
                }
            }
            best.0
        })
        .collect();

    let ratio_sq = MATCH_RATIO * MATCH_RATIO;
    let mut out = MatchSet::default();
    for (i, &(j, d1, d2)) in forward.iter().enumerate() {
        if backward[j] == i && d1 <= ratio_sq * d2 {
            out.pairs.push((i, j));
            out.scores.push(d1.sqrt());
        }
    }
    out
}

/// Closed-form rigid transform minimizing `Σ ‖T p_a - p_b‖²` over the given
/// point pairs: centroid subtraction, SVD of the cross-covariance, reflection
/// corrected through the determinant sign.
pub fn rigid_least_squares(pairs: &[(Vec3, Vec3)]) -> Result<Pose, RegistrationError> {
    if pairs.len() < 3 {
        return Err(RegistrationError::TooFewMatches(pairs.len()));
    }
    let n = pairs.len() as f64;
    let centroid_a = pairs.iter().map(|(a, _)| a).sum::<Vec3>() / n;
    let centroid_b = pairs.iter().map(|(_, b)| b).sum::<Vec3>() / n;
    let mut h = crate::se3::Mat3::zeros();
    for (a, b) in pairs {
        h += (a - centroid_a) * (b - centroid_b).transpose();
    }
    let svd = h.svd(true, true);
    let s = svd.singular_values;
    // Rotation is undetermined when the pairs span less than a plane.
    if s[1] <= 1e-12 * s[0].max(1.0) {
        return Err(RegistrationError::DegenerateSample);
    }
    let u = svd.u.expect("svd with u");
    let v_t = svd.v_t.expect("svd with v_t");
    let d = (v_t.transpose() * u.transpose()).determinant();
    let correction = crate::se3::Mat3::from_diagonal(&Vec3::new(1.0, 1.0, d.signum()));
    let rotation = v_t.transpose() * correction * u.transpose();
    let translation = centroid_b - rotation * centroid_a;
    Ok(Pose::new(rotation, translation))
}

struct MatchGeometry {
    pa: Vec<Vec3>,
    pb: Vec<Vec3>,
    na: Vec<Vec3>,
    nb: Vec<Vec3>,
}

impl MatchGeometry {
    fn gather(matches: &MatchSet, kps_a: &[Keypoint], kps_b: &[Keypoint]) -> Self {
        let mut g = MatchGeometry {
            pa: Vec::with_capacity(matches.len()),
            pb: Vec::with_capacity(matches.len()),
            na: Vec::with_capacity(matches.len()),
            nb: Vec::with_capacity(matches.len()),
        };
        for &(i, j) in &matches.pairs {
            g.pa.push(kps_a[i].point);
            g.pb.push(kps_b[j].point);
            g.na.push(kps_a[i].normal);
            g.nb.push(kps_b[j].normal);
        }
        g
    }

    /// Inlier flags plus distance sum under a candidate transform.
    fn score(&self, pose: &Pose, delta: f64, cos_alpha: f64) -> (usize, f64) {
        let mut count = 0usize;
        let mut dist_sum = 0.0f64;
        for m in 0..self.pa.len() {
            let d = (pose.transform(&self.pa[m]) - self.pb[m]).norm();
            if d <= delta && pose.rotate(&self.na[m]).dot(&self.nb[m]) >= cos_alpha {
                count += 1;
                dist_sum += d;
            }
        }
        (count, dist_sum)
    }

    fn inlier_indices(&self, pose: &Pose, delta: f64, cos_alpha: f64) -> Vec<usize> {
        (0..self.pa.len())
            .filter(|&m| {
                (pose.transform(&self.pa[m]) - self.pb[m]).norm() <= delta
                    && pose.rotate(&self.na[m]).dot(&self.nb[m]) >= cos_alpha
            })
            .collect()
    }
}

/// Seeded RANSAC over 3-pair samples with distance and normal-angle inlier
/// gates. Ties between equal-count hypotheses go to the lower mean inlier
/// distance; the winning pose is refit on all of its inliers and the reported
/// inlier set is re-gated under the refit pose.
pub fn ransac_register(
    matches: &MatchSet,
    kps_a: &[Keypoint],
    kps_b: &[Keypoint],
    params: &RansacParams,
) -> Result<RegistrationResult, RegistrationError> {
    let n = matches.len();
    if n < 3 {
        return Err(RegistrationError::TooFewMatches(n));
    }
    let geom = MatchGeometry::gather(matches, kps_a, kps_b);
    let cos_alpha = params.alpha.cos();

    // Draw every sample up front so the RNG stream is independent of the
    // parallel evaluation order.
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let samples: Vec<[usize; 3]> = (0..params.iterations)
        .map(|_| {
            let i = rng.random_range(0..n);
            let mut j = rng.random_range(0..n);
            while j == i {
                j = rng.random_range(0..n);
            }
            let mut k = rng.random_range(0..n);
            while k == i || k == j {
                k = rng.random_range(0..n);
            }
            [i, j, k]
        })
        .collect();

    // best = (inlier count, mean inlier distance, hypothesis index, pose)
    let mut best: Option<(usize, f64, usize, Pose)> = None;
    for (batch_idx, batch) in samples.chunks(RANSAC_BATCH).enumerate() {
        let evaluated: Vec<Option<(usize, f64, Pose)>> = batch
            .par_iter()
            .map(|&[i, j, k]| {
                let triple = [
                    (geom.pa[i], geom.pb[i]),
                    (geom.pa[j], geom.pb[j]),
                    (geom.pa[k], geom.pb[k]),
                ];
                let pose = rigid_least_squares(&triple).ok()?;
                let (count, dist_sum) = geom.score(&pose, params.delta, cos_alpha);
                Some((count, dist_sum, pose))
            })
            .collect();
        for (offset, eval) in evaluated.into_iter().enumerate() {
            let Some((count, dist_sum, pose)) = eval else {
                continue;
            };
            if count == 0 {
                continue;
            }
            let mean = dist_sum / count as f64;
            let idx = batch_idx * RANSAC_BATCH + offset;
            let better = match best {
                None => true,
                Some((bc, bm, _, _)) => count > bc || (count == bc && mean < bm),
            };
            if better {
                best = Some((count, mean, idx, pose));
            }
        }
        if let Some(&(count, _, _, _)) = best.as_ref() {
            if count as f64 > 0.9 * n as f64 {
                break;
            }
        }
    }

    let min_consensus = params.min_inliers.max(3);
    let Some((best_count, _, _, best_pose)) = best else {
        return Err(RegistrationError::NoConsensus(0));
    };
    if best_count < min_consensus {
        return Err(RegistrationError::NoConsensus(best_count));
    }

    // Iterated refit with an annealed gate. A 3-point hypothesis is noisy,
    // and re-gating at the tight threshold keeps only matches agreeing with
    // that crooked pose; starting wide pulls in the full consensus before
    // tightening back to the reported gate.
    let mut final_pose = best_pose;
    for factor in [3.0, 2.0, 1.0, 1.0] {
        let selected = geom.inlier_indices(&final_pose, factor * params.delta, cos_alpha);
        if selected.len() < 3 {
            break;
        }
        let refit_pairs: Vec<(Vec3, Vec3)> = selected
            .iter()
            .map(|&m| (geom.pa[m], geom.pb[m]))
            .collect();
        let Ok(refit) = rigid_least_squares(&refit_pairs) else {
            break;
        };
        final_pose = refit;
    }
    let final_inliers = geom.inlier_indices(&final_pose, params.delta, cos_alpha);
    if final_inliers.len() < min_consensus {
        return Err(RegistrationError::NoConsensus(final_inliers.len()));
    }
    let inliers = MatchSet {
        pairs: final_inliers.iter().map(|&m| matches.pairs[m]).collect(),
        scores: final_inliers.iter().map(|&m| matches.scores[m]).collect(),
    };
    let inlier_count = inliers.len();
    Ok(RegistrationResult {
        relative_pose: final_pose,
        inliers,
        inlier_count,
    })
}

/// Coarse pose for the current frame: the registration maps previous-frame
/// camera points onto current-frame camera points, so the object-to-camera
/// pose composes on the left.
pub fn coarse_pose(prev_pose: &Pose, reg: &RegistrationResult) -> Pose {
    reg.relative_pose.compose(prev_pose)
}

/// A source of keypoints for ingested frames.
pub trait KeypointProvider: Send + Sync {
    fn detect(&self, frame: &Frame, target_n: usize) -> Result<Vec<Keypoint>, String>;
}

/// Parse a precomputed keypoint file: one keypoint per line as
/// `u v d_1 ... d_128`, whitespace separated.
pub fn load_keypoint_file(
    path: &Path,
) -> Result<Vec<(f64, f64, [f32; DESCRIPTOR_LEN])>, KeypointFileError> {
    let text = std::fs::read_to_string(path).map_err(|source| KeypointFileError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let malformed = || KeypointFileError::Malformed {
            path: path.display().to_string(),
            line: idx + 1,
        };
        if fields.len() != 2 + DESCRIPTOR_LEN {
            return Err(malformed());
        }
        let u: f64 = fields[0].parse().map_err(|_| malformed())?;
        let v: f64 = fields[1].parse().map_err(|_| malformed())?;
        let mut descriptor = [0.0f32; DESCRIPTOR_LEN];
        for (k, field) in fields[2..].iter().enumerate() {
            descriptor[k] = field.parse().map_err(|_| malformed())?;
        }
        out.push((u, v, descriptor));
    }
    Ok(out)
}

/// Loads `keypoints_%06d.txt` files written by an external detector and
/// grounds them in the frame's depth and normals. Entries whose pixel lacks
/// valid depth or a normal are dropped.
pub struct FileKeypointProvider {
    pub dir: std::path::PathBuf,
}

impl KeypointProvider for FileKeypointProvider {
    fn detect(&self, frame: &Frame, target_n: usize) -> Result<Vec<Keypoint>, String> {
        let path = self.dir.join(format!("keypoints_{:06}.txt", frame.id));
        let rows = load_keypoint_file(&path).map_err(|e| e.to_string())?;
        let mut out = Vec::new();
        for (u, v, descriptor) in rows {
            if out.len() >= target_n {
                break;
            }
            let (ui, vi) = (u.round() as usize, v.round() as usize);
            let Some(point) = frame.point_at(ui, vi) else {
                continue;
            };
            let Some(normal) = frame.normal_at(ui, vi) else {
                continue;
            };
            out.push(Keypoint {
                pixel: Vec2::new(u, v),
                point,
                normal,
                descriptor,
            });
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::se3::{exp_map, rotation_geodesic, Mat3, Twist};
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn kp(point: Vec3, normal: Vec3, descriptor: [f32; DESCRIPTOR_LEN]) -> Keypoint {
        Keypoint {
            pixel: Vec2::zeros(),
            point,
            normal,
            descriptor,
        }
    }

    fn random_unit(rng: &mut ChaCha8Rng) -> Vec3 {
        loop {
            let v = Vec3::new(
                rng.random::<f64>() * 2.0 - 1.0,
                rng.random::<f64>() * 2.0 - 1.0,
                rng.random::<f64>() * 2.0 - 1.0,
            );
            if v.norm() > 1e-3 {
                return v.normalize();
            }
        }
    }

    fn random_descriptor(rng: &mut ChaCha8Rng) -> [f32; DESCRIPTOR_LEN] {
        let mut d = [0.0f32; DESCRIPTOR_LEN];
        for value in d.iter_mut() {
            *value = rng.random::<f32>();
        }
        let norm = d.iter().map(|x| x * x).sum::<f32>().sqrt();
        for value in d.iter_mut() {
            *value /= norm;
        }
        d
    }

    fn random_pose(rng: &mut ChaCha8Rng, max_angle: f64, max_trans: f64) -> Pose {
        let axis = random_unit(rng);
        let angle = rng.random::<f64>() * max_angle;
        let t = random_unit(rng) * rng.random::<f64>() * max_trans;
        exp_map(&Twist::new(Vec3::zeros(), axis * angle)).compose(&Pose::new(Mat3::identity(), t))
    }

    #[test]
    fn match_identical_sets_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let kps: Vec<Keypoint> = (0..50)
            .map(|_| kp(Vec3::zeros(), Vec3::z(), random_descriptor(&mut rng)))
            .collect();
        let m = match_descriptors(&kps, &kps);
        assert_eq!(m.len(), 50);
        for (idx, &(i, j)) in m.pairs.iter().enumerate() {
            assert_eq!(i, idx);
            assert_eq!(j, idx);
            assert_eq!(m.scores[idx], 0.0);
        }
    }

    #[test]
    fn match_empty_inputs() {
        assert!(match_descriptors(&[], &[]).is_empty());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let kps = vec![kp(Vec3::zeros(), Vec3::z(), random_descriptor(&mut rng))];
        assert!(match_descriptors(&kps, &[]).is_empty());
        assert!(match_descriptors(&[], &kps).is_empty());
    }

    #[test]
    fn match_recovers_permutation_under_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let base: Vec<[f32; DESCRIPTOR_LEN]> =
            (0..80).map(|_| random_descriptor(&mut rng)).collect();
        let a: Vec<Keypoint> = base
            .iter()
            .map(|d| kp(Vec3::zeros(), Vec3::z(), *d))
            .collect();
        // Shuffled copy with small descriptor noise.
        let mut order: Vec<usize> = (0..80).collect();
        order.shuffle(&mut rng);
        let b: Vec<Keypoint> = order
            .iter()
            .map(|&src| {
                let mut d = base[src];
                for value in d.iter_mut() {
                    *value += (rng.random::<f32>() - 0.5) * 0.02;
                }
                kp(Vec3::zeros(), Vec3::z(), d)
            })
            .collect();
        let m = match_descriptors(&a, &b);
        assert_eq!(m.len(), 80);
        for &(i, j) in &m.pairs {
            assert_eq!(order[j], i);
        }
    }

    #[test]
    fn match_has_no_duplicate_indices() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a: Vec<Keypoint> = (0..60)
            .map(|_| kp(Vec3::zeros(), Vec3::z(), random_descriptor(&mut rng)))
            .collect();
        let b: Vec<Keypoint> = (0..45)
            .map(|_| kp(Vec3::zeros(), Vec3::z(), random_descriptor(&mut rng)))
            .collect();
        let m = match_descriptors(&a, &b);
        let mut left: Vec<usize> = m.pairs.iter().map(|p| p.0).collect();
        let mut right: Vec<usize> = m.pairs.iter().map(|p| p.1).collect();
        left.sort_unstable();
        right.sort_unstable();
        left.dedup();
        right.dedup();
        assert_eq!(left.len(), m.len());
        assert_eq!(right.len(), m.len());
    }

    #[test]
    fn rigid_ls_recovers_known_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for npts in [3usize, 10, 100] {
            let truth = random_pose(&mut rng, 2.0, 0.5);
            let pairs: Vec<(Vec3, Vec3)> = (0..npts)
                .map(|_| {
                    let p = Vec3::new(
                        rng.random::<f64>() - 0.5,
                        rng.random::<f64>() - 0.5,
                        rng.random::<f64>() - 0.5,
                    );
                    (p, truth.transform(&p))
                })
                .collect();
            let est = rigid_least_squares(&pairs).unwrap();
            assert!(rotation_geodesic(&est.rotation, &truth.rotation) < 1e-9);
            assert!((est.translation - truth.translation).norm() < 1e-9);
        }
    }

    #[test]
    fn rigid_ls_identity_on_identical_sets() {
        let pairs = vec![
            (Vec3::new(0.1, 0.0, 1.0), Vec3::new(0.1, 0.0, 1.0)),
            (Vec3::new(0.0, 0.2, 1.1), Vec3::new(0.0, 0.2, 1.1)),
            (Vec3::new(-0.1, 0.1, 0.9), Vec3::new(-0.1, 0.1, 0.9)),
        ];
        let est = rigid_least_squares(&pairs).unwrap();
        assert_relative_eq!(est.rotation, Mat3::identity(), epsilon = 1e-10);
        assert!(est.translation.norm() < 1e-10);
    }

    #[test]
    fn rigid_ls_rejects_collinear() {
        let pairs = vec![
            (Vec3::new(0.0, 0.0, 1.0), Vec3::new(0.0, 0.0, 1.0)),
            (Vec3::new(0.1, 0.0, 1.0), Vec3::new(0.1, 0.0, 1.0)),
            (Vec3::new(0.2, 0.0, 1.0), Vec3::new(0.2, 0.0, 1.0)),
        ];
        assert!(matches!(
            rigid_least_squares(&pairs),
            Err(RegistrationError::DegenerateSample)
        ));
    }

    #[test]
    fn rigid_ls_rejects_too_few() {
        let pairs = vec![(Vec3::zeros(), Vec3::zeros())];
        assert!(matches!(
            rigid_least_squares(&pairs),
            Err(RegistrationError::TooFewMatches(1))
        ));
    }

    /// Build a synthetic match problem with a known relative pose.
    fn synthetic_matches(
        rng: &mut ChaCha8Rng,
        n: usize,
        outlier_frac: f64,
        noise: f64,
    ) -> (Pose, MatchSet, Vec<Keypoint>, Vec<Keypoint>) {
        let truth = random_pose(rng, 1.0, 0.3);
        let mut kps_a = Vec::with_capacity(n);
        let mut kps_b = Vec::with_capacity(n);
        for _ in 0..n {
            let p = Vec3::new(
                rng.random::<f64>() * 0.2 - 0.1,
                rng.random::<f64>() * 0.2 - 0.1,
                rng.random::<f64>() * 0.2 + 0.9,
            );
            let normal = random_unit(rng);
            let noise_v = random_unit(rng) * rng.random::<f64>() * noise;
            kps_a.push(kp(p, normal, [0.0; DESCRIPTOR_LEN]));
            kps_b.push(kp(
                truth.transform(&p) + noise_v,
                truth.rotate(&normal),
                [0.0; DESCRIPTOR_LEN],
            ));
        }
        let n_out = (n as f64 * outlier_frac).round() as usize;
        let mut pairs: Vec<(usize, usize)> = (0..n).map(|i| (i, i)).collect();
        for item in pairs.iter_mut().take(n_out) {
            // Rewire to a random wrong partner with a random normal.
            let wrong = rng.random_range(0..n);
            item.1 = wrong;
        }
        let matches = MatchSet {
            scores: vec![0.0; pairs.len()],
            pairs,
        };
        (truth, matches, kps_a, kps_b)
    }

    #[test]
    fn ransac_noiseless_recovers_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (truth, matches, kps_a, kps_b) = synthetic_matches(&mut rng, 100, 0.0, 0.0);
        let reg = ransac_register(&matches, &kps_a, &kps_b, &RansacParams::default()).unwrap();
        assert_eq!(reg.inlier_count, 100);
        assert!(rotation_geodesic(&reg.relative_pose.rotation, &truth.rotation) < 1e-9);
        assert!((reg.relative_pose.translation - truth.translation).norm() < 1e-9);
    }

    #[test]
    fn ransac_with_outliers_and_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (truth, matches, kps_a, kps_b) = synthetic_matches(&mut rng, 500, 0.6, 0.001);
        let params = RansacParams {
            seed: 42,
            ..RansacParams::default()
        };
        let reg = ransac_register(&matches, &kps_a, &kps_b, &params).unwrap();
        let rot_err = rotation_geodesic(&reg.relative_pose.rotation, &truth.rotation);
        let trans_err = (reg.relative_pose.translation - truth.translation).norm();
        assert!(rot_err < 1.0f64.to_radians(), "rot err {rot_err}");
        assert!(trans_err < 0.003, "trans err {trans_err}");
    }

    #[test]
    fn ransac_deterministic_under_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (_, matches, kps_a, kps_b) = synthetic_matches(&mut rng, 200, 0.4, 0.002);
        let params = RansacParams {
            seed: 11,
            ..RansacParams::default()
        };
        let r1 = ransac_register(&matches, &kps_a, &kps_b, &params).unwrap();
        let r2 = ransac_register(&matches, &kps_a, &kps_b, &params).unwrap();
        assert_eq!(r1.inliers.pairs, r2.inliers.pairs);
        assert_eq!(
            r1.relative_pose.to_matrix_row_major(),
            r2.relative_pose.to_matrix_row_major()
        );
    }

    #[test]
    fn ransac_inliers_satisfy_gates() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (_, matches, kps_a, kps_b) = synthetic_matches(&mut rng, 300, 0.5, 0.002);
        let params = RansacParams::default();
        let reg = ransac_register(&matches, &kps_a, &kps_b, &params).unwrap();
        let cos_alpha = params.alpha.cos();
        for &(i, j) in &reg.inliers.pairs {
            let d = (reg.relative_pose.transform(&kps_a[i].point) - kps_b[j].point).norm();
            assert!(d <= params.delta + 1e-12);
            let c = reg
                .relative_pose
                .rotate(&kps_a[i].normal)
                .dot(&kps_b[j].normal);
            assert!(c >= cos_alpha - 1e-12);
        }
    }

    #[test]
    fn ransac_rejects_too_few_matches() {
        let kps: Vec<Keypoint> = Vec::new();
        let m = MatchSet::default();
        assert!(matches!(
            ransac_register(&m, &kps, &kps, &RansacParams::default()),
            Err(RegistrationError::TooFewMatches(0))
        ));
    }

    #[test]
    fn ransac_conjugation_consistency() {
        // Moving both clouds by G turns the recovered pose into G T G^-1.
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (_, matches, kps_a, kps_b) = synthetic_matches(&mut rng, 120, 0.0, 0.0);
        let g = random_pose(&mut rng, 1.0, 0.4);
        let move_kps = |kps: &[Keypoint]| -> Vec<Keypoint> {
            kps.iter()
                .map(|k| Keypoint {
                    pixel: k.pixel,
                    point: g.transform(&k.point),
                    normal: g.rotate(&k.normal),
                    descriptor: k.descriptor,
                })
                .collect()
        };
        let params = RansacParams::default();
        let base = ransac_register(&matches, &kps_a, &kps_b, &params).unwrap();
        let moved =
            ransac_register(&matches, &move_kps(&kps_a), &move_kps(&kps_b), &params).unwrap();
        let expected = g.compose(&base.relative_pose).compose(&g.inverse());
        assert!(
            rotation_geodesic(&moved.relative_pose.rotation, &expected.rotation) < 1e-6
        );
        assert!((moved.relative_pose.translation - expected.translation).norm() < 1e-6);
    }

    #[test]
    fn coarse_pose_identity_relative() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let prev = random_pose(&mut rng, 1.0, 0.5);
        let reg = RegistrationResult {
            relative_pose: Pose::identity(),
            inliers: MatchSet::default(),
            inlier_count: 0,
        };
        let t = coarse_pose(&prev, &reg);
        assert_relative_eq!(t.rotation, prev.rotation, epsilon = 1e-15);
        assert_relative_eq!(t.translation, prev.translation, epsilon = 1e-15);
    }

    #[test]
    fn coarse_pose_chains_ground_truth_relatives() {
        // Composing per-frame ground-truth relatives over 10 frames must
        // land on the final ground-truth pose.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let gt: Vec<Pose> = (0..11).map(|_| random_pose(&mut rng, 0.5, 0.2)).collect();
        let mut current = gt[0];
        for t in 1..11 {
            let relative = gt[t].compose(&gt[t - 1].inverse());
            let reg = RegistrationResult {
                relative_pose: relative,
                inliers: MatchSet::default(),
                inlier_count: 0,
            };
            current = coarse_pose(&current, &reg);
        }
        assert!(rotation_geodesic(&current.rotation, &gt[10].rotation) < 1e-9);
        assert!((current.translation - gt[10].translation).norm() < 1e-9);
    }

    #[test]
    fn keypoint_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("keypoints_000000.txt");
        let mut contents = String::new();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut rows = Vec::new();
        for _ in 0..5 {
            let u = (rng.random::<f64>() * 100.0 * 16.0).round() / 16.0;
            let v = (rng.random::<f64>() * 100.0 * 16.0).round() / 16.0;
            let d = random_descriptor(&mut rng);
            contents.push_str(&format!("{u} {v}"));
            for value in &d {
                contents.push_str(&format!(" {value}"));
            }
            contents.push('\n');
            rows.push((u, v, d));
        }
        std::fs::write(&path, contents).unwrap();
        let loaded = load_keypoint_file(&path).unwrap();
        assert_eq!(loaded.len(), rows.len());
        for ((u, v, d), (lu, lv, ld)) in rows.iter().zip(loaded.iter()) {
            assert_eq!(u, lu);
            assert_eq!(v, lv);
            assert_eq!(d, ld);
        }
    }

    #[test]
    fn keypoint_file_malformed_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("keypoints_000001.txt");
        std::fs::write(&path, "1.0 2.0 3.0\n").unwrap();
        match load_keypoint_file(&path) {
            Err(KeypointFileError::Malformed { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected malformed error, got {other:?}"),
        }
    }
}
