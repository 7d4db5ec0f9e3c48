//! Pose graph optimization over the current frame and its selected
//! keyframes.
//!
//! Two residual families constrain the graph: object-frame disagreement of
//! matched keypoints between node pairs, and dense point-to-plane residuals
//! under reprojection-based association. Both are Huber-robustified and
//! minimized by iteratively reweighted Gauss-Newton; each outer iteration
//! rebuilds the dense associations, recomputes the IRLS weights, assembles
//! the block-sparse normal equations and solves them with a Jacobi
//! preconditioned conjugate gradient. Increments are accumulated in the
//! tangent space with the left-multiplicative retraction, and a step is
//! halved when it would raise the energy on the current association set.

use crate::features::{match_descriptors, ransac_register, MatchSet, RansacParams};
use crate::frame::Frame;
use crate::se3::{boxplus, exp_map, project, skew, Pose, Twist, Vec3};
use nalgebra::{DMatrix, DVector, SMatrix, SVector};
use rayon::prelude::*;
use std::collections::HashMap;
use std::ops::AddAssign;
use std::sync::Arc;
use thiserror::Error;

type Mat3x6 = SMatrix<f64, 3, 6>;
type Vec6 = SVector<f64, 6>;

/// Residual blocks per parallel assembly chunk; chunk partials are reduced
/// in order so the assembled system does not depend on thread scheduling.
const ASSEMBLY_CHUNK: usize = 4096;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("pose graph has no correspondences on any edge")]
    Unconstrained,
    #[error("pose graph has no free node to optimize")]
    NoFreeNodes,
}

#[derive(Debug, Clone, Copy)]
pub struct HuberParams {
    pub delta_feature: f64,
    pub delta_geometric: f64,
}

impl Default for HuberParams {
    fn default() -> Self {
        Self {
            delta_feature: 0.005,
            delta_geometric: 0.005,
        }
    }
}

/// Outlier gates applied when dense correspondences are associated.
#[derive(Debug, Clone, Copy)]
pub struct DenseGates {
    pub distance: f64,
    pub angle: f64,
}

impl Default for DenseGates {
    fn default() -> Self {
        Self {
            distance: 0.02,
            angle: 45.0f64.to_radians(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SolverConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub huber: HuberParams,
    pub gates: DenseGates,
    pub dense_stride: usize,
    pub gn_iterations: usize,
    pub pcg_tolerance: f64,
    pub pcg_max_iterations: usize,
    pub enable_feature: bool,
    pub enable_geometric: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            huber: HuberParams::default(),
            gates: DenseGates::default(),
            dense_stride: 1,
            gn_iterations: 7,
            pcg_tolerance: 1e-6,
            pcg_max_iterations: 100,
            enable_feature: true,
            enable_geometric: true,
        }
    }
}

/// Huber loss value and IRLS weight for a non-negative residual magnitude.
pub fn huber(r: f64, delta: f64) -> (f64, f64) {
    debug_assert!(r >= 0.0 && delta > 0.0);
    if r <= delta {
        (0.5 * r * r, 1.0)
    } else {
        (delta * (r - 0.5 * delta), delta / r)
    }
}

#[derive(Debug, Clone)]
pub struct GraphNode {
    pub frame: Arc<Frame>,
    pub twist: Twist,
    pub fixed: bool,
}

impl GraphNode {
    pub fn new(frame: Arc<Frame>, pose: Pose, fixed: bool) -> Self {
        Self {
            frame,
            twist: crate::se3::log_map(&pose),
            fixed,
        }
    }

    pub fn pose(&self) -> Pose {
        exp_map(&self.twist)
    }
}

/// Feature correspondences attached to the node pair `(i, j)`; match indices
/// address the keypoint lists of the two node frames in that order.
#[derive(Debug, Clone)]
pub struct FeatureEdge {
    pub i: usize,
    pub j: usize,
    pub matches: Arc<MatchSet>,
}

/// One dense association: a masked point and normal of frame `i` paired with
/// a back-projected point of frame `j`, both in their own camera frames.
#[derive(Debug, Clone, Copy)]
pub struct DenseCorrespondence {
    pub point_i: Vec3,
    pub normal_i: Vec3,
    pub point_j: Vec3,
}

#[derive(Debug, Clone)]
pub struct DenseEdge {
    pub i: usize,
    pub j: usize,
    pub correspondences: Vec<DenseCorrespondence>,
}

/// Cache of feature correspondence sets keyed by unordered frame-id pairs.
/// Hits hand back the identical set computed earlier.
#[derive(Debug, Default)]
pub struct CorrespondenceCache {
    map: HashMap<(u64, u64), Arc<MatchSet>>,
    misses: u64,
}

impl CorrespondenceCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of pair computations performed so far.
    pub fn misses(&self) -> u64 {
        self.misses
    }

    pub fn contains(&self, a: u64, b: u64) -> bool {
        self.map.contains_key(&ordered_key(a, b))
    }

    pub fn get(&self, a: u64, b: u64) -> Option<Arc<MatchSet>> {
        self.map.get(&ordered_key(a, b)).cloned()
    }

    pub fn insert(&mut self, a: u64, b: u64, matches: Arc<MatchSet>) {
        self.misses += 1;
        self.map.insert(ordered_key(a, b), matches);
    }
}

fn ordered_key(a: u64, b: u64) -> (u64, u64) {
    (a.min(b), a.max(b))
}

/// splitmix64; derives per-pair RANSAC seeds so results do not depend on
/// edge build order.
pub fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E3779B97F4A7C15) ^ b.wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Compute the inlier correspondence set between two frames: descriptor
/// matching followed by seeded RANSAC. Registration failure produces an
/// empty set, which still participates (and is cached) as an empty edge.
fn compute_pair_matches(a: &Frame, b: &Frame, ransac: &RansacParams) -> MatchSet {
    let candidates = match_descriptors(&a.keypoints, &b.keypoints);
    let params = RansacParams {
        seed: mix_seed(ransac.seed, a.id, b.id),
        ..*ransac
    };
    match ransac_register(&candidates, &a.keypoints, &b.keypoints, &params) {
        Ok(reg) => reg.inliers,
        Err(_) => MatchSet::default(),
    }
}

/// Populate feature edges for every unordered node pair, reusing cached
/// correspondence sets and computing the missing pairs in parallel with a
/// deterministic merge.
pub fn build_feature_edges(
    nodes: &[GraphNode],
    cache: &mut CorrespondenceCache,
    ransac: &RansacParams,
) -> Vec<FeatureEdge> {
    let mut missing: Vec<(usize, usize)> = Vec::new();
    for i in 0..nodes.len() {
        for j in i + 1..nodes.len() {
            if !cache.contains(nodes[i].frame.id, nodes[j].frame.id) {
                missing.push((i, j));
            }
        }
    }
    let computed: Vec<((u64, u64), MatchSet)> = missing
        .par_iter()
        .map(|&(i, j)| {
            let (a, b) = if nodes[i].frame.id <= nodes[j].frame.id {
                (&nodes[i].frame, &nodes[j].frame)
            } else {
                (&nodes[j].frame, &nodes[i].frame)
            };
            ((a.id, b.id), compute_pair_matches(a, b, ransac))
        })
        .collect();
    for ((a, b), matches) in computed {
        cache.insert(a, b, Arc::new(matches));
    }

    let mut edges = Vec::new();
    for i in 0..nodes.len() {
        for j in i + 1..nodes.len() {
            let (id_i, id_j) = (nodes[i].frame.id, nodes[j].frame.id);
            let stored = cache.get(id_i, id_j).expect("pair just ensured");
            // Cached sets are oriented from the lower to the higher frame id.
            let matches = if id_i <= id_j {
                stored
            } else {
                Arc::new(stored.flipped())
            };
            edges.push(FeatureEdge { i, j, matches });
        }
    }
    edges
}

/// Associate masked points of frame `i` with frame `j` surface points by
/// reprojection under the given poses, keeping pairs that pass the distance
/// and normal-angle gates.
pub fn build_dense_edge(
    frame_i: &Frame,
    frame_j: &Frame,
    pose_i: &Pose,
    pose_j: &Pose,
    gates: &DenseGates,
    stride: usize,
) -> Vec<DenseCorrespondence> {
    let i_to_j = pose_j.compose(&pose_i.inverse());
    let j_to_i = i_to_j.inverse();
    let cos_gate = gates.angle.cos();
    let mut out = Vec::new();
    for mp in frame_i.masked_points(stride) {
        let p_in_j = i_to_j.transform(&mp.point);
        let Some(px) = project(&p_in_j, &frame_j.intrinsics) else {
            continue;
        };
        let (u, v) = (px.x.round(), px.y.round());
        if u < 0.0 || v < 0.0 {
            continue;
        }
        let (u, v) = (u as usize, v as usize);
        let Some(q) = frame_j.point_at(u, v) else {
            continue;
        };
        let Some(normal_j) = frame_j.normal_at(u, v) else {
            continue;
        };
        let q_in_i = j_to_i.transform(&q);
        if (q_in_i - mp.point).norm() > gates.distance {
            continue;
        }
        if mp.normal.dot(&(j_to_i.rotate(&normal_j))) < cos_gate {
            continue;
        }
        out.push(DenseCorrespondence {
            point_i: mp.point,
            normal_i: mp.normal,
            point_j: q,
        });
    }
    out
}

/// The association sets a single linearization works against. Dense edges
/// are rebuilt from the poses used at freeze time; feature edges are the
/// graph's cached correspondences.
pub struct FrozenEdges {
    pub feature: Vec<FeatureEdge>,
    pub dense: Vec<DenseEdge>,
}

impl FrozenEdges {
    pub fn correspondence_count(&self) -> usize {
        self.feature.iter().map(|e| e.matches.len()).sum::<usize>()
            + self.dense.iter().map(|e| e.correspondences.len()).sum::<usize>()
    }
}

pub struct PoseGraph {
    pub nodes: Vec<GraphNode>,
    pub feature_edges: Vec<FeatureEdge>,
    pub config: SolverConfig,
}

#[derive(Debug, Clone, Copy)]
pub struct IterationStats {
    pub iter: usize,
    pub energy_before: f64,
    pub energy_feature: f64,
    pub energy_geometric: f64,
    pub energy_total: f64,
    pub step_scale: f64,
    pub pcg_iterations: usize,
    pub pcg_converged: bool,
}

#[derive(Debug, Clone, Default)]
pub struct OptimizeReport {
    pub iterations: Vec<IterationStats>,
    pub initial_energy: f64,
    pub final_energy: f64,
    pub degraded: bool,
}

impl PoseGraph {
    pub fn new(nodes: Vec<GraphNode>, feature_edges: Vec<FeatureEdge>, config: SolverConfig) -> Self {
        Self {
            nodes,
            feature_edges,
            config,
        }
    }

    pub fn poses(&self) -> Vec<Pose> {
        self.nodes.iter().map(|n| n.pose()).collect()
    }

    /// Rebuild dense associations for every ordered node pair under the
    /// given poses.
    pub fn freeze_edges(&self, poses: &[Pose]) -> FrozenEdges {
        let feature = if self.config.enable_feature {
            self.feature_edges.clone()
        } else {
            Vec::new()
        };
        let dense = if self.config.enable_geometric {
            let mut pairs = Vec::new();
            for i in 0..self.nodes.len() {
                for j in 0..self.nodes.len() {
                    if i != j {
                        pairs.push((i, j));
                    }
                }
            }
            pairs
                .par_iter()
                .map(|&(i, j)| DenseEdge {
                    i,
                    j,
                    correspondences: build_dense_edge(
                        &self.nodes[i].frame,
                        &self.nodes[j].frame,
                        &poses[i],
                        &poses[j],
                        &self.config.gates,
                        self.config.dense_stride,
                    ),
                })
                .collect()
        } else {
            Vec::new()
        };
        FrozenEdges { feature, dense }
    }

    /// Total energy split `(E_f, E_g)` at the graph's current poses, with
    /// dense associations rebuilt for the evaluation.
    pub fn energies(&self) -> (f64, f64) {
        let poses = self.poses();
        let edges = self.freeze_edges(&poses);
        (
            energy_feature(&self.nodes, &poses, &edges, &self.config),
            energy_geometric(&poses, &edges, &self.config),
        )
    }

    /// Iteratively reweighted Gauss-Newton with a PCG inner solver. Updates
    /// node twists in place and reports per-iteration energies.
    pub fn optimize(&mut self) -> Result<OptimizeReport, SolverError> {
        if self.nodes.iter().all(|n| n.fixed) {
            return Err(SolverError::NoFreeNodes);
        }
        let free_nodes: Vec<usize> = (0..self.nodes.len())
            .filter(|&i| !self.nodes[i].fixed)
            .collect();
        let mut report = OptimizeReport::default();

        let mut poses = self.poses();
        for iter in 0..self.config.gn_iterations {
            let edges = self.freeze_edges(&poses);
            if edges.correspondence_count() == 0 {
                if iter == 0 {
                    return Err(SolverError::Unconstrained);
                }
                break;
            }
            let e_f0 = energy_feature(&self.nodes, &poses, &edges, &self.config);
            let e_g0 = energy_geometric(&poses, &edges, &self.config);
            let energy_before = e_f0 + e_g0;
            if iter == 0 {
                report.initial_energy = energy_before;
                report.final_energy = energy_before;
            }

            let system = linearize(&self.nodes, &poses, &edges, &self.config, &free_nodes);
            let b = system.gradient();
            if b.norm() == 0.0 {
                report.iterations.push(IterationStats {
                    iter,
                    energy_before,
                    energy_feature: e_f0,
                    energy_geometric: e_g0,
                    energy_total: energy_before,
                    step_scale: 0.0,
                    pcg_iterations: 0,
                    pcg_converged: true,
                });
                report.final_energy = energy_before;
                break;
            }
            let normal = system.assemble_normal_matrix();
            let precond = system.jacobi_preconditioner(&normal);
            let pcg = pcg_solve(
                |x| &normal * x,
                &(-b),
                &precond,
                self.config.pcg_tolerance,
                self.config.pcg_max_iterations,
            );
            if pcg.degraded {
                report.degraded = true;
            }

            // Step control: halve until the energy on this iteration's
            // association set no longer increases.
            let mut scale = 1.0f64;
            let mut accepted = None;
            for _ in 0..6 {
                let mut trial = self.nodes.iter().map(|n| n.twist).collect::<Vec<_>>();
                for (slot, &node_idx) in free_nodes.iter().enumerate() {
                    let d = pcg.x.fixed_rows::<6>(6 * slot);
                    let delta = Twist::new(
                        Vec3::new(d[0], d[1], d[2]) * scale,
                        Vec3::new(d[3], d[4], d[5]) * scale,
                    );
                    trial[node_idx] = boxplus(&trial[node_idx], &delta);
                }
                let trial_poses: Vec<Pose> = trial.iter().map(exp_map).collect();
                let e_f = energy_feature(&self.nodes, &trial_poses, &edges, &self.config);
                let e_g = energy_geometric(&trial_poses, &edges, &self.config);
                if e_f + e_g <= energy_before {
                    accepted = Some((trial, trial_poses, e_f, e_g));
                    break;
                }
                scale *= 0.5;
            }
            let Some((trial, trial_poses, e_f, e_g)) = accepted else {
                // No admissible step; keep the current poses.
                break;
            };
            for (node, twist) in self.nodes.iter_mut().zip(trial.iter()) {
                node.twist = *twist;
            }
            poses = trial_poses;
            report.iterations.push(IterationStats {
                iter,
                energy_before,
                energy_feature: e_f,
                energy_geometric: e_g,
                energy_total: e_f + e_g,
                step_scale: scale,
                pcg_iterations: pcg.iterations,
                pcg_converged: pcg.converged,
            });
            report.final_energy = e_f + e_g;
            if scale * pcg.x.norm() < 1e-12 {
                break;
            }
        }
        Ok(report)
    }
}

/// Object-frame keypoint disagreement for one correspondence.
#[inline]
fn feature_residual(pose_i_inv: &Pose, pose_j_inv: &Pose, p_m: &Vec3, p_n: &Vec3) -> Vec3 {
    pose_i_inv.transform(p_m) - pose_j_inv.transform(p_n)
}

/// Point-to-plane residual for one dense correspondence.
#[inline]
fn dense_residual(i_from_j: &Pose, corr: &DenseCorrespondence) -> f64 {
    corr.normal_i
        .dot(&(i_from_j.transform(&corr.point_j) - corr.point_i))
}

pub fn energy_feature(
    nodes: &[GraphNode],
    poses: &[Pose],
    edges: &FrozenEdges,
    config: &SolverConfig,
) -> f64 {
    let inverses: Vec<Pose> = poses.iter().map(Pose::inverse).collect();
    let mut total = 0.0;
    for edge in &edges.feature {
        let kps_i = &nodes[edge.i].frame.keypoints;
        let kps_j = &nodes[edge.j].frame.keypoints;
        for &(m, n) in &edge.matches.pairs {
            let r = feature_residual(
                &inverses[edge.i],
                &inverses[edge.j],
                &kps_i[m].point,
                &kps_j[n].point,
            );
            total += config.lambda1 * huber(r.norm(), config.huber.delta_feature).0;
        }
    }
    total
}

pub fn energy_geometric(poses: &[Pose], edges: &FrozenEdges, config: &SolverConfig) -> f64 {
    let mut total = 0.0;
    for edge in &edges.dense {
        let i_from_j = poses[edge.i].compose(&poses[edge.j].inverse());
        for corr in &edge.correspondences {
            let r = dense_residual(&i_from_j, corr).abs();
            total += config.lambda2 * huber(r, config.huber.delta_geometric).0;
        }
    }
    total
}

/// Unweighted stacked residual vector in a fixed order (feature rows first,
/// then dense rows), used by the finite-difference tests.
pub fn residual_vector(
    nodes: &[GraphNode],
    poses: &[Pose],
    edges: &FrozenEdges,
) -> DVector<f64> {
    let inverses: Vec<Pose> = poses.iter().map(Pose::inverse).collect();
    let mut rows = Vec::new();
    for edge in &edges.feature {
        let kps_i = &nodes[edge.i].frame.keypoints;
        let kps_j = &nodes[edge.j].frame.keypoints;
        for &(m, n) in &edge.matches.pairs {
            let r = feature_residual(
                &inverses[edge.i],
                &inverses[edge.j],
                &kps_i[m].point,
                &kps_j[n].point,
            );
            rows.extend_from_slice(&[r.x, r.y, r.z]);
        }
    }
    for edge in &edges.dense {
        let i_from_j = poses[edge.i].compose(&poses[edge.j].inverse());
        for corr in &edge.correspondences {
            rows.push(dense_residual(&i_from_j, corr));
        }
    }
    DVector::from_vec(rows)
}

struct FeatureBlock {
    slot_i: Option<usize>,
    slot_j: Option<usize>,
    jac_i: Mat3x6,
    jac_j: Mat3x6,
    residual: Vec3,
    weight: f64,
}

struct DenseBlock {
    slot_i: Option<usize>,
    slot_j: Option<usize>,
    jac_i: Vec6,
    jac_j: Vec6,
    residual: f64,
    weight: f64,
}

/// Linearized system: analytic Jacobian blocks of every residual with
/// respect to the left-multiplicative increments of its two incident nodes
/// (fixed nodes contribute no columns), plus IRLS weights from the current
/// residuals. Each residual row touches at most two 6-column blocks.
pub struct LinearSystem {
    feature_blocks: Vec<FeatureBlock>,
    dense_blocks: Vec<DenseBlock>,
    pub dim: usize,
}

/// `[I | -skew(p)]`: derivative of `exp(delta) * p` at `delta = 0`.
#[inline]
fn point_jacobian(p: &Vec3) -> Mat3x6 {
    let mut m = Mat3x6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&crate::se3::Mat3::identity());
    m.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-skew(p)));
    m
}

pub fn linearize(
    nodes: &[GraphNode],
    poses: &[Pose],
    edges: &FrozenEdges,
    config: &SolverConfig,
    free_nodes: &[usize],
) -> LinearSystem {
    let mut slot_of = vec![None; nodes.len()];
    for (slot, &node_idx) in free_nodes.iter().enumerate() {
        slot_of[node_idx] = Some(slot);
    }
    let inverses: Vec<Pose> = poses.iter().map(Pose::inverse).collect();

    let mut feature_blocks = Vec::new();
    for edge in &edges.feature {
        let kps_i = &nodes[edge.i].frame.keypoints;
        let kps_j = &nodes[edge.j].frame.keypoints;
        let rot_i_t = poses[edge.i].rotation.transpose();
        let rot_j_t = poses[edge.j].rotation.transpose();
        for &(m, n) in &edge.matches.pairs {
            let p_m = &kps_i[m].point;
            let p_n = &kps_j[n].point;
            let residual = feature_residual(&inverses[edge.i], &inverses[edge.j], p_m, p_n);
            let (_, w) = huber(residual.norm(), config.huber.delta_feature);
            feature_blocks.push(FeatureBlock {
                slot_i: slot_of[edge.i],
                slot_j: slot_of[edge.j],
                jac_i: -rot_i_t * point_jacobian(p_m),
                jac_j: rot_j_t * point_jacobian(p_n),
                residual,
                weight: config.lambda1 * w,
            });
        }
    }

    let mut dense_blocks = Vec::new();
    for edge in &edges.dense {
        let i_from_j = poses[edge.i].compose(&poses[edge.j].inverse());
        for corr in &edge.correspondences {
            let residual = dense_residual(&i_from_j, corr);
            let (_, w) = huber(residual.abs(), config.huber.delta_geometric);
            let n = corr.normal_i;
            let u = i_from_j.transform(&corr.point_j);
            let mut jac_i = Vec6::zeros();
            jac_i.fixed_rows_mut::<3>(0).copy_from(&n);
            jac_i.fixed_rows_mut::<3>(3).copy_from(&u.cross(&n));
            let m = i_from_j.rotation.transpose() * n;
            let mut jac_j = Vec6::zeros();
            jac_j.fixed_rows_mut::<3>(0).copy_from(&(-m));
            jac_j
                .fixed_rows_mut::<3>(3)
                .copy_from(&(-corr.point_j.cross(&m)));
            dense_blocks.push(DenseBlock {
                slot_i: slot_of[edge.i],
                slot_j: slot_of[edge.j],
                jac_i,
                jac_j,
                residual,
                weight: config.lambda2 * w,
            });
        }
    }

    LinearSystem {
        feature_blocks,
        dense_blocks,
        dim: 6 * free_nodes.len(),
    }
}

impl LinearSystem {
    /// `JᵀW r̄`, accumulated block by block.
    pub fn gradient(&self) -> DVector<f64> {
        let mut g = DVector::zeros(self.dim);
        for blk in &self.feature_blocks {
            if let Some(si) = blk.slot_i {
                let contrib = blk.weight * blk.jac_i.transpose() * blk.residual;
                g.fixed_rows_mut::<6>(6 * si).add_assign(&contrib);
            }
            if let Some(sj) = blk.slot_j {
                let contrib = blk.weight * blk.jac_j.transpose() * blk.residual;
                g.fixed_rows_mut::<6>(6 * sj).add_assign(&contrib);
            }
        }
        for blk in &self.dense_blocks {
            if let Some(si) = blk.slot_i {
                let contrib = blk.weight * blk.residual * blk.jac_i;
                g.fixed_rows_mut::<6>(6 * si).add_assign(&contrib);
            }
            if let Some(sj) = blk.slot_j {
                let contrib = blk.weight * blk.residual * blk.jac_j;
                g.fixed_rows_mut::<6>(6 * sj).add_assign(&contrib);
            }
        }
        g
    }

    /// Assemble `JᵀWJ` from the per-residual blocks. `J` and `W` themselves
    /// are never formed; each residual row contributes to at most four 6x6
    /// blocks of the reduced system. Chunk partials are accumulated in fixed
    /// order to stay deterministic under parallelism.
    pub fn assemble_normal_matrix(&self) -> DMatrix<f64> {
        let dim = self.dim;
        let feature_partials: Vec<DMatrix<f64>> = self
            .feature_blocks
            .par_chunks(ASSEMBLY_CHUNK)
            .map(|chunk| {
                let mut h = DMatrix::zeros(dim, dim);
                for blk in chunk {
                    accumulate_pair(
                        &mut h,
                        blk.slot_i,
                        blk.slot_j,
                        &(blk.weight * blk.jac_i.transpose() * blk.jac_i),
                        &(blk.weight * blk.jac_i.transpose() * blk.jac_j),
                        &(blk.weight * blk.jac_j.transpose() * blk.jac_j),
                    );
                }
                h
            })
            .collect();
        let dense_partials: Vec<DMatrix<f64>> = self
            .dense_blocks
            .par_chunks(ASSEMBLY_CHUNK)
            .map(|chunk| {
                let mut h = DMatrix::zeros(dim, dim);
                for blk in chunk {
                    accumulate_pair(
                        &mut h,
                        blk.slot_i,
                        blk.slot_j,
                        &(blk.weight * blk.jac_i * blk.jac_i.transpose()),
                        &(blk.weight * blk.jac_i * blk.jac_j.transpose()),
                        &(blk.weight * blk.jac_j * blk.jac_j.transpose()),
                    );
                }
                h
            })
            .collect();
        let mut h = DMatrix::zeros(dim, dim);
        for partial in feature_partials.iter().chain(dense_partials.iter()) {
            h += partial;
        }
        h
    }

    pub fn jacobi_preconditioner(&self, normal: &DMatrix<f64>) -> DVector<f64> {
        DVector::from_iterator(self.dim, (0..self.dim).map(|i| normal[(i, i)]))
    }

    /// Explicit dense Jacobian and weighted residual pieces, for tests and
    /// small-graph diagnostics only.
    pub fn to_dense(&self) -> (DMatrix<f64>, DVector<f64>, DVector<f64>) {
        let rows = 3 * self.feature_blocks.len() + self.dense_blocks.len();
        let mut jac = DMatrix::zeros(rows, self.dim);
        let mut residuals = DVector::zeros(rows);
        let mut weights = DVector::zeros(rows);
        let mut row = 0;
        for blk in &self.feature_blocks {
            if let Some(si) = blk.slot_i {
                jac.view_mut((row, 6 * si), (3, 6)).copy_from(&blk.jac_i);
            }
            if let Some(sj) = blk.slot_j {
                jac.view_mut((row, 6 * sj), (3, 6)).copy_from(&blk.jac_j);
            }
            for k in 0..3 {
                residuals[row + k] = blk.residual[k];
                weights[row + k] = blk.weight;
            }
            row += 3;
        }
        for blk in &self.dense_blocks {
            if let Some(si) = blk.slot_i {
                jac.view_mut((row, 6 * si), (1, 6))
                    .copy_from(&blk.jac_i.transpose());
            }
            if let Some(sj) = blk.slot_j {
                jac.view_mut((row, 6 * sj), (1, 6))
                    .copy_from(&blk.jac_j.transpose());
            }
            residuals[row] = blk.residual;
            weights[row] = blk.weight;
            row += 1;
        }
        (jac, residuals, weights)
    }
}

fn accumulate_pair(
    h: &mut DMatrix<f64>,
    slot_i: Option<usize>,
    slot_j: Option<usize>,
    h_ii: &SMatrix<f64, 6, 6>,
    h_ij: &SMatrix<f64, 6, 6>,
    h_jj: &SMatrix<f64, 6, 6>,
) {
    if let Some(si) = slot_i {
        h.view_mut((6 * si, 6 * si), (6, 6)).add_assign(h_ii);
    }
    if let Some(sj) = slot_j {
        h.view_mut((6 * sj, 6 * sj), (6, 6)).add_assign(h_jj);
    }
    if let (Some(si), Some(sj)) = (slot_i, slot_j) {
        h.view_mut((6 * si, 6 * sj), (6, 6)).add_assign(h_ij);
        h.view_mut((6 * sj, 6 * si), (6, 6))
            .add_assign(&h_ij.transpose());
    }
}

#[derive(Debug, Clone)]
pub struct PcgResult {
    pub x: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Set when the solve hit a zero-curvature direction and returned the
    /// best iterate so far.
    pub degraded: bool,
}

/// Preconditioned conjugate gradient with a diagonal (Jacobi)
/// preconditioner. Stops at relative residual `tol` or `max_iter`.
pub fn pcg_solve(
    apply_a: impl Fn(&DVector<f64>) -> DVector<f64>,
    b: &DVector<f64>,
    precond_diag: &DVector<f64>,
    tol: f64,
    max_iter: usize,
) -> PcgResult {
    let n = b.len();
    let inv_diag: DVector<f64> =
        precond_diag.map(|d| if d > f64::MIN_POSITIVE { 1.0 / d } else { 1.0 });
    let mut x = DVector::zeros(n);
    let b_norm = b.norm();
    if b_norm == 0.0 {
        return PcgResult {
            x,
            iterations: 0,
            converged: true,
            degraded: false,
        };
    }
    let mut r = b.clone();
    let mut z = inv_diag.component_mul(&r);
    let mut p = z.clone();
    let mut rz = r.dot(&z);
    for k in 0..max_iter {
        let ap = apply_a(&p);
        let p_ap = p.dot(&ap);
        if p_ap <= 0.0 || !p_ap.is_finite() {
            return PcgResult {
                x,
                iterations: k,
                converged: false,
                degraded: true,
            };
        }
        let alpha = rz / p_ap;
        x += alpha * &p;
        r -= alpha * &ap;
        if r.norm() <= tol * b_norm {
            return PcgResult {
                x,
                iterations: k + 1,
                converged: true,
                degraded: false,
            };
        }
        z = inv_diag.component_mul(&r);
        let rz_next = r.dot(&z);
        let beta = rz_next / rz;
        p = z.clone() + beta * p;
        rz = rz_next;
    }
    PcgResult {
        x,
        iterations: max_iter,
        converged: false,
        degraded: false,
    }
}
