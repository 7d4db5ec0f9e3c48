//! Keyframe memory pool and greedy selection of the most mutually
//! consistent view set.
//!
//! Selection minimizes the sum of pairwise rotation geodesic distances,
//! greedily: starting from the initial frame, repeatedly add the pool frame
//! with the smallest summed distance to the current frame and to everything
//! already selected. Admission into the pool requires the new rotation to be
//! farther than a novelty threshold from every existing member.

use crate::frame::Frame;
use crate::se3::{rotation_geodesic, Mat3, Pose};
use std::sync::Arc;

#[derive(Debug, Clone)]
pub struct PoolEntry {
    pub frame: Arc<Frame>,
    pub pose: Pose,
}

/// Ordered keyframe store; entry 0 is always the initial frame.
#[derive(Debug, Default)]
pub struct MemoryPool {
    entries: Vec<PoolEntry>,
}

impl MemoryPool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[PoolEntry] {
        &self.entries
    }

    pub fn entry(&self, idx: usize) -> &PoolEntry {
        &self.entries[idx]
    }

    pub fn set_pose(&mut self, idx: usize, pose: Pose) {
        self.entries[idx].pose = pose;
    }

    pub fn contains_frame(&self, frame_id: u64) -> bool {
        self.entries.iter().any(|e| e.frame.id == frame_id)
    }

    /// Admit the frame iff its rotation clears the novelty threshold against
    /// every pool member. An empty pool admits unconditionally (the initial
    /// frame is always kept). Returns whether the frame was added.
    pub fn maybe_add_keyframe(
        &mut self,
        frame: Arc<Frame>,
        pose: Pose,
        threshold: f64,
    ) -> bool {
        if !self.entries.is_empty() {
            let min_dist = self
                .entries
                .iter()
                .map(|e| rotation_geodesic(&pose.rotation, &e.pose.rotation))
                .fold(f64::INFINITY, f64::min);
            if min_dist <= threshold {
                return false;
            }
        }
        self.entries.push(PoolEntry { frame, pose });
        true
    }

    /// Greedy minimum-distance subset of at most `k` pool indices, in
    /// selection order starting from the initial frame. Ties break toward
    /// the older frame.
    pub fn select_keyframes(&self, current_rotation: &Mat3, k: usize) -> Vec<usize> {
        assert!(k >= 1);
        let n = self.entries.len();
        if n <= k {
            return (0..n).collect();
        }
        let rot = |i: usize| &self.entries[i].pose.rotation;
        let mut selected = vec![0usize];
        let mut in_set = vec![false; n];
        in_set[0] = true;
        // Running objective contribution of each candidate: distance to the
        // current frame plus distances to everything selected so far.
        let mut sums: Vec<f64> = (0..n)
            .map(|i| {
                rotation_geodesic(rot(i), current_rotation)
                    + rotation_geodesic(rot(i), rot(0))
            })
            .collect();
        while selected.len() < k {
            let mut best: Option<usize> = None;
            for c in 0..n {
                if in_set[c] {
                    continue;
                }
                if best.is_none_or(|b| sums[c] < sums[b]) {
                    best = Some(c);
                }
            }
            let chosen = best.expect("n > k guarantees a candidate");
            in_set[chosen] = true;
            selected.push(chosen);
            for c in 0..n {
                if !in_set[c] {
                    sums[c] += rotation_geodesic(rot(c), rot(chosen));
                }
            }
        }
        selected
    }
}
