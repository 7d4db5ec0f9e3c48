//! Rigid-body transforms on SE(3), their twist parametrization in se(3),
//! and the pinhole projection operators.
//!
//! Twists are ordered translation-first: `(rho, theta)` with `rho` in meters
//! and `theta` an axis-angle vector in radians. The retraction used by the
//! solver is the left-multiplicative increment `xi ⊞ delta =
//! log(exp(delta) * exp(xi))`; Jacobians elsewhere in the crate are derived
//! against that convention.

use nalgebra::{Matrix3, Vector2, Vector3};

/// Angle below which exp/log switch to their Taylor branches.
pub const SMALL_ANGLE: f64 = 1e-8;

pub type Mat3 = Matrix3<f64>;
pub type Vec3 = Vector3<f64>;
pub type Vec2 = Vector2<f64>;

/// Rigid transform mapping object coordinates into camera coordinates:
/// `p_cam = R * p_obj + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Mat3,
    pub translation: Vec3,
}

/// Element of se(3): translation part first, axis-angle rotation second.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Twist {
    pub translation: Vec3,
    pub rotation: Vec3,
}

/// Pinhole camera intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

pub fn skew(w: &Vec3) -> Mat3 {
    Mat3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

impl Pose {
    pub fn new(rotation: Mat3, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn from_parts(rotation: Mat3, translation: Vec3) -> Self {
        Self::new(rotation, translation)
    }

    /// Apply the transform to a point.
    pub fn transform(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// Rotate a direction without translating it.
    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Group composition: `(self ∘ other)(p) = self(other(p))`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Row-major 4x4 homogeneous matrix entries.
    pub fn to_matrix_row_major(&self) -> [f64; 16] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            t.x,
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            t.y,
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t.z,
            0.0,
            0.0,
            0.0,
            1.0,
        ]
    }

    pub fn from_matrix_row_major(m: &[f64; 16]) -> Pose {
        Pose {
            rotation: Mat3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]),
            translation: Vec3::new(m[3], m[7], m[11]),
        }
    }

    /// Max-norm deviation of `R^T R` from the identity plus determinant error.
    /// Used by debug assertions and tests to validate the rotation invariant.
    pub fn orthonormality_error(&self) -> f64 {
        let e = self.rotation.transpose() * self.rotation - Mat3::identity();
        let det_err = (self.rotation.determinant() - 1.0).abs();
        e.amax().max(det_err)
    }
}

impl Twist {
    pub fn new(translation: Vec3, rotation: Vec3) -> Self {
        Self {
            translation,
            rotation,
        }
    }

    pub fn zero() -> Self {
        Self {
            translation: Vec3::zeros(),
            rotation: Vec3::zeros(),
        }
    }

    pub fn from_vector(v: &[f64; 6]) -> Self {
        Self {
            translation: Vec3::new(v[0], v[1], v[2]),
            rotation: Vec3::new(v[3], v[4], v[5]),
        }
    }

    pub fn to_vector(&self) -> [f64; 6] {
        [
            self.translation.x,
            self.translation.y,
            self.translation.z,
            self.rotation.x,
            self.rotation.y,
            self.rotation.z,
        ]
    }

    pub fn norm(&self) -> f64 {
        (self.translation.norm_squared() + self.rotation.norm_squared()).sqrt()
    }
}

/// Closed-form exponential map se(3) -> SE(3).
///
/// Rodrigues for the rotation block and the V-matrix for translation. The
/// `(1 - cos θ)/θ²` coefficient is evaluated through `2 sin²(θ/2)/θ²`, which
/// stays accurate for small angles; below [`SMALL_ANGLE`] the Taylor limits
/// are substituted to avoid 0/0.
pub fn exp_map(xi: &Twist) -> Pose {
    let theta = xi.rotation.norm();
    let w = skew(&xi.rotation);
    let w2 = w * w;

    let (coef_a, coef_b, coef_c) = if theta < SMALL_ANGLE {
        // sin θ / θ, (1 - cos θ)/θ², (θ - sin θ)/θ³ as θ -> 0
        (1.0, 0.5, 1.0 / 6.0)
    } else {
        let half = 0.5 * theta;
        let a = theta.sin() / theta;
        let b = {
            let s = half.sin();
            2.0 * s * s / (theta * theta)
        };
        let c = (1.0 - a) / (theta * theta);
        (a, b, c)
    };

    let rotation = Mat3::identity() + coef_a * w + coef_b * w2;
    let v = Mat3::identity() + coef_b * w + coef_c * w2;
    Pose {
        rotation,
        translation: v * xi.translation,
    }
}

/// Canonical logarithm SE(3) -> se(3) with rotation angle in [0, π].
///
/// The angle comes from `atan2(‖R - Rᵀ‖/2, (tr R - 1)/2)`, which is well
/// conditioned over the whole range. Near θ = π the axis is recovered from
/// the outer-product structure of `R + Rᵀ` via its largest diagonal entry.
pub fn log_map(pose: &Pose) -> Twist {
    let r = &pose.rotation;
    let s = Vec3::new(
        r[(2, 1)] - r[(1, 2)],
        r[(0, 2)] - r[(2, 0)],
        r[(1, 0)] - r[(0, 1)],
    );
    let sin_theta = 0.5 * s.norm();
    let cos_theta = 0.5 * (r.trace() - 1.0);
    let theta = sin_theta.atan2(cos_theta);

    let w = if theta < SMALL_ANGLE {
        0.5 * s
    } else if theta > std::f64::consts::PI - 1e-6 {
        // R + Rᵀ = 2 cos θ I + 2 (1 - cos θ) n nᵀ; extract n from the best
        // conditioned column.
        let sym = 0.5 * (r + r.transpose());
        let outer = (sym - cos_theta * Mat3::identity()) / (1.0 - cos_theta);
        let diag = [outer[(0, 0)], outer[(1, 1)], outer[(2, 2)]];
        let k = if diag[0] >= diag[1] && diag[0] >= diag[2] {
            0
        } else if diag[1] >= diag[2] {
            1
        } else {
            2
        };
        let mut axis = Vec3::new(outer[(0, k)], outer[(1, k)], outer[(2, k)]) / diag[k].sqrt();
        if s.dot(&axis) < 0.0 {
            axis = -axis;
        }
        theta * axis
    } else {
        (theta / (2.0 * sin_theta)) * s
    };

    // V⁻¹ = I - W/2 + D W², D = (1 - (θ/2) cot(θ/2)) / θ².
    let wm = skew(&w);
    let coef_d = if theta < SMALL_ANGLE {
        1.0 / 12.0
    } else {
        let half = 0.5 * theta;
        (1.0 - half * half.cos() / half.sin()) / (theta * theta)
    };
    let v_inv = Mat3::identity() - 0.5 * wm + coef_d * (wm * wm);
    Twist {
        translation: v_inv * pose.translation,
        rotation: w,
    }
}

pub fn compose(a: &Pose, b: &Pose) -> Pose {
    a.compose(b)
}

pub fn inverse(t: &Pose) -> Pose {
    t.inverse()
}

/// Left-multiplicative tangent-space retraction:
/// `boxplus(xi, delta) = log(exp(delta) ∘ exp(xi))`.
pub fn boxplus(xi: &Twist, delta: &Twist) -> Twist {
    log_map(&exp_map(delta).compose(&exp_map(xi)))
}

/// Geodesic distance between two rotations: the angle
/// `arccos((tr(RᵢᵀRⱼ) - 1)/2)` of the relative rotation, evaluated through
/// `atan2` of the relative rotation's sine and cosine so it stays accurate
/// at both ends of [0, π] (plain arccos degrades to ~1e-8 near 0 and π).
pub fn rotation_geodesic(ri: &Mat3, rj: &Mat3) -> f64 {
    let rel = ri.transpose() * rj;
    let s = Vec3::new(
        rel[(2, 1)] - rel[(1, 2)],
        rel[(0, 2)] - rel[(2, 0)],
        rel[(1, 0)] - rel[(0, 1)],
    );
    let sin_theta = 0.5 * s.norm();
    let cos_theta = 0.5 * (rel.trace() - 1.0);
    sin_theta.atan2(cos_theta)
}

/// Perspective projection of a camera-frame point. `None` when the point is
/// not in front of the camera.
pub fn project(p: &Vec3, k: &Intrinsics) -> Option<Vec2> {
    if p.z <= 0.0 {
        return None;
    }
    Some(Vec2::new(
        k.fx * p.x / p.z + k.cx,
        k.fy * p.y / p.z + k.cy,
    ))
}

/// Back-project a pixel with depth into the camera frame. `None` for
/// non-positive depth or a pixel outside the image bounds.
pub fn unproject(u: f64, v: f64, depth: f64, k: &Intrinsics) -> Option<Vec3> {
    if depth <= 0.0 || u < 0.0 || v < 0.0 || u >= k.width as f64 || v >= k.height as f64 {
        return None;
    }
    Some(Vec3::new(
        (u - k.cx) * depth / k.fx,
        (v - k.cy) * depth / k.fy,
        depth,
    ))
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Self {
        Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        }
    }
}
