//! Camera poses and rotation algebra.
//!
//! A pose is a world-frame translation plus a rotation stored as the
//! logarithm of a unit quaternion: for `q = (cos θ, u sin θ)` with unit
//! axis `u`, `log q = u θ`. Quaternions are canonicalized to `w ≥ 0` first
//! (so `q` and `-q`, the same rotation, share one log), which bounds the
//! log norm by π/2 and makes the 3-vector a clean regression target.
//!
//! Angles are recovered with `atan2(|v|, w)` rather than `acos(w)`: both
//! agree on unit quaternions, but `acos` loses roughly half the significant
//! digits near the identity where `w → 1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];
/// Unit quaternion as `[w, x, y, z]`.
pub type Quat = [f64; 4];

const UNIT_TOL: f64 = 1e-6;

/// Camera pose: translation in meters and log-quaternion rotation, both in
/// the world frame (camera-to-world convention).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub t: Vec3,
    pub r: Vec3,
}

impl Pose {
    pub fn new(t: Vec3, r: Vec3) -> Self {
        Pose { t, r }
    }

    pub fn from_parts(t: Vec3, q: Quat) -> Result<Self> {
        Ok(Pose { t, r: quat_log(q)? })
    }

    pub fn quat(&self) -> Quat {
        quat_exp(self.r)
    }
}

pub fn dot3(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn norm3(v: Vec3) -> f64 {
    dot3(v, v).sqrt()
}

pub fn sub3(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn cross3(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn normalize3(v: Vec3) -> Result<Vec3> {
    let n = norm3(v);
    if n < 1e-12 {
        return Err(Error::Invalid("cannot normalize a zero vector".into()));
    }
    Ok([v[0] / n, v[1] / n, v[2] / n])
}

/// Hamilton product `a ⊗ b`.
pub fn quat_mul(a: Quat, b: Quat) -> Quat {
    let [aw, ax, ay, az] = a;
    let [bw, bx, by, bz] = b;
    [
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ]
}

pub fn quat_conj(q: Quat) -> Quat {
    [q[0], -q[1], -q[2], -q[3]]
}

pub fn quat_norm(q: Quat) -> f64 {
    (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt()
}

pub fn quat_normalize(q: Quat) -> Result<Quat> {
    let n = quat_norm(q);
    if n < 1e-12 {
        return Err(Error::Invalid("cannot normalize a zero quaternion".into()));
    }
    Ok([q[0] / n, q[1] / n, q[2] / n, q[3] / n])
}

/// Rotates a vector by a unit quaternion (`q v q*`).
pub fn quat_rotate(q: Quat, v: Vec3) -> Vec3 {
    let p = [0.0, v[0], v[1], v[2]];
    let r = quat_mul(quat_mul(q, p), quat_conj(q));
    [r[1], r[2], r[3]]
}

/// Logarithm of a unit quaternion, canonicalized to `w ≥ 0`.
///
/// Rejects non-unit input instead of silently renormalizing, since a
/// non-unit quaternion in a pose record means the data is corrupt.
pub fn quat_log(q: Quat) -> Result<Vec3> {
    let n = quat_norm(q);
    if (n - 1.0).abs() > UNIT_TOL {
        return Err(Error::Invalid(format!(
            "quaternion norm {n} is not 1 (tolerance {UNIT_TOL})"
        )));
    }
    let q = if q[0] < 0.0 {
        [-q[0], -q[1], -q[2], -q[3]]
    } else {
        q
    };
    let vn = (q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    if vn < 1e-15 {
        return Ok([0.0, 0.0, 0.0]);
    }
    let theta = vn.atan2(q[0]);
    let s = theta / vn;
    Ok([q[1] * s, q[2] * s, q[3] * s])
}

/// Exponential map back to a unit quaternion. Inverse of [`quat_log`] for
/// `|r| < π/2` (rotation angle below π).
pub fn quat_exp(r: Vec3) -> Quat {
    let theta = norm3(r);
    // sin(θ)/θ via series below the point where the direct form loses bits.
    let s = if theta < 1e-6 {
        1.0 - theta * theta / 6.0
    } else {
        theta.sin() / theta
    };
    [theta.cos(), r[0] * s, r[1] * s, r[2] * s]
}

/// Camera-to-world quaternion for a camera at `eye` looking at `target`,
/// with x-right / y-down / z-forward camera axes and the world's +z as up.
pub fn look_at_quat(eye: Vec3, target: Vec3) -> Result<Quat> {
    let fwd = normalize3(sub3(target, eye))?;
    // Down reference; fall back to +x if the view direction is vertical.
    let down = [0.0, 0.0, -1.0];
    let mut right = cross3(down, fwd);
    if norm3(right) < 1e-9 {
        right = cross3([1.0, 0.0, 0.0], fwd);
    }
    let right = normalize3(right)?;
    let down_axis = cross3(fwd, right);
    quat_from_axes(right, down_axis, fwd)
}

/// Quaternion from an orthonormal, right-handed axis triple (the columns of
/// a rotation matrix), via the numerically safe largest-pivot construction.
pub fn quat_from_axes(x: Vec3, y: Vec3, z: Vec3) -> Result<Quat> {
    // Rotation matrix entries: column j is the j-th axis.
    let m = [
        [x[0], y[0], z[0]],
        [x[1], y[1], z[1]],
        [x[2], y[2], z[2]],
    ];
    let trace = m[0][0] + m[1][1] + m[2][2];
    let q = if trace > 0.0 {
        let s = (trace + 1.0).sqrt() * 2.0;
        [
            0.25 * s,
            (m[2][1] - m[1][2]) / s,
            (m[0][2] - m[2][0]) / s,
            (m[1][0] - m[0][1]) / s,
        ]
    } else if m[0][0] > m[1][1] && m[0][0] > m[2][2] {
        let s = (1.0 + m[0][0] - m[1][1] - m[2][2]).sqrt() * 2.0;
        [
            (m[2][1] - m[1][2]) / s,
            0.25 * s,
            (m[0][1] + m[1][0]) / s,
            (m[0][2] + m[2][0]) / s,
        ]
    } else if m[1][1] > m[2][2] {
        let s = (1.0 + m[1][1] - m[0][0] - m[2][2]).sqrt() * 2.0;
        [
            (m[0][2] - m[2][0]) / s,
            (m[0][1] + m[1][0]) / s,
            0.25 * s,
            (m[1][2] + m[2][1]) / s,
        ]
    } else {
        let s = (1.0 + m[2][2] - m[0][0] - m[1][1]).sqrt() * 2.0;
        [
            (m[1][0] - m[0][1]) / s,
            (m[0][2] + m[2][0]) / s,
            (m[1][2] + m[2][1]) / s,
            0.25 * s,
        ]
    };
    quat_normalize(q)
}

/// Weighted pose distance with learnable balance terms:
/// `|Δt|₁ e^{-β} + β + |Δr|₁ e^{-γ} + γ`.
pub fn pose_distance(a: &Pose, b: &Pose, beta: f64, gamma: f64) -> f64 {
    let dt: f64 = (0..3).map(|i| (a.t[i] - b.t[i]).abs()).sum();
    let dr: f64 = (0..3).map(|i| (a.r[i] - b.r[i]).abs()).sum();
    dt * (-beta).exp() + beta + dr * (-gamma).exp() + gamma
}

/// Componentwise relative pose `a - b` (both translation and log-rotation),
/// the form the multi-frame loss constrains between frames of a tuple.
pub fn relative_pose(a: &Pose, b: &Pose) -> Pose {
    Pose {
        t: sub3(a.t, b.t),
        r: sub3(a.r, b.r),
    }
}

/// Euclidean translation error in meters.
pub fn translation_error(a: Vec3, b: Vec3) -> f64 {
    norm3(sub3(a, b))
}

/// Geodesic rotation error in degrees between two unit quaternions.
pub fn rotation_error_deg(a: Quat, b: Quat) -> Result<f64> {
    for q in [a, b] {
        let n = quat_norm(q);
        if (n - 1.0).abs() > UNIT_TOL {
            return Err(Error::Invalid(format!("quaternion norm {n} is not 1")));
        }
    }
    let rel = quat_mul(quat_conj(a), b);
    let vn = (rel[1] * rel[1] + rel[2] * rel[2] + rel[3] * rel[3]).sqrt();
    let angle = 2.0 * vn.atan2(rel[0].abs());
    Ok(angle.to_degrees())
}

/// Pinhole camera intrinsics in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: f64,
    pub height: f64,
}

impl Default for CameraIntrinsics {
    /// A VGA camera with a moderate field of view.
    fn default() -> Self {
        CameraIntrinsics {
            fx: 500.0,
            fy: 500.0,
            cx: 320.0,
            cy: 240.0,
            width: 640.0,
            height: 480.0,
        }
    }
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("fx", self.fx),
            ("fy", self.fy),
            ("width", self.width),
            ("height", self.height),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(
                    format!("intrinsics.{name}"),
                    format!("must be positive, got {v}"),
                ));
            }
        }
        if !self.cx.is_finite() || !self.cy.is_finite() {
            return Err(Error::config("intrinsics.cx/cy", "must be finite"));
        }
        Ok(())
    }

    /// Projects a camera-frame point to pixels; `None` when it lies on or
    /// behind the image plane.
    pub fn project(&self, p_cam: Vec3) -> Option<(f64, f64)> {
        if p_cam[2] <= 0.0 {
            return None;
        }
        Some((
            self.fx * p_cam[0] / p_cam[2] + self.cx,
            self.fy * p_cam[1] / p_cam[2] + self.cy,
        ))
    }
}
