//! Quaternion helpers on plain `[w, x, y, z]` arrays.
//!
//! The motion model evaluates raw (unnormalized) quaternion curves, so most
//! helpers accept arbitrary 4-vectors and only [`normalize`] enforces unit norm.

use nalgebra::{Matrix3, Vector3};

pub type Quat = [f64; 4];

pub const IDENTITY: Quat = [1.0, 0.0, 0.0, 0.0];

pub fn norm(q: &Quat) -> f64 {
    dot(q, q).sqrt()
}

pub fn dot(a: &Quat, b: &Quat) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2] + a[3] * b[3]
}

pub fn normalize(q: &Quat) -> Quat {
    let n = norm(q);
    [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
}

pub fn conj(q: &Quat) -> Quat {
    [q[0], -q[1], -q[2], -q[3]]
}

/// Hamilton product `a * b`.
pub fn mul(a: &Quat, b: &Quat) -> Quat {
    let [aw, ax, ay, az] = *a;
    let [bw, bx, by, bz] = *b;
    [
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ]
}

pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Quat {
    let a = axis.normalize();
    let (s, c) = (0.5 * angle).sin_cos();
    [c, a.x * s, a.y * s, a.z * s]
}

/// Rotation angle in radians of a unit quaternion, in `[0, pi]`.
pub fn angle(q: &Quat) -> f64 {
    2.0 * q[0].abs().clamp(0.0, 1.0).acos()
}

/// Geodesic angle between two rotations, invariant to the sign of either input.
pub fn angle_between(a: &Quat, b: &Quat) -> f64 {
    let d = dot(&normalize(a), &normalize(b)).abs().clamp(0.0, 1.0);
    2.0 * d.acos()
}

/// Rotation matrix of a unit quaternion.
pub fn to_matrix(q: &Quat) -> Matrix3<f64> {
    let [w, x, y, z] = *q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Pull back a gradient on the rotation matrix to the unit quaternion that
/// produced it (treating the matrix formula as a function of all four
/// components).
pub fn matrix_grad_to_quat(q: &Quat, g: &Matrix3<f64>) -> Quat {
    let [w, x, y, z] = *q;
    let gw = 2.0
        * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)]
            + x * g[(2, 1)]);
    let gx = 2.0
        * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)] - w * g[(1, 2)]
            + z * g[(2, 0)]
            + w * g[(2, 1)]
            - 2.0 * x * g[(2, 2)]);
    let gy = 2.0
        * (-2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)] + z * g[(1, 2)]
            - w * g[(2, 0)]
            + z * g[(2, 1)]
            - 2.0 * y * g[(2, 2)]);
    let gz = 2.0
        * (-2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)]
            - 2.0 * z * g[(1, 1)]
            + y * g[(1, 2)]
            + x * g[(2, 0)]
            + y * g[(2, 1)]);
    [gw, gx, gy, gz]
}

/// Pull back a gradient on `normalize(raw)` to `raw`.
pub fn normalize_grad(raw: &Quat, g: &Quat) -> Quat {
    let n = norm(raw);
    let q = [raw[0] / n, raw[1] / n, raw[2] / n, raw[3] / n];
    let d = dot(&q, g);
    [
        (g[0] - q[0] * d) / n,
        (g[1] - q[1] * d) / n,
        (g[2] - q[2] * d) / n,
        (g[3] - q[3] * d) / n,
    ]
}
