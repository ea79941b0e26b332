//! Continuous-time 6-DoF trajectory over the video duration `tau in [0, 1]`.
//!
//! Translation and (raw) rotation are piecewise quadratics with two pieces
//! joined at a shared knot `t_b`. The second piece carries no constant term:
//! it starts from the value of the first piece at the knot, so the curve is
//! continuous by construction while its velocity may jump (a bounce).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::geometry::{Pose, Vec3};
use crate::quat::{self, Quat};

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Raw logistic parameters are clamped to this magnitude so the mapped value
/// stays strictly inside `(0, 1)` in double precision.
pub const RAW_LIMIT: f64 = 30.0;

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionModel {
    /// `a0, a1, a2` of `T(tau) = a0 + a1 tau + a2 tau^2` for `tau <= t_b`.
    pub trans_piece1: [[f64; 3]; 3],
    /// `b1, b2` of the post-knot quadratic in `tau - t_b`.
    pub trans_piece2: [[f64; 3]; 2],
    /// `p0, p1, p2` of the raw quaternion curve for `tau <= t_b`.
    pub rot_piece1: [[f64; 4]; 3],
    /// `r1, r2` of the post-knot raw quaternion quadratic.
    pub rot_piece2: [[f64; 4]; 2],
    /// Unconstrained knot parameter; `t_b = logistic(knot_raw)`.
    pub knot_raw: f64,
}

/// Fraction of each frame cycle with the shutter closed, `eps = logistic(gap_raw)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExposureGap {
    pub gap_raw: f64,
}

impl ExposureGap {
    pub fn from_epsilon(eps: f64) -> Self {
        ExposureGap {
            gap_raw: logit(eps),
        }
    }

    pub fn epsilon(&self) -> f64 {
        logistic(self.gap_raw.clamp(-RAW_LIMIT, RAW_LIMIT))
    }
}

fn eval_piecewise<const D: usize>(
    p1: &[[f64; D]; 3],
    p2: &[[f64; D]; 2],
    tb: f64,
    tau: f64,
) -> [f64; D] {
    let mut out = [0.0; D];
    if tau <= tb {
        for k in 0..D {
            out[k] = p1[0][k] + p1[1][k] * tau + p1[2][k] * tau * tau;
        }
    } else {
        let s = tau - tb;
        for k in 0..D {
            let anchor = p1[0][k] + p1[1][k] * tb + p1[2][k] * tb * tb;
            out[k] = anchor + p2[0][k] * s + p2[1][k] * s * s;
        }
    }
    out
}

fn derivative_piecewise<const D: usize>(
    p1: &[[f64; D]; 3],
    p2: &[[f64; D]; 2],
    tb: f64,
    tau: f64,
) -> [f64; D] {
    let mut out = [0.0; D];
    for k in 0..D {
        out[k] = if tau <= tb {
            p1[1][k] + 2.0 * p1[2][k] * tau
        } else {
            p2[0][k] + 2.0 * p2[1][k] * (tau - tb)
        };
    }
    out
}

/// Accumulate `g . d(curve)/d(coefficients)` into the gradient buffers.
/// Returns `(dL/dt_b, dL/dtau)`.
fn backward_piecewise<const D: usize>(
    p1: &[[f64; D]; 3],
    p2: &[[f64; D]; 2],
    tb: f64,
    tau: f64,
    g: &[f64; D],
    g1: &mut [[f64; D]; 3],
    g2: &mut [[f64; D]; 2],
) -> (f64, f64) {
    let mut d_tb = 0.0;
    let mut d_tau = 0.0;
    if tau <= tb {
        for k in 0..D {
            g1[0][k] += g[k];
            g1[1][k] += g[k] * tau;
            g1[2][k] += g[k] * tau * tau;
            d_tau += g[k] * (p1[1][k] + 2.0 * p1[2][k] * tau);
        }
    } else {
        let s = tau - tb;
        for k in 0..D {
            g1[0][k] += g[k];
            g1[1][k] += g[k] * tb;
            g1[2][k] += g[k] * tb * tb;
            g2[0][k] += g[k] * s;
            g2[1][k] += g[k] * s * s;
            let slope_left = p1[1][k] + 2.0 * p1[2][k] * tb;
            let slope_right = p2[0][k] + 2.0 * p2[1][k] * s;
            d_tb += g[k] * (slope_left - slope_right);
            d_tau += g[k] * slope_right;
        }
    }
    (d_tb, d_tau)
}

fn check_tau(tau: f64) -> Result<()> {
    if (0.0..=1.0).contains(&tau) {
        Ok(())
    } else {
        Err(Error::TimeOutOfRange(tau))
    }
}

impl MotionModel {
    /// All coefficients zero except an identity rotation; knot at 0.5.
    pub fn stationary(position: Vec3) -> Self {
        let mut m = MotionModel::zeros();
        m.trans_piece1[0] = [position.x, position.y, position.z];
        m.rot_piece1[0] = quat::IDENTITY;
        m
    }

    /// Every coefficient zero, knot at 0.5 (also the gradient accumulator).
    pub fn zeros() -> Self {
        MotionModel {
            trans_piece1: [[0.0; 3]; 3],
            trans_piece2: [[0.0; 3]; 2],
            rot_piece1: [[0.0; 4]; 3],
            rot_piece2: [[0.0; 4]; 2],
            knot_raw: 0.0,
        }
    }

    /// Constant-velocity translation and normalized-lerp rotation between two
    /// end poses over `[0, 1]`, with the knot at `t_b` not changing the path.
    pub fn linear(start: &Pose, end: &Pose, t_b: f64) -> Self {
        let mut m = MotionModel::zeros();
        let dt = end.translation - start.translation;
        m.trans_piece1[0] = [
            start.translation.x,
            start.translation.y,
            start.translation.z,
        ];
        m.trans_piece1[1] = [dt.x, dt.y, dt.z];
        m.trans_piece2[0] = m.trans_piece1[1];
        let q0 = start.rotation;
        let mut q1 = end.rotation;
        if quat::dot(&q0, &q1) < 0.0 {
            q1 = [-q1[0], -q1[1], -q1[2], -q1[3]];
        }
        m.rot_piece1[0] = q0;
        m.rot_piece1[1] = [q1[0] - q0[0], q1[1] - q0[1], q1[2] - q0[2], q1[3] - q0[3]];
        m.rot_piece2[0] = m.rot_piece1[1];
        m.knot_raw = logit(t_b);
        m
    }

    pub fn knot_time(&self) -> f64 {
        logistic(self.knot_raw.clamp(-RAW_LIMIT, RAW_LIMIT))
    }

    pub fn set_knot_time(&mut self, t_b: f64) {
        self.knot_raw = logit(t_b);
    }

    pub fn eval_translation(&self, tau: f64) -> Result<Vec3> {
        check_tau(tau)?;
        Ok(self.translation_unchecked(tau))
    }

    pub(crate) fn translation_unchecked(&self, tau: f64) -> Vec3 {
        Vec3::from(eval_piecewise(
            &self.trans_piece1,
            &self.trans_piece2,
            self.knot_time(),
            tau,
        ))
    }

    pub fn translation_velocity(&self, tau: f64) -> Vec3 {
        Vec3::from(derivative_piecewise(
            &self.trans_piece1,
            &self.trans_piece2,
            self.knot_time(),
            tau,
        ))
    }

    /// Unnormalized quaternion curve value.
    pub fn eval_rotation_raw(&self, tau: f64) -> Quat {
        eval_piecewise(&self.rot_piece1, &self.rot_piece2, self.knot_time(), tau)
    }

    pub fn eval_rotation(&self, tau: f64) -> Result<Quat> {
        check_tau(tau)?;
        let raw = self.eval_rotation_raw(tau);
        let n = quat::norm(&raw);
        if !(n >= 1e-8) {
            return Err(Error::DegenerateRotation { tau, norm: n });
        }
        Ok(quat::normalize(&raw))
    }

    pub fn pose(&self, tau: f64) -> Result<Pose> {
        Ok(Pose {
            rotation: self.eval_rotation(tau)?,
            translation: self.eval_translation(tau)?,
        })
    }

    /// Back-propagate gradients on `T(tau)` and on the raw quaternion at
    /// `tau` into `grad` (same layout as `self`). Returns `dL/dtau`.
    pub fn backward(
        &self,
        tau: f64,
        g_translation: &Vec3,
        g_rotation_raw: &Quat,
        grad: &mut MotionModel,
    ) -> f64 {
        let tb = self.knot_time();
        let gt = [g_translation.x, g_translation.y, g_translation.z];
        let (dtb_t, dtau_t) = backward_piecewise(
            &self.trans_piece1,
            &self.trans_piece2,
            tb,
            tau,
            &gt,
            &mut grad.trans_piece1,
            &mut grad.trans_piece2,
        );
        let (dtb_r, dtau_r) = backward_piecewise(
            &self.rot_piece1,
            &self.rot_piece2,
            tb,
            tau,
            g_rotation_raw,
            &mut grad.rot_piece1,
            &mut grad.rot_piece2,
        );
        grad.knot_raw += (dtb_t + dtb_r) * tb * (1.0 - tb);
        dtau_t + dtau_r
    }

    /// Number of scalar parameters in [`MotionModel::to_params`].
    pub const PARAM_COUNT: usize = 9 + 6 + 12 + 8 + 1;

    pub fn to_params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(Self::PARAM_COUNT);
        self.trans_piece1
            .iter()
            .for_each(|c| p.extend_from_slice(c));
        self.trans_piece2
            .iter()
            .for_each(|c| p.extend_from_slice(c));
        self.rot_piece1.iter().for_each(|c| p.extend_from_slice(c));
        self.rot_piece2.iter().for_each(|c| p.extend_from_slice(c));
        p.push(self.knot_raw);
        p
    }

    pub fn from_params(p: &[f64]) -> Self {
        assert_eq!(p.len(), Self::PARAM_COUNT);
        let mut m = MotionModel::zeros();
        let mut it = p.iter().copied();
        for c in m.trans_piece1.iter_mut() {
            c.iter_mut().for_each(|x| *x = it.next().unwrap());
        }
        for c in m.trans_piece2.iter_mut() {
            c.iter_mut().for_each(|x| *x = it.next().unwrap());
        }
        for c in m.rot_piece1.iter_mut() {
            c.iter_mut().for_each(|x| *x = it.next().unwrap());
        }
        for c in m.rot_piece2.iter_mut() {
            c.iter_mut().for_each(|x| *x = it.next().unwrap());
        }
        m.knot_raw = it.next().unwrap();
        m
    }

    /// Flip the sign of the whole raw rotation curve if needed so that the
    /// rotation at `tau = 0` has a non-negative scalar part. Rendering is
    /// unaffected since the curve is normalized projectively.
    pub fn canonicalize_rotation_sign(&mut self) {
        if self.rot_piece1[0][0] < 0.0 {
            for c in self.rot_piece1.iter_mut().chain(self.rot_piece2.iter_mut()) {
                c.iter_mut().for_each(|x| *x = -*x);
            }
        }
    }
}

/// Midpoints of `s_count` equal sub-intervals of frame `n`'s open-shutter
/// interval `[(n-1)/N, (n-eps)/N]` (`n` is 1-based).
pub fn sub_frame_times(n: usize, frame_count: usize, epsilon: f64, s_count: usize) -> Vec<f64> {
    assert!(
        n >= 1 && n <= frame_count,
        "frame index {n} outside 1..={frame_count}"
    );
    assert!(s_count >= 1);
    let nf = frame_count as f64;
    let start = (n as f64 - 1.0) / nf;
    let open = (1.0 - epsilon) / nf;
    (0..s_count)
        .map(|s| start + open * (s as f64 + 0.5) / s_count as f64)
        .collect()
}

/// `d tau_s / d epsilon` for the sub-frame times of [`sub_frame_times`].
pub fn sub_frame_time_epsilon_derivs(frame_count: usize, s_count: usize) -> Vec<f64> {
    (0..s_count)
        .map(|s| -(s as f64 + 0.5) / (s_count as f64 * frame_count as f64))
        .collect()
}

pub const DEFAULT_DEPTH: f64 = 6.0;
pub const INITIAL_EPSILON: f64 = 0.1;
pub const INITIAL_KNOT: f64 = 0.5;

/// Static object at the image center, `DEFAULT_DEPTH` in front of the camera,
/// identity rotation, knot at 0.5.
pub fn init_motion(camera: &Camera) -> MotionModel {
    let center = camera.unproject(
        camera.width as f64 / 2.0,
        camera.height as f64 / 2.0,
        DEFAULT_DEPTH,
    );
    let mut m = MotionModel::stationary(center);
    m.set_knot_time(INITIAL_KNOT);
    m
}

/// Persisted form of a motion model plus exposure gap.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionDocument {
    pub trans_piece1: [[f64; 3]; 3],
    pub trans_piece2: [[f64; 3]; 2],
    pub rot_piece1: [[f64; 4]; 3],
    pub rot_piece2: [[f64; 4]; 2],
    pub knot_raw: f64,
    pub t_b: f64,
    pub gap_raw: f64,
    pub epsilon: f64,
    pub frame_count: usize,
}

impl MotionDocument {
    pub fn new(motion: &MotionModel, gap: &ExposureGap, frame_count: usize) -> Self {
        MotionDocument {
            trans_piece1: motion.trans_piece1,
            trans_piece2: motion.trans_piece2,
            rot_piece1: motion.rot_piece1,
            rot_piece2: motion.rot_piece2,
            knot_raw: motion.knot_raw,
            t_b: motion.knot_time(),
            gap_raw: gap.gap_raw,
            epsilon: gap.epsilon(),
            frame_count,
        }
    }

    pub fn motion(&self) -> MotionModel {
        MotionModel {
            trans_piece1: self.trans_piece1,
            trans_piece2: self.trans_piece2,
            rot_piece1: self.rot_piece1,
            rot_piece2: self.rot_piece2,
            knot_raw: self.knot_raw,
        }
    }

    pub fn gap(&self) -> ExposureGap {
        ExposureGap {
            gap_raw: self.gap_raw,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })
    }
}
