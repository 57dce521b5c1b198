//! Gaze geometry and the angular-error metric.
//!
//! Convention: the camera looks down −z, yaw is positive to the subject's
//! left and pitch positive upward, so `(0, 0)` maps to `(0, 0, −1)`. All
//! conversions live here so the convention can be swapped in one place.

use crate::error::{usage_err, Result};

pub type Vec3 = [f64; 3];

pub fn yawpitch_to_vec(yaw: f64, pitch: f64) -> Vec3 {
    [-pitch.cos() * yaw.sin(), -pitch.sin(), -pitch.cos() * yaw.cos()]
}

fn norm(v: &Vec3) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// Inverse of [`yawpitch_to_vec`]; any positive scaling of `v` is accepted.
/// At the poles yaw is 0 (the `atan2(0, 0)` tie-break).
pub fn vec_to_yawpitch(v: &Vec3) -> Result<(f64, f64)> {
    let n = norm(v);
    if !(n > 0.0) || !n.is_finite() {
        return Err(usage_err(format!("cannot convert gaze vector {v:?} to yaw/pitch")));
    }
    // atan2 of signed zeros can return ±π; the pole is pinned to yaw 0.
    let yaw = if v[0] == 0.0 && v[2] == 0.0 { 0.0 } else { (-v[0]).atan2(-v[2]) + 0.0 };
    let pitch = (-v[1] / n).clamp(-1.0, 1.0).asin();
    Ok((yaw, pitch))
}

/// Angle between two gaze directions in degrees, in `[0, 180]`.
pub fn angular_error_deg(pred: &Vec3, gt: &Vec3) -> Result<f64> {
    let (np, ng) = (norm(pred), norm(gt));
    if !(np > 0.0 && ng > 0.0) || !np.is_finite() || !ng.is_finite() {
        return Err(usage_err(format!("angular error needs nonzero finite vectors, got {pred:?} and {gt:?}")));
    }
    let cos = (pred[0] * gt[0] + pred[1] * gt[1] + pred[2] * gt[2]) / (np * ng);
    Ok(cos.clamp(-1.0, 1.0).acos().to_degrees())
}

/// Unit-length copy of `v`.
pub fn normalized(v: &Vec3) -> Result<Vec3> {
    let n = norm(v);
    if !(n > 0.0) {
        return Err(usage_err("cannot normalize a zero gaze vector"));
    }
    Ok([v[0] / n, v[1] / n, v[2] / n])
}
