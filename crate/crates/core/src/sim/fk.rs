//! Planar two-link leg kinematics.
//!
//! Body frame: x forward, z up, origin at the trunk centre of mass. A leg
//! hangs from its hip attachment at `(attach_x, 0)`. Joint angle zero points
//! the link straight down; positive angles swing it forward. The knee angle
//! is measured relative to the thigh and the knee-backward branch keeps it
//! non-positive.

/// Unit vector of a link at absolute angle `a` (0 = straight down).
#[inline]
fn link_dir(a: f64) -> [f64; 2] {
    [a.sin(), -a.cos()]
}

/// Foot position in the body frame.
#[inline]
pub fn foot_body(attach_x: f64, thigh: f64, shank: f64, hip: f64, knee: f64) -> [f64; 2] {
    let t = link_dir(hip);
    let s = link_dir(hip + knee);
    [
        attach_x + thigh * t[0] + shank * s[0],
        thigh * t[1] + shank * s[1],
    ]
}

/// Columns of `d foot_body / d (hip, knee)`.
#[inline]
pub fn foot_jacobian(thigh: f64, shank: f64, hip: f64, knee: f64) -> [[f64; 2]; 2] {
    let (sh, ch) = hip.sin_cos();
    let (sk, ck) = (hip + knee).sin_cos();
    [
        // d/d hip
        [thigh * ch + shank * ck, thigh * sh + shank * sk],
        // d/d knee
        [shank * ck, shank * sk],
    ]
}

/// Two-link inverse kinematics, knee-backward branch.
///
/// `target` is relative to the hip attachment, body frame. Returns
/// `(hip, knee)` with `knee <= 0`, or `None` when the target is outside the
/// annulus `[|thigh - shank|, thigh + shank]`.
pub fn ik_two_link(target: [f64; 2], thigh: f64, shank: f64) -> Option<(f64, f64)> {
    let r2 = target[0] * target[0] + target[1] * target[1];
    let r = r2.sqrt();
    let eps = 1e-12;
    if r > thigh + shank + eps || r < (thigh - shank).abs() - eps {
        return None;
    }
    let cos_knee = ((r2 - thigh * thigh - shank * shank) / (2.0 * thigh * shank)).clamp(-1.0, 1.0);
    let knee = -cos_knee.acos();
    let a = thigh + shank * cos_knee;
    let b = shank * knee.sin();
    let hip = f64::atan2(a * target[0] + b * target[1], b * target[0] - a * target[1]);
    Some((hip, knee))
}

/// Rotate a body-frame vector into the world frame (pitch positive nose-up).
#[inline]
pub fn body_to_world(pitch: f64, v: [f64; 2]) -> [f64; 2] {
    let (s, c) = pitch.sin_cos();
    [c * v[0] - s * v[1], s * v[0] + c * v[1]]
}

/// Rotate a world-frame vector into the body frame.
#[inline]
pub fn world_to_body(pitch: f64, v: [f64; 2]) -> [f64; 2] {
    let (s, c) = pitch.sin_cos();
    [c * v[0] + s * v[1], -s * v[0] + c * v[1]]
}

/// 90° counter-clockwise rotation, `d/dθ R(θ)v = θ̇ · perp(R v)`.
#[inline]
pub fn perp(v: [f64; 2]) -> [f64; 2] {
    [-v[1], v[0]]
}
