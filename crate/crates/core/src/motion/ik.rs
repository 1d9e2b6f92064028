//! Inverse kinematics entry point with motion-error reporting.

use super::MotionError;
use crate::sim::fk;

/// Two-link planar IK on the knee-backward branch.
///
/// `foot_target_body` is relative to the hip attachment. Forward kinematics
/// of the returned `(hip, knee)` reproduces the target to well below 1e-9 m
/// on reachable inputs.
pub fn ik_leg(foot_target_body: [f64; 2], thigh: f64, shank: f64) -> Result<(f64, f64), MotionError> {
    fk::ik_two_link(foot_target_body, thigh, shank).ok_or(MotionError::UnreachableFootTarget {
        x: foot_target_body[0],
        z: foot_target_body[1],
        frame: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reachable_target_round_trips() {
        let (hip, knee) = ik_leg([0.1, -0.3], 0.2, 0.2).unwrap();
        let foot = fk::foot_body(0.0, 0.2, 0.2, hip, knee);
        assert!((foot[0] - 0.1).abs() < 1e-12);
        assert!((foot[1] + 0.3).abs() < 1e-12);
    }

    #[test]
    fn out_of_reach_is_an_error() {
        let err = ik_leg([0.0, -0.6], 0.2, 0.2).unwrap_err();
        assert!(matches!(err, MotionError::UnreachableFootTarget { frame: None, .. }));
    }
}
