//! Reference motion handling: synthetic parametric gaits, inverse-kinematics
//! retargeting, left/right mirroring, and clip file I/O.
//!
//! The synthetic generator stands in for a motion-capture dataset: cycloidal
//! swing trajectories with stance feet pinned to the ground, so clips are
//! skate-free by construction. Imported clips go through the same retarget
//! path. All operations are pure; clips are immutable once built.

mod clipio;
mod ik;

pub use clipio::{load_clip, save_clip, CLIP_SCHEMA_VERSION};
pub use ik::ik_leg;

use crate::sim::{fk, RobotMorphology, N_JOINTS, N_LEGS};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MotionError {
    #[error("foot target ({x:.4}, {z:.4}) unreachable for leg geometry{}", frame.map(|f| format!(" at frame {f}")).unwrap_or_default())]
    UnreachableFootTarget {
        x: f64,
        z: f64,
        frame: Option<usize>,
    },
    #[error("invalid gait parameters: {0}")]
    InvalidGait(String),
    #[error("clip parse error at line {line}: {msg}")]
    ParseError { line: usize, msg: String },
    #[error("clip schema version {found} unsupported (expected {expected})")]
    SchemaVersionMismatch { found: u32, expected: u32 },
    #[error("clip I/O: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GaitLabel {
    Walk,
    Trot,
    Pace,
    Gallop,
    Other,
}

impl GaitLabel {
    pub fn name(self) -> &'static str {
        match self {
            GaitLabel::Walk => "walk",
            GaitLabel::Trot => "trot",
            GaitLabel::Pace => "pace",
            GaitLabel::Gallop => "gallop",
            GaitLabel::Other => "other",
        }
    }
}

impl std::str::FromStr for GaitLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "walk" => Ok(GaitLabel::Walk),
            "trot" => Ok(GaitLabel::Trot),
            "pace" => Ok(GaitLabel::Pace),
            "gallop" => Ok(GaitLabel::Gallop),
            "other" => Ok(GaitLabel::Other),
            other => Err(format!("unknown gait label '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClipSource {
    Synthetic,
    Imported,
}

/// One reference pose; foot positions are body-frame and FK-consistent with
/// the joint angles (checked by [`MotionClip::validate`]).
#[derive(Debug, Clone, PartialEq)]
pub struct ReferencePose {
    pub base_height: f64,
    pub base_pitch: f64,
    pub base_forward_vel: f64,
    pub joint_angles: [f64; N_JOINTS],
    pub foot_positions_body: [[f64; 2]; N_LEGS],
}

/// A time-indexed sequence of retargeted reference poses.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionClip {
    pub frame_rate: f64,
    pub frames: Vec<ReferencePose>,
    pub gait_label: GaitLabel,
    pub source: ClipSource,
    /// Leg length (thigh + shank) of the morphology the poses are expressed
    /// in; retargeting scales by the ratio of leg lengths.
    pub leg_length: f64,
}

/// Tolerance for FK consistency of stored foot positions, metres.
pub const FK_CONSISTENCY_TOL: f64 = 1.0e-6;

impl MotionClip {
    pub fn duration(&self) -> f64 {
        (self.frames.len().saturating_sub(1)) as f64 / self.frame_rate
    }

    /// Check the clip invariants: at least two frames, positive frame rate,
    /// FK-consistent foot positions.
    pub fn validate(&self, morph: &RobotMorphology) -> Result<(), MotionError> {
        if self.frames.len() < 2 {
            return Err(MotionError::InvalidGait("clip needs at least 2 frames".into()));
        }
        if !(self.frame_rate > 0.0) {
            return Err(MotionError::InvalidGait("frame rate must be positive".into()));
        }
        for (f, pose) in self.frames.iter().enumerate() {
            for leg in 0..N_LEGS {
                let fk_pos = fk::foot_body(
                    morph.leg_attach_x[leg],
                    morph.thigh_length,
                    morph.shank_length,
                    pose.joint_angles[2 * leg],
                    pose.joint_angles[2 * leg + 1],
                );
                let dx = fk_pos[0] - pose.foot_positions_body[leg][0];
                let dz = fk_pos[1] - pose.foot_positions_body[leg][1];
                if (dx * dx + dz * dz).sqrt() > FK_CONSISTENCY_TOL {
                    return Err(MotionError::InvalidGait(format!(
                        "frame {f} leg {leg}: stored foot position inconsistent with joint angles"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Linearly interpolated pose at time `t` (clamped to the clip span).
    pub fn sample(&self, t: f64) -> ReferencePose {
        let ft = (t * self.frame_rate).max(0.0);
        let i = (ft.floor() as usize).min(self.frames.len() - 1);
        let j = (i + 1).min(self.frames.len() - 1);
        let alpha = (ft - i as f64).clamp(0.0, 1.0);
        let (a, b) = (&self.frames[i], &self.frames[j]);
        let lerp = |x: f64, y: f64| x + alpha * (y - x);
        let mut joint_angles = [0.0; N_JOINTS];
        for k in 0..N_JOINTS {
            joint_angles[k] = lerp(a.joint_angles[k], b.joint_angles[k]);
        }
        let mut feet = [[0.0; 2]; N_LEGS];
        for leg in 0..N_LEGS {
            feet[leg][0] = lerp(a.foot_positions_body[leg][0], b.foot_positions_body[leg][0]);
            feet[leg][1] = lerp(a.foot_positions_body[leg][1], b.foot_positions_body[leg][1]);
        }
        ReferencePose {
            base_height: lerp(a.base_height, b.base_height),
            base_pitch: lerp(a.base_pitch, b.base_pitch),
            base_forward_vel: lerp(a.base_forward_vel, b.base_forward_vel),
            joint_angles,
            foot_positions_body: feet,
        }
    }
}

/// Parameters of the synthetic gait generator.
///
/// `step_length` is the fore-aft stance excursion of a foot and must equal
/// `forward_vel * duty_factor * period` (stance feet are pinned to the
/// ground, so the excursion is fixed by the body speed). The preset
/// constructors keep the pair consistent.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaitParams {
    pub period: f64,
    pub duty_factor: f64,
    /// Per-leg phase offsets (FL, FR, HL, HR), fractions of a cycle.
    pub phase_offsets: [f64; N_LEGS],
    pub step_length: f64,
    pub step_height: f64,
    pub base_height: f64,
    pub forward_vel: f64,
}

impl GaitParams {
    fn preset(
        offsets: [f64; N_LEGS],
        duty: f64,
        period: f64,
        speed: f64,
        step_height: f64,
        base_height: f64,
    ) -> Self {
        Self {
            period,
            duty_factor: duty,
            phase_offsets: offsets,
            step_length: speed * duty * period,
            step_height,
            base_height,
            forward_vel: speed,
        }
    }

    /// Lateral-sequence walk at `speed` m/s.
    pub fn walk(speed: f64) -> Self {
        Self::preset([0.0, 0.5, 0.75, 0.25], 0.75, 0.8, speed, 0.06, 0.27)
    }

    /// Diagonal-pair trot at `speed` m/s.
    pub fn trot(speed: f64) -> Self {
        Self::preset([0.0, 0.5, 0.5, 0.0], 0.5, 0.5, speed, 0.08, 0.27)
    }

    /// Lateral-pair pace at `speed` m/s.
    pub fn pace(speed: f64) -> Self {
        Self::preset([0.0, 0.5, 0.0, 0.5], 0.55, 0.5, speed, 0.08, 0.27)
    }

    /// Rotary-ish gallop at `speed` m/s.
    pub fn gallop(speed: f64) -> Self {
        Self::preset([0.0, 0.1, 0.5, 0.6], 0.35, 0.35, speed, 0.1, 0.28)
    }

    pub fn label(&self) -> GaitLabel {
        let o = self.phase_offsets;
        let close = |a: f64, b: f64| (a - b).abs() < 1e-9;
        if close(o[0], 0.0) && close(o[1], 0.5) && close(o[2], 0.5) && close(o[3], 0.0) {
            GaitLabel::Trot
        } else if close(o[0], 0.0) && close(o[1], 0.5) && close(o[2], 0.0) && close(o[3], 0.5) {
            GaitLabel::Pace
        } else if close(o[0], 0.0) && close(o[1], 0.5) && close(o[2], 0.75) && close(o[3], 0.25) {
            GaitLabel::Walk
        } else if close(o[0], 0.0) && close(o[1], 0.1) && close(o[2], 0.5) && close(o[3], 0.6) {
            GaitLabel::Gallop
        } else {
            GaitLabel::Other
        }
    }

    pub fn validate(&self) -> Result<(), MotionError> {
        if !(self.period > 0.0) {
            return Err(MotionError::InvalidGait("period must be positive".into()));
        }
        if !(self.duty_factor > 0.0 && self.duty_factor < 1.0) {
            return Err(MotionError::InvalidGait(format!(
                "duty_factor must lie in (0, 1), got {}",
                self.duty_factor
            )));
        }
        for (i, o) in self.phase_offsets.iter().enumerate() {
            if !(0.0..1.0).contains(o) {
                return Err(MotionError::InvalidGait(format!(
                    "phase_offsets[{i}] must lie in [0, 1), got {o}"
                )));
            }
        }
        if self.step_height < 0.0 {
            return Err(MotionError::InvalidGait("step_height must be >= 0".into()));
        }
        if !(self.base_height > 0.0) {
            return Err(MotionError::InvalidGait("base_height must be positive".into()));
        }
        let consistent = self.forward_vel * self.duty_factor * self.period;
        if (self.step_length - consistent).abs() > 1e-6 {
            return Err(MotionError::InvalidGait(format!(
                "step_length {} inconsistent with forward_vel*duty*period = {consistent} \
                 (stance feet are ground-pinned)",
                self.step_length
            )));
        }
        Ok(())
    }
}

/// Generate a synthetic clip: stance feet pinned to the ground (moving at
/// `-forward_vel` in the body frame), cycloidal swing recovery, flat pitch.
pub fn synth_gait(
    params: &GaitParams,
    morph: &RobotMorphology,
    n_frames: usize,
    frame_rate: f64,
) -> Result<MotionClip, MotionError> {
    params.validate()?;
    if n_frames < 2 {
        return Err(MotionError::InvalidGait("need at least 2 frames".into()));
    }
    if !(frame_rate > 0.0) {
        return Err(MotionError::InvalidGait("frame rate must be positive".into()));
    }
    let mut frames = Vec::with_capacity(n_frames);
    for f in 0..n_frames {
        let t = f as f64 / frame_rate;
        let mut joint_angles = [0.0; N_JOINTS];
        let mut feet = [[0.0; 2]; N_LEGS];
        for leg in 0..N_LEGS {
            let foot = foot_at_phase(params, leg, t);
            // Body-frame target relative to the hip attachment.
            let target = [foot[0], foot[1] - params.base_height];
            let (hip, knee) =
                fk::ik_two_link(target, morph.thigh_length, morph.shank_length).ok_or(
                    MotionError::UnreachableFootTarget {
                        x: target[0],
                        z: target[1],
                        frame: Some(f),
                    },
                )?;
            joint_angles[2 * leg] = hip;
            joint_angles[2 * leg + 1] = knee;
            feet[leg] = fk::foot_body(
                morph.leg_attach_x[leg],
                morph.thigh_length,
                morph.shank_length,
                hip,
                knee,
            );
        }
        frames.push(ReferencePose {
            base_height: params.base_height,
            base_pitch: 0.0,
            base_forward_vel: params.forward_vel,
            joint_angles,
            foot_positions_body: feet,
        });
    }
    Ok(MotionClip {
        frame_rate,
        frames,
        gait_label: params.label(),
        source: ClipSource::Synthetic,
        leg_length: morph.leg_length(),
    })
}

/// Foot position relative to the hip attachment axis at time `t`:
/// `(x offset from hip, height above ground)`.
///
/// Stance spans phase [0, duty); the foot is ground-pinned, so in the body
/// frame it runs backward from +L/2 to -L/2. Swing returns it along a
/// cycloid whose ends match the stance boundary, giving zero foot speed at
/// touch-down and lift-off.
pub fn foot_at_phase(params: &GaitParams, leg: usize, t: f64) -> [f64; 2] {
    let phase = (t / params.period + params.phase_offsets[leg]).rem_euclid(1.0);
    let half = params.step_length / 2.0;
    if phase < params.duty_factor {
        let s = phase / params.duty_factor;
        [half - params.step_length * s, 0.0]
    } else {
        let s = (phase - params.duty_factor) / (1.0 - params.duty_factor);
        // Cycloidal profile: position (s - sin(2*pi*s)/(2*pi)) has zero
        // slope at both ends.
        let tau = std::f64::consts::TAU;
        let along = s - (tau * s).sin() / tau;
        let x = -half + params.step_length * along;
        let z = params.step_height * 0.5 * (1.0 - (tau * s).cos());
        [x, z]
    }
}

/// True when `leg` is in stance at time `t`.
pub fn in_stance(params: &GaitParams, leg: usize, t: f64) -> bool {
    (t / params.period + params.phase_offsets[leg]).rem_euclid(1.0) < params.duty_factor
}

/// Mirror a clip left/right: FL <-> FR and HL <-> HR joint sequences and
/// foot positions swap; base fields are unchanged in the sagittal reduction.
/// Exact involution.
pub fn mirror(clip: &MotionClip) -> MotionClip {
    let mut out = clip.clone();
    for pose in out.frames.iter_mut() {
        pose.joint_angles.swap(0, 2);
        pose.joint_angles.swap(1, 3);
        pose.joint_angles.swap(4, 6);
        pose.joint_angles.swap(5, 7);
        pose.foot_positions_body.swap(0, 1);
        pose.foot_positions_body.swap(2, 3);
    }
    out
}

/// Retarget `clip` onto `morph`: scale the base trajectory and foot targets
/// by the leg-length ratio, re-solve the joint angles per frame, clamp to
/// the joint limits, and re-establish FK consistency.
pub fn retarget(clip: &MotionClip, morph: &RobotMorphology) -> Result<MotionClip, MotionError> {
    let ratio = morph.leg_length() / clip.leg_length;
    let limits = morph.joint_limits();
    let mut frames = Vec::with_capacity(clip.frames.len());
    for (f, pose) in clip.frames.iter().enumerate() {
        let mut joint_angles = [0.0; N_JOINTS];
        let mut feet = [[0.0; 2]; N_LEGS];
        for leg in 0..N_LEGS {
            let target = [
                pose.foot_positions_body[leg][0] * ratio - morph.leg_attach_x[leg],
                pose.foot_positions_body[leg][1] * ratio,
            ];
            let (hip, knee) =
                fk::ik_two_link(target, morph.thigh_length, morph.shank_length).ok_or(
                    MotionError::UnreachableFootTarget {
                        x: target[0],
                        z: target[1],
                        frame: Some(f),
                    },
                )?;
            let hip = hip.clamp(limits[2 * leg].0, limits[2 * leg].1);
            let knee = knee.clamp(limits[2 * leg + 1].0, limits[2 * leg + 1].1);
            joint_angles[2 * leg] = hip;
            joint_angles[2 * leg + 1] = knee;
            feet[leg] = fk::foot_body(
                morph.leg_attach_x[leg],
                morph.thigh_length,
                morph.shank_length,
                hip,
                knee,
            );
        }
        frames.push(ReferencePose {
            base_height: pose.base_height * ratio,
            base_pitch: pose.base_pitch,
            base_forward_vel: pose.base_forward_vel * ratio,
            joint_angles,
            foot_positions_body: feet,
        });
    }
    Ok(MotionClip {
        frame_rate: clip.frame_rate,
        frames,
        gait_label: clip.gait_label,
        source: ClipSource::Imported,
        leg_length: morph.leg_length(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn morph() -> RobotMorphology {
        RobotMorphology::default()
    }

    #[test]
    fn trot_preset_contact_schedule() {
        let p = GaitParams::trot(1.0);
        // FL and HR share phase, FR and HL share phase, half a period apart.
        for k in 0..20 {
            let t = 0.025 * k as f64;
            assert_eq!(in_stance(&p, 0, t), in_stance(&p, 3, t));
            assert_eq!(in_stance(&p, 1, t), in_stance(&p, 2, t));
            assert_eq!(in_stance(&p, 0, t), in_stance(&p, 1, t + 0.25));
        }
    }

    #[test]
    fn zero_speed_zero_step_is_standing_still() {
        let mut p = GaitParams::trot(0.0);
        p.step_height = 0.0;
        let clip = synth_gait(&p, &morph(), 40, 50.0).unwrap();
        for pose in &clip.frames {
            assert_eq!(pose.joint_angles, clip.frames[0].joint_angles);
        }
    }

    #[test]
    fn synthetic_clip_is_fk_consistent() {
        for p in [
            GaitParams::walk(0.5),
            GaitParams::trot(1.0),
            GaitParams::pace(1.2),
            GaitParams::gallop(2.0),
        ] {
            let clip = synth_gait(&p, &morph(), 60, 50.0).unwrap();
            clip.validate(&morph()).unwrap();
        }
    }

    #[test]
    fn stance_feet_do_not_skate() {
        // World-frame foot velocity during stance: the body moves at v while
        // the body-frame foot position moves at -v, cancelling exactly.
        let p = GaitParams::trot(1.0);
        let dt = 1e-5;
        for leg in 0..N_LEGS {
            for k in 0..400 {
                let t = 0.001 + 0.00124 * k as f64;
                // Stay clear of the stance/swing boundaries.
                let phase = (t / p.period + p.phase_offsets[leg]).rem_euclid(1.0);
                if phase > p.duty_factor - 0.01 || phase < 0.01 {
                    continue;
                }
                let a = foot_at_phase(&p, leg, t);
                let b = foot_at_phase(&p, leg, t + dt);
                let world_vx = p.forward_vel + (b[0] - a[0]) / dt;
                let world_vz = (b[1] - a[1]) / dt;
                assert!(
                    world_vx.abs() < 1e-6 && world_vz.abs() < 1e-6,
                    "foot skate at t={t}: ({world_vx}, {world_vz})"
                );
            }
        }
    }

    #[test]
    fn inconsistent_step_length_is_rejected() {
        let mut p = GaitParams::trot(1.0);
        p.step_length += 0.05;
        assert!(matches!(
            synth_gait(&p, &morph(), 10, 50.0),
            Err(MotionError::InvalidGait(_))
        ));
    }

    #[test]
    fn mirror_is_an_exact_involution() {
        let clip = synth_gait(&GaitParams::gallop(2.0), &morph(), 50, 50.0).unwrap();
        let twice = mirror(&mirror(&clip));
        assert_eq!(clip, twice);
    }

    #[test]
    fn mirror_swaps_contact_chirality() {
        // In a pace clip the left pair (FL, HL) and right pair (FR, HR) are
        // in phase; mirroring exchanges the pairs' joint sequences.
        let p = GaitParams::pace(1.0);
        let clip = synth_gait(&p, &morph(), 50, 50.0).unwrap();
        let m = mirror(&clip);
        for (a, b) in clip.frames.iter().zip(&m.frames) {
            assert_eq!(a.joint_angles[0], b.joint_angles[2]);
            assert_eq!(a.joint_angles[2], b.joint_angles[0]);
            assert_eq!(a.joint_angles[4], b.joint_angles[6]);
            assert_eq!(a.joint_angles[6], b.joint_angles[4]);
        }
        assert_eq!(m.gait_label, GaitLabel::Pace);
    }

    #[test]
    fn identity_retarget_reproduces_joint_angles() {
        let clip = synth_gait(&GaitParams::trot(1.0), &morph(), 50, 50.0).unwrap();
        let rt = retarget(&clip, &morph()).unwrap();
        for (a, b) in clip.frames.iter().zip(&rt.frames) {
            for j in 0..N_JOINTS {
                assert_relative_eq!(a.joint_angles[j], b.joint_angles[j], epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn uniform_scale_retarget_is_angle_invariant() {
        let target = morph();
        let mut source = morph();
        source.thigh_length *= 2.0;
        source.shank_length *= 2.0;
        source.trunk_length *= 2.0;
        for a in source.leg_attach_x.iter_mut() {
            *a *= 2.0;
        }
        let mut p = GaitParams::trot(1.0);
        p.base_height *= 2.0;
        p.step_length *= 2.0;
        p.step_height *= 2.0;
        p.forward_vel *= 2.0;
        let big = synth_gait(&p, &source, 50, 50.0).unwrap();
        let rt = retarget(&big, &target).unwrap();
        let native = synth_gait(&GaitParams::trot(1.0), &target, 50, 50.0).unwrap();
        for (a, b) in native.frames.iter().zip(&rt.frames) {
            for j in 0..N_JOINTS {
                assert_relative_eq!(a.joint_angles[j], b.joint_angles[j], epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn infeasible_frame_reports_its_index() {
        let mut clip = synth_gait(&GaitParams::trot(1.0), &morph(), 10, 50.0).unwrap();
        clip.frames[7].foot_positions_body[2] = [5.0, -5.0];
        let err = retarget(&clip, &morph()).unwrap_err();
        assert!(matches!(
            err,
            MotionError::UnreachableFootTarget { frame: Some(7), .. }
        ));
    }
}
