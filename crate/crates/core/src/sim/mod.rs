//! Planar sagittal quadruped simulator.
//!
//! Four independent two-link legs (FL, FR, HL, HR order, hip then knee per
//! leg) hang from a rigid trunk moving in the x-z plane. Total mass is
//! lumped at the trunk COM; each joint carries a fixed reflected inertia.
//! Semi-implicit Euler over `substeps_per_control` substeps per control
//! period, with impulse-based foot contact ([`contact`]) and PD actuation.
//! Actuator torques act on their joint coordinate only; reaction torques on
//! the trunk are neglected.

pub mod contact;
pub mod fk;

use contact::{ContactPoint, ContactSolver};
use rand::Rng;
use thiserror::Error;

/// Number of legs; order FL, FR, HL, HR.
pub const N_LEGS: usize = 4;
/// Actuated joints (hip, knee per leg).
pub const N_JOINTS: usize = 8;
/// Proprioceptive observation width.
pub const OBS_DIM: usize = 32;
/// Privileged information width.
pub const PRIV_DIM: usize = 27;
/// Number of terrain height samples in the privileged info.
pub const N_HEIGHT_SAMPLES: usize = 11;
/// Foot counts as touching when within this height of the ground, m.
pub const CONTACT_TOL: f64 = 1.0e-3;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("state became non-finite at t={time}s ({what})")]
    NonFiniteState { time: f64, what: &'static str },
    #[error("invalid randomization range [{lo}, {hi}] for {field}")]
    InvalidRange { field: &'static str, lo: f64, hi: f64 },
}

/// Geometry and mass properties of the planar robot.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RobotMorphology {
    pub trunk_mass: f64,
    pub trunk_inertia: f64,
    pub trunk_length: f64,
    /// Hip attachment x per leg (FL, FR, HL, HR); front pair and hind pair
    /// each share a value.
    pub leg_attach_x: [f64; 4],
    pub thigh_length: f64,
    pub shank_length: f64,
    /// Masses of (thigh, shank) links, identical across legs.
    pub link_masses: [f64; 2],
    pub joint_torque_limit: f64,
    /// (lo, hi) for hip joints, rad.
    pub hip_limits: (f64, f64),
    /// (lo, hi) for knee joints, rad.
    pub knee_limits: (f64, f64),
}

impl Default for RobotMorphology {
    fn default() -> Self {
        Self {
            trunk_mass: 4.7,
            trunk_inertia: 0.12,
            trunk_length: 0.366,
            leg_attach_x: [0.183, 0.183, -0.183, -0.183],
            thigh_length: 0.2,
            shank_length: 0.2,
            link_masses: [1.0, 0.25],
            joint_torque_limit: 33.5,
            hip_limits: (-1.2, 1.5),
            knee_limits: (-2.6, -0.15),
        }
    }
}

impl RobotMorphology {
    pub fn validate(&self) -> Result<(), String> {
        let positive = [
            ("trunk_mass", self.trunk_mass),
            ("trunk_inertia", self.trunk_inertia),
            ("trunk_length", self.trunk_length),
            ("thigh_length", self.thigh_length),
            ("shank_length", self.shank_length),
            ("link_masses[0]", self.link_masses[0]),
            ("link_masses[1]", self.link_masses[1]),
            ("joint_torque_limit", self.joint_torque_limit),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(format!("{name} must be strictly positive, got {v}"));
            }
        }
        if self.leg_attach_x[0] != self.leg_attach_x[1] || self.leg_attach_x[2] != self.leg_attach_x[3] {
            return Err("front legs and hind legs must each share attach_x".into());
        }
        if self.hip_limits.0 >= self.hip_limits.1 || self.knee_limits.0 >= self.knee_limits.1 {
            return Err("joint limits must satisfy lo < hi".into());
        }
        Ok(())
    }

    pub fn leg_length(&self) -> f64 {
        self.thigh_length + self.shank_length
    }

    /// Total mass with all four legs.
    pub fn total_mass(&self) -> f64 {
        self.trunk_mass + 4.0 * (self.link_masses[0] + self.link_masses[1])
    }

    /// Reflected inertia of a hip joint: thigh rod plus the extended shank.
    pub fn hip_inertia(&self) -> f64 {
        let (mt, ms) = (self.link_masses[0], self.link_masses[1]);
        let (lt, ls) = (self.thigh_length, self.shank_length);
        mt * lt * lt / 3.0 + ms * (lt * lt + lt * ls + ls * ls / 3.0)
    }

    /// Reflected inertia of a knee joint: the shank rod about the knee.
    pub fn knee_inertia(&self) -> f64 {
        self.link_masses[1] * self.shank_length * self.shank_length / 3.0
    }

    pub fn joint_inertias(&self) -> [f64; N_JOINTS] {
        let mut out = [0.0; N_JOINTS];
        for leg in 0..N_LEGS {
            out[2 * leg] = self.hip_inertia();
            out[2 * leg + 1] = self.knee_inertia();
        }
        out
    }

    /// Joint limits in flat (hip, knee) x 4 order.
    pub fn joint_limits(&self) -> [(f64, f64); N_JOINTS] {
        let mut out = [(0.0, 0.0); N_JOINTS];
        for leg in 0..N_LEGS {
            out[2 * leg] = self.hip_limits;
            out[2 * leg + 1] = self.knee_limits;
        }
        out
    }

    /// Joint angles that place every foot `stand_height` below the trunk.
    pub fn standing_pose(&self, stand_height: f64) -> [f64; N_JOINTS] {
        let (hip, knee) = fk::ik_two_link([0.0, -stand_height], self.thigh_length, self.shank_length)
            .expect("standing height within leg reach");
        let mut q = [0.0; N_JOINTS];
        for leg in 0..N_LEGS {
            q[2 * leg] = hip;
            q[2 * leg + 1] = knee;
        }
        q
    }
}

/// Dynamics parameters, including the randomized scales.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhysicsParams {
    /// Signed gravity, m/s² (negative points down).
    pub gravity: f64,
    pub friction_coeff: f64,
    pub motor_gain_scale: [f64; N_JOINTS],
    pub mass_scale: f64,
    pub kp: f64,
    pub kd: f64,
    pub dt_physics: f64,
    pub substeps_per_control: u32,
}

impl Default for PhysicsParams {
    fn default() -> Self {
        Self {
            gravity: -9.81,
            friction_coeff: 0.8,
            motor_gain_scale: [1.0; N_JOINTS],
            mass_scale: 1.0,
            kp: 20.0,
            kd: 0.5,
            dt_physics: 0.005,
            substeps_per_control: 4,
        }
    }
}

impl PhysicsParams {
    pub fn control_period(&self) -> f64 {
        self.dt_physics * self.substeps_per_control as f64
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.friction_coeff < 0.0 {
            return Err("friction_coeff must be >= 0".into());
        }
        if !(self.dt_physics > 0.0) {
            return Err("dt_physics must be > 0".into());
        }
        if self.substeps_per_control < 1 {
            return Err("substeps_per_control must be >= 1".into());
        }
        if self.kp < 0.0 || self.kd < 0.0 {
            return Err("PD gains must be >= 0".into());
        }
        Ok(())
    }
}

/// Uniform ranges for [`randomize_params`].
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RandomizationRanges {
    pub friction: (f64, f64),
    pub mass_scale: (f64, f64),
    pub motor_gain_scale: (f64, f64),
}

impl Default for RandomizationRanges {
    fn default() -> Self {
        Self {
            friction: (0.2, 1.25),
            mass_scale: (0.8, 1.2),
            motor_gain_scale: (0.9, 1.1),
        }
    }
}

impl RandomizationRanges {
    /// Degenerate ranges that reproduce the base parameters exactly.
    pub fn disabled() -> Self {
        Self {
            friction: (0.0, 0.0),
            mass_scale: (1.0, 1.0),
            motor_gain_scale: (1.0, 1.0),
        }
    }
}

/// Episode perturbations: velocity kicks and actuator torque noise applied
/// every `interval` control steps.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerturbationSpec {
    /// Half-range of the linear velocity kick, m/s (applied on x and z).
    pub lin_vel_kick: f64,
    /// Half-range of the pitch-rate kick, rad/s.
    pub ang_vel_kick: f64,
    /// Half-range of the per-joint torque offset, N·m.
    pub torque_noise: f64,
    /// Control steps between scheduled perturbations.
    pub interval: u32,
}

impl Default for PerturbationSpec {
    fn default() -> Self {
        Self {
            lin_vel_kick: 0.5,
            ang_vel_kick: 0.4,
            torque_noise: 0.5,
            interval: 200,
        }
    }
}

impl PerturbationSpec {
    pub fn disabled() -> Self {
        Self {
            lin_vel_kick: 0.0,
            ang_vel_kick: 0.0,
            torque_noise: 0.0,
            interval: 200,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.lin_vel_kick < 0.0 || self.ang_vel_kick < 0.0 || self.torque_noise < 0.0 {
            return Err("perturbation half-ranges must be >= 0".into());
        }
        if self.interval < 1 {
            return Err("perturbation interval must be >= 1".into());
        }
        Ok(())
    }

    pub fn is_active(&self) -> bool {
        self.lin_vel_kick > 0.0 || self.ang_vel_kick > 0.0 || self.torque_noise > 0.0
    }
}

/// Additive observation noise half-ranges (uniform).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSpec {
    pub joint_angles: f64,
    pub joint_vels: f64,
    pub projected_gravity: f64,
    pub base_pitch_rate: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            joint_angles: 0.01,
            joint_vels: 1.5,
            projected_gravity: 0.05,
            base_pitch_rate: 0.2,
        }
    }
}

impl NoiseSpec {
    pub fn zero() -> Self {
        Self {
            joint_angles: 0.0,
            joint_vels: 0.0,
            projected_gravity: 0.0,
            base_pitch_rate: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.joint_angles < 0.0
            || self.joint_vels < 0.0
            || self.projected_gravity < 0.0
            || self.base_pitch_rate < 0.0
        {
            return Err("noise amplitudes must be >= 0".into());
        }
        Ok(())
    }
}

/// Full simulator state of one robot.
#[derive(Debug, Clone, PartialEq)]
pub struct RobotState {
    /// Trunk COM position (x, z), world frame, m.
    pub base_pos: [f64; 2],
    /// Pitch, rad, positive nose-up.
    pub base_pitch: f64,
    /// Trunk COM velocity (x, z), m/s.
    pub base_lin_vel: [f64; 2],
    /// Pitch rate, rad/s.
    pub base_pitch_rate: f64,
    /// Joint angles, rad, (hip, knee) per leg FL, FR, HL, HR.
    pub joint_angles: [f64; N_JOINTS],
    /// Joint velocities, rad/s.
    pub joint_vels: [f64; N_JOINTS],
    /// Per-foot touch flags, set from foot height vs terrain after a step.
    pub foot_contact: [bool; N_LEGS],
    /// Per-foot normal force averaged over the last control period, N.
    pub contact_force_normal: [f64; N_LEGS],
    /// Per-foot mean |tangential| force over the last control period, N.
    pub contact_force_tangent: [f64; N_LEGS],
    /// Simulation time, s.
    pub time: f64,
}

impl RobotState {
    /// Robot standing at `x` on `terrain` with every foot `stand_height`
    /// below the trunk, at rest.
    pub fn standing(
        morph: &RobotMorphology,
        terrain: &crate::terrain::Terrain,
        x: f64,
        stand_height: f64,
    ) -> RobotState {
        let q = morph.standing_pose(stand_height);
        // Rest the lowest foot exactly on the highest ground cell under it.
        let mut ground = f64::NEG_INFINITY;
        for leg in 0..N_LEGS {
            let foot = fk::foot_body(
                morph.leg_attach_x[leg],
                morph.thigh_length,
                morph.shank_length,
                q[2 * leg],
                q[2 * leg + 1],
            );
            ground = ground.max(terrain.height_at(x + foot[0]));
        }
        RobotState {
            base_pos: [x, ground + stand_height],
            base_pitch: 0.0,
            base_lin_vel: [0.0, 0.0],
            base_pitch_rate: 0.0,
            joint_angles: q,
            joint_vels: [0.0; N_JOINTS],
            foot_contact: [false; N_LEGS],
            contact_force_normal: [0.0; N_LEGS],
            contact_force_tangent: [0.0; N_LEGS],
            time: 0.0,
        }
    }

    /// World-frame foot position for `leg`.
    pub fn foot_world(&self, morph: &RobotMorphology, leg: usize) -> [f64; 2] {
        let body = fk::foot_body(
            morph.leg_attach_x[leg],
            morph.thigh_length,
            morph.shank_length,
            self.joint_angles[2 * leg],
            self.joint_angles[2 * leg + 1],
        );
        let world = fk::body_to_world(self.base_pitch, body);
        [self.base_pos[0] + world[0], self.base_pos[1] + world[1]]
    }

    /// Trunk endpoints (nose, tail) in the world frame.
    pub fn trunk_endpoints(&self, morph: &RobotMorphology) -> [[f64; 2]; 2] {
        let half = morph.trunk_length / 2.0;
        let nose = fk::body_to_world(self.base_pitch, [half, 0.0]);
        let tail = fk::body_to_world(self.base_pitch, [-half, 0.0]);
        [
            [self.base_pos[0] + nose[0], self.base_pos[1] + nose[1]],
            [self.base_pos[0] + tail[0], self.base_pos[1] + tail[1]],
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.base_pos.iter().all(|v| v.is_finite())
            && self.base_pitch.is_finite()
            && self.base_lin_vel.iter().all(|v| v.is_finite())
            && self.base_pitch_rate.is_finite()
            && self.joint_angles.iter().all(|v| v.is_finite())
            && self.joint_vels.iter().all(|v| v.is_finite())
    }
}

/// Proprioceptive observation; flattens to [`OBS_DIM`] values.
#[derive(Debug, Clone, PartialEq)]
pub struct ProprioObs {
    pub joint_angles: [f64; N_JOINTS],
    pub joint_vels: [f64; N_JOINTS],
    /// Gravity direction in the body frame, unit norm before noise.
    pub projected_gravity: [f64; 2],
    pub base_pitch_rate: f64,
    pub foot_contact: [f64; N_LEGS],
    pub prev_action: [f64; N_JOINTS],
    /// Commanded forward velocity, m/s.
    pub command: f64,
}

impl ProprioObs {
    pub fn zeros() -> Self {
        Self {
            joint_angles: [0.0; N_JOINTS],
            joint_vels: [0.0; N_JOINTS],
            projected_gravity: [0.0; 2],
            base_pitch_rate: 0.0,
            foot_contact: [0.0; N_LEGS],
            prev_action: [0.0; N_JOINTS],
            command: 0.0,
        }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(OBS_DIM);
        v.extend_from_slice(&self.joint_angles);
        v.extend_from_slice(&self.joint_vels);
        v.extend_from_slice(&self.projected_gravity);
        v.push(self.base_pitch_rate);
        v.extend_from_slice(&self.foot_contact);
        v.extend_from_slice(&self.prev_action);
        v.push(self.command);
        debug_assert_eq!(v.len(), OBS_DIM);
        v
    }
}

/// Simulation-only quantities fed to the privileged encoder; flattens to
/// [`PRIV_DIM`] values.
#[derive(Debug, Clone, PartialEq)]
pub struct PrivilegedInfo {
    /// True (noiseless) base velocity, world frame.
    pub base_lin_vel: [f64; 2],
    /// Terrain heights at fixed x-offsets around the base, relative to the
    /// base height.
    pub terrain_heights: [f64; N_HEIGHT_SAMPLES],
    pub friction_coeff: f64,
    pub motor_gain_scale: [f64; N_JOINTS],
    pub mass_scale: f64,
    /// Per-foot normal contact forces, N.
    pub contact_forces: [f64; N_LEGS],
}

impl PrivilegedInfo {
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(PRIV_DIM);
        v.extend_from_slice(&self.base_lin_vel);
        v.extend_from_slice(&self.terrain_heights);
        v.push(self.friction_coeff);
        v.extend_from_slice(&self.motor_gain_scale);
        v.push(self.mass_scale);
        v.extend_from_slice(&self.contact_forces);
        debug_assert_eq!(v.len(), PRIV_DIM);
        v
    }
}

/// `u_t = 0.2 u_{t-1} + 0.8 a_t`, elementwise.
#[inline]
pub fn low_pass_filter(u_prev: &[f64; N_JOINTS], a_t: &[f64; N_JOINTS]) -> [f64; N_JOINTS] {
    let mut u = [0.0; N_JOINTS];
    for i in 0..N_JOINTS {
        u[i] = 0.2 * u_prev[i] + 0.8 * a_t[i];
    }
    u
}

/// PD torques toward `target`, clamped to the morphology torque limit.
pub fn pd_torque(
    target: &[f64; N_JOINTS],
    q: &[f64; N_JOINTS],
    qdot: &[f64; N_JOINTS],
    params: &PhysicsParams,
    morph: &RobotMorphology,
) -> [f64; N_JOINTS] {
    let mut tau = [0.0; N_JOINTS];
    let lim = morph.joint_torque_limit;
    for i in 0..N_JOINTS {
        let raw = params.kp * params.motor_gain_scale[i] * (target[i] - q[i]) - params.kd * qdot[i];
        tau[i] = raw.clamp(-lim, lim);
    }
    tau
}

/// Advance the dynamics by one control period.
///
/// Semi-implicit Euler over the configured substeps: PD torques and gravity
/// integrate velocities, contacts are resolved by impulses, then positions
/// integrate and joint limits clamp. Scheduled perturbations fire on control
/// steps that are multiples of `pert.interval`.
pub fn step<R: Rng>(
    state: &RobotState,
    morph: &RobotMorphology,
    filtered_targets: &[f64; N_JOINTS],
    params: &PhysicsParams,
    terrain: &crate::terrain::Terrain,
    pert: &PerturbationSpec,
    rng: &mut R,
) -> Result<RobotState, SimError> {
    let mut s = state.clone();
    let dt = params.dt_physics;
    let inv_mass = 1.0 / (morph.total_mass() * params.mass_scale);
    let inv_inertia = 1.0 / (morph.trunk_inertia * params.mass_scale);
    let joint_inertias = morph.joint_inertias();
    let mut inv_joint_inertia = [0.0; N_JOINTS];
    for i in 0..N_JOINTS {
        inv_joint_inertia[i] = 1.0 / (joint_inertias[i] * params.mass_scale);
    }
    let limits = morph.joint_limits();

    // Scheduled perturbation at the start of the control period.
    let mut torque_offset = [0.0; N_JOINTS];
    if pert.is_active() {
        let step_idx = (s.time / params.control_period()).round() as u64;
        if step_idx > 0 && step_idx % pert.interval as u64 == 0 {
            s.base_lin_vel[0] += rng.gen_range(-1.0..=1.0) * pert.lin_vel_kick;
            s.base_lin_vel[1] += rng.gen_range(-1.0..=1.0) * pert.lin_vel_kick;
            s.base_pitch_rate += rng.gen_range(-1.0..=1.0) * pert.ang_vel_kick;
            for t in torque_offset.iter_mut() {
                *t = rng.gen_range(-1.0..=1.0) * pert.torque_noise;
            }
        }
    }

    let solver = ContactSolver {
        inv_mass,
        inv_inertia,
        inv_joint_inertia,
        friction: params.friction_coeff,
        dt,
    };

    let mut force_n = [0.0; N_LEGS];
    let mut force_t = [0.0; N_LEGS];

    for _ in 0..params.substeps_per_control {
        // Velocity integration: gravity and actuator torques.
        let tau = pd_torque(filtered_targets, &s.joint_angles, &s.joint_vels, params, morph);
        s.base_lin_vel[1] += params.gravity * dt;
        for i in 0..N_JOINTS {
            s.joint_vels[i] += (tau[i] + torque_offset[i]) * inv_joint_inertia[i] * dt;
        }

        let mut vel = contact::GenVel {
            lin: s.base_lin_vel,
            pitch_rate: s.base_pitch_rate,
            joint_vels: s.joint_vels,
        };

        // Detect and solve, twice: impulses from the first pass can push
        // other points into the ground, so a second detection pass catches
        // late activations within the same substep.
        let mut contacts = Vec::with_capacity(N_LEGS + 2);
        for _pass in 0..2 {
            contacts.clear();
            for leg in 0..N_LEGS {
                let foot = s.foot_world(morph, leg);
                let ground = terrain.height_at(foot[0]);
                let body = fk::foot_body(
                    morph.leg_attach_x[leg],
                    morph.thigh_length,
                    morph.shank_length,
                    s.joint_angles[2 * leg],
                    s.joint_angles[2 * leg + 1],
                );
                let r = fk::body_to_world(s.base_pitch, body);
                let jac = fk::foot_jacobian(
                    morph.thigh_length,
                    morph.shank_length,
                    s.joint_angles[2 * leg],
                    s.joint_angles[2 * leg + 1],
                );
                let point = ContactPoint {
                    leg: Some(leg),
                    is_foot: true,
                    r,
                    c_hip: fk::body_to_world(s.base_pitch, jac[0]),
                    c_knee: fk::body_to_world(s.base_pitch, jac[1]),
                    depth: ground - foot[1],
                };
                let vz = solver.point_velocity(&point, &vel)[1];
                if foot[1] + vz * dt <= ground || foot[1] <= ground {
                    contacts.push(point);
                }

                // Knee point: keeps collapsed legs from passing through the
                // ground (the thigh tip, moved by the hip joint only).
                let knee_body = [
                    morph.leg_attach_x[leg] + morph.thigh_length * s.joint_angles[2 * leg].sin(),
                    -morph.thigh_length * s.joint_angles[2 * leg].cos(),
                ];
                let knee_r = fk::body_to_world(s.base_pitch, knee_body);
                let knee_z = s.base_pos[1] + knee_r[1];
                let knee_ground = terrain.height_at(s.base_pos[0] + knee_r[0]);
                let knee_point = ContactPoint {
                    leg: Some(leg),
                    is_foot: false,
                    r: knee_r,
                    c_hip: fk::body_to_world(
                        s.base_pitch,
                        [
                            morph.thigh_length * s.joint_angles[2 * leg].cos(),
                            morph.thigh_length * s.joint_angles[2 * leg].sin(),
                        ],
                    ),
                    c_knee: [0.0, 0.0],
                    depth: knee_ground - knee_z,
                };
                let vz = solver.point_velocity(&knee_point, &vel)[1];
                if knee_z + vz * dt <= knee_ground || knee_z <= knee_ground {
                    contacts.push(knee_point);
                }
            }
            for end_x in [morph.trunk_length / 2.0, -morph.trunk_length / 2.0] {
                let r = fk::body_to_world(s.base_pitch, [end_x, 0.0]);
                let point_z = s.base_pos[1] + r[1];
                let ground = terrain.height_at(s.base_pos[0] + r[0]);
                let point = ContactPoint {
                    leg: None,
                    is_foot: false,
                    r,
                    c_hip: [0.0, 0.0],
                    c_knee: [0.0, 0.0],
                    depth: ground - point_z,
                };
                let vz = solver.point_velocity(&point, &vel)[1];
                if point_z + vz * dt <= ground || point_z <= ground {
                    contacts.push(point);
                }
            }

            // Joint stops: always present, each allowing motion up to but
            // not past its limit within this substep.
            let mut stops = Vec::with_capacity(2 * N_JOINTS);
            for i in 0..N_JOINTS {
                let (lo, hi) = limits[i];
                stops.push(contact::JointStop {
                    joint: i,
                    dir: 1.0,
                    target_vel: (lo - s.joint_angles[i]) / dt,
                });
                stops.push(contact::JointStop {
                    joint: i,
                    dir: -1.0,
                    target_vel: (hi - s.joint_angles[i]) / dt,
                });
            }

            let impulses = solver.solve(&contacts, &stops, &mut vel);
            for (c, imp) in contacts.iter().zip(&impulses) {
                if let (Some(leg), true) = (c.leg, c.is_foot) {
                    force_n[leg] += imp.normal / dt;
                    force_t[leg] += imp.tangent.abs() / dt;
                }
            }
        }

        // Pseudo-velocities recover residual penetration in positions only.
        let pseudo = solver.solve_positions(&contacts);

        s.base_lin_vel = vel.lin;
        s.base_pitch_rate = vel.pitch_rate;
        s.joint_vels = vel.joint_vels;

        // Position integration with the post-impulse velocities.
        s.base_pos[0] += (s.base_lin_vel[0] + pseudo.lin[0]) * dt;
        s.base_pos[1] += (s.base_lin_vel[1] + pseudo.lin[1]) * dt;
        s.base_pitch += (s.base_pitch_rate + pseudo.pitch_rate) * dt;
        for i in 0..N_JOINTS {
            s.joint_angles[i] += (s.joint_vels[i] + pseudo.joint_vels[i]) * dt;
            let (lo, hi) = limits[i];
            if s.joint_angles[i] < lo {
                s.joint_angles[i] = lo;
                s.joint_vels[i] = s.joint_vels[i].max(0.0);
            } else if s.joint_angles[i] > hi {
                s.joint_angles[i] = hi;
                s.joint_vels[i] = s.joint_vels[i].min(0.0);
            }
        }
        s.time += dt;
    }

    let n_sub = params.substeps_per_control as f64;
    for leg in 0..N_LEGS {
        s.contact_force_normal[leg] = force_n[leg] / n_sub;
        s.contact_force_tangent[leg] = force_t[leg] / n_sub;
        let foot = s.foot_world(morph, leg);
        s.foot_contact[leg] = foot[1] <= terrain.height_at(foot[0]) + CONTACT_TOL;
    }

    if !s.is_finite() {
        return Err(SimError::NonFiniteState {
            time: s.time,
            what: "integration blow-up",
        });
    }
    Ok(s)
}

/// Assemble the proprioceptive observation with additive uniform noise.
///
/// A fixed number of noise values is drawn per call regardless of the
/// amplitudes, so RNG consumption is deterministic; with a zero [`NoiseSpec`]
/// the output is a pure function of `(state, prev_action, command)`.
pub fn observe<R: Rng>(
    state: &RobotState,
    noise: &NoiseSpec,
    prev_action: &[f64; N_JOINTS],
    command: f64,
    rng: &mut R,
) -> ProprioObs {
    let mut obs = ProprioObs {
        joint_angles: state.joint_angles,
        joint_vels: state.joint_vels,
        projected_gravity: fk::world_to_body(state.base_pitch, [0.0, -1.0]),
        base_pitch_rate: state.base_pitch_rate,
        foot_contact: [0.0; N_LEGS],
        prev_action: *prev_action,
        command,
    };
    for leg in 0..N_LEGS {
        obs.foot_contact[leg] = if state.foot_contact[leg] { 1.0 } else { 0.0 };
    }
    for v in obs.joint_angles.iter_mut() {
        *v += rng.gen_range(-1.0..=1.0) * noise.joint_angles;
    }
    for v in obs.joint_vels.iter_mut() {
        *v += rng.gen_range(-1.0..=1.0) * noise.joint_vels;
    }
    for v in obs.projected_gravity.iter_mut() {
        *v += rng.gen_range(-1.0..=1.0) * noise.projected_gravity;
    }
    obs.base_pitch_rate += rng.gen_range(-1.0..=1.0) * noise.base_pitch_rate;
    obs
}

/// Noiseless simulation-only quantities for the privileged encoder.
///
/// Height samples sit at offsets -0.5..=0.5 m in steps of 0.1 around the
/// base, expressed relative to the base height. Pure in its inputs.
pub fn privileged(
    state: &RobotState,
    terrain: &crate::terrain::Terrain,
    params: &PhysicsParams,
) -> PrivilegedInfo {
    let mut heights = [0.0; N_HEIGHT_SAMPLES];
    for (i, h) in heights.iter_mut().enumerate() {
        let off = -0.5 + 0.1 * i as f64;
        *h = terrain.height_at(state.base_pos[0] + off) - state.base_pos[1];
    }
    PrivilegedInfo {
        base_lin_vel: state.base_lin_vel,
        terrain_heights: heights,
        friction_coeff: params.friction_coeff,
        motor_gain_scale: params.motor_gain_scale,
        mass_scale: params.mass_scale,
        contact_forces: state.contact_force_normal,
    }
}

/// Draw a new parameter set from `ranges`; unlisted fields copy `base`.
pub fn randomize_params<R: Rng>(
    base: &PhysicsParams,
    ranges: &RandomizationRanges,
    rng: &mut R,
) -> Result<PhysicsParams, SimError> {
    let check = |field: &'static str, (lo, hi): (f64, f64)| {
        if lo > hi {
            Err(SimError::InvalidRange { field, lo, hi })
        } else {
            Ok(())
        }
    };
    check("friction", ranges.friction)?;
    check("mass_scale", ranges.mass_scale)?;
    check("motor_gain_scale", ranges.motor_gain_scale)?;
    let draw = |rng: &mut R, (lo, hi): (f64, f64)| {
        if lo == hi {
            lo
        } else {
            rng.gen_range(lo..=hi)
        }
    };
    let mut out = base.clone();
    out.friction_coeff = draw(rng, ranges.friction);
    out.mass_scale = draw(rng, ranges.mass_scale);
    for g in out.motor_gain_scale.iter_mut() {
        *g = draw(rng, ranges.motor_gain_scale);
    }
    Ok(out)
}

/// Total mechanical energy under the lumped-mass model: trunk kinetic +
/// joint rotor kinetic + trunk potential.
pub fn mechanical_energy(state: &RobotState, morph: &RobotMorphology, params: &PhysicsParams) -> f64 {
    let m = morph.total_mass() * params.mass_scale;
    let i_trunk = morph.trunk_inertia * params.mass_scale;
    let joint_inertias = morph.joint_inertias();
    let v2 = state.base_lin_vel[0] * state.base_lin_vel[0]
        + state.base_lin_vel[1] * state.base_lin_vel[1];
    let mut e = 0.5 * m * v2 + 0.5 * i_trunk * state.base_pitch_rate * state.base_pitch_rate;
    for i in 0..N_JOINTS {
        e += 0.5 * joint_inertias[i] * params.mass_scale * state.joint_vels[i] * state.joint_vels[i];
    }
    e + m * (-params.gravity) * state.base_pos[1]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Domain};
    use crate::terrain::{Terrain, TerrainKind};
    use approx::assert_relative_eq;

    fn plane() -> Terrain {
        Terrain::generate(TerrainKind::Plane, 0, 0).unwrap()
    }

    fn airborne_state(morph: &RobotMorphology) -> RobotState {
        let mut s = RobotState::standing(morph, &plane(), 0.0, 0.27);
        s.base_pos[1] = 5.0;
        s
    }

    #[test]
    fn filter_examples() {
        let zero = [0.0; N_JOINTS];
        let ones = [1.0; N_JOINTS];
        let u = low_pass_filter(&zero, &ones);
        assert!(u.iter().all(|&v| (v - 0.8).abs() < 1e-15));
        // Fixed point.
        let x = [0.37; N_JOINTS];
        let u = low_pass_filter(&x, &x);
        assert!(u.iter().all(|&v| (v - 0.37).abs() < 1e-15));
        // Three applications of a constant input from zero.
        let mut u = [0.0; N_JOINTS];
        for _ in 0..3 {
            u = low_pass_filter(&u, &ones);
        }
        assert!(u.iter().all(|&v| (v - 0.992).abs() < 1e-12));
    }

    #[test]
    fn pd_torque_examples() {
        let morph = RobotMorphology::default();
        let params = PhysicsParams::default();
        let q = [0.3; N_JOINTS];
        // Zero error, zero velocity -> zero torque.
        let tau = pd_torque(&q, &q, &[0.0; N_JOINTS], &params, &morph);
        assert_eq!(tau, [0.0; N_JOINTS]);
        // kp=20, err=0.1 -> 2.0.
        let mut target = q;
        target[0] += 0.1;
        let tau = pd_torque(&target, &q, &[0.0; N_JOINTS], &params, &morph);
        assert_relative_eq!(tau[0], 2.0, epsilon = 1e-12);
        // Huge error saturates at the torque limit.
        target[0] += 1.0e6;
        let tau = pd_torque(&target, &q, &[0.0; N_JOINTS], &params, &morph);
        assert_eq!(tau[0], morph.joint_torque_limit);
    }

    #[test]
    fn free_fall_matches_closed_form() {
        let morph = RobotMorphology::default();
        let mut params = PhysicsParams::default();
        params.kp = 0.0;
        params.kd = 0.0;
        let terrain = plane();
        let s0 = airborne_state(&morph);
        let mut rng = stream(0, Domain::Env, 0);
        let targets = s0.joint_angles;
        let s1 = step(&s0, &morph, &targets, &params, &terrain, &PerturbationSpec::disabled(), &mut rng)
            .unwrap();
        // 4 substeps of dt=0.005 at g=-9.81.
        assert_relative_eq!(s1.base_lin_vel[1], -9.81 * 0.02, epsilon = 1e-12);
        assert!(s1.foot_contact.iter().all(|&c| !c));
    }

    #[test]
    fn standing_robot_holds_height() {
        let morph = RobotMorphology::default();
        let params = PhysicsParams::default();
        let terrain = plane();
        let mut rng = stream(1, Domain::Env, 0);
        let mut s = RobotState::standing(&morph, &terrain, 0.0, 0.27);
        let targets = s.joint_angles;
        // Settle into the PD-supported equilibrium.
        for _ in 0..300 {
            s = step(&s, &morph, &targets, &params, &terrain, &PerturbationSpec::disabled(), &mut rng)
                .unwrap();
        }
        let settled = s.base_pos[1];
        for _ in 0..100 {
            s = step(&s, &morph, &targets, &params, &terrain, &PerturbationSpec::disabled(), &mut rng)
                .unwrap();
        }
        assert!(
            (s.base_pos[1] - settled).abs() < 1e-3,
            "drift {} from {}",
            s.base_pos[1] - settled,
            settled
        );
        assert!(s.foot_contact.iter().all(|&c| c), "all feet should touch");
    }

    #[test]
    fn frictionless_ground_lets_the_robot_slide() {
        let morph = RobotMorphology::default();
        let mut params = PhysicsParams::default();
        params.friction_coeff = 0.0;
        let terrain = plane();
        let mut rng = stream(2, Domain::Env, 0);
        let mut s = RobotState::standing(&morph, &terrain, 0.0, 0.27);
        s.base_lin_vel[0] = 1.0;
        let targets = s.joint_angles;
        for _ in 0..50 {
            s = step(&s, &morph, &targets, &params, &terrain, &PerturbationSpec::disabled(), &mut rng)
                .unwrap();
        }
        // No tangential force was ever applied and the slide persists.
        assert!(s.contact_force_tangent.iter().all(|&t| t == 0.0));
        assert!(s.base_lin_vel[0] > 0.9, "vx = {}", s.base_lin_vel[0]);
    }

    #[test]
    fn contact_forces_respect_the_friction_cone() {
        let morph = RobotMorphology::default();
        let params = PhysicsParams::default();
        let terrain = plane();
        let mut rng = stream(3, Domain::Env, 0);
        let mut s = RobotState::standing(&morph, &terrain, 0.0, 0.27);
        s.base_lin_vel[0] = 1.5;
        let targets = s.joint_angles;
        for _ in 0..100 {
            s = step(&s, &morph, &targets, &params, &terrain, &PerturbationSpec::disabled(), &mut rng)
                .unwrap();
            for leg in 0..N_LEGS {
                if s.foot_contact[leg] {
                    assert!(s.contact_force_normal[leg] >= 0.0);
                    assert!(
                        s.contact_force_tangent[leg]
                            <= params.friction_coeff * s.contact_force_normal[leg] + 1e-9
                    );
                }
            }
        }
    }

    #[test]
    fn passive_contact_never_gains_energy() {
        let morph = RobotMorphology::default();
        let mut params = PhysicsParams::default();
        params.kp = 0.0;
        params.kd = 0.0;
        let terrain = plane();
        let mut rng = stream(4, Domain::Env, 0);
        // Drop from slightly above the ground, zero torque, friction on.
        let mut s = RobotState::standing(&morph, &terrain, 0.0, 0.27);
        s.base_pos[1] += 0.05;
        let targets = s.joint_angles;
        let mut e_prev = mechanical_energy(&s, &morph, &params);
        for _ in 0..200 {
            s = step(&s, &morph, &targets, &params, &terrain, &PerturbationSpec::disabled(), &mut rng)
                .unwrap();
            let e = mechanical_energy(&s, &morph, &params);
            assert!(
                e <= e_prev + 1e-6,
                "energy increased: {e_prev} -> {e} at t={}",
                s.time
            );
            e_prev = e;
        }
    }

    #[test]
    fn joint_limits_hold_after_every_step() {
        let morph = RobotMorphology::default();
        let params = PhysicsParams::default();
        let terrain = plane();
        let mut rng = stream(5, Domain::Env, 0);
        let mut s = RobotState::standing(&morph, &terrain, 0.0, 0.27);
        // Command absurd targets to slam into the limits.
        let targets = [10.0, -10.0, 10.0, -10.0, -10.0, 10.0, -10.0, 10.0];
        let limits = morph.joint_limits();
        for _ in 0..200 {
            s = step(&s, &morph, &targets, &params, &terrain, &PerturbationSpec::disabled(), &mut rng)
                .unwrap();
            for i in 0..N_JOINTS {
                assert!(s.joint_angles[i] >= limits[i].0 - 1e-12);
                assert!(s.joint_angles[i] <= limits[i].1 + 1e-12);
            }
        }
    }

    #[test]
    fn step_is_deterministic_given_seed() {
        let morph = RobotMorphology::default();
        let params = PhysicsParams::default();
        let terrain = Terrain::generate(TerrainKind::UniformNoise, 3, 7).unwrap();
        let pert = PerturbationSpec::default();
        let run = || {
            let mut rng = stream(6, Domain::Env, 0);
            let mut s = RobotState::standing(&morph, &terrain, 0.0, 0.27);
            let targets = s.joint_angles;
            for _ in 0..50 {
                s = step(&s, &morph, &targets, &params, &terrain, &pert, &mut rng).unwrap();
            }
            s
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn observe_examples() {
        let morph = RobotMorphology::default();
        let terrain = plane();
        let mut rng = stream(7, Domain::Env, 0);
        let mut s = RobotState::standing(&morph, &terrain, 0.0, 0.27);
        let prev = [0.0; N_JOINTS];
        let obs = observe(&s, &NoiseSpec::zero(), &prev, 0.5, &mut rng);
        assert_relative_eq!(obs.projected_gravity[0], 0.0, epsilon = 1e-15);
        assert_relative_eq!(obs.projected_gravity[1], -1.0, epsilon = 1e-15);
        let norm =
            (obs.projected_gravity[0].powi(2) + obs.projected_gravity[1].powi(2)).sqrt();
        assert_relative_eq!(norm, 1.0, epsilon = 1e-15);

        s.base_pitch = std::f64::consts::FRAC_PI_2;
        let obs = observe(&s, &NoiseSpec::zero(), &prev, 0.5, &mut rng);
        assert_relative_eq!(obs.projected_gravity[0], -1.0, epsilon = 1e-12);
        assert_relative_eq!(obs.projected_gravity[1], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn observe_zero_noise_is_pure() {
        let morph = RobotMorphology::default();
        let terrain = plane();
        let s = RobotState::standing(&morph, &terrain, 0.0, 0.27);
        let prev = [0.1; N_JOINTS];
        let mut rng_a = stream(8, Domain::Env, 0);
        let mut rng_b = stream(8, Domain::Env, 999);
        let a = observe(&s, &NoiseSpec::zero(), &prev, 1.0, &mut rng_a);
        let b = observe(&s, &NoiseSpec::zero(), &prev, 1.0, &mut rng_b);
        assert_eq!(a, b);
        assert_eq!(a.to_vec().len(), OBS_DIM);
    }

    #[test]
    fn privileged_height_samples() {
        let morph = RobotMorphology::default();
        let params = PhysicsParams::default();
        let terrain = plane();
        let mut s = RobotState::standing(&morph, &terrain, 0.0, 0.27);
        s.base_pos[1] = 0.3;
        let p = privileged(&s, &terrain, &params);
        for h in p.terrain_heights {
            assert_relative_eq!(h, -0.3, epsilon = 1e-15);
        }
        assert_eq!(p.to_vec().len(), PRIV_DIM);

        // Stairs reproduce the step profile at the sampled offsets.
        let stairs = Terrain::generate(TerrainKind::Stairs, 9, 11).unwrap();
        s.base_pos = [stairs.block_start_x() + 1.0, 0.5];
        let p = privileged(&s, &stairs, &params);
        for (i, h) in p.terrain_heights.iter().enumerate() {
            let off = -0.5 + 0.1 * i as f64;
            assert_relative_eq!(
                *h,
                stairs.height_at(s.base_pos[0] + off) - 0.5,
                epsilon = 1e-15
            );
        }
        // Purity.
        let q = privileged(&s, &stairs, &params);
        assert_eq!(p, q);
    }

    #[test]
    fn randomize_params_examples() {
        let base = PhysicsParams::default();
        let mut rng = stream(9, Domain::Env, 0);
        // Degenerate ranges reproduce the base scales.
        let fixed = RandomizationRanges {
            friction: (0.7, 0.7),
            mass_scale: (1.0, 1.0),
            motor_gain_scale: (1.0, 1.0),
        };
        let p = randomize_params(&base, &fixed, &mut rng).unwrap();
        assert_eq!(p.friction_coeff, 0.7);
        assert_eq!(p.mass_scale, 1.0);
        assert_eq!(p.motor_gain_scale, [1.0; N_JOINTS]);

        // Draws stay inside the range.
        let ranges = RandomizationRanges::default();
        for _ in 0..10_000 {
            let p = randomize_params(&base, &ranges, &mut rng).unwrap();
            assert!(p.friction_coeff >= 0.2 && p.friction_coeff <= 1.25);
            assert!(p.mass_scale >= 0.8 && p.mass_scale <= 1.2);
            for g in p.motor_gain_scale {
                assert!((0.9..=1.1).contains(&g));
            }
        }

        // Fixed seed reproduces the draw.
        let mut r1 = stream(10, Domain::Env, 1);
        let mut r2 = stream(10, Domain::Env, 1);
        assert_eq!(
            randomize_params(&base, &ranges, &mut r1).unwrap(),
            randomize_params(&base, &ranges, &mut r2).unwrap()
        );

        // Inverted range errors.
        let bad = RandomizationRanges {
            friction: (1.0, 0.5),
            ..RandomizationRanges::default()
        };
        assert!(matches!(
            randomize_params(&base, &bad, &mut rng),
            Err(SimError::InvalidRange { field: "friction", .. })
        ));
    }

    #[test]
    fn filter_stability_bounded_input_bounded_output() {
        use rand::Rng;
        let mut rng = stream(11, Domain::Env, 0);
        let bound = 3.0;
        let mut u = [0.0; N_JOINTS];
        for _ in 0..1000 {
            let mut a = [0.0; N_JOINTS];
            for v in a.iter_mut() {
                *v = rng.gen_range(-bound..=bound);
            }
            u = low_pass_filter(&u, &a);
            assert!(u.iter().all(|&x| x.abs() <= bound + 1e-12));
        }
    }
}
