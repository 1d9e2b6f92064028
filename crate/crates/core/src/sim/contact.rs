//! Impulse-based ground contact with a Coulomb cone.
//!
//! Contact points are the four point feet plus the trunk endpoints, against
//! a heightfield treated as locally flat (normal straight up). Contacts are
//! resolved at the velocity level with zero restitution by Gauss-Seidel
//! sweeps; each visit performs an exact 2x2 block solve (stick first, then
//! cone projection) over the generalized coordinates
//! `(vx, vz, pitch_rate, joint_vels)` using the decoupled inertia of each
//! degree of freedom. Penetration is recovered by a separate pseudo-velocity
//! pass that only shifts positions, so the correction cannot feed kinetic
//! energy back into the state.

use super::fk::perp;

/// Upper bound on Gauss-Seidel sweeps over the active contacts per substep.
pub const SOLVER_SWEEPS: usize = 64;
/// Sweep early-exit threshold on the largest impulse change, N·s.
pub const SWEEP_TOL: f64 = 1.0e-10;
/// Penetration depth ignored by the position correction.
pub const PENETRATION_SLOP: f64 = 1.0e-4;
/// Fraction of residual penetration corrected per substep.
pub const BIAS_FACTOR: f64 = 0.2;
/// Cap on the position-correction velocity, m/s.
pub const MAX_BIAS_VEL: f64 = 0.5;

/// Generalized velocities (or pseudo-velocities) during a substep.
#[derive(Debug, Clone, PartialEq)]
pub struct GenVel {
    pub lin: [f64; 2],
    pub pitch_rate: f64,
    pub joint_vels: [f64; 8],
}

impl GenVel {
    pub fn zero() -> Self {
        Self {
            lin: [0.0, 0.0],
            pitch_rate: 0.0,
            joint_vels: [0.0; 8],
        }
    }
}

/// Geometry of one potentially-active contact.
#[derive(Debug, Clone, Copy)]
pub struct ContactPoint {
    /// Leg index for points on a leg (foot or knee); `None` for trunk
    /// endpoints.
    pub leg: Option<usize>,
    /// True only for the foot tip: its impulses feed the foot force sensor.
    pub is_foot: bool,
    /// World-frame offset from the trunk COM to the contact point.
    pub r: [f64; 2],
    /// World-frame point velocity response to the leg's hip joint.
    pub c_hip: [f64; 2],
    /// World-frame point velocity response to the leg's knee joint.
    pub c_knee: [f64; 2],
    /// Penetration depth at substep start (positive = below ground).
    pub depth: f64,
}

/// Accumulated impulse for one contact over one substep.
#[derive(Debug, Clone, Copy, Default)]
pub struct ContactImpulse {
    pub normal: f64,
    pub tangent: f64,
}

/// Unilateral joint stop: keeps `dir * qdot >= dir * target_vel` so the
/// joint can reach its limit within the substep but never cross it.
///
/// `dir = +1` for a lower limit, `-1` for an upper limit; `target_vel` is
/// `(limit - q) / dt`. Solved in the same sweeps as the contacts so ground
/// impulses never rely on a joint moving past its stop.
#[derive(Debug, Clone, Copy)]
pub struct JointStop {
    pub joint: usize,
    pub dir: f64,
    pub target_vel: f64,
}

pub struct ContactSolver {
    pub inv_mass: f64,
    pub inv_inertia: f64,
    pub inv_joint_inertia: [f64; 8],
    pub friction: f64,
    pub dt: f64,
}

impl ContactSolver {
    pub fn point_velocity(&self, c: &ContactPoint, v: &GenVel) -> [f64; 2] {
        let w = perp(c.r);
        let mut out = [
            v.lin[0] + v.pitch_rate * w[0],
            v.lin[1] + v.pitch_rate * w[1],
        ];
        if let Some(leg) = c.leg {
            let (hip, knee) = (2 * leg, 2 * leg + 1);
            out[0] += v.joint_vels[hip] * c.c_hip[0] + v.joint_vels[knee] * c.c_knee[0];
            out[1] += v.joint_vels[hip] * c.c_hip[1] + v.joint_vels[knee] * c.c_knee[1];
        }
        out
    }

    fn apply(&self, c: &ContactPoint, p: [f64; 2], v: &mut GenVel) {
        let w = perp(c.r);
        v.lin[0] += self.inv_mass * p[0];
        v.lin[1] += self.inv_mass * p[1];
        v.pitch_rate += self.inv_inertia * (w[0] * p[0] + w[1] * p[1]);
        if let Some(leg) = c.leg {
            let (hip, knee) = (2 * leg, 2 * leg + 1);
            v.joint_vels[hip] +=
                self.inv_joint_inertia[hip] * (c.c_hip[0] * p[0] + c.c_hip[1] * p[1]);
            v.joint_vels[knee] +=
                self.inv_joint_inertia[knee] * (c.c_knee[0] * p[0] + c.c_knee[1] * p[1]);
        }
    }

    /// Effective inverse mass matrix `K = J M^-1 J^T` of one contact,
    /// returned as `(k_tt, k_tn, k_nn)`.
    fn k_matrix(&self, c: &ContactPoint) -> (f64, f64, f64) {
        let w = perp(c.r);
        let mut k_tt = self.inv_mass + self.inv_inertia * w[0] * w[0];
        let mut k_tn = self.inv_inertia * w[0] * w[1];
        let mut k_nn = self.inv_mass + self.inv_inertia * w[1] * w[1];
        if let Some(leg) = c.leg {
            let (hip, knee) = (2 * leg, 2 * leg + 1);
            for (col, inv_i) in [
                (c.c_hip, self.inv_joint_inertia[hip]),
                (c.c_knee, self.inv_joint_inertia[knee]),
            ] {
                k_tt += inv_i * col[0] * col[0];
                k_tn += inv_i * col[0] * col[1];
                k_nn += inv_i * col[1] * col[1];
            }
        }
        (k_tt, k_tn, k_nn)
    }

    /// One exact block solve for a single contact against target velocity
    /// `(0, v_n_target)`, updating the accumulated impulse.
    ///
    /// Enumerates the friction LCP cases for the point: separated, sticking,
    /// or sliding along either cone edge. The stick solution alone is not
    /// enough — with strong tangent/normal coupling it can demand a negative
    /// normal impulse even though a valid sliding solution exists.
    fn block_solve(
        &self,
        c: &ContactPoint,
        k: (f64, f64, f64),
        v_n_target: f64,
        friction: f64,
        acc: &mut ContactImpulse,
        v: &mut GenVel,
    ) {
        let (k_tt, k_tn, k_nn) = k;
        let vel = self.point_velocity(c, v);
        // Velocity the point would have with the accumulated impulse removed.
        let v0 = [
            vel[0] - (k_tt * acc.tangent + k_tn * acc.normal),
            vel[1] - (k_tn * acc.tangent + k_nn * acc.normal),
        ];
        let p_total = if v0[1] >= v_n_target {
            // Separated without any impulse.
            [0.0, 0.0]
        } else {
            let det = k_tt * k_nn - k_tn * k_tn;
            debug_assert!(det > 0.0, "contact K must be positive definite");
            let rhs = [-v0[0], v_n_target - v0[1]];
            let stick = [
                (k_nn * rhs[0] - k_tn * rhs[1]) / det,
                (-k_tn * rhs[0] + k_tt * rhs[1]) / det,
            ];
            if stick[1] > 0.0 && stick[0].abs() <= friction * stick[1] {
                stick
            } else {
                // Slide along a cone edge p = lambda (s*mu, 1) with the
                // post-impulse tangential velocity opposing the friction.
                let mut chosen = None;
                let prefer = if stick[0] >= 0.0 { [1.0, -1.0] } else { [-1.0, 1.0] };
                for s in prefer {
                    let k_dn = k_tn * s * friction + k_nn;
                    if k_dn <= 1e-12 {
                        continue;
                    }
                    let lambda = (v_n_target - v0[1]) / k_dn;
                    if lambda < 0.0 {
                        continue;
                    }
                    let v_t_after = v0[0] + (k_tt * s * friction + k_tn) * lambda;
                    if s * v_t_after <= 1e-12 {
                        chosen = Some([s * friction * lambda, lambda]);
                        break;
                    }
                }
                // Frictionless fallback; unreachable for physical K but keeps
                // the solve total.
                chosen.unwrap_or([0.0, (v_n_target - v0[1]) / k_nn])
            }
        };
        let applied = [p_total[0] - acc.tangent, p_total[1] - acc.normal];
        acc.tangent = p_total[0];
        acc.normal = p_total[1];
        self.apply(c, applied, v);
    }

    /// Resolve all active contacts and joint stops against the current
    /// velocities, zero restitution. Returns the accumulated impulse per
    /// contact; divide by `dt` for forces.
    pub fn solve(
        &self,
        contacts: &[ContactPoint],
        stops: &[JointStop],
        v: &mut GenVel,
    ) -> Vec<ContactImpulse> {
        let mut impulses = vec![ContactImpulse::default(); contacts.len()];
        if contacts.is_empty() && stops.is_empty() {
            return impulses;
        }
        let ks: Vec<_> = contacts.iter().map(|c| self.k_matrix(c)).collect();
        let mut stop_acc = vec![0.0; stops.len()];
        for _ in 0..SOLVER_SWEEPS {
            let mut max_change = 0.0f64;
            for (i, stop) in stops.iter().enumerate() {
                let q = stop.joint;
                let deficit = stop.dir * (stop.target_vel - v.joint_vels[q]);
                let d_lambda = deficit / self.inv_joint_inertia[q];
                let new_acc = (stop_acc[i] + d_lambda).max(0.0);
                let applied = new_acc - stop_acc[i];
                stop_acc[i] = new_acc;
                v.joint_vels[q] += self.inv_joint_inertia[q] * applied * stop.dir;
                max_change = max_change.max(applied.abs());
            }
            for (i, c) in contacts.iter().enumerate() {
                let before = impulses[i];
                self.block_solve(c, ks[i], 0.0, self.friction, &mut impulses[i], v);
                max_change = max_change
                    .max((impulses[i].normal - before.normal).abs())
                    .max((impulses[i].tangent - before.tangent).abs());
            }
            if max_change < SWEEP_TOL {
                break;
            }
        }
        impulses
    }

    /// Position-correction pass: pseudo-velocities that push penetrating
    /// points out at a capped rate. The result only feeds the position
    /// integration and is discarded afterwards.
    ///
    /// The legs are treated as welded here (base motion only), so the
    /// correction can never be cancelled by a joint-limit clamp.
    pub fn solve_positions(&self, contacts: &[ContactPoint]) -> GenVel {
        let mut pseudo = GenVel::zero();
        if contacts.iter().all(|c| c.depth <= PENETRATION_SLOP) {
            return pseudo;
        }
        let welded: Vec<ContactPoint> = contacts
            .iter()
            .map(|c| ContactPoint {
                leg: None,
                ..*c
            })
            .collect();
        let ks: Vec<_> = welded.iter().map(|c| self.k_matrix(c)).collect();
        let mut acc = vec![ContactImpulse::default(); welded.len()];
        for _ in 0..SOLVER_SWEEPS {
            let mut max_change = 0.0f64;
            for (i, c) in welded.iter().enumerate() {
                let target =
                    (BIAS_FACTOR * (c.depth - PENETRATION_SLOP).max(0.0) / self.dt).min(MAX_BIAS_VEL);
                if target <= 0.0 {
                    continue;
                }
                // Frictionless normal push on the pseudo state.
                let before = acc[i].normal;
                self.block_solve(c, ks[i], target, 0.0, &mut acc[i], &mut pseudo);
                max_change = max_change.max((acc[i].normal - before).abs());
            }
            if max_change < SWEEP_TOL {
                break;
            }
        }
        pseudo
    }
}
