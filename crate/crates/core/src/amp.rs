//! Adversarial motion prior: feature extraction shared between simulator
//! states and reference poses, transition pairs, the least-squares
//! discriminator objective with a gradient penalty, and the style reward.

use crate::motion::{MotionClip, ReferencePose};
use crate::nn::{penalty_grads, GpMode, Net, NetGrads, NnError};
use crate::sim::{fk, RobotMorphology, RobotState, N_JOINTS, N_LEGS};
use crate::terrain::Terrain;
use rand::Rng;
use thiserror::Error;

/// Width of one feature vector.
pub const FEAT_DIM: usize = 28;
/// Discriminator input width (two concatenated feature vectors).
pub const PAIR_DIM: usize = 2 * FEAT_DIM;

#[derive(Debug, Error, PartialEq)]
pub enum AmpError {
    #[error("empty batch passed to the discriminator")]
    EmptyBatch,
    #[error("reference dataset has no transition pairs")]
    EmptyDataset,
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Pose features scored by the discriminator; extracted identically from
/// [`RobotState`] and [`ReferencePose`].
#[derive(Debug, Clone, PartialEq)]
pub struct AmpFeatures {
    pub joint_angles: [f64; N_JOINTS],
    pub joint_vels: [f64; N_JOINTS],
    /// Height of the base above the local ground.
    pub base_height: f64,
    /// Base velocity in the body frame.
    pub base_lin_vel_body: [f64; 2],
    pub base_pitch_rate: f64,
    pub foot_positions_body: [[f64; 2]; N_LEGS],
}

impl AmpFeatures {
    /// Extract features from a simulator state.
    pub fn from_state(state: &RobotState, morph: &RobotMorphology, terrain: &Terrain) -> Self {
        let mut feet = [[0.0; 2]; N_LEGS];
        for leg in 0..N_LEGS {
            feet[leg] = fk::foot_body(
                morph.leg_attach_x[leg],
                morph.thigh_length,
                morph.shank_length,
                state.joint_angles[2 * leg],
                state.joint_angles[2 * leg + 1],
            );
        }
        Self {
            joint_angles: state.joint_angles,
            joint_vels: state.joint_vels,
            base_height: state.base_pos[1] - terrain.height_at(state.base_pos[0]),
            base_lin_vel_body: fk::world_to_body(state.base_pitch, state.base_lin_vel),
            base_pitch_rate: state.base_pitch_rate,
            foot_positions_body: feet,
        }
    }

    /// Extract features from a reference pose.
    ///
    /// Reference poses carry no rate information, so joint velocities and
    /// the pitch rate come from finite differences over the clip (see
    /// [`PairDataset`]).
    pub fn from_pose(pose: &ReferencePose, joint_vels: [f64; N_JOINTS], pitch_rate: f64) -> Self {
        let vel_body = fk::world_to_body(pose.base_pitch, [pose.base_forward_vel, 0.0]);
        Self {
            joint_angles: pose.joint_angles,
            joint_vels,
            base_height: pose.base_height,
            base_lin_vel_body: vel_body,
            base_pitch_rate: pitch_rate,
            foot_positions_body: pose.foot_positions_body,
        }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(FEAT_DIM);
        v.extend_from_slice(&self.joint_angles);
        v.extend_from_slice(&self.joint_vels);
        v.push(self.base_height);
        v.extend_from_slice(&self.base_lin_vel_body);
        v.push(self.base_pitch_rate);
        for foot in self.foot_positions_body {
            v.extend_from_slice(&foot);
        }
        debug_assert_eq!(v.len(), FEAT_DIM);
        v
    }
}

/// Discriminator input: features at consecutive control steps.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionPair {
    pub concat: Vec<f64>,
}

impl TransitionPair {
    pub fn new(feat_t: &AmpFeatures, feat_t1: &AmpFeatures) -> Self {
        let mut concat = feat_t.to_vec();
        concat.extend(feat_t1.to_vec());
        debug_assert_eq!(concat.len(), PAIR_DIM);
        Self { concat }
    }

    pub fn from_concat(concat: Vec<f64>) -> Self {
        assert_eq!(concat.len(), PAIR_DIM);
        Self { concat }
    }
}

/// Ring buffer of policy-generated transition pairs with uniform sampling.
#[derive(Debug, Clone)]
pub struct PairBuffer {
    pairs: Vec<TransitionPair>,
    capacity: usize,
    write: usize,
}

impl PairBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0);
        Self {
            pairs: Vec::with_capacity(capacity),
            capacity,
            write: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, pair: TransitionPair) {
        if self.pairs.len() < self.capacity {
            self.pairs.push(pair);
        } else {
            self.pairs[self.write] = pair;
        }
        self.write = (self.write + 1) % self.capacity;
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Option<&TransitionPair> {
        if self.pairs.is_empty() {
            None
        } else {
            Some(&self.pairs[rng.gen_range(0..self.pairs.len())])
        }
    }

    /// Internal storage in ring order, for checkpointing.
    pub fn raw(&self) -> (&[TransitionPair], usize) {
        (&self.pairs, self.write)
    }

    pub fn from_raw(pairs: Vec<TransitionPair>, write: usize, capacity: usize) -> Self {
        assert!(pairs.len() <= capacity);
        Self {
            pairs,
            capacity,
            write,
        }
    }
}

/// Reference transition pairs resampled from clips at the control rate.
#[derive(Debug, Clone)]
pub struct PairDataset {
    pairs: Vec<TransitionPair>,
}

impl PairDataset {
    /// Build all consecutive-frame pairs across `clips` (after mirroring,
    /// if the caller mirrored), resampled to `control_rate` by linear
    /// interpolation. Rates are finite-differenced on the resampled grid.
    pub fn from_clips(clips: &[MotionClip], control_rate: f64) -> Result<Self, AmpError> {
        let mut pairs = Vec::new();
        let dt = 1.0 / control_rate;
        for clip in clips {
            let duration = clip.duration();
            let n = (duration * control_rate).floor() as usize + 1;
            if n < 2 {
                continue;
            }
            let poses: Vec<ReferencePose> = (0..n).map(|i| clip.sample(i as f64 * dt)).collect();
            let feats: Vec<AmpFeatures> = (0..n)
                .map(|i| {
                    let (a, b) = if i + 1 < n { (i, i + 1) } else { (i - 1, i) };
                    let mut joint_vels = [0.0; N_JOINTS];
                    for j in 0..N_JOINTS {
                        joint_vels[j] =
                            (poses[b].joint_angles[j] - poses[a].joint_angles[j]) / dt;
                    }
                    let pitch_rate = (poses[b].base_pitch - poses[a].base_pitch) / dt;
                    AmpFeatures::from_pose(&poses[i], joint_vels, pitch_rate)
                })
                .collect();
            for w in feats.windows(2) {
                pairs.push(TransitionPair::new(&w[0], &w[1]));
            }
        }
        if pairs.is_empty() {
            return Err(AmpError::EmptyDataset);
        }
        Ok(Self { pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[TransitionPair] {
        &self.pairs
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> &TransitionPair {
        &self.pairs[rng.gen_range(0..self.pairs.len())]
    }
}

/// Discriminator loss statistics for logging.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscReport {
    pub loss: f64,
    pub mean_d_data: f64,
    pub mean_d_policy: f64,
    pub penalty: f64,
}

/// Least-squares discriminator objective with a gradient penalty on the
/// dataset samples:
/// `E_data[(D-1)^2] + E_policy[(D+1)^2] + (w_gp/2) E_data[||grad D||^2]`.
///
/// The penalty gradient is taken with respect to the discriminator input by
/// default; `gp_mode` switches it to the parameter gradient.
pub fn disc_loss_and_grads(
    disc: &Net,
    dataset_pairs: &[&TransitionPair],
    policy_pairs: &[&TransitionPair],
    w_gp: f64,
    gp_mode: GpMode,
) -> Result<(DiscReport, NetGrads), AmpError> {
    if dataset_pairs.is_empty() || policy_pairs.is_empty() {
        return Err(AmpError::EmptyBatch);
    }
    let mut grads = NetGrads::zeros_like(disc);
    let mut loss = 0.0;
    let mut mean_d_data = 0.0;
    let mut mean_d_policy = 0.0;
    let mut penalty_acc = 0.0;

    let n_data = dataset_pairs.len() as f64;
    for pair in dataset_pairs {
        let (y, cache) = disc.forward(&pair.concat)?;
        let d = y[0];
        mean_d_data += d / n_data;
        loss += (d - 1.0) * (d - 1.0) / n_data;
        let mut delta = vec![2.0 * (d - 1.0)];
        disc.backward_into(&cache, &mut delta, &mut grads, 1.0 / n_data)?;
        if w_gp != 0.0 {
            let (p, pgrads) = penalty_grads(disc, &pair.concat, gp_mode)?;
            penalty_acc += p / n_data;
            grads.add_scaled(&pgrads, 0.5 * w_gp / n_data);
        }
    }
    let n_policy = policy_pairs.len() as f64;
    for pair in policy_pairs {
        let (y, cache) = disc.forward(&pair.concat)?;
        let d = y[0];
        mean_d_policy += d / n_policy;
        loss += (d + 1.0) * (d + 1.0) / n_policy;
        let mut delta = vec![2.0 * (d + 1.0)];
        disc.backward_into(&cache, &mut delta, &mut grads, 1.0 / n_policy)?;
    }
    loss += 0.5 * w_gp * penalty_acc;

    Ok((
        DiscReport {
            loss,
            mean_d_data,
            mean_d_policy,
            penalty: penalty_acc,
        },
        grads,
    ))
}

/// Style reward `max(0, 1 - 0.25 (D - 1)^2)`, in [0, 1].
pub fn style_reward(disc: &Net, pair: &TransitionPair) -> Result<f64, AmpError> {
    let d = disc.infer(&pair.concat)?[0];
    Ok(style_reward_from_score(d))
}

/// Style reward from a raw discriminator score.
#[inline]
pub fn style_reward_from_score(d: f64) -> f64 {
    (1.0 - 0.25 * (d - 1.0) * (d - 1.0)).max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::{mirror, synth_gait, GaitParams};
    use crate::nn::{Activation, Layer};
    use crate::rng::{stream, Domain};
    use crate::sim::{PerturbationSpec, PhysicsParams};
    use crate::terrain::TerrainKind;
    use approx::assert_relative_eq;

    fn flat() -> Terrain {
        Terrain::generate(TerrainKind::Plane, 0, 0).unwrap()
    }

    #[test]
    fn standing_pose_has_zero_velocity_features() {
        let morph = RobotMorphology::default();
        let state = RobotState::standing(&morph, &flat(), 0.0, 0.27);
        let f = AmpFeatures::from_state(&state, &morph, &flat());
        assert_eq!(f.joint_vels, [0.0; N_JOINTS]);
        assert_eq!(f.base_lin_vel_body, [0.0, 0.0]);
        assert_eq!(f.base_pitch_rate, 0.0);
        assert_eq!(f.to_vec().len(), FEAT_DIM);
    }

    #[test]
    fn state_and_pose_of_same_configuration_agree() {
        let morph = RobotMorphology::default();
        let clip = synth_gait(&GaitParams::trot(1.0), &morph, 30, 50.0).unwrap();
        let pose = &clip.frames[4];

        let mut state = RobotState::standing(&morph, &flat(), 0.0, pose.base_height);
        state.base_pos = [0.0, pose.base_height];
        state.base_pitch = pose.base_pitch;
        state.base_lin_vel = [pose.base_forward_vel, 0.0];
        state.base_pitch_rate = 0.3;
        state.joint_angles = pose.joint_angles;
        state.joint_vels = [0.5; N_JOINTS];

        let from_state = AmpFeatures::from_state(&state, &morph, &flat());
        let from_pose = AmpFeatures::from_pose(pose, [0.5; N_JOINTS], 0.3);
        for (a, b) in from_state.to_vec().iter().zip(from_pose.to_vec()) {
            assert_relative_eq!(*a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn body_frame_velocity_rotates_with_pitch() {
        let morph = RobotMorphology::default();
        let mut state = RobotState::standing(&morph, &flat(), 0.0, 0.27);
        state.base_lin_vel = [1.0, 0.0];
        state.base_pitch = std::f64::consts::FRAC_PI_2;
        let f = AmpFeatures::from_state(&state, &morph, &flat());
        // World +x maps to body -z when pitched nose-up by 90 degrees.
        assert_relative_eq!(f.base_lin_vel_body[0], 0.0, epsilon = 1e-12);
        assert_relative_eq!(f.base_lin_vel_body[1], -1.0, epsilon = 1e-12);
    }

    #[test]
    fn style_reward_examples() {
        assert_relative_eq!(style_reward_from_score(1.0), 1.0, epsilon = 1e-15);
        assert_relative_eq!(style_reward_from_score(-1.0), 0.0, epsilon = 1e-15);
        assert_relative_eq!(style_reward_from_score(0.0), 0.75, epsilon = 1e-15);
        // Bounded on wild scores.
        for d in [-100.0, -2.0, 0.5, 3.0, 100.0] {
            let r = style_reward_from_score(d);
            assert!((0.0..=1.0).contains(&r));
        }
        assert_eq!(style_reward_from_score(-5.0), 0.0);
    }

    fn tiny_disc(w: Vec<f64>) -> Net {
        Net::from_layers(vec![Layer {
            w,
            b: vec![0.0],
            in_dim: PAIR_DIM,
            out_dim: 1,
            act: Activation::Identity,
        }])
    }

    #[test]
    fn loss_at_the_optimum_is_the_penalty_alone() {
        // D(x) = w.x with dataset at +e0 and policy at -e0, w = e0:
        // D=+1 on data, -1 on policy; prediction terms vanish and the
        // penalty equals ||w||^2 = 1.
        let mut w = vec![0.0; PAIR_DIM];
        w[0] = 1.0;
        let disc = tiny_disc(w);
        let mut plus = vec![0.0; PAIR_DIM];
        plus[0] = 1.0;
        let mut minus = vec![0.0; PAIR_DIM];
        minus[0] = -1.0;
        let data = TransitionPair::from_concat(plus);
        let policy = TransitionPair::from_concat(minus);
        let (report, _) =
            disc_loss_and_grads(&disc, &[&data], &[&policy], 10.0, GpMode::Input).unwrap();
        assert_relative_eq!(report.loss, 0.5 * 10.0 * 1.0, epsilon = 1e-12);
        assert_relative_eq!(report.mean_d_data, 1.0, epsilon = 1e-12);
        assert_relative_eq!(report.mean_d_policy, -1.0, epsilon = 1e-12);

        let (report, _) =
            disc_loss_and_grads(&disc, &[&data], &[&policy], 0.0, GpMode::Input).unwrap();
        assert_relative_eq!(report.loss, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_discriminator_scores_one_plus_one() {
        let disc = tiny_disc(vec![0.0; PAIR_DIM]);
        let pair = TransitionPair::from_concat(vec![0.3; PAIR_DIM]);
        let (report, _) =
            disc_loss_and_grads(&disc, &[&pair], &[&pair], 0.0, GpMode::Input).unwrap();
        assert_relative_eq!(report.loss, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn empty_batches_are_rejected() {
        let disc = tiny_disc(vec![0.0; PAIR_DIM]);
        let pair = TransitionPair::from_concat(vec![0.0; PAIR_DIM]);
        assert_eq!(
            disc_loss_and_grads(&disc, &[], &[&pair], 0.0, GpMode::Input).unwrap_err(),
            AmpError::EmptyBatch
        );
        assert_eq!(
            disc_loss_and_grads(&disc, &[&pair], &[], 0.0, GpMode::Input).unwrap_err(),
            AmpError::EmptyBatch
        );
    }

    #[test]
    fn loss_is_invariant_under_batch_shuffling() {
        let mut rng = stream(40, Domain::Init, 0);
        let disc = Net::orthogonal(
            &[PAIR_DIM, 16, 1],
            &[Activation::Tanh, Activation::Identity],
            1.0,
            &mut rng,
        );
        use rand::Rng;
        let pairs: Vec<TransitionPair> = (0..6)
            .map(|_| {
                TransitionPair::from_concat(
                    (0..PAIR_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                )
            })
            .collect();
        let data: Vec<&TransitionPair> = pairs[..3].iter().collect();
        let policy: Vec<&TransitionPair> = pairs[3..].iter().collect();
        let (r1, _) = disc_loss_and_grads(&disc, &data, &policy, 10.0, GpMode::Input).unwrap();
        let data_shuffled = vec![data[2], data[0], data[1]];
        let policy_shuffled = vec![policy[1], policy[2], policy[0]];
        let (r2, _) =
            disc_loss_and_grads(&disc, &data_shuffled, &policy_shuffled, 10.0, GpMode::Input)
                .unwrap();
        assert_relative_eq!(r1.loss, r2.loss, epsilon = 1e-12);
    }

    #[test]
    fn two_frame_clip_gives_one_pair_and_mirroring_doubles() {
        let morph = RobotMorphology::default();
        let clip = synth_gait(&GaitParams::trot(1.0), &morph, 2, 50.0).unwrap();
        let ds = PairDataset::from_clips(std::slice::from_ref(&clip), 50.0).unwrap();
        assert_eq!(ds.len(), 1);
        let both = vec![clip.clone(), mirror(&clip)];
        let ds2 = PairDataset::from_clips(&both, 50.0).unwrap();
        assert_eq!(ds2.len(), 2);
    }

    #[test]
    fn dataset_sampling_is_roughly_uniform() {
        use rand::Rng;
        let morph = RobotMorphology::default();
        let clip = synth_gait(&GaitParams::trot(1.0), &morph, 11, 50.0).unwrap();
        let ds = PairDataset::from_clips(std::slice::from_ref(&clip), 50.0).unwrap();
        let k = ds.len();
        assert_eq!(k, 10);
        let mut counts = vec![0usize; k];
        let mut rng = stream(41, Domain::Dataset, 0);
        let n = 100_000;
        for _ in 0..n {
            let idx = rng.gen_range(0..k);
            counts[idx] += 1;
        }
        // 5 sigma around n/k for a binomial count.
        let p = 1.0 / k as f64;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 * p).abs() < 5.0 * sigma);
        }
    }

    #[test]
    fn pair_buffer_wraps_and_samples() {
        let mut buf = PairBuffer::new(4);
        for i in 0..7 {
            buf.push(TransitionPair::from_concat(vec![i as f64; PAIR_DIM]));
        }
        assert_eq!(buf.len(), 4);
        // Oldest three were overwritten.
        let mut rng = stream(42, Domain::Trainer, 0);
        for _ in 0..64 {
            let p = buf.sample(&mut rng).unwrap();
            assert!(p.concat[0] >= 3.0);
        }
    }

    #[test]
    fn policy_rollout_pairs_have_consistent_layout() {
        // A short simulated rollout produces finite pairs of the right width.
        let morph = RobotMorphology::default();
        let params = PhysicsParams::default();
        let terrain = flat();
        let mut rng = stream(43, Domain::Env, 0);
        let mut state = RobotState::standing(&morph, &terrain, 0.0, 0.27);
        let targets = state.joint_angles;
        let mut prev = AmpFeatures::from_state(&state, &morph, &terrain);
        for _ in 0..10 {
            state = crate::sim::step(
                &state,
                &morph,
                &targets,
                &params,
                &terrain,
                &PerturbationSpec::disabled(),
                &mut rng,
            )
            .unwrap();
            let next = AmpFeatures::from_state(&state, &morph, &terrain);
            let pair = TransitionPair::new(&prev, &next);
            assert_eq!(pair.concat.len(), PAIR_DIM);
            assert!(pair.concat.iter().all(|v| v.is_finite()));
            prev = next;
        }
    }
}
