//! Episode-level environment wrapper: terrain regeneration, command
//! sampling, domain randomization at resets, action filtering, reward
//! bookkeeping, and termination. Each environment owns its RNG stream, so
//! any number of them can be stepped in any order without affecting results.

use crate::amp::{AmpFeatures, TransitionPair};
use crate::config::RunConfig;
use crate::rng::{self, Domain, RngSnapshot};
use crate::sim::{
    self, low_pass_filter, observe, privileged, randomize_params, NoiseSpec, PerturbationSpec,
    PhysicsParams, PrivilegedInfo, ProprioObs, RandomizationRanges, RobotMorphology, RobotState,
    N_JOINTS,
};
use crate::terrain::{self, CurriculumRecord, Terrain, TerrainKind};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Why an episode ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DoneReason {
    /// Trunk contact or excessive pitch.
    Fell,
    /// Episode time cap reached.
    Timeout,
    /// Simulator state became non-finite.
    NonFinite,
}

/// Result of one control step.
#[derive(Debug, Clone)]
pub struct EnvStep {
    /// Observation after the step (noise already applied).
    pub obs: ProprioObs,
    /// Transition features for the discriminator; absent when the state
    /// blew up.
    pub pair: Option<TransitionPair>,
    pub task_reward: f64,
    pub done: Option<DoneReason>,
}

/// Environment-facing slice of the run configuration.
#[derive(Debug, Clone)]
pub struct EnvSettings {
    pub morph: RobotMorphology,
    pub base_params: PhysicsParams,
    pub randomization: RandomizationRanges,
    pub randomize: bool,
    pub noise: NoiseSpec,
    pub perturbation: PerturbationSpec,
    pub stand_height: f64,
    pub start_difficulty: u8,
    pub episode_seconds: f64,
    pub fall_pitch: f64,
    pub w_v: f64,
    pub w_omega: f64,
}

impl EnvSettings {
    pub fn from_config(config: &RunConfig) -> Self {
        Self {
            morph: config.morphology.clone(),
            base_params: config.physics.clone(),
            randomization: config.randomization.clone(),
            randomize: config.randomize,
            noise: config.noise.clone(),
            perturbation: config.perturbation.clone(),
            stand_height: config.terrain.stand_height,
            start_difficulty: config.terrain.start_difficulty,
            episode_seconds: config.ppo.episode_seconds,
            fall_pitch: config.ppo.fall_pitch,
            w_v: config.reward.w_v,
            w_omega: config.reward.w_omega,
        }
    }

    /// Evaluation variant: nominal dynamics, no noise, no perturbations.
    pub fn clean(mut self) -> Self {
        self.randomize = false;
        self.noise = NoiseSpec::zero();
        self.perturbation = PerturbationSpec::disabled();
        self
    }
}

/// Exponential velocity-command tracking reward.
///
/// In the sagittal model the angular command and measurement are both zero,
/// so the second term contributes the constant `w_omega`; accuracy ratios
/// are always reported against the maximum `w_v + w_omega`.
#[inline]
pub fn task_reward(cmd_v: f64, actual_v: f64, cmd_omega: f64, actual_omega: f64, w_v: f64, w_omega: f64) -> f64 {
    w_v * (-(cmd_v - actual_v).abs()).exp() + w_omega * (-(cmd_omega - actual_omega).abs()).exp()
}

/// One simulated robot with its episode state.
#[derive(Debug, Clone)]
pub struct Env {
    pub settings: EnvSettings,
    /// Terrain family this environment trains on.
    pub kind: TerrainKind,
    /// Current curriculum level.
    pub level: u8,
    pub terrain: Terrain,
    pub params: PhysicsParams,
    pub state: RobotState,
    pub command: f64,
    rng: ChaCha8Rng,
    /// Filtered PD target from the previous control step.
    u_prev: [f64; N_JOINTS],
    prev_action: [f64; N_JOINTS],
    nominal_pose: [f64; N_JOINTS],
    last_obs: ProprioObs,
    terrain_seed: u64,
    ep_steps: u32,
    x_start: f64,
    crossed_center: bool,
    sum_task_reward: f64,
}

impl Env {
    /// Build an environment and start its first episode.
    pub fn new(settings: EnvSettings, kind: TerrainKind, rng: ChaCha8Rng) -> Env {
        let level = settings.start_difficulty;
        let mut env = Env {
            nominal_pose: settings.morph.standing_pose(settings.stand_height),
            settings,
            kind,
            level,
            terrain: Terrain::generate(kind, level, 0).expect("level validated"),
            params: PhysicsParams::default(),
            state: RobotState {
                base_pos: [0.0, 0.0],
                base_pitch: 0.0,
                base_lin_vel: [0.0, 0.0],
                base_pitch_rate: 0.0,
                joint_angles: [0.0; N_JOINTS],
                joint_vels: [0.0; N_JOINTS],
                foot_contact: [false; 4],
                contact_force_normal: [0.0; 4],
                contact_force_tangent: [0.0; 4],
                time: 0.0,
            },
            command: 0.0,
            rng,
            u_prev: [0.0; N_JOINTS],
            prev_action: [0.0; N_JOINTS],
            last_obs: ProprioObs::zeros(),
            terrain_seed: 0,
            ep_steps: 0,
            x_start: 0.0,
            crossed_center: false,
            sum_task_reward: 0.0,
        };
        env.begin_episode(None);
        env
    }

    /// Environment for a single evaluation trial with a fixed cell.
    pub fn for_trial(
        settings: EnvSettings,
        kind: TerrainKind,
        difficulty: u8,
        command: f64,
        rng: ChaCha8Rng,
    ) -> Env {
        let mut env = Env::new(
            EnvSettings {
                start_difficulty: difficulty,
                ..settings
            },
            kind,
            rng,
        );
        env.begin_episode(Some(command));
        env
    }

    /// Reset everything episode-local: new terrain at the current level, a
    /// fresh command (unless forced), re-randomized dynamics, nominal pose.
    pub fn begin_episode(&mut self, force_command: Option<f64>) {
        self.terrain_seed = self.rng.gen();
        self.terrain =
            Terrain::generate(self.kind, self.level, self.terrain_seed).expect("level in range");
        self.command = match force_command {
            Some(c) => {
                // Keep RNG consumption identical to the sampled path.
                let _ = terrain::sample_command(self.kind, self.level, &mut self.rng);
                c
            }
            None => terrain::sample_command(self.kind, self.level, &mut self.rng),
        };
        self.params = if self.settings.randomize {
            randomize_params(&self.settings.base_params, &self.settings.randomization, &mut self.rng)
                .expect("ranges validated")
        } else {
            self.settings.base_params.clone()
        };
        // Spawn 3 m before the block centre along the command direction.
        let x = if self.command >= 0.0 {
            self.terrain.block_center_x - 3.0
        } else {
            self.terrain.block_center_x + 3.0
        };
        self.state = RobotState::standing(&self.settings.morph, &self.terrain, x, self.settings.stand_height);
        // Small pose jitter so episodes do not start bit-identical.
        for j in self.state.joint_angles.iter_mut() {
            *j += self.rng.gen_range(-1.0..=1.0) * 0.02;
        }
        self.u_prev = self.state.joint_angles;
        self.prev_action = [0.0; N_JOINTS];
        self.ep_steps = 0;
        self.x_start = x;
        self.crossed_center = false;
        self.sum_task_reward = 0.0;
        self.last_obs = observe(
            &self.state,
            &self.settings.noise,
            &self.prev_action,
            self.command,
            &mut self.rng,
        );
    }

    /// Observation the policy should act on this step.
    pub fn last_obs(&self) -> &ProprioObs {
        &self.last_obs
    }

    /// Current privileged information (noiseless, pure).
    pub fn privileged(&self) -> PrivilegedInfo {
        privileged(&self.state, &self.terrain, &self.params)
    }

    pub fn nominal_pose(&self) -> [f64; N_JOINTS] {
        self.nominal_pose
    }

    pub fn episode_steps(&self) -> u32 {
        self.ep_steps
    }

    /// Signed distance travelled along the command direction.
    pub fn distance_traveled(&self) -> f64 {
        ((self.state.base_pos[0] - self.x_start) * self.command.signum()).max(0.0)
    }

    fn max_episode_steps(&self) -> u32 {
        (self.settings.episode_seconds / self.params.control_period()).round() as u32
    }

    /// Advance one control step under `action` (offset from the nominal
    /// pose). The caller scores the returned transition pair against the
    /// discriminator; episode resets are the caller's decision.
    pub fn step(&mut self, action: &[f64; N_JOINTS]) -> EnvStep {
        let mut targets = [0.0; N_JOINTS];
        for i in 0..N_JOINTS {
            targets[i] = self.nominal_pose[i] + action[i];
        }
        let filtered = low_pass_filter(&self.u_prev, &targets);
        self.u_prev = filtered;

        let feat_prev = AmpFeatures::from_state(&self.state, &self.settings.morph, &self.terrain);
        let stepped = sim::step(
            &self.state,
            &self.settings.morph,
            &filtered,
            &self.params,
            &self.terrain,
            &self.settings.perturbation,
            &mut self.rng,
        );
        self.prev_action = *action;
        self.ep_steps += 1;

        let state = match stepped {
            Ok(s) => s,
            Err(_) => {
                // Integration blow-up terminates the episode; the stale
                // observation is never consumed because callers reset.
                return EnvStep {
                    obs: self.last_obs.clone(),
                    pair: None,
                    task_reward: 0.0,
                    done: Some(DoneReason::NonFinite),
                };
            }
        };
        self.state = state;

        let feat_next = AmpFeatures::from_state(&self.state, &self.settings.morph, &self.terrain);
        let pair = TransitionPair::new(&feat_prev, &feat_next);

        let task = task_reward(
            self.command,
            self.state.base_lin_vel[0],
            0.0,
            0.0,
            self.settings.w_v,
            self.settings.w_omega,
        );
        self.sum_task_reward += task;
        let dir = self.command.signum();
        if dir != 0.0 && (self.state.base_pos[0] - self.terrain.block_center_x) * dir >= 0.0 {
            self.crossed_center = true;
        }

        let done = if self.fell() {
            Some(DoneReason::Fell)
        } else if self.ep_steps >= self.max_episode_steps() {
            Some(DoneReason::Timeout)
        } else {
            None
        };

        self.last_obs = observe(
            &self.state,
            &self.settings.noise,
            &self.prev_action,
            self.command,
            &mut self.rng,
        );
        EnvStep {
            obs: self.last_obs.clone(),
            pair: Some(pair),
            task_reward: task,
            done,
        }
    }

    /// Fall detection: trunk endpoint at/below ground or excessive pitch.
    pub fn fell(&self) -> bool {
        if self.state.base_pitch.abs() > self.settings.fall_pitch {
            return true;
        }
        let ends = self.state.trunk_endpoints(&self.settings.morph);
        ends.iter()
            .any(|end| end[1] <= self.terrain.height_at(end[0]) + 0.01)
    }

    /// Episode summary for the curriculum update.
    pub fn episode_record(&self) -> CurriculumRecord {
        let steps = self.ep_steps.max(1) as f64;
        let max_reward = self.settings.w_v + self.settings.w_omega;
        CurriculumRecord {
            crossed_center: self.crossed_center,
            tracking_reward_ratio: (self.sum_task_reward / steps / max_reward).clamp(0.0, 1.0),
            distance_traveled: self.distance_traveled(),
            commanded_distance: self.command.abs() * self.settings.episode_seconds,
        }
    }

    /// Apply the curriculum rule to this environment's level.
    pub fn update_curriculum(&mut self) {
        self.level = terrain::curriculum_update(self.level, &self.episode_record());
    }

    /// Mean per-step tracking ratio of the running episode.
    pub fn tracking_ratio(&self) -> f64 {
        let steps = self.ep_steps.max(1) as f64;
        self.sum_task_reward / steps / (self.settings.w_v + self.settings.w_omega)
    }

    /// Snapshot every mutable field for the training-state checkpoint.
    pub fn snapshot(&self) -> EnvSnapshot {
        EnvSnapshot {
            kind: self.kind,
            level: self.level,
            terrain_seed: self.terrain_seed,
            params: self.params.clone(),
            state: self.state.clone(),
            command: self.command,
            rng: RngSnapshot::capture(&self.rng),
            u_prev: self.u_prev,
            prev_action: self.prev_action,
            last_obs: self.last_obs.to_vec(),
            ep_steps: self.ep_steps,
            x_start: self.x_start,
            crossed_center: self.crossed_center,
            sum_task_reward: self.sum_task_reward,
        }
    }

    /// Rebuild an environment from a snapshot.
    pub fn restore(settings: EnvSettings, snap: &EnvSnapshot) -> Env {
        let terrain = Terrain::generate(snap.kind, snap.level, snap.terrain_seed)
            .expect("snapshot level in range");
        let obs = &snap.last_obs;
        let mut last_obs = ProprioObs::zeros();
        last_obs.joint_angles.copy_from_slice(&obs[0..8]);
        last_obs.joint_vels.copy_from_slice(&obs[8..16]);
        last_obs.projected_gravity.copy_from_slice(&obs[16..18]);
        last_obs.base_pitch_rate = obs[18];
        last_obs.foot_contact.copy_from_slice(&obs[19..23]);
        last_obs.prev_action.copy_from_slice(&obs[23..31]);
        last_obs.command = obs[31];
        Env {
            nominal_pose: settings.morph.standing_pose(settings.stand_height),
            settings,
            kind: snap.kind,
            level: snap.level,
            terrain,
            params: snap.params.clone(),
            state: snap.state.clone(),
            command: snap.command,
            rng: snap.rng.restore(),
            u_prev: snap.u_prev,
            prev_action: snap.prev_action,
            last_obs,
            terrain_seed: snap.terrain_seed,
            ep_steps: snap.ep_steps,
            x_start: snap.x_start,
            crossed_center: snap.crossed_center,
            sum_task_reward: snap.sum_task_reward,
        }
    }
}

/// Serializable mirror of an [`Env`]'s mutable state.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvSnapshot {
    pub kind: TerrainKind,
    pub level: u8,
    pub terrain_seed: u64,
    pub params: PhysicsParams,
    pub state: RobotState,
    pub command: f64,
    pub rng: RngSnapshot,
    pub u_prev: [f64; N_JOINTS],
    pub prev_action: [f64; N_JOINTS],
    pub last_obs: Vec<f64>,
    pub ep_steps: u32,
    pub x_start: f64,
    pub crossed_center: bool,
    pub sum_task_reward: f64,
}

/// Build the training environment pool, one RNG stream per environment,
/// terrain kinds assigned round-robin from the configured list.
pub fn make_env_pool(config: &RunConfig) -> Vec<Env> {
    let settings = EnvSettings::from_config(config);
    let kinds = &config.terrain.kinds;
    (0..config.ppo.n_envs as usize)
        .map(|i| {
            let rng = rng::stream(config.seed, Domain::Env, i as u64);
            Env::new(settings.clone(), kinds[i % kinds.len()], rng)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn quiet_config() -> RunConfig {
        let mut config = RunConfig::default();
        config.terrain.kinds = vec![TerrainKind::Plane];
        config.randomize = false;
        config.noise = NoiseSpec::zero();
        config.perturbation = PerturbationSpec::disabled();
        config.ppo.n_envs = 1;
        config
    }

    #[test]
    fn task_reward_examples() {
        // Perfect tracking gives the coefficient sum.
        assert_relative_eq!(task_reward(1.0, 1.0, 0.0, 0.0, 1.0, 0.5), 1.5, epsilon = 1e-15);
        // Unit velocity error decays the first term by e^-1.
        let expected = (-1.0f64).exp() + 0.5;
        assert_relative_eq!(
            task_reward(1.0, 0.0, 0.0, 0.0, 1.0, 0.5),
            expected,
            epsilon = 1e-15
        );
        // Strictly decreasing in the velocity error.
        let mut prev = f64::INFINITY;
        for k in 0..20 {
            let r = task_reward(1.0, 1.0 + 0.1 * k as f64, 0.0, 0.0, 1.0, 0.5);
            assert!(r < prev);
            prev = r;
        }
    }

    #[test]
    fn standing_still_keeps_episode_alive() {
        let config = quiet_config();
        let mut env = make_env_pool(&config).into_iter().next().unwrap();
        env.begin_episode(Some(0.5));
        for _ in 0..100 {
            let step = env.step(&[0.0; N_JOINTS]);
            assert_eq!(step.done, None);
            assert!(step.task_reward > 0.0);
        }
        assert!(!env.fell());
    }

    #[test]
    fn episode_times_out_at_the_cap() {
        let mut config = quiet_config();
        config.ppo.episode_seconds = 0.2;
        let mut env = make_env_pool(&config).into_iter().next().unwrap();
        env.begin_episode(Some(0.5));
        let mut done = None;
        for _ in 0..20 {
            let step = env.step(&[0.0; N_JOINTS]);
            if step.done.is_some() {
                done = step.done;
                break;
            }
        }
        assert_eq!(done, Some(DoneReason::Timeout));
        assert_eq!(env.episode_steps(), 10);
    }

    #[test]
    fn forced_pitch_triggers_a_fall() {
        let config = quiet_config();
        let mut env = make_env_pool(&config).into_iter().next().unwrap();
        env.state.base_pitch = 1.3;
        assert!(env.fell());
    }

    #[test]
    fn snapshot_restore_resumes_identically() {
        let mut config = quiet_config();
        config.noise = NoiseSpec::default();
        config.randomize = true;
        config.perturbation = PerturbationSpec::default();
        let settings = EnvSettings::from_config(&config);
        let mut env = Env::new(
            settings.clone(),
            TerrainKind::UniformNoise,
            rng::stream(3, Domain::Env, 0),
        );
        for _ in 0..30 {
            env.step(&[0.01; N_JOINTS]);
        }
        let snap = env.snapshot();
        let mut restored = Env::restore(settings, &snap);
        for k in 0..50 {
            let a = env.step(&[0.005 * k as f64; N_JOINTS]);
            let b = restored.step(&[0.005 * k as f64; N_JOINTS]);
            assert_eq!(a.obs, b.obs, "diverged at step {k}");
            assert_eq!(a.task_reward, b.task_reward);
        }
    }

    #[test]
    fn episode_record_tracks_progress() {
        let config = quiet_config();
        let mut env = make_env_pool(&config).into_iter().next().unwrap();
        env.begin_episode(Some(1.0));
        // Teleport the robot past the centre to simulate progress.
        env.state.base_pos[0] = env.terrain.block_center_x + 0.5;
        env.step(&[0.0; N_JOINTS]);
        let record = env.episode_record();
        assert!(record.crossed_center);
        assert!(record.distance_traveled > 3.0);
        assert_relative_eq!(record.commanded_distance, 20.0, epsilon = 1e-12);
    }
}
