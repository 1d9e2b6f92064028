//! Run configuration: one versioned TOML file covering every stage of the
//! pipeline. Unknown keys are rejected, all fields have defaults, and
//! validation reports every problem at once before any work starts.

use crate::motion::GaitParams;
use crate::nn::{Activation, GaussianHead, Net};
use crate::sim::{
    NoiseSpec, PerturbationSpec, PhysicsParams, RandomizationRanges, RobotMorphology, N_JOINTS,
    OBS_DIM, PRIV_DIM,
};
use crate::terrain::TerrainKind;
use crate::amp::PAIR_DIM;
use crate::bundle::PolicyBundle;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config schema version {found} unsupported (expected {expected})")]
    SchemaVersionMismatch { found: u32, expected: u32 },
    #[error("invalid config:\n{}", .0.join("\n"))]
    Invalid(Vec<String>),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Root for checkpoints, logs, and reports.
    pub out_dir: PathBuf,
    /// Directory holding motion clip files.
    pub clips_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs"),
            clips_dir: PathBuf::from("clips"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TerrainConfig {
    /// Terrain families used during training, assigned round-robin.
    pub kinds: Vec<TerrainKind>,
    /// Curriculum level environments start at.
    pub start_difficulty: u8,
    /// Trunk height of the nominal standing pose, m.
    pub stand_height: f64,
}

impl Default for TerrainConfig {
    fn default() -> Self {
        Self {
            kinds: vec![
                TerrainKind::Plane,
                TerrainKind::UniformNoise,
                TerrainKind::DiscreteObstacles,
                TerrainKind::Stairs,
            ],
            start_difficulty: 0,
            stand_height: 0.27,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    /// Weight of the command-tracking reward in the mix.
    pub w_goal: f64,
    /// Weight of the style reward in the mix.
    pub w_style: f64,
    /// Linear-velocity term coefficient inside the tracking reward.
    pub w_v: f64,
    /// Angular-velocity term coefficient inside the tracking reward.
    pub w_omega: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            w_goal: 0.35,
            w_style: 0.65,
            w_v: 1.0,
            w_omega: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub gamma: f64,
    pub lam: f64,
    pub clip: f64,
    pub epochs: u32,
    pub minibatches: u32,
    pub lr: f64,
    pub vf_coef: f64,
    pub entropy_coef: f64,
    pub horizon: u32,
    pub n_envs: u32,
    pub iterations: u32,
    pub checkpoint_interval: u32,
    /// Episode cap, seconds.
    pub episode_seconds: f64,
    /// |pitch| beyond this counts as a fall, rad.
    pub fall_pitch: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lam: 0.95,
            clip: 0.2,
            epochs: 5,
            minibatches: 4,
            lr: 3e-4,
            vf_coef: 0.5,
            entropy_coef: 0.0,
            horizon: 24,
            n_envs: 64,
            iterations: 1000,
            checkpoint_interval: 100,
            episode_seconds: 20.0,
            fall_pitch: 1.2,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AmpConfig {
    /// Master switch for the adversarial branch.
    pub enabled: bool,
    /// Gradient penalty coefficient.
    pub w_gp: f64,
    pub lr: f64,
    /// Per-update minibatch size for each of dataset and policy pairs.
    pub batch: u32,
    /// Policy pair ring-buffer capacity.
    pub buffer_capacity: u32,
    /// Take the penalty on the parameter gradient instead of the input
    /// gradient.
    pub gp_on_params: bool,
    /// Keep the discriminator frozen at its initialisation (diagnostics).
    pub freeze_disc: bool,
}

impl Default for AmpConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            w_gp: 10.0,
            lr: 3e-4,
            batch: 256,
            buffer_capacity: 4096,
            gp_on_params: false,
            freeze_disc: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub policy_hidden: Vec<usize>,
    pub value_hidden: Vec<usize>,
    pub encoder_hidden: Vec<usize>,
    pub predictor_hidden: Vec<usize>,
    pub disc_hidden: Vec<usize>,
    pub latent_dim: usize,
    /// Initial policy standard deviation per action dim.
    pub init_std: f64,
    /// Observation history window length for the predictor, control steps.
    pub history_len: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            policy_hidden: vec![512, 256, 128],
            value_hidden: vec![512, 256, 128],
            encoder_hidden: vec![256, 128],
            predictor_hidden: vec![512, 256],
            disc_hidden: vec![512, 256],
            latent_dim: 32,
            init_std: 0.3,
            history_len: 50,
        }
    }
}

impl NetConfig {
    fn mlp_dims(&self, input: usize, hidden: &[usize], output: usize) -> (Vec<usize>, Vec<Activation>) {
        let mut dims = Vec::with_capacity(hidden.len() + 2);
        dims.push(input);
        dims.extend_from_slice(hidden);
        dims.push(output);
        let mut acts = vec![Activation::Tanh; hidden.len()];
        acts.push(Activation::Identity);
        (dims, acts)
    }

    /// Freshly initialised bundle with orthogonal weights. The policy output
    /// layer is scaled down so initial actions stay near the nominal pose.
    pub fn build_bundle<R: Rng>(&self, rng: &mut R) -> PolicyBundle {
        let policy_in = self.latent_dim + OBS_DIM;
        let (dims, acts) = self.mlp_dims(policy_in, &self.policy_hidden, N_JOINTS);
        let policy = Net::orthogonal(&dims, &acts, 0.01, rng);
        let (dims, acts) = self.mlp_dims(policy_in, &self.value_hidden, 1);
        let value = Net::orthogonal(&dims, &acts, 1.0, rng);
        let (dims, acts) = self.mlp_dims(PRIV_DIM, &self.encoder_hidden, self.latent_dim);
        let encoder = Net::orthogonal(&dims, &acts, 1.0, rng);
        let (dims, acts) = self.mlp_dims(self.history_len * OBS_DIM, &self.predictor_hidden, self.latent_dim);
        let predictor = Net::orthogonal(&dims, &acts, 1.0, rng);
        let (dims, acts) = self.mlp_dims(PAIR_DIM, &self.disc_hidden, 1);
        let disc = Net::orthogonal(&dims, &acts, 1.0, rng);
        PolicyBundle {
            policy,
            head: GaussianHead::new(N_JOINTS, self.init_std),
            value,
            encoder,
            predictor,
            disc,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum DistillDataMode {
    /// Collect distillation data under the student's own actions.
    Student,
    /// Collect under the frozen teacher's actions instead.
    Teacher,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptationConfig {
    pub epochs: u32,
    pub lr: f64,
    pub batch: u32,
    /// Environment steps of distillation data to collect per epoch pass.
    pub rollout_steps: u32,
    /// Fraction of collected windows held out for validation.
    pub val_fraction: f64,
    pub data_mode: DistillDataMode,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: 1e-3,
            batch: 256,
            rollout_steps: 8192,
            val_fraction: 0.1,
            data_mode: DistillDataMode::Student,
        }
    }
}

/// One evaluation cell: a terrain family at a difficulty with a command.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EvalCell {
    pub kind: TerrainKind,
    pub difficulty: u8,
    pub command: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub n_trials: u32,
    /// Distance to the goal line, m.
    pub goal_distance: f64,
    /// Time budget multiplier over `goal_distance / |command|`.
    pub time_slack: f64,
    pub seeds: Vec<u64>,
    pub cells: Vec<EvalCell>,
    /// When set, the evaluate command exits nonzero if any cell's success
    /// rate falls below this gate.
    pub gate_min_success: Option<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_trials: 100,
            goal_distance: 8.0,
            time_slack: 1.5,
            seeds: vec![0, 1, 2],
            cells: vec![
                EvalCell {
                    kind: TerrainKind::UniformNoise,
                    difficulty: 2,
                    command: 0.5,
                },
                EvalCell {
                    kind: TerrainKind::UniformNoise,
                    difficulty: 2,
                    command: 1.0,
                },
                EvalCell {
                    kind: TerrainKind::Stairs,
                    difficulty: 2,
                    command: 0.5,
                },
                EvalCell {
                    kind: TerrainKind::DiscreteObstacles,
                    difficulty: 2,
                    command: 0.5,
                },
            ],
            gate_min_success: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct GaitGenConfig {
    pub walk_speed: f64,
    pub trot_speed: f64,
    pub pace_speed: f64,
    pub gallop_speed: f64,
    pub frames: usize,
    pub frame_rate: f64,
    /// Emit mirrored variants alongside each gait.
    pub mirrored: bool,
}

impl Default for GaitGenConfig {
    fn default() -> Self {
        Self {
            walk_speed: 0.5,
            trot_speed: 1.0,
            pace_speed: 1.2,
            gallop_speed: 2.0,
            frames: 100,
            frame_rate: 50.0,
            mirrored: true,
        }
    }
}

impl GaitGenConfig {
    pub fn presets(&self) -> Vec<(&'static str, GaitParams)> {
        vec![
            ("walk", GaitParams::walk(self.walk_speed)),
            ("trot", GaitParams::trot(self.trot_speed)),
            ("pace", GaitParams::pace(self.pace_speed)),
            ("gallop", GaitParams::gallop(self.gallop_speed)),
        ]
    }
}

/// Top-level run configuration.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    /// Master seed every RNG stream derives from.
    pub seed: u64,
    /// Single-threaded execution for bitwise reproducibility.
    pub deterministic: bool,
    pub paths: PathsConfig,
    pub morphology: RobotMorphology,
    pub physics: PhysicsParams,
    pub randomization: RandomizationRanges,
    /// Apply domain randomization at episode resets.
    pub randomize: bool,
    pub noise: NoiseSpec,
    pub perturbation: PerturbationSpec,
    pub terrain: TerrainConfig,
    pub reward: RewardConfig,
    pub ppo: PpoConfig,
    pub amp: AmpConfig,
    pub nets: NetConfig,
    pub adaptation: AdaptationConfig,
    pub eval: EvalConfig,
    pub gaits: GaitGenConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            seed: 0,
            deterministic: true,
            paths: PathsConfig::default(),
            morphology: RobotMorphology::default(),
            physics: PhysicsParams::default(),
            randomization: RandomizationRanges::default(),
            randomize: true,
            noise: NoiseSpec::default(),
            perturbation: PerturbationSpec::default(),
            terrain: TerrainConfig::default(),
            reward: RewardConfig::default(),
            ppo: PpoConfig::default(),
            amp: AmpConfig::default(),
            nets: NetConfig::default(),
            adaptation: AdaptationConfig::default(),
            eval: EvalConfig::default(),
            gaits: GaitGenConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        let config: RunConfig = toml::from_str(&text)?;
        if config.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(ConfigError::SchemaVersionMismatch {
                found: config.schema_version,
                expected: CONFIG_SCHEMA_VERSION,
            });
        }
        config.validate()?;
        Ok(config)
    }

    /// Serialise the fully-resolved configuration (defaults filled in).
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    /// Check every field, collecting all problems.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut errs = Vec::new();
        let mut push = |field: &str, msg: String| errs.push(format!("{field}: {msg}"));

        if let Err(e) = self.morphology.validate() {
            push("morphology", e);
        }
        if let Err(e) = self.physics.validate() {
            push("physics", e);
        }
        if let Err(e) = self.noise.validate() {
            push("noise", e);
        }
        if let Err(e) = self.perturbation.validate() {
            push("perturbation", e);
        }
        for (name, (lo, hi)) in [
            ("randomization.friction", self.randomization.friction),
            ("randomization.mass_scale", self.randomization.mass_scale),
            ("randomization.motor_gain_scale", self.randomization.motor_gain_scale),
        ] {
            if lo > hi {
                push(name, format!("range [{lo}, {hi}] has lo > hi"));
            }
        }
        if self.terrain.kinds.is_empty() {
            push("terrain.kinds", "must name at least one terrain family".into());
        }
        if self.terrain.start_difficulty > crate::terrain::MAX_LEVEL {
            push("terrain.start_difficulty", "must lie in 0..=9".into());
        }
        let reach = self.morphology.thigh_length + self.morphology.shank_length;
        if !(self.terrain.stand_height > 0.0 && self.terrain.stand_height < reach) {
            push(
                "terrain.stand_height",
                format!("must lie in (0, {reach}) for the leg geometry"),
            );
        }
        if self.reward.w_goal < 0.0 || self.reward.w_style < 0.0 {
            push("reward", "mixing weights must be >= 0".into());
        }
        if (self.reward.w_goal + self.reward.w_style - 1.0).abs() > 1e-9 {
            push("reward", format!(
                "w_goal + w_style must equal 1, got {}",
                self.reward.w_goal + self.reward.w_style
            ));
        }
        if self.reward.w_v < 0.0 || self.reward.w_omega < 0.0 {
            push("reward", "tracking coefficients must be >= 0".into());
        }
        let p = &self.ppo;
        if !(p.gamma > 0.0 && p.gamma <= 1.0) {
            push("ppo.gamma", "must lie in (0, 1]".into());
        }
        if !(p.lam > 0.0 && p.lam <= 1.0) {
            push("ppo.lam", "must lie in (0, 1]".into());
        }
        if !(p.clip > 0.0) {
            push("ppo.clip", "must be > 0".into());
        }
        if p.epochs == 0 || p.minibatches == 0 || p.horizon == 0 || p.n_envs == 0 {
            push("ppo", "epochs, minibatches, horizon, and n_envs must be >= 1".into());
        }
        if !(p.lr > 0.0) {
            push("ppo.lr", "must be > 0".into());
        }
        if !(p.episode_seconds > 0.0) {
            push("ppo.episode_seconds", "must be > 0".into());
        }
        if !(p.fall_pitch > 0.0) {
            push("ppo.fall_pitch", "must be > 0".into());
        }
        if self.amp.w_gp < 0.0 {
            push("amp.w_gp", "must be >= 0".into());
        }
        if self.amp.batch == 0 || self.amp.buffer_capacity == 0 {
            push("amp", "batch and buffer_capacity must be >= 1".into());
        }
        if !(self.amp.lr > 0.0) {
            push("amp.lr", "must be > 0".into());
        }
        let n = &self.nets;
        if n.latent_dim == 0 {
            push("nets.latent_dim", "must be >= 1".into());
        }
        if !(n.init_std > 0.0) {
            push("nets.init_std", "must be > 0".into());
        }
        if n.history_len == 0 {
            push("nets.history_len", "must be >= 1".into());
        }
        for (name, dims) in [
            ("nets.policy_hidden", &n.policy_hidden),
            ("nets.value_hidden", &n.value_hidden),
            ("nets.encoder_hidden", &n.encoder_hidden),
            ("nets.predictor_hidden", &n.predictor_hidden),
            ("nets.disc_hidden", &n.disc_hidden),
        ] {
            if dims.iter().any(|&d| d == 0) {
                push(name, "layer widths must be >= 1".into());
            }
        }
        let a = &self.adaptation;
        if !(a.lr > 0.0) {
            push("adaptation.lr", "must be > 0".into());
        }
        if a.batch == 0 || a.rollout_steps == 0 {
            push("adaptation", "batch and rollout_steps must be >= 1".into());
        }
        if !(0.0..1.0).contains(&a.val_fraction) || a.val_fraction <= 0.0 {
            push("adaptation.val_fraction", "must lie in (0, 1)".into());
        }
        let e = &self.eval;
        if e.n_trials == 0 {
            push("eval.n_trials", "must be >= 1".into());
        }
        if !(e.goal_distance > 0.0) {
            push("eval.goal_distance", "must be > 0".into());
        }
        if !(e.time_slack >= 1.0) {
            push("eval.time_slack", "must be >= 1".into());
        }
        if e.seeds.is_empty() {
            push("eval.seeds", "must name at least one seed".into());
        }
        if e.cells.is_empty() {
            push("eval.cells", "must name at least one cell".into());
        }
        for (i, cell) in e.cells.iter().enumerate() {
            if cell.difficulty > crate::terrain::MAX_LEVEL {
                push(&format!("eval.cells[{i}].difficulty"), "must lie in 0..=9".into());
            }
            if cell.command == 0.0 {
                push(&format!("eval.cells[{i}].command"), "must be nonzero".into());
            }
        }
        let g = &self.gaits;
        if g.frames < 2 {
            push("gaits.frames", "must be >= 2".into());
        }
        if !(g.frame_rate > 0.0) {
            push("gaits.frame_rate", "must be > 0".into());
        }
        for (name, params) in g.presets() {
            if let Err(err) = params.validate() {
                push(&format!("gaits.{name}"), err.to_string());
            }
        }

        if errs.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(errs))
        }
    }
}
