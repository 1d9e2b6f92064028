//! Teacher-policy reinforcement learning: reward mixing, generalized
//! advantage estimation, rollout collection over the environment pool, the
//! clipped-surrogate update (policy, value, and privileged encoder trained
//! jointly), and discriminator updates in the same iteration loop.

use crate::amp::{disc_loss_and_grads, style_reward, PairBuffer, PairDataset, TransitionPair};
use crate::bundle::{
    read_adam, read_bundle, write_adam, write_bundle, BinReader, BinWriter, BundleError,
    BundleKind, Checkpoint, OptimState, PolicyBundle,
};
use crate::config::{RewardConfig, RunConfig};
use crate::env::{make_env_pool, Env, EnvSnapshot};
use crate::motion::MotionClip;
use crate::nn::{GpMode, NetGrads, NnError};
use crate::rng::{self, Domain, RngSnapshot};
use crate::sim::{N_JOINTS, OBS_DIM};
use crate::terrain::MAX_LEVEL;
use rand::seq::SliceRandom;
use std::path::Path;
use thiserror::Error;

pub const TRAIN_STATE_SCHEMA_VERSION: u32 = 1;
const TRAIN_STATE_MAGIC: &[u8; 8] = b"LLABTRST";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite loss at iteration {iteration}: {detail}")]
    NonFiniteLoss { iteration: u32, detail: String },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Amp(#[from] crate::amp::AmpError),
    #[error(transparent)]
    Bundle(#[from] BundleError),
    #[error("training I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Invalid(String),
}

/// Mix the tracking and style rewards: `w_goal * r_goal + w_style * r_style`.
#[inline]
pub fn combined_reward(r_goal: f64, r_style: f64, weights: &RewardConfig) -> f64 {
    weights.w_goal * r_goal + weights.w_style * r_style
}

/// Generalized advantage estimation over one environment's step sequence.
///
/// `dones[t]` marks that the transition at `t` ended its episode; the
/// recursion resets across those boundaries. `bootstrap` is the value of the
/// state after the final step.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap: f64,
    gamma: f64,
    lam: f64,
) -> Result<(Vec<f64>, Vec<f64>), TrainError> {
    if rewards.len() != values.len() {
        return Err(TrainError::DimMismatch {
            context: "gae values",
            expected: rewards.len(),
            got: values.len(),
        });
    }
    if rewards.len() != dones.len() {
        return Err(TrainError::DimMismatch {
            context: "gae dones",
            expected: rewards.len(),
            got: dones.len(),
        });
    }
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    let mut next_value = bootstrap;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        next_adv = delta + gamma * lam * live * next_adv;
        adv[t] = next_adv;
        next_value = values[t];
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

/// Flattened on-policy batch plus the statistics gathered while collecting.
#[derive(Debug, Clone, Default)]
pub struct RolloutBatch {
    pub obs: Vec<Vec<f64>>,
    pub privileged: Vec<Vec<f64>>,
    pub actions: Vec<[f64; N_JOINTS]>,
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    pub mean_task_reward: f64,
    pub mean_style_reward: f64,
    pub mean_combined_reward: f64,
    pub mean_tracking_ratio: f64,
    pub episodes_finished: u32,
    pub mean_episode_steps: f64,
    pub level_histogram: [u32; (MAX_LEVEL + 1) as usize],
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }
}

/// Losses and diagnostics from one PPO update.
#[derive(Debug, Clone, Copy, Default)]
pub struct PpoReport {
    pub surrogate_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub disc_loss: f64,
    pub mean_d_data: f64,
    pub mean_d_policy: f64,
    pub disc_penalty: f64,
}

/// Per-iteration log row.
#[derive(Debug, Clone, Copy)]
pub struct IterationStats {
    pub iteration: u32,
    pub mean_task_reward: f64,
    pub mean_style_reward: f64,
    pub mean_combined_reward: f64,
    pub mean_tracking_ratio: f64,
    pub report: PpoReport,
    pub episodes_finished: u32,
    pub mean_episode_steps: f64,
    pub level_histogram: [u32; (MAX_LEVEL + 1) as usize],
}

pub const TRAIN_LOG_HEADER: &str = "iteration,mean_task_reward,mean_style_reward,mean_combined_reward,tracking_ratio,surrogate_loss,value_loss,entropy,approx_kl,disc_loss,mean_d_data,mean_d_policy,disc_penalty,episodes_finished,mean_episode_steps,level0,level1,level2,level3,level4,level5,level6,level7,level8,level9";

impl IterationStats {
    pub fn csv_row(&self) -> String {
        let mut row = format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.iteration,
            self.mean_task_reward,
            self.mean_style_reward,
            self.mean_combined_reward,
            self.mean_tracking_ratio,
            self.report.surrogate_loss,
            self.report.value_loss,
            self.report.entropy,
            self.report.approx_kl,
            self.report.disc_loss,
            self.report.mean_d_data,
            self.report.mean_d_policy,
            self.report.disc_penalty,
            self.episodes_finished,
            self.mean_episode_steps,
        );
        for count in self.level_histogram {
            row.push(',');
            row.push_str(&count.to_string());
        }
        row
    }
}

/// Everything the teacher training loop mutates, checkpointable mid-run.
pub struct Trainer {
    pub config: RunConfig,
    pub envs: Vec<Env>,
    pub bundle: PolicyBundle,
    pub optim: OptimState,
    pub dataset: Option<PairDataset>,
    pub policy_pairs: PairBuffer,
    pub iteration: u32,
    trainer_rng: rand_chacha::ChaCha8Rng,
    dataset_rng: rand_chacha::ChaCha8Rng,
}

impl Trainer {
    /// Fresh trainer from a validated config and reference clips.
    pub fn new(config: &RunConfig, clips: &[MotionClip]) -> Result<Trainer, TrainError> {
        config.validate().map_err(|e| TrainError::Invalid(e.to_string()))?;
        let needs_dataset = config.amp.enabled;
        if needs_dataset && clips.is_empty() {
            return Err(TrainError::Invalid(
                "the adversarial branch is enabled but no motion clips were supplied; \
                 generate clips first or disable [amp]"
                    .into(),
            ));
        }
        let dataset = if needs_dataset {
            Some(PairDataset::from_clips(clips, 1.0 / config.physics.control_period())?)
        } else {
            None
        };
        let mut init_rng = rng::stream(config.seed, Domain::Init, 0);
        let bundle = config.nets.build_bundle(&mut init_rng);
        let optim = OptimState::new(&bundle);
        Ok(Trainer {
            envs: make_env_pool(config),
            bundle,
            optim,
            dataset,
            policy_pairs: PairBuffer::new(config.amp.buffer_capacity as usize),
            iteration: 0,
            trainer_rng: rng::stream(config.seed, Domain::Trainer, 0),
            dataset_rng: rng::stream(config.seed, Domain::Dataset, 0),
            config: config.clone(),
        })
    }

    /// Collect `horizon` steps from every environment.
    pub fn collect_rollouts(&mut self) -> Result<RolloutBatch, TrainError> {
        let horizon = self.config.ppo.horizon as usize;
        let n_envs = self.envs.len();
        let n = horizon * n_envs;
        let mut batch = RolloutBatch {
            obs: Vec::with_capacity(n),
            privileged: Vec::with_capacity(n),
            actions: Vec::with_capacity(n),
            log_probs: Vec::with_capacity(n),
            values: Vec::with_capacity(n),
            ..RolloutBatch::default()
        };
        let mut rewards = vec![Vec::with_capacity(horizon); n_envs];
        let mut dones = vec![Vec::with_capacity(horizon); n_envs];
        let mut values = vec![Vec::with_capacity(horizon); n_envs];
        let mut sum_task = 0.0;
        let mut sum_style = 0.0;
        let mut sum_combined = 0.0;
        let mut sum_ratio = 0.0;
        let mut episodes = 0u32;
        let mut sum_ep_steps = 0.0;

        for _ in 0..horizon {
            for (e, env) in self.envs.iter_mut().enumerate() {
                let privileged = env.privileged().to_vec();
                let latent = self.bundle.encoder.infer(&privileged)?;
                let obs = env.last_obs().to_vec();
                let mut input = latent;
                input.extend_from_slice(&obs);
                let mean = self.bundle.policy.infer(&input)?;
                let action_vec = self.bundle.head.sample(&mean, &mut self.trainer_rng);
                let mut action = [0.0; N_JOINTS];
                action.copy_from_slice(&action_vec);
                let log_prob = self.bundle.head.log_prob(&mean, &action_vec);
                let value = self.bundle.value.infer(&input)?[0];

                let step = env.step(&action);
                let style = match (&step.pair, self.config.amp.enabled) {
                    (Some(pair), true) => {
                        let r = style_reward(&self.bundle.disc, pair)?;
                        self.policy_pairs.push(pair.clone());
                        r
                    }
                    _ => 0.0,
                };
                let reward = combined_reward(step.task_reward, style, &self.config.reward);

                batch.obs.push(obs);
                batch.privileged.push(privileged);
                batch.actions.push(action);
                batch.log_probs.push(log_prob);
                batch.values.push(value);
                rewards[e].push(reward);
                dones[e].push(step.done.is_some());
                values[e].push(value);
                sum_task += step.task_reward;
                sum_style += style;
                sum_combined += reward;

                if step.done.is_some() {
                    episodes += 1;
                    sum_ep_steps += env.episode_steps() as f64;
                    sum_ratio += env.tracking_ratio();
                    env.update_curriculum();
                    env.begin_episode(None);
                }
            }
        }

        // Bootstrap values and per-env GAE, then interleave back into the
        // flat [t * n_envs + e] layout.
        let gamma = self.config.ppo.gamma;
        let lam = self.config.ppo.lam;
        batch.advantages = vec![0.0; n];
        batch.returns = vec![0.0; n];
        for (e, env) in self.envs.iter().enumerate() {
            let latent = self.bundle.encoder.infer(&env.privileged().to_vec())?;
            let mut input = latent;
            input.extend_from_slice(&env.last_obs().to_vec());
            let bootstrap = self.bundle.value.infer(&input)?[0];
            let (adv, ret) = gae(&rewards[e], &values[e], &dones[e], bootstrap, gamma, lam)?;
            for t in 0..horizon {
                batch.advantages[t * n_envs + e] = adv[t];
                batch.returns[t * n_envs + e] = ret[t];
            }
        }

        let n_f = n.max(1) as f64;
        batch.mean_task_reward = sum_task / n_f;
        batch.mean_style_reward = sum_style / n_f;
        batch.mean_combined_reward = sum_combined / n_f;
        batch.mean_tracking_ratio = if episodes > 0 {
            sum_ratio / episodes as f64
        } else {
            self.envs.iter().map(|e| e.tracking_ratio()).sum::<f64>() / n_envs as f64
        };
        batch.episodes_finished = episodes;
        batch.mean_episode_steps = if episodes > 0 {
            sum_ep_steps / episodes as f64
        } else {
            0.0
        };
        for env in &self.envs {
            batch.level_histogram[env.level as usize] += 1;
        }
        Ok(batch)
    }

    /// One PPO update over the batch plus the discriminator updates.
    ///
    /// Advantages are normalized over the whole batch. Policy, value, and
    /// encoder gradients flow jointly: the encoder receives the latent
    /// gradient from both heads.
    pub fn ppo_update(&mut self, batch: &RolloutBatch) -> Result<PpoReport, TrainError> {
        if batch.is_empty() {
            return Ok(PpoReport::default());
        }
        let n = batch.len();
        let hyper = self.config.ppo;
        let latent_dim = self.config.nets.latent_dim;

        let mean = batch.advantages.iter().sum::<f64>() / n as f64;
        let var = batch
            .advantages
            .iter()
            .map(|a| (a - mean) * (a - mean))
            .sum::<f64>()
            / n as f64;
        let std = var.sqrt().max(1e-8);
        let advantages: Vec<f64> = batch.advantages.iter().map(|a| (a - mean) / std).collect();

        let mut report = PpoReport::default();
        let mut minibatch_count = 0.0;
        let mut indices: Vec<usize> = (0..n).collect();
        let mb_count = hyper.minibatches as usize;

        for _epoch in 0..hyper.epochs {
            indices.shuffle(&mut self.trainer_rng);
            for chunk in indices.chunks(n.div_ceil(mb_count)) {
                let mb = chunk.len() as f64;
                let mut policy_grads = NetGrads::zeros_like(&self.bundle.policy);
                let mut value_grads = NetGrads::zeros_like(&self.bundle.value);
                let mut encoder_grads = NetGrads::zeros_like(&self.bundle.encoder);
                let mut log_std_grads = vec![0.0; N_JOINTS];
                let mut surr_acc = 0.0;
                let mut vloss_acc = 0.0;
                let mut kl_acc = 0.0;

                for &i in chunk {
                    let (latent, enc_cache) = self.bundle.encoder.forward(&batch.privileged[i])?;
                    let mut input = latent;
                    input.extend_from_slice(&batch.obs[i]);
                    let (mean_out, pol_cache) = self.bundle.policy.forward(&input)?;
                    let (v_out, val_cache) = self.bundle.value.forward(&input)?;

                    let log_prob = self.bundle.head.log_prob(&mean_out, &batch.actions[i]);
                    let ratio = (log_prob - batch.log_probs[i]).exp();
                    let adv = advantages[i];
                    let clipped = ratio.clamp(1.0 - hyper.clip, 1.0 + hyper.clip);
                    let unclipped_obj = ratio * adv;
                    let clipped_obj = clipped * adv;
                    surr_acc += -unclipped_obj.min(clipped_obj);
                    kl_acc += batch.log_probs[i] - log_prob;

                    // The clipped branch is constant in the parameters, so
                    // only the unclipped branch carries gradient.
                    let dlogp_factor = if unclipped_obj <= clipped_obj {
                        -adv * ratio
                    } else {
                        0.0
                    };
                    let (dlogp_dmean, dlogp_dlogstd) =
                        self.bundle.head.log_prob_grads(&mean_out, &batch.actions[i]);
                    let dmean: Vec<f64> = dlogp_dmean.iter().map(|g| dlogp_factor * g).collect();
                    for (g, d) in log_std_grads.iter_mut().zip(&dlogp_dlogstd) {
                        *g += (dlogp_factor * d - hyper.entropy_coef) / mb;
                    }

                    let v_err = v_out[0] - batch.returns[i];
                    vloss_acc += v_err * v_err;
                    let dv = vec![2.0 * hyper.vf_coef * v_err];

                    // Backprop both heads; their input gradients add up on
                    // the shared latent slice, which then drives the encoder.
                    let mut delta = dmean;
                    self.bundle
                        .policy
                        .backward_into(&pol_cache, &mut delta, &mut policy_grads, 1.0 / mb)?;
                    let mut latent_grad: Vec<f64> = delta[..latent_dim].to_vec();
                    let mut delta_v = dv;
                    self.bundle
                        .value
                        .backward_into(&val_cache, &mut delta_v, &mut value_grads, 1.0 / mb)?;
                    for (g, d) in latent_grad.iter_mut().zip(&delta_v[..latent_dim]) {
                        *g += d;
                    }
                    for g in latent_grad.iter_mut() {
                        *g /= mb;
                    }
                    self.bundle.encoder.backward_into(
                        &enc_cache,
                        &mut latent_grad,
                        &mut encoder_grads,
                        1.0,
                    )?;
                }

                let surr = surr_acc / mb;
                let vloss = vloss_acc / mb;
                if !surr.is_finite() || !vloss.is_finite() || !policy_grads.is_finite() {
                    return Err(TrainError::NonFiniteLoss {
                        iteration: self.iteration,
                        detail: format!("surrogate={surr}, value_loss={vloss}"),
                    });
                }
                report.surrogate_loss += surr;
                report.value_loss += vloss;
                report.approx_kl += kl_acc / mb;
                minibatch_count += 1.0;

                let lr = hyper.lr;
                self.optim
                    .policy
                    .step(self.bundle.policy.params_mut(), policy_grads.flat(), lr)?;
                self.optim
                    .head
                    .step(self.bundle.head.log_std.iter_mut(), log_std_grads.iter(), lr)?;
                self.optim
                    .value
                    .step(self.bundle.value.params_mut(), value_grads.flat(), lr)?;
                self.optim
                    .encoder
                    .step(self.bundle.encoder.params_mut(), encoder_grads.flat(), lr)?;
            }

            // One discriminator update per PPO epoch.
            if self.config.amp.enabled {
                let disc_report = if self.config.amp.freeze_disc {
                    self.disc_step(false)?
                } else {
                    self.disc_step(true)?
                };
                report.disc_loss = disc_report.loss;
                report.mean_d_data = disc_report.mean_d_data;
                report.mean_d_policy = disc_report.mean_d_policy;
                report.disc_penalty = disc_report.penalty;
            }
        }

        report.surrogate_loss /= minibatch_count;
        report.value_loss /= minibatch_count;
        report.approx_kl /= minibatch_count;
        report.entropy = self.bundle.head.entropy();
        Ok(report)
    }

    /// Evaluate the discriminator objective on fresh minibatches and, when
    /// `update` is set, apply one Adam step.
    fn disc_step(&mut self, update: bool) -> Result<crate::amp::DiscReport, TrainError> {
        let empty = crate::amp::DiscReport {
            loss: 0.0,
            mean_d_data: 0.0,
            mean_d_policy: 0.0,
            penalty: 0.0,
        };
        let Some(dataset) = self.dataset.as_ref() else {
            return Ok(empty);
        };
        if self.policy_pairs.is_empty() {
            return Ok(empty);
        }
        let batch = self.config.amp.batch as usize;
        let data: Vec<TransitionPair> = (0..batch)
            .map(|_| dataset.sample(&mut self.dataset_rng).clone())
            .collect();
        let policy: Vec<TransitionPair> = (0..batch)
            .map(|_| self.policy_pairs.sample(&mut self.dataset_rng).unwrap().clone())
            .collect();
        let gp_mode = if self.config.amp.gp_on_params {
            GpMode::Params
        } else {
            GpMode::Input
        };
        let data_refs: Vec<&TransitionPair> = data.iter().collect();
        let policy_refs: Vec<&TransitionPair> = policy.iter().collect();
        let (disc_report, grads) = disc_loss_and_grads(
            &self.bundle.disc,
            &data_refs,
            &policy_refs,
            self.config.amp.w_gp,
            gp_mode,
        )?;
        if !disc_report.loss.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                iteration: self.iteration,
                detail: format!("disc_loss={}", disc_report.loss),
            });
        }
        if update {
            self.optim.disc.step(
                self.bundle.disc.params_mut(),
                grads.flat(),
                self.config.amp.lr,
            )?;
        }
        Ok(disc_report)
    }

    /// One full iteration: collect, update, report.
    pub fn iterate(&mut self) -> Result<IterationStats, TrainError> {
        let batch = self.collect_rollouts()?;
        let report = self.ppo_update(&batch)?;
        self.iteration += 1;
        Ok(IterationStats {
            iteration: self.iteration,
            mean_task_reward: batch.mean_task_reward,
            mean_style_reward: batch.mean_style_reward,
            mean_combined_reward: batch.mean_combined_reward,
            mean_tracking_ratio: batch.mean_tracking_ratio,
            report,
            episodes_finished: batch.episodes_finished,
            mean_episode_steps: batch.mean_episode_steps,
            level_histogram: batch.level_histogram,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            kind: BundleKind::Teacher,
            bundle: self.bundle.clone(),
            optim: self.optim.clone(),
        }
    }

    /// Full training state for bitwise-identical resume.
    pub fn save_state(&self, path: &Path) -> Result<(), TrainError> {
        let mut w = BinWriter::new();
        w.bytes(TRAIN_STATE_MAGIC);
        w.u32(TRAIN_STATE_SCHEMA_VERSION);
        w.u32(self.iteration);
        write_bundle(&mut w, &self.bundle);
        write_optim_all(&mut w, &self.optim);
        write_rng(&mut w, &RngSnapshot::capture(&self.trainer_rng));
        write_rng(&mut w, &RngSnapshot::capture(&self.dataset_rng));
        let (pairs, write_idx) = self.policy_pairs.raw();
        w.u64(self.policy_pairs.capacity() as u64);
        w.u64(write_idx as u64);
        w.u64(pairs.len() as u64);
        for pair in pairs {
            w.f64_slice(&pair.concat);
        }
        w.u64(self.envs.len() as u64);
        for env in &self.envs {
            write_env_snapshot(&mut w, &env.snapshot());
        }
        std::fs::write(path, &w.buf)?;
        Ok(())
    }

    /// Resume a trainer from a state file; `config` and `clips` must match
    /// the original run.
    pub fn load_state(
        config: &RunConfig,
        clips: &[MotionClip],
        path: &Path,
    ) -> Result<Trainer, TrainError> {
        let buf = std::fs::read(path)?;
        let mut r = BinReader::new(&buf);
        if r.bytes(8)? != TRAIN_STATE_MAGIC {
            return Err(BundleError::BadMagic.into());
        }
        let version = r.u32()?;
        if version != TRAIN_STATE_SCHEMA_VERSION {
            return Err(BundleError::SchemaVersionMismatch {
                found: version,
                expected: TRAIN_STATE_SCHEMA_VERSION,
            }
            .into());
        }
        let iteration = r.u32()?;
        let bundle = read_bundle(&mut r)?;
        let optim = read_optim_all(&mut r)?;
        let trainer_rng = read_rng(&mut r)?.restore();
        let dataset_rng = read_rng(&mut r)?.restore();
        let capacity = r.u64()? as usize;
        let write_idx = r.u64()? as usize;
        let n_pairs = r.u64()? as usize;
        let mut pairs = Vec::with_capacity(n_pairs);
        for _ in 0..n_pairs {
            pairs.push(TransitionPair::from_concat(r.f64_vec()?));
        }
        let n_envs = r.u64()? as usize;
        let settings = crate::env::EnvSettings::from_config(config);
        let mut envs = Vec::with_capacity(n_envs);
        for _ in 0..n_envs {
            let snap = read_env_snapshot(&mut r)?;
            envs.push(Env::restore(settings.clone(), &snap));
        }
        let dataset = if config.amp.enabled {
            Some(PairDataset::from_clips(clips, 1.0 / config.physics.control_period())?)
        } else {
            None
        };
        Ok(Trainer {
            config: config.clone(),
            envs,
            bundle,
            optim,
            dataset,
            policy_pairs: PairBuffer::from_raw(pairs, write_idx, capacity),
            iteration,
            trainer_rng,
            dataset_rng,
        })
    }
}

/// Run (or resume) phase-1 teacher training to `config.ppo.iterations`,
/// appending one CSV row per iteration to `log` and checkpointing through
/// `on_checkpoint`.
pub fn train_teacher(
    trainer: &mut Trainer,
    log: &mut dyn std::io::Write,
    mut on_checkpoint: impl FnMut(&Trainer) -> Result<(), TrainError>,
    mut on_iteration: impl FnMut(&IterationStats),
) -> Result<Vec<IterationStats>, TrainError> {
    let total = trainer.config.ppo.iterations;
    let interval = trainer.config.ppo.checkpoint_interval.max(1);
    let mut stats = Vec::new();
    if trainer.iteration == 0 {
        writeln!(log, "{TRAIN_LOG_HEADER}")?;
    }
    while trainer.iteration < total {
        let it = trainer.iterate()?;
        writeln!(log, "{}", it.csv_row())?;
        on_iteration(&it);
        stats.push(it);
        if trainer.iteration % interval == 0 || trainer.iteration == total {
            on_checkpoint(trainer)?;
        }
    }
    Ok(stats)
}

fn write_rng(w: &mut BinWriter, snap: &RngSnapshot) {
    w.bytes(&snap.seed);
    w.u64(snap.stream);
    w.u128(snap.word_pos);
}

fn read_rng(r: &mut BinReader) -> Result<RngSnapshot, BundleError> {
    let mut seed = [0u8; 32];
    seed.copy_from_slice(r.bytes(32)?);
    let stream = r.u64()?;
    let word_pos = r.u128()?;
    Ok(RngSnapshot {
        seed,
        stream,
        word_pos,
    })
}

fn write_optim_all(w: &mut BinWriter, o: &OptimState) {
    write_adam(w, &o.policy);
    write_adam(w, &o.head);
    write_adam(w, &o.value);
    write_adam(w, &o.encoder);
    write_adam(w, &o.predictor);
    write_adam(w, &o.disc);
}

fn read_optim_all(r: &mut BinReader) -> Result<OptimState, BundleError> {
    Ok(OptimState {
        policy: read_adam(r)?,
        head: read_adam(r)?,
        value: read_adam(r)?,
        encoder: read_adam(r)?,
        predictor: read_adam(r)?,
        disc: read_adam(r)?,
    })
}

fn write_env_snapshot(w: &mut BinWriter, s: &EnvSnapshot) {
    w.u8(match s.kind {
        crate::terrain::TerrainKind::Plane => 0,
        crate::terrain::TerrainKind::UniformNoise => 1,
        crate::terrain::TerrainKind::DiscreteObstacles => 2,
        crate::terrain::TerrainKind::Stairs => 3,
    });
    w.u8(s.level);
    w.u64(s.terrain_seed);
    w.f64(s.params.gravity);
    w.f64(s.params.friction_coeff);
    w.f64_slice(&s.params.motor_gain_scale);
    w.f64(s.params.mass_scale);
    w.f64(s.params.kp);
    w.f64(s.params.kd);
    w.f64(s.params.dt_physics);
    w.u32(s.params.substeps_per_control);
    w.f64_slice(&s.state.base_pos);
    w.f64(s.state.base_pitch);
    w.f64_slice(&s.state.base_lin_vel);
    w.f64(s.state.base_pitch_rate);
    w.f64_slice(&s.state.joint_angles);
    w.f64_slice(&s.state.joint_vels);
    for c in s.state.foot_contact {
        w.u8(c as u8);
    }
    w.f64_slice(&s.state.contact_force_normal);
    w.f64_slice(&s.state.contact_force_tangent);
    w.f64(s.state.time);
    w.f64(s.command);
    write_rng(w, &s.rng);
    w.f64_slice(&s.u_prev);
    w.f64_slice(&s.prev_action);
    w.f64_slice(&s.last_obs);
    w.u32(s.ep_steps);
    w.f64(s.x_start);
    w.u8(s.crossed_center as u8);
    w.f64(s.sum_task_reward);
}

fn read_env_snapshot(r: &mut BinReader) -> Result<EnvSnapshot, BundleError> {
    let kind = match r.u8()? {
        0 => crate::terrain::TerrainKind::Plane,
        1 => crate::terrain::TerrainKind::UniformNoise,
        2 => crate::terrain::TerrainKind::DiscreteObstacles,
        3 => crate::terrain::TerrainKind::Stairs,
        k => return Err(BundleError::Corrupt(format!("unknown terrain kind {k}"))),
    };
    let level = r.u8()?;
    let terrain_seed = r.u64()?;
    let mut params = crate::sim::PhysicsParams {
        gravity: r.f64()?,
        friction_coeff: r.f64()?,
        ..Default::default()
    };
    let gains = r.f64_vec()?;
    if gains.len() != N_JOINTS {
        return Err(BundleError::Corrupt("gain scale length".into()));
    }
    params.motor_gain_scale.copy_from_slice(&gains);
    params.mass_scale = r.f64()?;
    params.kp = r.f64()?;
    params.kd = r.f64()?;
    params.dt_physics = r.f64()?;
    params.substeps_per_control = r.u32()?;

    let expect = |v: Vec<f64>, n: usize, what: &str| {
        if v.len() == n {
            Ok(v)
        } else {
            Err(BundleError::Corrupt(format!("{what} length {} != {n}", v.len())))
        }
    };
    let base_pos = expect(r.f64_vec()?, 2, "base_pos")?;
    let base_pitch = r.f64()?;
    let base_lin_vel = expect(r.f64_vec()?, 2, "base_lin_vel")?;
    let base_pitch_rate = r.f64()?;
    let joint_angles = expect(r.f64_vec()?, N_JOINTS, "joint_angles")?;
    let joint_vels = expect(r.f64_vec()?, N_JOINTS, "joint_vels")?;
    let mut foot_contact = [false; 4];
    for c in foot_contact.iter_mut() {
        *c = r.u8()? != 0;
    }
    let force_n = expect(r.f64_vec()?, 4, "contact_force_normal")?;
    let force_t = expect(r.f64_vec()?, 4, "contact_force_tangent")?;
    let time = r.f64()?;

    let mut state = crate::sim::RobotState {
        base_pos: [base_pos[0], base_pos[1]],
        base_pitch,
        base_lin_vel: [base_lin_vel[0], base_lin_vel[1]],
        base_pitch_rate,
        joint_angles: [0.0; N_JOINTS],
        joint_vels: [0.0; N_JOINTS],
        foot_contact,
        contact_force_normal: [0.0; 4],
        contact_force_tangent: [0.0; 4],
        time,
    };
    state.joint_angles.copy_from_slice(&joint_angles);
    state.joint_vels.copy_from_slice(&joint_vels);
    state.contact_force_normal.copy_from_slice(&force_n);
    state.contact_force_tangent.copy_from_slice(&force_t);

    let command = r.f64()?;
    let rng = read_rng(r)?;
    let u_prev_v = expect(r.f64_vec()?, N_JOINTS, "u_prev")?;
    let prev_action_v = expect(r.f64_vec()?, N_JOINTS, "prev_action")?;
    let last_obs = expect(r.f64_vec()?, OBS_DIM, "last_obs")?;
    let ep_steps = r.u32()?;
    let x_start = r.f64()?;
    let crossed_center = r.u8()? != 0;
    let sum_task_reward = r.f64()?;

    let mut u_prev = [0.0; N_JOINTS];
    u_prev.copy_from_slice(&u_prev_v);
    let mut prev_action = [0.0; N_JOINTS];
    prev_action.copy_from_slice(&prev_action_v);

    Ok(EnvSnapshot {
        kind,
        level,
        terrain_seed,
        params,
        state,
        command,
        rng,
        u_prev,
        prev_action,
        last_obs,
        ep_steps,
        x_start,
        crossed_center,
        sum_task_reward,
    })
}
