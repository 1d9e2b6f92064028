//! Teacher-student phase 2: observation-history buffer, latent prediction
//! from history, supervised distillation of the predictor against the frozen
//! teacher encoder, and the deployable student controller.

use crate::bundle::{BundleKind, Checkpoint};
use crate::config::{DistillDataMode, RunConfig};
use crate::env::{Env, EnvSettings};
use crate::nn::{AdamState, Net, NnError};
use crate::rng::{self, Domain};
use crate::sim::{PrivilegedInfo, ProprioObs, N_JOINTS, OBS_DIM};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AdaptError {
    #[error("teacher parameters changed during distillation")]
    FrozenTeacherViolation,
    #[error("student bundle does not match the teacher policy (checksum mismatch)")]
    BundleMismatch,
    #[error("distillation requires a teacher bundle, got a student")]
    NotATeacher,
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("{0}")]
    Invalid(String),
}

/// Ring of the last `window` proprioceptive observations.
///
/// Reads yield a fixed-size flattened window (oldest to newest), zero-padded
/// at the front until `window` observations have been pushed. Cleared at
/// episode boundaries.
#[derive(Debug, Clone)]
pub struct HistoryBuffer {
    window: usize,
    obs: std::collections::VecDeque<Vec<f64>>,
}

impl HistoryBuffer {
    pub fn new(window: usize) -> Self {
        assert!(window >= 1);
        Self {
            window,
            obs: std::collections::VecDeque::with_capacity(window),
        }
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }

    pub fn clear(&mut self) {
        self.obs.clear();
    }

    pub fn push(&mut self, obs: &ProprioObs) {
        self.push_vec(obs.to_vec());
    }

    pub fn push_vec(&mut self, obs: Vec<f64>) {
        debug_assert_eq!(obs.len(), OBS_DIM);
        if self.obs.len() == self.window {
            self.obs.pop_front();
        }
        self.obs.push_back(obs);
    }

    /// Flattened `window * OBS_DIM` view, oldest first, zero-padded front.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.window * OBS_DIM];
        let pad = self.window - self.obs.len();
        for (i, obs) in self.obs.iter().enumerate() {
            out[(pad + i) * OBS_DIM..(pad + i + 1) * OBS_DIM].copy_from_slice(obs);
        }
        out
    }
}

/// Deterministic teacher-side latent.
pub fn encode_privileged(encoder: &Net, x: &PrivilegedInfo) -> Result<Vec<f64>, AdaptError> {
    Ok(encoder.infer(&x.to_vec())?)
}

/// Deterministic student-side latent from the observation history.
pub fn predict_latent(predictor: &Net, history: &HistoryBuffer) -> Result<Vec<f64>, AdaptError> {
    Ok(predictor.infer(&history.flat())?)
}

/// Mean squared latent error of `predictor` over a labelled set.
pub fn latent_mse(predictor: &Net, windows: &[Vec<f64>], labels: &[Vec<f64>]) -> Result<f64, AdaptError> {
    assert_eq!(windows.len(), labels.len());
    if windows.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (w, l) in windows.iter().zip(labels) {
        let out = predictor.infer(w)?;
        total += out
            .iter()
            .zip(l)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    Ok(total / windows.len() as f64)
}

/// One shuffled minibatch pass of latent regression; returns the training
/// MSE measured before each update (running estimate over the pass).
pub fn fit_epoch(
    predictor: &mut Net,
    optim: &mut AdamState,
    windows: &[Vec<f64>],
    labels: &[Vec<f64>],
    batch: usize,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64, AdaptError> {
    assert_eq!(windows.len(), labels.len());
    let mut indices: Vec<usize> = (0..windows.len()).collect();
    indices.shuffle(rng);
    let mut total = 0.0;
    for chunk in indices.chunks(batch.max(1)) {
        let mb = chunk.len() as f64;
        let mut grads = crate::nn::NetGrads::zeros_like(predictor);
        for &i in chunk {
            let (out, cache) = predictor.forward(&windows[i])?;
            let mut delta: Vec<f64> = out
                .iter()
                .zip(&labels[i])
                .map(|(a, b)| 2.0 * (a - b))
                .collect();
            total += out
                .iter()
                .zip(&labels[i])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
            predictor.backward_into(&cache, &mut delta, &mut grads, 1.0 / mb)?;
        }
        optim.step(predictor.params_mut(), grads.flat(), lr)?;
    }
    Ok(total / windows.len().max(1) as f64)
}

/// Per-epoch distillation diagnostics.
#[derive(Debug, Clone, Default)]
pub struct DistillReport {
    /// Validation MSE of the untouched predictor.
    pub initial_val_mse: f64,
    pub epoch_train_mse: Vec<f64>,
    pub epoch_val_mse: Vec<f64>,
    pub samples_per_epoch: usize,
}

impl DistillReport {
    pub fn final_val_mse(&self) -> f64 {
        self.epoch_val_mse.last().copied().unwrap_or(self.initial_val_mse)
    }
}

/// Distill the history predictor against a frozen teacher.
///
/// Each epoch collects fresh rollouts — under the student action path by
/// default, so the data matches the distribution the student will face —
/// labels every step with the teacher encoder's latent, and runs one
/// supervised pass. Teacher parameters are checksummed before and after;
/// any drift is an error.
pub fn distill(teacher: &Checkpoint, config: &RunConfig) -> Result<(Checkpoint, DistillReport), AdaptError> {
    if !matches!(teacher.kind, BundleKind::Teacher) {
        return Err(AdaptError::NotATeacher);
    }
    config
        .validate()
        .map_err(|e| AdaptError::Invalid(e.to_string()))?;
    let frozen_before = teacher_fingerprint(teacher);

    let adapt = config.adaptation;
    let window = config.nets.history_len;
    let mut predictor = teacher.bundle.predictor.clone();
    let mut optim = AdamState::new(predictor.param_count());
    let mut rng = rng::stream(config.seed, Domain::Distill, 0);

    // Environment pool on its own RNG streams, same randomization as phase 1.
    let settings = EnvSettings::from_config(config);
    let kinds = &config.terrain.kinds;
    let mut envs: Vec<Env> = (0..config.ppo.n_envs as usize)
        .map(|i| {
            let env_rng = rng::stream(config.seed, Domain::Distill, 1 + i as u64);
            Env::new(settings.clone(), kinds[i % kinds.len()], env_rng)
        })
        .collect();
    let mut histories: Vec<HistoryBuffer> = envs
        .iter()
        .map(|env| {
            let mut h = HistoryBuffer::new(window);
            h.push(env.last_obs());
            h
        })
        .collect();

    let mut report = DistillReport {
        samples_per_epoch: adapt.rollout_steps as usize,
        ..DistillReport::default()
    };

    let passes = adapt.epochs.max(1);
    for epoch in 0..passes {
        let (windows, labels) = collect_distill_data(
            teacher,
            &predictor,
            config,
            &mut envs,
            &mut histories,
            adapt.rollout_steps as usize,
        )?;
        // Deterministic shuffled split into train and held-out validation.
        let mut indices: Vec<usize> = (0..windows.len()).collect();
        indices.shuffle(&mut rng);
        let n_val = ((windows.len() as f64) * adapt.val_fraction).ceil() as usize;
        let n_val = n_val.clamp(1, windows.len().saturating_sub(1).max(1));
        let (val_idx, train_idx) = indices.split_at(n_val);
        let val_w: Vec<Vec<f64>> = val_idx.iter().map(|&i| windows[i].clone()).collect();
        let val_l: Vec<Vec<f64>> = val_idx.iter().map(|&i| labels[i].clone()).collect();
        let train_w: Vec<Vec<f64>> = train_idx.iter().map(|&i| windows[i].clone()).collect();
        let train_l: Vec<Vec<f64>> = train_idx.iter().map(|&i| labels[i].clone()).collect();

        if epoch == 0 {
            report.initial_val_mse = latent_mse(&predictor, &val_w, &val_l)?;
        }
        if adapt.epochs == 0 {
            break;
        }
        let train_mse = fit_epoch(
            &mut predictor,
            &mut optim,
            &train_w,
            &train_l,
            adapt.batch as usize,
            adapt.lr,
            &mut rng,
        )?;
        report.epoch_train_mse.push(train_mse);
        report.epoch_val_mse.push(latent_mse(&predictor, &val_w, &val_l)?);
    }

    if teacher_fingerprint(teacher) != frozen_before {
        return Err(AdaptError::FrozenTeacherViolation);
    }

    let mut bundle = teacher.bundle.clone();
    bundle.predictor = predictor;
    let mut optim_state = teacher.optim.clone();
    optim_state.predictor = optim;
    let student = Checkpoint {
        kind: BundleKind::Student {
            teacher_policy_checksum: teacher.bundle.policy_checksum(),
        },
        bundle,
        optim: optim_state,
    };
    Ok((student, report))
}

fn teacher_fingerprint(teacher: &Checkpoint) -> [u8; 32] {
    teacher.bundle.full_checksum()
}

/// Roll the environments forward, recording `(history window, teacher
/// latent)` pairs. Actions follow the configured data mode.
fn collect_distill_data(
    teacher: &Checkpoint,
    predictor: &Net,
    config: &RunConfig,
    envs: &mut [Env],
    histories: &mut [HistoryBuffer],
    steps: usize,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>), AdaptError> {
    let mut windows = Vec::with_capacity(steps);
    let mut labels = Vec::with_capacity(steps);
    let n_envs = envs.len();
    let mut collected = 0;
    while collected < steps {
        for e in 0..n_envs {
            if collected >= steps {
                break;
            }
            let env = &mut envs[e];
            let history = &mut histories[e];
            let window = history.flat();
            let x = env.privileged().to_vec();
            let label = teacher.bundle.encoder.infer(&x)?;
            let obs = env.last_obs().to_vec();

            let latent = match config.adaptation.data_mode {
                DistillDataMode::Student => predictor.infer(&window)?,
                DistillDataMode::Teacher => label.clone(),
            };
            let mut input = latent;
            input.extend_from_slice(&obs);
            let mean = teacher.bundle.policy.infer(&input)?;
            let mut action = [0.0; N_JOINTS];
            action.copy_from_slice(&mean);

            windows.push(window);
            labels.push(label);
            collected += 1;

            let step = env.step(&action);
            if step.done.is_some() {
                env.update_curriculum();
                env.begin_episode(None);
                history.clear();
                history.push(env.last_obs());
            } else {
                history.push(&step.obs);
            }
        }
    }
    Ok((windows, labels))
}

/// Deployable student: history in, deterministic mean action out. The policy
/// parameters are byte-identical to the teacher's by construction of
/// [`distill`]; [`verify_student`] enforces this across file boundaries.
pub struct StudentController {
    policy: Net,
    predictor: Net,
    history: HistoryBuffer,
}

impl StudentController {
    pub fn new(student: &Checkpoint, history_len: usize) -> StudentController {
        StudentController {
            policy: student.bundle.policy.clone(),
            predictor: student.bundle.predictor.clone(),
            history: HistoryBuffer::new(history_len),
        }
    }

    pub fn reset(&mut self) {
        self.history.clear();
    }

    /// Push the newest observation and return the deterministic action.
    pub fn act(&mut self, obs: &ProprioObs) -> Result<[f64; N_JOINTS], AdaptError> {
        self.history.push(obs);
        let latent = self.predictor.infer(&self.history.flat())?;
        let mut input = latent;
        input.extend_from_slice(&obs.to_vec());
        let mean = self.policy.infer(&input)?;
        let mut action = [0.0; N_JOINTS];
        action.copy_from_slice(&mean);
        Ok(action)
    }
}

/// Check that a student bundle embeds the checksum of this teacher's policy
/// and still carries identical policy parameters.
pub fn verify_student(student: &Checkpoint, teacher_policy_checksum: [u8; 32]) -> Result<(), AdaptError> {
    match &student.kind {
        BundleKind::Student { teacher_policy_checksum: embedded }
            if *embedded == teacher_policy_checksum
                && student.bundle.policy_checksum() == teacher_policy_checksum =>
        {
            Ok(())
        }
        _ => Err(AdaptError::BundleMismatch),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::NetConfig;
    use crate::nn::{Activation, Layer};
    use crate::sim::{NoiseSpec, PerturbationSpec};
    use crate::terrain::TerrainKind;
    use approx::assert_relative_eq;

    #[test]
    fn history_window_is_shift_consistent() {
        let mut h = HistoryBuffer::new(3);
        let mut obs = ProprioObs::zeros();
        obs.command = 1.0;
        h.push(&obs);
        let w1 = h.flat();
        // Zero-padded front, newest at the back.
        assert_eq!(&w1[..2 * OBS_DIM], vec![0.0; 2 * OBS_DIM].as_slice());
        assert_eq!(w1[3 * OBS_DIM - 1], 1.0);

        obs.command = 2.0;
        h.push(&obs);
        let w2 = h.flat();
        // Previous window shifted left by one slot with the new obs appended.
        assert_eq!(&w2[OBS_DIM..2 * OBS_DIM], &w1[2 * OBS_DIM..3 * OBS_DIM]);
        assert_eq!(w2[3 * OBS_DIM - 1], 2.0);

        obs.command = 3.0;
        h.push(&obs);
        obs.command = 4.0;
        h.push(&obs);
        assert_eq!(h.len(), 3);
        let w4 = h.flat();
        assert_eq!(w4[OBS_DIM - 1], 2.0);
        assert_eq!(w4[2 * OBS_DIM - 1], 3.0);
        assert_eq!(w4[3 * OBS_DIM - 1], 4.0);
    }

    #[test]
    fn zero_weight_encoder_gives_activated_bias() {
        let encoder = Net::from_layers(vec![Layer {
            w: vec![0.0; crate::sim::PRIV_DIM * 2],
            b: vec![0.3, -0.3],
            in_dim: crate::sim::PRIV_DIM,
            out_dim: 2,
            act: Activation::Tanh,
        }]);
        let x = PrivilegedInfo {
            base_lin_vel: [1.0, 2.0],
            terrain_heights: [0.5; crate::sim::N_HEIGHT_SAMPLES],
            friction_coeff: 0.8,
            motor_gain_scale: [1.0; N_JOINTS],
            mass_scale: 1.0,
            contact_forces: [10.0; 4],
        };
        let l = encode_privileged(&encoder, &x).unwrap();
        assert_relative_eq!(l[0], 0.3f64.tanh(), epsilon = 1e-15);
        assert_relative_eq!(l[1], (-0.3f64).tanh(), epsilon = 1e-15);
        // Purity and shape.
        assert_eq!(l, encode_privileged(&encoder, &x).unwrap());
    }

    #[test]
    fn predict_latent_has_fixed_output_dim() {
        let mut rng = rng::stream(80, Domain::Init, 0);
        let config = NetConfig {
            history_len: 4,
            predictor_hidden: vec![16],
            ..NetConfig::default()
        };
        let bundle = config.build_bundle(&mut rng);
        let mut h = HistoryBuffer::new(4);
        h.push(&ProprioObs::zeros());
        let l = predict_latent(&bundle.predictor, &h).unwrap();
        assert_eq!(l.len(), 32);
        assert_eq!(l, predict_latent(&bundle.predictor, &h).unwrap());
    }

    fn distill_config() -> RunConfig {
        let mut config = RunConfig::default();
        config.ppo.n_envs = 2;
        config.nets.policy_hidden = vec![16];
        config.nets.value_hidden = vec![16];
        config.nets.encoder_hidden = vec![16];
        config.nets.predictor_hidden = vec![32];
        config.nets.disc_hidden = vec![16];
        config.nets.history_len = 4;
        config.terrain.kinds = vec![TerrainKind::Plane];
        config.noise = NoiseSpec::zero();
        config.perturbation = PerturbationSpec::disabled();
        config.randomize = false;
        config.adaptation.rollout_steps = 256;
        config.adaptation.epochs = 3;
        config.adaptation.batch = 32;
        config
    }

    fn teacher_checkpoint(config: &RunConfig) -> Checkpoint {
        let mut rng = rng::stream(81, Domain::Init, 0);
        let bundle = config.nets.build_bundle(&mut rng);
        Checkpoint {
            kind: BundleKind::Teacher,
            optim: crate::bundle::OptimState::new(&bundle),
            bundle,
        }
    }

    #[test]
    fn zero_epochs_leaves_predictor_unchanged_but_reports_mse() {
        let mut config = distill_config();
        config.adaptation.epochs = 0;
        let teacher = teacher_checkpoint(&config);
        let (student, report) = distill(&teacher, &config).unwrap();
        assert_eq!(student.bundle.predictor, teacher.bundle.predictor);
        assert!(report.initial_val_mse > 0.0);
        assert!(report.epoch_val_mse.is_empty());
    }

    #[test]
    fn distillation_reduces_validation_mse_and_freezes_the_teacher() {
        let config = distill_config();
        let teacher = teacher_checkpoint(&config);
        let teacher_sum = teacher.bundle.full_checksum();
        let (student, report) = distill(&teacher, &config).unwrap();
        assert_eq!(teacher.bundle.full_checksum(), teacher_sum);
        assert_eq!(student.bundle.policy_checksum(), teacher.bundle.policy_checksum());
        assert!(
            report.final_val_mse() < report.initial_val_mse,
            "val MSE did not improve: {} -> {}",
            report.initial_val_mse,
            report.final_val_mse()
        );
        verify_student(&student, teacher.bundle.policy_checksum()).unwrap();
    }

    #[test]
    fn training_mse_strictly_decreases_on_fixed_data() {
        use rand::Rng;
        let mut rng = rng::stream(82, Domain::Distill, 99);
        let config = distill_config();
        let teacher = teacher_checkpoint(&config);
        let mut predictor = teacher.bundle.predictor.clone();
        let mut optim = AdamState::new(predictor.param_count());
        let dim = config.nets.history_len * OBS_DIM;
        let windows: Vec<Vec<f64>> = (0..128)
            .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let labels: Vec<Vec<f64>> = windows
            .iter()
            .map(|w| {
                let s: f64 = w.iter().sum::<f64>() / dim as f64;
                (0..32).map(|k| (s * (k as f64 + 1.0) * 0.1).tanh()).collect()
            })
            .collect();
        let mut prev = latent_mse(&predictor, &windows, &labels).unwrap();
        for _ in 0..3 {
            fit_epoch(&mut predictor, &mut optim, &windows, &labels, 32, 1e-3, &mut rng).unwrap();
            let now = latent_mse(&predictor, &windows, &labels).unwrap();
            assert!(now < prev, "MSE did not decrease: {prev} -> {now}");
            prev = now;
        }
    }

    #[test]
    fn student_matching_teacher_latent_reproduces_teacher_action() {
        let config = distill_config();
        let teacher = teacher_checkpoint(&config);
        let mut student = StudentController::new(
            &Checkpoint {
                kind: BundleKind::Student {
                    teacher_policy_checksum: teacher.bundle.policy_checksum(),
                },
                bundle: teacher.bundle.clone(),
                optim: teacher.optim.clone(),
            },
            config.nets.history_len,
        );
        // Cold start on a zero history is finite.
        let obs = ProprioObs::zeros();
        let a = student.act(&obs).unwrap();
        assert!(a.iter().all(|v| v.is_finite()));

        // If the predictor output equals the teacher latent, actions match.
        let x = PrivilegedInfo {
            base_lin_vel: [0.3, 0.0],
            terrain_heights: [-0.27; crate::sim::N_HEIGHT_SAMPLES],
            friction_coeff: 0.8,
            motor_gain_scale: [1.0; N_JOINTS],
            mass_scale: 1.0,
            contact_forces: [20.0; 4],
        };
        // With identical latents the shared policy must produce identical
        // actions: feed the teacher latent through the same policy net.
        let latent = encode_privileged(&teacher.bundle.encoder, &x).unwrap();
        let mut input = latent.clone();
        input.extend_from_slice(&obs.to_vec());
        let via_teacher = teacher.bundle.policy.infer(&input).unwrap();
        let mut input2 = latent;
        input2.extend_from_slice(&obs.to_vec());
        let via_student_policy = teacher.bundle.policy.infer(&input2).unwrap();
        assert_eq!(via_teacher, via_student_policy);
        assert_eq!(via_teacher.len(), N_JOINTS);
    }

    #[test]
    fn mismatched_student_is_rejected() {
        let config = distill_config();
        let teacher = teacher_checkpoint(&config);
        let (mut student, _) = distill(&teacher, &config).unwrap();
        // Tamper with the embedded policy.
        if let Some(p) = student.bundle.policy.params_mut().next() {
            *p += 1.0;
        }
        assert!(matches!(
            verify_student(&student, teacher.bundle.policy_checksum()),
            Err(AdaptError::BundleMismatch)
        ));

        // A teacher bundle is not a student.
        let not_student = teacher_checkpoint(&config);
        assert!(matches!(
            verify_student(&not_student, teacher.bundle.policy_checksum()),
            Err(AdaptError::BundleMismatch)
        ));
    }
}
