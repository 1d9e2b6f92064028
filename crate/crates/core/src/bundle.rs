//! Parameter bundles and their binary checkpoint format.
//!
//! A [`PolicyBundle`] holds every network in the pipeline: base policy (with
//! its Gaussian head), value net, privileged encoder, history predictor, and
//! discriminator. Checkpoints store parameters plus optimizer state in a
//! little-endian binary layout and round-trip bit-exactly. Student bundles
//! embed the checksum of the teacher policy they were distilled from.

use crate::nn::{Activation, AdamState, GaussianHead, Layer, Net};
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

pub const BUNDLE_SCHEMA_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"LLABBNDL";

#[derive(Debug, Error)]
pub enum BundleError {
    #[error("bundle I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a bundle file (bad magic)")]
    BadMagic,
    #[error("bundle schema version {found} unsupported (expected {expected})")]
    SchemaVersionMismatch { found: u32, expected: u32 },
    #[error("corrupt bundle: {0}")]
    Corrupt(String),
}

/// Whether a bundle is a phase-1 teacher or a distilled student.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BundleKind {
    Teacher,
    /// Student carrying the checksum of the teacher policy it must match.
    Student { teacher_policy_checksum: [u8; 32] },
}

/// All learnable parameter sets of the pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyBundle {
    /// Base policy: (latent, proprio obs) -> action mean.
    pub policy: Net,
    /// State-independent log-std head over the policy mean.
    pub head: GaussianHead,
    /// Value net: (latent, proprio obs) -> scalar.
    pub value: Net,
    /// Privileged encoder: privileged info -> latent.
    pub encoder: Net,
    /// Student predictor: flattened observation history -> latent.
    pub predictor: Net,
    /// Discriminator: transition pair -> score.
    pub disc: Net,
}

impl PolicyBundle {
    /// Checksum over the base policy parameters and log-std head.
    pub fn policy_checksum(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        for p in self.policy.params() {
            hasher.update(p.to_le_bytes());
        }
        for p in &self.head.log_std {
            hasher.update(p.to_le_bytes());
        }
        hasher.finalize().into()
    }

    /// Checksum over every parameter in the bundle.
    pub fn full_checksum(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        for net in [&self.policy, &self.value, &self.encoder, &self.predictor, &self.disc] {
            for p in net.params() {
                hasher.update(p.to_le_bytes());
            }
        }
        for p in &self.head.log_std {
            hasher.update(p.to_le_bytes());
        }
        hasher.finalize().into()
    }
}

/// Adam accumulators for each parameter set in the bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub policy: AdamState,
    pub head: AdamState,
    pub value: AdamState,
    pub encoder: AdamState,
    pub predictor: AdamState,
    pub disc: AdamState,
}

impl OptimState {
    pub fn new(bundle: &PolicyBundle) -> Self {
        Self {
            policy: AdamState::new(bundle.policy.param_count()),
            head: AdamState::new(bundle.head.log_std.len()),
            value: AdamState::new(bundle.value.param_count()),
            encoder: AdamState::new(bundle.encoder.param_count()),
            predictor: AdamState::new(bundle.predictor.param_count()),
            disc: AdamState::new(bundle.disc.param_count()),
        }
    }
}

/// On-disk checkpoint: bundle + optimizer state + kind tag.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: BundleKind,
    pub bundle: PolicyBundle,
    pub optim: OptimState,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), BundleError> {
        let mut w = BinWriter::new();
        w.bytes(MAGIC);
        w.u32(BUNDLE_SCHEMA_VERSION);
        match &self.kind {
            BundleKind::Teacher => w.u8(0),
            BundleKind::Student { teacher_policy_checksum } => {
                w.u8(1);
                w.bytes(teacher_policy_checksum);
            }
        }
        write_bundle(&mut w, &self.bundle);
        write_optim(&mut w, &self.optim);
        let mut file = std::fs::File::create(path)?;
        file.write_all(&w.buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint, BundleError> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        let mut r = BinReader::new(&buf);
        let magic = r.bytes(8)?;
        if magic != MAGIC {
            return Err(BundleError::BadMagic);
        }
        let version = r.u32()?;
        if version != BUNDLE_SCHEMA_VERSION {
            return Err(BundleError::SchemaVersionMismatch {
                found: version,
                expected: BUNDLE_SCHEMA_VERSION,
            });
        }
        let kind = match r.u8()? {
            0 => BundleKind::Teacher,
            1 => {
                let mut sum = [0u8; 32];
                sum.copy_from_slice(r.bytes(32)?);
                BundleKind::Student {
                    teacher_policy_checksum: sum,
                }
            }
            k => return Err(BundleError::Corrupt(format!("unknown bundle kind {k}"))),
        };
        let bundle = read_bundle(&mut r)?;
        let optim = read_optim(&mut r)?;
        if !r.at_end() {
            return Err(BundleError::Corrupt("trailing bytes".into()));
        }
        Ok(Checkpoint { kind, bundle, optim })
    }
}

// ---------------------------------------------------------------------------
// Little-endian binary primitives, shared with the trainer state checkpoint.
// ---------------------------------------------------------------------------

pub(crate) struct BinWriter {
    pub buf: Vec<u8>,
}

impl BinWriter {
    pub fn new() -> Self {
        Self { buf: Vec::new() }
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u128(&mut self, v: u128) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64_slice(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        for x in v {
            self.f64(*x);
        }
    }
}

pub(crate) struct BinReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> BinReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn at_end(&self) -> bool {
        self.pos == self.buf.len()
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8], BundleError> {
        if self.pos + n > self.buf.len() {
            return Err(BundleError::Corrupt("unexpected end of file".into()));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8, BundleError> {
        Ok(self.bytes(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32, BundleError> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, BundleError> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    pub fn u128(&mut self) -> Result<u128, BundleError> {
        Ok(u128::from_le_bytes(self.bytes(16)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64, BundleError> {
        Ok(f64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    pub fn f64_vec(&mut self) -> Result<Vec<f64>, BundleError> {
        let n = self.u64()? as usize;
        if self.pos + 8 * n > self.buf.len() {
            return Err(BundleError::Corrupt("vector length overruns file".into()));
        }
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(self.f64()?);
        }
        Ok(out)
    }
}

fn act_tag(act: Activation) -> u8 {
    match act {
        Activation::Tanh => 0,
        Activation::Softplus => 1,
        Activation::Relu => 2,
        Activation::Identity => 3,
    }
}

fn act_from_tag(tag: u8) -> Result<Activation, BundleError> {
    Ok(match tag {
        0 => Activation::Tanh,
        1 => Activation::Softplus,
        2 => Activation::Relu,
        3 => Activation::Identity,
        t => return Err(BundleError::Corrupt(format!("unknown activation tag {t}"))),
    })
}

pub(crate) fn write_net(w: &mut BinWriter, net: &Net) {
    w.u32(net.layers().len() as u32);
    for layer in net.layers() {
        w.u32(layer.in_dim as u32);
        w.u32(layer.out_dim as u32);
        w.u8(act_tag(layer.act));
        w.f64_slice(&layer.w);
        w.f64_slice(&layer.b);
    }
}

pub(crate) fn read_net(r: &mut BinReader) -> Result<Net, BundleError> {
    let n_layers = r.u32()? as usize;
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let in_dim = r.u32()? as usize;
        let out_dim = r.u32()? as usize;
        let act = act_from_tag(r.u8()?)?;
        let w = r.f64_vec()?;
        let b = r.f64_vec()?;
        if w.len() != in_dim * out_dim || b.len() != out_dim {
            return Err(BundleError::Corrupt("layer shape mismatch".into()));
        }
        layers.push(Layer {
            w,
            b,
            in_dim,
            out_dim,
            act,
        });
    }
    if layers.is_empty() {
        return Err(BundleError::Corrupt("net with no layers".into()));
    }
    Ok(Net::from_layers(layers))
}

pub(crate) fn write_adam(w: &mut BinWriter, a: &AdamState) {
    w.f64_slice(&a.m);
    w.f64_slice(&a.v);
    w.u64(a.t);
    w.f64(a.hyper.beta1);
    w.f64(a.hyper.beta2);
    w.f64(a.hyper.eps);
}

pub(crate) fn read_adam(r: &mut BinReader) -> Result<AdamState, BundleError> {
    let m = r.f64_vec()?;
    let v = r.f64_vec()?;
    if m.len() != v.len() {
        return Err(BundleError::Corrupt("adam moment shape mismatch".into()));
    }
    let t = r.u64()?;
    let mut state = AdamState::new(m.len());
    state.m = m;
    state.v = v;
    state.t = t;
    state.hyper.beta1 = r.f64()?;
    state.hyper.beta2 = r.f64()?;
    state.hyper.eps = r.f64()?;
    Ok(state)
}

pub(crate) fn write_bundle(w: &mut BinWriter, b: &PolicyBundle) {
    write_net(w, &b.policy);
    w.f64_slice(&b.head.log_std);
    write_net(w, &b.value);
    write_net(w, &b.encoder);
    write_net(w, &b.predictor);
    write_net(w, &b.disc);
}

pub(crate) fn read_bundle(r: &mut BinReader) -> Result<PolicyBundle, BundleError> {
    let policy = read_net(r)?;
    let log_std = r.f64_vec()?;
    let value = read_net(r)?;
    let encoder = read_net(r)?;
    let predictor = read_net(r)?;
    let disc = read_net(r)?;
    Ok(PolicyBundle {
        policy,
        head: GaussianHead { log_std },
        value,
        encoder,
        predictor,
        disc,
    })
}

pub(crate) fn write_optim(w: &mut BinWriter, o: &OptimState) {
    write_adam(w, &o.policy);
    write_adam(w, &o.head);
    write_adam(w, &o.value);
    write_adam(w, &o.encoder);
    write_adam(w, &o.predictor);
    write_adam(w, &o.disc);
}

pub(crate) fn read_optim(r: &mut BinReader) -> Result<OptimState, BundleError> {
    Ok(OptimState {
        policy: read_adam(r)?,
        head: read_adam(r)?,
        value: read_adam(r)?,
        encoder: read_adam(r)?,
        predictor: read_adam(r)?,
        disc: read_adam(r)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::NetConfig;
    use crate::rng::{stream, Domain};

    fn sample_checkpoint() -> Checkpoint {
        let mut rng = stream(50, Domain::Init, 0);
        let bundle = NetConfig::default().build_bundle(&mut rng);
        let mut optim = OptimState::new(&bundle);
        optim.policy.t = 7;
        optim.policy.m[3] = 0.25;
        Checkpoint {
            kind: BundleKind::Teacher,
            bundle,
            optim,
        }
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bundle");
        let ck = sample_checkpoint();
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(ck, back);
        assert_eq!(ck.bundle.full_checksum(), back.bundle.full_checksum());
    }

    #[test]
    fn student_kind_round_trips_teacher_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.bundle");
        let mut ck = sample_checkpoint();
        let sum = ck.bundle.policy_checksum();
        ck.kind = BundleKind::Student {
            teacher_policy_checksum: sum,
        };
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(
            back.kind,
            BundleKind::Student {
                teacher_policy_checksum: sum
            }
        );
    }

    #[test]
    fn bad_magic_and_version_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bundle");
        std::fs::write(&path, b"NOTABNDL rest").unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(BundleError::BadMagic)));

        let ck = sample_checkpoint();
        ck.save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[8] = 99;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            Checkpoint::load(&path),
            Err(BundleError::SchemaVersionMismatch { found: 99, .. })
        ));
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bundle");
        sample_checkpoint().save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(BundleError::Corrupt(_))));
    }

    #[test]
    fn checksum_changes_with_any_parameter() {
        let ck = sample_checkpoint();
        let base = ck.bundle.policy_checksum();
        let mut other = ck.bundle.clone();
        if let Some(p) = other.policy.params_mut().next() {
            *p += 1e-12;
        }
        assert_ne!(base, other.policy_checksum());
    }
}
