//! Minimal fully-connected network substrate.
//!
//! Dense layers with per-layer activations, exact reverse-mode gradients,
//! a second-order pass for gradient penalties (see [`penalty`]), Adam, and a
//! diagonal Gaussian policy head. Forward and backward passes are pure;
//! all parameter mutation happens in optimizer steps owned by the caller.

mod adam;
mod gaussian;
mod penalty;

pub use adam::{AdamHyper, AdamState};
pub use gaussian::GaussianHead;
pub use penalty::{penalty_grads, penalty_value, GpMode};

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimMismatch {
        expected: usize,
        got: usize,
        context: &'static str,
    },
    #[error("gradient penalty requires smooth activations, found {0:?}")]
    NonSmoothActivation(Activation),
}

/// Elementwise activation applied after a layer's affine map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Activation {
    Tanh,
    Softplus,
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    pub fn eval(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Softplus => {
                // Numerically stable log(1 + e^z).
                if z > 30.0 {
                    z
                } else if z < -30.0 {
                    z.exp()
                } else {
                    z.exp().ln_1p()
                }
            }
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    /// First derivative at `z`.
    #[inline]
    pub fn d1(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Softplus => sigmoid(z),
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }

    /// Second derivative at `z`.
    #[inline]
    pub fn d2(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = z.tanh();
                -2.0 * t * (1.0 - t * t)
            }
            Activation::Softplus => {
                let s = sigmoid(z);
                s * (1.0 - s)
            }
            Activation::Relu => 0.0,
            Activation::Identity => 0.0,
        }
    }

    /// True when the activation is twice continuously differentiable.
    pub fn is_smooth(self) -> bool {
        !matches!(self, Activation::Relu)
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// One dense layer: `a = act(W x + b)`, weights row-major `(out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub in_dim: usize,
    pub out_dim: usize,
    pub act: Activation,
}

/// Fully-connected network.
#[derive(Debug, Clone, PartialEq)]
pub struct Net {
    layers: Vec<Layer>,
}

/// Pre-activations and activations captured by [`Net::forward`].
///
/// `acts[0]` is the input; `acts[l + 1] = act(zs[l])`.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub zs: Vec<Vec<f64>>,
    pub acts: Vec<Vec<f64>>,
}

/// Per-layer parameter gradients, same shapes as the [`Net`].
#[derive(Debug, Clone)]
pub struct NetGrads {
    pub dw: Vec<Vec<f64>>,
    pub db: Vec<Vec<f64>>,
}

impl NetGrads {
    pub fn zeros_like(net: &Net) -> Self {
        Self {
            dw: net.layers.iter().map(|l| vec![0.0; l.w.len()]).collect(),
            db: net.layers.iter().map(|l| vec![0.0; l.b.len()]).collect(),
        }
    }

    /// `self += other * scale`.
    pub fn add_scaled(&mut self, other: &NetGrads, scale: f64) {
        for (d, o) in self.dw.iter_mut().zip(&other.dw) {
            for (a, b) in d.iter_mut().zip(o) {
                *a += b * scale;
            }
        }
        for (d, o) in self.db.iter_mut().zip(&other.db) {
            for (a, b) in d.iter_mut().zip(o) {
                *a += b * scale;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for d in self.dw.iter_mut().chain(self.db.iter_mut()) {
            for v in d.iter_mut() {
                *v *= s;
            }
        }
    }

    /// Flat view in the same order as [`Net::params`].
    pub fn flat(&self) -> impl Iterator<Item = &f64> {
        self.dw
            .iter()
            .zip(self.db.iter())
            .flat_map(|(w, b)| w.iter().chain(b.iter()))
    }

    pub fn is_finite(&self) -> bool {
        self.flat().all(|v| v.is_finite())
    }
}

impl Net {
    /// Build a net with orthogonal weight init and zero biases.
    ///
    /// `dims` = [in, hidden..., out]; `acts.len()` must equal the layer
    /// count. Hidden layers use gain 1, the output layer uses `out_gain`
    /// (0.01 shrinks the initial policy output without touching features).
    pub fn orthogonal<R: Rng>(dims: &[usize], acts: &[Activation], out_gain: f64, rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "need at least one layer");
        assert_eq!(acts.len(), dims.len() - 1, "one activation per layer");
        let n_layers = dims.len() - 1;
        let layers = (0..n_layers)
            .map(|l| {
                let gain = if l == n_layers - 1 { out_gain } else { 1.0 };
                Layer {
                    w: orthogonal_matrix(dims[l + 1], dims[l], gain, rng),
                    b: vec![0.0; dims[l + 1]],
                    in_dim: dims[l],
                    out_dim: dims[l + 1],
                    act: acts[l],
                }
            })
            .collect();
        Self { layers }
    }

    /// Build from explicit layers (tests, deserialisation).
    pub fn from_layers(layers: Vec<Layer>) -> Self {
        for pair in layers.windows(2) {
            assert_eq!(pair[0].out_dim, pair[1].in_dim, "incompatible layer dims");
        }
        Self { layers }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.in_dim)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Immutable flat parameter view (layer order: weights then bias).
    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.w.iter().chain(l.b.iter()))
    }

    /// Mutable flat parameter view, same order as [`Net::params`].
    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.w.iter_mut().chain(l.b.iter_mut()))
    }

    /// Affine + activation composition; the cache feeds [`Net::backward`].
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, ForwardCache), NnError> {
        if x.len() != self.in_dim() {
            return Err(NnError::DimMismatch {
                expected: self.in_dim(),
                got: x.len(),
                context: "forward input",
            });
        }
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        let mut zs = Vec::with_capacity(self.layers.len());
        acts.push(x.to_vec());
        for layer in &self.layers {
            let mut z = vec![0.0; layer.out_dim];
            matvec(&layer.w, layer.out_dim, layer.in_dim, acts.last().unwrap(), &mut z);
            for (zi, bi) in z.iter_mut().zip(&layer.b) {
                *zi += bi;
            }
            let a = z.iter().map(|&v| layer.act.eval(v)).collect();
            zs.push(z);
            acts.push(a);
        }
        let y = acts.last().unwrap().clone();
        Ok((y, ForwardCache { zs, acts }))
    }

    /// Forward pass without keeping the cache.
    pub fn infer(&self, x: &[f64]) -> Result<Vec<f64>, NnError> {
        if x.len() != self.in_dim() {
            return Err(NnError::DimMismatch {
                expected: self.in_dim(),
                got: x.len(),
                context: "infer input",
            });
        }
        let mut cur = x.to_vec();
        let mut next = Vec::new();
        for layer in &self.layers {
            next.clear();
            next.resize(layer.out_dim, 0.0);
            matvec(&layer.w, layer.out_dim, layer.in_dim, &cur, &mut next);
            for (v, b) in next.iter_mut().zip(&layer.b) {
                *v = layer.act.eval(*v + b);
            }
            std::mem::swap(&mut cur, &mut next);
        }
        Ok(cur)
    }

    /// Exact reverse-mode gradients from upstream `dl_dy`.
    ///
    /// Returns parameter gradients and the gradient with respect to the
    /// input.
    pub fn backward(&self, cache: &ForwardCache, dl_dy: &[f64]) -> Result<(NetGrads, Vec<f64>), NnError> {
        if dl_dy.len() != self.out_dim() {
            return Err(NnError::DimMismatch {
                expected: self.out_dim(),
                got: dl_dy.len(),
                context: "backward upstream",
            });
        }
        let mut grads = NetGrads::zeros_like(self);
        let mut delta = dl_dy.to_vec();
        self.backward_into(cache, &mut delta, &mut grads, 1.0)?;
        Ok((grads, delta))
    }

    /// Accumulating backward pass: adds `scale *` gradients into `grads`
    /// and replaces `delta` (upstream dL/dy on entry) with dL/dx.
    pub fn backward_into(
        &self,
        cache: &ForwardCache,
        delta: &mut Vec<f64>,
        grads: &mut NetGrads,
        scale: f64,
    ) -> Result<(), NnError> {
        if cache.acts.len() != self.layers.len() + 1 {
            return Err(NnError::DimMismatch {
                expected: self.layers.len() + 1,
                got: cache.acts.len(),
                context: "backward cache",
            });
        }
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let z = &cache.zs[l];
            let a_in = &cache.acts[l];
            // delta currently holds dL/da_{l+1}; convert to dL/dz_{l+1}.
            for (d, &zi) in delta.iter_mut().zip(z) {
                *d *= layer.act.d1(zi);
            }
            let dw = &mut grads.dw[l];
            let db = &mut grads.db[l];
            for r in 0..layer.out_dim {
                let dr = delta[r] * scale;
                db[r] += dr;
                let row = &mut dw[r * layer.in_dim..(r + 1) * layer.in_dim];
                for (w, &ai) in row.iter_mut().zip(a_in) {
                    *w += dr * ai;
                }
            }
            // dL/da_l = W^T delta.
            let mut dx = vec![0.0; layer.in_dim];
            for r in 0..layer.out_dim {
                let dr = delta[r];
                let row = &layer.w[r * layer.in_dim..(r + 1) * layer.in_dim];
                for (x, &wi) in dx.iter_mut().zip(row) {
                    *x += dr * wi;
                }
            }
            *delta = dx;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.params().all(|p| p.is_finite())
    }
}

/// `out = W x`, `w` row-major `(rows, cols)`.
#[inline]
pub(crate) fn matvec(w: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(x.len(), cols);
    debug_assert_eq!(out.len(), rows);
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        let mut acc = [0.0f64; 4];
        let mut chunks = row.chunks_exact(4).zip(x.chunks_exact(4));
        for (rw, rx) in &mut chunks {
            acc[0] += rw[0] * rx[0];
            acc[1] += rw[1] * rx[1];
            acc[2] += rw[2] * rx[2];
            acc[3] += rw[3] * rx[3];
        }
        let rem = cols - cols % 4;
        let mut tail = 0.0;
        for i in rem..cols {
            tail += row[i] * x[i];
        }
        out[r] = (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail;
    }
}

/// Random matrix with orthonormal rows or columns, scaled by `gain`.
fn orthogonal_matrix<R: Rng>(rows: usize, cols: usize, gain: f64, rng: &mut R) -> Vec<f64> {
    let (n, m) = (rows.max(cols), rows.min(cols));
    // n x m Gaussian, orthonormalise the m columns by modified Gram-Schmidt.
    let mut a: Vec<f64> = (0..n * m).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    for j in 0..m {
        for k in 0..j {
            let mut dot = 0.0;
            for i in 0..n {
                dot += a[i * m + j] * a[i * m + k];
            }
            for i in 0..n {
                a[i * m + j] -= dot * a[i * m + k];
            }
        }
        let norm = (0..n).map(|i| a[i * m + j] * a[i * m + j]).sum::<f64>().sqrt();
        let inv = if norm > 1e-12 { 1.0 / norm } else { 0.0 };
        for i in 0..n {
            a[i * m + j] *= inv;
        }
    }
    let mut w = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            let v = if rows >= cols { a[r * m + c] } else { a[c * m + r] };
            w[r * cols + c] = gain * v;
        }
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Domain};
    use approx::assert_relative_eq;

    fn identity_layer(dim: usize) -> Layer {
        let mut w = vec![0.0; dim * dim];
        for i in 0..dim {
            w[i * dim + i] = 1.0;
        }
        Layer {
            w,
            b: vec![0.0; dim],
            in_dim: dim,
            out_dim: dim,
            act: Activation::Identity,
        }
    }

    #[test]
    fn identity_single_layer_passes_input_through() {
        let net = Net::from_layers(vec![identity_layer(3)]);
        let (y, _) = net.forward(&[1.5, -2.0, 0.25]).unwrap();
        assert_eq!(y, vec![1.5, -2.0, 0.25]);
    }

    #[test]
    fn zero_weights_output_is_activated_bias() {
        let layer = Layer {
            w: vec![0.0; 6],
            b: vec![0.7, -0.7],
            in_dim: 3,
            out_dim: 2,
            act: Activation::Tanh,
        };
        let net = Net::from_layers(vec![layer]);
        let (y, _) = net.forward(&[9.0, 9.0, 9.0]).unwrap();
        assert_relative_eq!(y[0], 0.7f64.tanh());
        assert_relative_eq!(y[1], (-0.7f64).tanh());
    }

    #[test]
    fn forward_is_pure() {
        let mut rng = stream(1, Domain::Init, 0);
        let net = Net::orthogonal(&[4, 8, 2], &[Activation::Tanh, Activation::Identity], 1.0, &mut rng);
        let x = [0.3, -0.1, 0.9, 0.0];
        let (y1, _) = net.forward(&x).unwrap();
        let (y2, _) = net.forward(&x).unwrap();
        assert_eq!(y1, y2);
        assert_eq!(y1, net.infer(&x).unwrap());
    }

    #[test]
    fn linear_net_input_grad_is_w_transpose() {
        let layer = Layer {
            w: vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
            b: vec![0.0; 2],
            in_dim: 3,
            out_dim: 2,
            act: Activation::Identity,
        };
        let net = Net::from_layers(vec![layer]);
        let (_, cache) = net.forward(&[1.0, 1.0, 1.0]).unwrap();
        let (_, dx) = net.backward(&cache, &[1.0, 0.0]).unwrap();
        assert_eq!(dx, vec![1.0, 2.0, 3.0]);
        let (_, cache) = net.forward(&[1.0, 1.0, 1.0]).unwrap();
        let (_, dx) = net.backward(&cache, &[0.0, 1.0]).unwrap();
        assert_eq!(dx, vec![4.0, 5.0, 6.0]);
    }

    #[test]
    fn zero_upstream_grad_gives_zero_grads() {
        let mut rng = stream(2, Domain::Init, 0);
        let net = Net::orthogonal(&[3, 5, 2], &[Activation::Softplus, Activation::Identity], 1.0, &mut rng);
        let (_, cache) = net.forward(&[0.1, 0.2, 0.3]).unwrap();
        let (grads, dx) = net.backward(&cache, &[0.0, 0.0]).unwrap();
        assert!(grads.flat().all(|&g| g == 0.0));
        assert!(dx.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn dim_mismatch_is_reported() {
        let net = Net::from_layers(vec![identity_layer(3)]);
        let err = net.forward(&[1.0]).unwrap_err();
        assert!(matches!(err, NnError::DimMismatch { expected: 3, got: 1, .. }));
    }

    #[test]
    fn orthogonal_init_has_orthonormal_rows() {
        let mut rng = stream(3, Domain::Init, 0);
        let w = orthogonal_matrix(4, 16, 1.0, &mut rng);
        for r1 in 0..4 {
            for r2 in 0..4 {
                let dot: f64 = (0..16).map(|c| w[r1 * 16 + c] * w[r2 * 16 + c]).sum();
                let expect = if r1 == r2 { 1.0 } else { 0.0 };
                assert_relative_eq!(dot, expect, epsilon = 1e-10);
            }
        }
    }
}
