//! Second-order pass for gradient penalties on scalar-output nets.
//!
//! Two penalty flavours are supported for a discriminator `D`:
//!
//! * [`GpMode::Input`] — `P = ||∇_x D(x)||²`, the penalty on the gradient
//!   with respect to the *input*. This is the default.
//! * [`GpMode::Params`] — `P = ||∇_φ D(x)||²`, the penalty on the gradient
//!   with respect to the *parameters*.
//!
//! Both need `∇_φ P`, i.e. a derivative of a quantity that itself contains a
//! gradient. The first reverse sweep produces the chain
//! `s_L = 1`, `d_{l+1} = s_{l+1} ⊙ σ'(z_{l+1})`, `s_l = Wᵀ_l d_{l+1}` so that
//! `∇_x D = s_0` and `∇_{W_l} D = d_{l+1} a_lᵀ`, `∇_{b_l} D = d_{l+1}`.
//! The penalty is then a closed-form function of `{s, d, a}` and the second
//! sweep propagates adjoints through both the reverse chain and the forward
//! chain, picking up the `σ''` terms. Smooth activations are required.

use super::{Net, NetGrads, NnError};

/// Which gradient the penalty norm is taken over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum GpMode {
    /// `||∇_x D||²` — penalise the input gradient.
    Input,
    /// `||∇_φ D||²` — penalise the parameter gradient.
    Params,
}

/// Compute the penalty value and its exact parameter gradients at `x`.
///
/// The net must have a single scalar output and smooth activations.
pub fn penalty_grads(net: &Net, x: &[f64], mode: GpMode) -> Result<(f64, NetGrads), NnError> {
    if net.out_dim() != 1 {
        return Err(NnError::DimMismatch {
            expected: 1,
            got: net.out_dim(),
            context: "penalty output dim",
        });
    }
    if let Some(layer) = net.layers().iter().find(|l| !l.act.is_smooth()) {
        return Err(NnError::NonSmoothActivation(layer.act));
    }
    let (_, cache) = net.forward(x)?;
    let n_layers = net.layers().len();

    // First reverse sweep: build s_l and d_{l+1}.
    // s[l] has dim of layer l's input; d[l] pairs with layer l's output.
    let mut s: Vec<Vec<f64>> = vec![Vec::new(); n_layers + 1];
    let mut d: Vec<Vec<f64>> = vec![Vec::new(); n_layers];
    s[n_layers] = vec![1.0];
    for (l, layer) in net.layers().iter().enumerate().rev() {
        let z = &cache.zs[l];
        let dl: Vec<f64> = s[l + 1]
            .iter()
            .zip(z)
            .map(|(&si, &zi)| si * layer.act.d1(zi))
            .collect();
        let mut sl = vec![0.0; layer.in_dim];
        for r in 0..layer.out_dim {
            let dr = dl[r];
            let row = &layer.w[r * layer.in_dim..(r + 1) * layer.in_dim];
            for (si, &wi) in sl.iter_mut().zip(row) {
                *si += dr * wi;
            }
        }
        d[l] = dl;
        s[l] = sl;
    }

    // Penalty value and direct adjoint seeds.
    let mut s_bar: Vec<Vec<f64>> = (0..=n_layers).map(|l| vec![0.0; s[l].len()]).collect();
    let mut d_bar_direct: Vec<Vec<f64>> = (0..n_layers).map(|l| vec![0.0; d[l].len()]).collect();
    let mut a_bar: Vec<Vec<f64>> = cache.acts.iter().map(|a| vec![0.0; a.len()]).collect();

    let penalty = match mode {
        GpMode::Input => {
            let p: f64 = s[0].iter().map(|v| v * v).sum();
            for (sb, &si) in s_bar[0].iter_mut().zip(&s[0]) {
                *sb = 2.0 * si;
            }
            p
        }
        GpMode::Params => {
            // P = Σ_l ||d_{l+1}||² (1 + ||a_l||²): weight grads are rank-one
            // outer products d a^T plus the bias grads d.
            let mut p = 0.0;
            for l in 0..n_layers {
                let d_sq: f64 = d[l].iter().map(|v| v * v).sum();
                let a_sq: f64 = cache.acts[l].iter().map(|v| v * v).sum();
                p += d_sq * (1.0 + a_sq);
                for (db, &di) in d_bar_direct[l].iter_mut().zip(&d[l]) {
                    *db = 2.0 * di * (1.0 + a_sq);
                }
                for (ab, &ai) in a_bar[l].iter_mut().zip(&cache.acts[l]) {
                    *ab += 2.0 * d_sq * ai;
                }
            }
            p
        }
    };

    let mut grads = NetGrads::zeros_like(net);
    // z_bar accumulates the σ'' contributions from the reverse chain before
    // the final forward-chain sweep folds in the σ' ones.
    let mut z_bar: Vec<Vec<f64>> = cache.zs.iter().map(|z| vec![0.0; z.len()]).collect();

    // Adjoint of the reverse chain, walking it in reverse (l = 0 upward).
    for (l, layer) in net.layers().iter().enumerate() {
        // s_l = W_l^T d_{l+1}.
        let sb = &s_bar[l];
        let dw = &mut grads.dw[l];
        let mut d_bar = std::mem::take(&mut d_bar_direct[l]);
        for r in 0..layer.out_dim {
            let row_w = &layer.w[r * layer.in_dim..(r + 1) * layer.in_dim];
            let row_dw = &mut dw[r * layer.in_dim..(r + 1) * layer.in_dim];
            let dr = d[l][r];
            let mut acc = 0.0;
            for c in 0..layer.in_dim {
                row_dw[c] += dr * sb[c];
                acc += row_w[c] * sb[c];
            }
            d_bar[r] += acc;
        }
        // d_{l+1} = s_{l+1} ⊙ σ'(z_{l+1}).
        let z = &cache.zs[l];
        for r in 0..layer.out_dim {
            let d1 = layer.act.d1(z[r]);
            let d2 = layer.act.d2(z[r]);
            s_bar[l + 1][r] += d_bar[r] * d1;
            z_bar[l][r] += d_bar[r] * s[l + 1][r] * d2;
        }
    }

    // Adjoint of the forward chain, top down.
    for (l, layer) in net.layers().iter().enumerate().rev() {
        // a_{l+1} = σ(z_{l+1}) adds σ'-weighted a_bar into z_bar.
        let z = &cache.zs[l];
        for r in 0..layer.out_dim {
            z_bar[l][r] += a_bar[l + 1][r] * layer.act.d1(z[r]);
        }
        // z_{l+1} = W_l a_l + b_l.
        let a_in = &cache.acts[l];
        let dw = &mut grads.dw[l];
        let db = &mut grads.db[l];
        for r in 0..layer.out_dim {
            let zb = z_bar[l][r];
            db[r] += zb;
            let row_dw = &mut dw[r * layer.in_dim..(r + 1) * layer.in_dim];
            let row_w = &layer.w[r * layer.in_dim..(r + 1) * layer.in_dim];
            for c in 0..layer.in_dim {
                row_dw[c] += zb * a_in[c];
                a_bar[l][c] += zb * row_w[c];
            }
        }
    }

    Ok((penalty, grads))
}

/// Value-only evaluation of the penalty (used by finite-difference checks).
pub fn penalty_value(net: &Net, x: &[f64], mode: GpMode) -> Result<f64, NnError> {
    if net.out_dim() != 1 {
        return Err(NnError::DimMismatch {
            expected: 1,
            got: net.out_dim(),
            context: "penalty output dim",
        });
    }
    let (_, cache) = net.forward(x)?;
    match mode {
        GpMode::Input => {
            let (_, dx) = net.backward(&cache, &[1.0])?;
            Ok(dx.iter().map(|v| v * v).sum())
        }
        GpMode::Params => {
            let (grads, _) = net.backward(&cache, &[1.0])?;
            Ok(grads.flat().map(|v| v * v).sum())
        }
    }
}
