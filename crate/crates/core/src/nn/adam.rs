//! Bias-corrected Adam over flat parameter views.

use super::NnError;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment accumulators for one parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub hyper: AdamHyper,
}

impl AdamState {
    pub fn new(param_count: usize) -> Self {
        Self {
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            t: 0,
            hyper: AdamHyper::default(),
        }
    }

    /// One update over matching parameter and gradient views.
    pub fn step<'a, P, G>(&mut self, params: P, grads: G, lr: f64) -> Result<(), NnError>
    where
        P: Iterator<Item = &'a mut f64>,
        G: Iterator<Item = &'a f64>,
    {
        self.t += 1;
        let AdamHyper { beta1, beta2, eps } = self.hyper;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        let mut n = 0;
        for ((p, &g), (m, v)) in params.zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
            n += 1;
        }
        if n != self.m.len() {
            return Err(NnError::DimMismatch {
                expected: self.m.len(),
                got: n,
                context: "adam step",
            });
        }
        Ok(())
    }
}
