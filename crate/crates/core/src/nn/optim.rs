use serde::{Deserialize, Serialize};

use super::Dense;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment estimates and the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<Dense>,
    v: Vec<Dense>,
    t: u64,
}

impl AdamState {
    pub(crate) fn new(layers: &[Dense]) -> Self {
        let zeros = || layers.iter().map(|l| Dense::zeros(l.w.nrows(), l.w.ncols())).collect();
        AdamState { m: zeros(), v: zeros(), t: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub(crate) fn step(&mut self, params: &mut [Dense], grads: &[Dense], h: &AdamHyper) {
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - h.beta1.powi(t);
        let c2 = 1.0 - h.beta2.powi(t);
        let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
            *m = h.beta1 * *m + (1.0 - h.beta1) * g;
            *v = h.beta2 * *v + (1.0 - h.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= h.lr * m_hat / (v_hat.sqrt() + h.eps);
        };
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            ndarray::Zip::from(&mut p.w)
                .and(&g.w)
                .and(&mut m.w)
                .and(&mut v.w)
                .for_each(|p, &g, m, v| update(p, g, m, v));
            ndarray::Zip::from(&mut p.b)
                .and(&g.b)
                .and(&mut m.b)
                .and(&mut v.b)
                .for_each(|p, &g, m, v| update(p, g, m, v));
        }
    }
}
