use crate::kernel::ParamStore;
use crate::{Error, Real, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1.5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam moments, one buffer per parameter in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub first: Vec<Vec<Real>>,
    pub second: Vec<Vec<Real>>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<Real>> = store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        Adam {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    /// Applies one update from the gradients held in `store`. Nothing is
    /// changed when any gradient is non-finite.
    pub fn apply(&mut self, store: &mut ParamStore) -> Result<()> {
        if store.len() != self.first.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} parameters, store has {}",
                self.first.len(),
                store.len()
            )));
        }
        for (_, p) in store.iter() {
            if let Some(g) = &p.grad {
                if !g.is_finite() {
                    return Err(Error::NonFinite(format!("gradient of {}", p.name)));
                }
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for ((p, m), v) in store.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            let Some(g) = &p.grad else { continue };
            for (((x, &g), m), v) in p.value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g as f64;
                let mf = beta1 * *m as f64 + (1.0 - beta1) * g;
                let vf = beta2 * *v as f64 + (1.0 - beta2) * g * g;
                *m = mf as Real;
                *v = vf as Real;
                let update = lr * (mf / c1) / ((vf / c2).sqrt() + eps);
                *x -= update as Real;
            }
        }
        Ok(())
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let total: f64 = store
        .iter()
        .filter_map(|(_, p)| p.grad.as_ref())
        .flat_map(|g| g.data().iter())
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt();
    if total > max_norm && total.is_finite() {
        let s = (max_norm / total) as Real;
        for p in store.iter_mut() {
            if let Some(g) = &mut p.grad {
                g.data_mut().iter_mut().for_each(|x| *x *= s);
            }
        }
    }
    total
}
