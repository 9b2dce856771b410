use std::collections::BTreeMap;

use ndarray::{Array2, Zip};

use super::tape::{Grads, ParamSet};
use crate::error::{Error, Result};

/// Warm-up length used for a run of `total_steps` (half a percent).
pub fn warmup_steps(total_steps: u64) -> u64 {
    (total_steps as f64 * 0.005).round() as u64
}

/// Rectified Adam with a linear learning-rate warm-up followed by a constant
/// rate.
#[derive(Debug, Clone)]
pub struct RAdam {
    pub lr: f64,
    pub warmup_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: BTreeMap<String, Array2<f64>>,
    second: BTreeMap<String, Array2<f64>>,
}

impl RAdam {
    pub fn new(lr: f64, warmup_steps: u64) -> Self {
        Self {
            lr,
            warmup_steps,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Learning rate in effect at 1-based step `t`.
    pub fn lr_at(&self, t: u64) -> f64 {
        if self.warmup_steps == 0 {
            self.lr
        } else {
            self.lr * (t as f64 / self.warmup_steps as f64).min(1.0)
        }
    }

    /// Length of the approximated simple moving average at step `t`, and its
    /// limit.
    pub fn rho(&self, t: u64) -> (f64, f64) {
        let rho_inf = 2.0 / (1.0 - self.beta2) - 1.0;
        let b2t = self.beta2.powi(t as i32);
        (rho_inf - 2.0 * t as f64 * b2t / (1.0 - b2t), rho_inf)
    }

    /// Variance rectification factor, or `None` while it is undefined.
    pub fn rectification(&self, t: u64) -> Option<f64> {
        let (rho, rho_inf) = self.rho(t);
        (rho > 4.0).then(|| {
            (((rho - 4.0) * (rho - 2.0) * rho_inf) / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho)).sqrt()
        })
    }

    /// Applies one update. Parameters without a gradient are left alone. A
    /// non-finite gradient aborts before anything is modified.
    pub fn step(&mut self, params: &mut ParamSet, grads: &Grads) -> Result<()> {
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| Error::Shape(format!("gradient for unknown parameter {name}")))?;
            if p.dim() != g.dim() {
                return Err(Error::Shape(format!(
                    "{name}: parameter {:?} vs gradient {:?}",
                    p.dim(),
                    g.dim()
                )));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(name.clone()));
            }
        }
        self.step += 1;
        let t = self.step;
        let lr = self.lr_at(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let bias1 = 1.0 - b1.powi(t as i32);
        let bias2 = 1.0 - b2.powi(t as i32);
        let rect = self.rectification(t);
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(g.raw_dim()));
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(g.raw_dim()));
            Zip::from(&mut *m)
                .and(&mut *v)
                .and(g)
                .for_each(|m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                });
            match rect {
                Some(r) => Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                    let m_hat = m / bias1;
                    let v_hat = (v / bias2).sqrt();
                    *p -= lr * r * m_hat / (v_hat + eps);
                }),
                None => Zip::from(p).and(&*m).for_each(|p, &m| {
                    *p -= lr * m / bias1;
                }),
            }
        }
        Ok(())
    }
}
