//! AdamW with decoupled weight decay.

use super::params::{Mat, ModelParams, TAU_FLOOR};
use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Matrices that receive weight decay: everything except biases,
/// layer-norm parameters and the temperature.
pub fn decays(name: &str) -> bool {
    !(super::params::is_constant_init(name))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub m: ModelParams,
    pub v: ModelParams,
    /// Number of updates applied so far.
    pub t: u64,
}

impl AdamW {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    /// One update. Rejects non-finite gradients before touching any state.
    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams, lr: f64, weight_decay: f64) -> Result<()> {
        if let Some((name, _)) = grads
            .named()
            .into_iter()
            .find(|(_, g)| g.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::NonFinite(format!("gradient of {name} is not finite")));
        }
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        let grads = grads.named();
        let ms = self.m.named_mut();
        let vs = self.v.named_mut();
        for ((((name, p), (_, g)), (_, m)), (_, v)) in params.named_mut().into_iter().zip(grads).zip(ms).zip(vs) {
            let wd = if decays(&name) { weight_decay } else { 0.0 };
            update(p, g, m, v, lr, wd, bc1, bc2);
        }
        let floor = TAU_FLOOR.ln();
        if params.log_tau[[0, 0]] < floor {
            params.log_tau[[0, 0]] = floor;
        }
        Ok(())
    }
}

#[allow(clippy::too_many_arguments)]
fn update(p: &mut Mat, g: &Mat, m: &mut Mat, v: &mut Mat, lr: f64, wd: f64, bc1: f64, bc2: f64) {
    ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
        *m = BETA1 * *m + (1.0 - BETA1) * g;
        *v = BETA2 * *v + (1.0 - BETA2) * g * g;
        let mhat = *m / bc1;
        let vhat = *v / bc2;
        *p -= lr * (mhat / (vhat.sqrt() + ADAM_EPS) + wd * *p);
    });
}
