//! Adam with global-norm gradient clipping.

use crate::error::{Error, Result};
use crate::harness::config::OptimizerConfig;
use crate::numcore::{ParamSet, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub cfg: OptimizerConfig,
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(cfg: OptimizerConfig, params: &ParamSet) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, _, t)| Tensor::zeros(t.rows(), t.cols())).collect();
        Self {
            cfg,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update; returns the gradient norm before clipping.
    pub fn step(&mut self, params: &mut ParamSet, grads: &mut [Tensor]) -> Result<f64> {
        if grads.len() != self.m.len() || params.len() != self.m.len() {
            return Err(Error::Shape("optimizer state does not match the parameters".into()));
        }
        let norm = grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite { term: "gradient".into() });
        }
        let clip = self.cfg.clip_norm;
        if clip > 0.0 && norm > clip {
            let k = clip / norm;
            for g in grads.iter_mut() {
                g.data_mut().iter_mut().for_each(|v| *v *= k);
            }
        }
        self.t += 1;
        let OptimizerConfig {
            lr, beta1, beta2, eps, ..
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (k, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let g = grads[k].data();
            let m = self.m[k].data_mut();
            for (mi, gi) in m.iter_mut().zip(g) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
            }
            let v = self.v[k].data_mut();
            for (vi, gi) in v.iter_mut().zip(g) {
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
            }
            let (m, v) = (self.m[k].data(), self.v[k].data());
            for ((w, mi), vi) in params.get_mut(id).data_mut().iter_mut().zip(m).zip(v) {
                *w -= lr * (mi / bc1) / ((vi / bc2).sqrt() + eps);
            }
        }
        Ok(norm)
    }
}
