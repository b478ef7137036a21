use indexmap::IndexMap;

use super::graph::GradMap;
use super::tensor::Tensor;
use super::{Error, ParamStore};

/// Bias-corrected Adam with per-parameter first and second moments.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: IndexMap<String, Tensor>,
    v: IndexMap<String, Tensor>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }

    /// One update over every parameter named in `grads`. Moments are created
    /// lazily at zero; the step count increases once per call.
    pub fn step(&mut self, params: &mut ParamStore, grads: &GradMap) -> Result<(), Error> {
        for (name, g) in grads {
            if g.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NanGradient(name.clone()));
            }
            let p = params
                .get(name)
                .ok_or_else(|| Error::UnknownParam(name.clone()))?;
            if p.shape != g.shape {
                return Err(Error::ShapeMismatch {
                    node: name.clone(),
                    detail: format!("param {:?} vs grad {:?}", p.shape, g.shape),
                });
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let p = params.get_mut(name).unwrap();
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(&g.shape));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(&g.shape));
            for i in 0..g.data.len() {
                let gi = g.data[i];
                m.data[i] = self.beta1 * m.data[i] + (1.0 - self.beta1) * gi;
                v.data[i] = self.beta2 * v.data[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = m.data[i] / bc1;
                let v_hat = v.data[i] / bc2;
                p.data[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
