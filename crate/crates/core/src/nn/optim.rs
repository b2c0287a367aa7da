use serde::{Deserialize, Serialize};

use super::{Gradients, Parameterized};
use crate::error::{Error, Result};

/// Moment estimates, serializable for checkpoints.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub state: AdamState,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state: AdamState::default(),
        }
    }

    pub fn step<P: Parameterized + ?Sized>(&mut self, params: &mut P, grads: &Gradients) -> Result<()> {
        let mut tensors = params.tensors_mut();
        if tensors.len() != grads.0.len() || tensors.iter().zip(&grads.0).any(|(t, g)| t.len() != g.len()) {
            return Err(Error::Dimension("gradient shapes do not match parameters".into()));
        }
        if !grads.is_finite() {
            return Err(Error::NonFinite("gradient".into()));
        }
        let st = &mut self.state;
        if st.m.is_empty() {
            st.m = grads.0.iter().map(|g| vec![0.0; g.len()]).collect();
            st.v = st.m.clone();
        } else if st.m.len() != grads.0.len() || st.m.iter().zip(&grads.0).any(|(m, g)| m.len() != g.len()) {
            return Err(Error::Dimension("optimizer state shape changed".into()));
        }
        st.step += 1;
        let t = st.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (k, param) in tensors.iter_mut().enumerate() {
            let (m, v, g) = (&mut st.m[k], &mut st.v[k], &grads.0[k]);
            for i in 0..param.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                param[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
