use std::collections::HashMap;

use psagan_tensor::Tensor;

use crate::error::{Error, Result};

/// Adam with bias correction. Moments are keyed by parameter name so
/// parameters added by a grow start from zero moments; the step counter is
/// shared.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64, betas: (f64, f64)) -> Self {
        Adam {
            lr,
            beta1: betas.0,
            beta2: betas.1,
            eps: 1e-8,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the accumulated gradients and zeroes them.
    /// A parameter without a gradient counts as a zero gradient.
    pub fn step(&mut self, params: &[(String, Tensor)]) -> Result<()> {
        for (name, p) in params {
            if let Some(g) = p.grad() {
                if let Some(k) = g.iter().position(|v| !v.is_finite()) {
                    return Err(Error::Numeric(format!(
                        "non-finite gradient in `{name}` at element {k}"
                    )));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, p) in params {
            let n = p.numel();
            let g = p.grad().unwrap_or_else(|| vec![0.0; n]);
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            if m.len() != n {
                return Err(Error::Contract(format!(
                    "parameter `{name}` changed size from {} to {n}",
                    m.len()
                )));
            }
            let mut data = p.data_mut();
            for k in 0..n {
                let gk = g[k] as f64;
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                data[k] -= (self.lr * mh / (vh.sqrt() + self.eps)) as f32;
            }
            drop(data);
            p.zero_grad();
        }
        Ok(())
    }
}
