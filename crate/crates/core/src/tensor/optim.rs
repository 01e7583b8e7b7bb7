use super::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with one moment slot per registered parameter.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            m: Vec::new(),
            v: Vec::new(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter that carries a gradient, then
    /// clears the gradients. Parameters must be passed in the same order on
    /// every call.
    pub fn step(&mut self, params: &mut [&mut Tensor]) {
        if self.m.len() < params.len() {
            for p in &params[self.m.len()..] {
                self.m.push(vec![0.0; p.numel()]);
                self.v.push(vec![0.0; p.numel()]);
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let Some(grad) = p.grad.take() else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, x) in p.data_mut().iter_mut().enumerate() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * grad[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * grad[j] * grad[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *x -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn minimizes_quadratic() {
        let mut w = Tensor::vector(vec![3.0, -2.0]).with_grad();
        let mut opt = Adam::new(AdamConfig {
            lr: 0.1,
            ..Default::default()
        });
        for _ in 0..300 {
            let grads = {
                let tape = Tape::new();
                let x = tape.leaf(&w);
                let loss = x.dot(x).unwrap();
                let g = tape.backward(loss).unwrap();
                g.get_id(0).unwrap()
            };
            w.accumulate_grad(grads.data());
            opt.step(&mut [&mut w]);
        }
        assert!(w.data().iter().all(|x| x.abs() < 1e-2), "{:?}", w.data());
        assert_eq!(opt.steps(), 300);
    }
}
