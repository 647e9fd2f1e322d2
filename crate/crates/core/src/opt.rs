//! Adaptive-moment gradient descent with optional global-norm clipping.

use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(5.0),
        }
    }
}

pub struct Adam<S: Scalar> {
    pub cfg: AdamConfig,
    pub t: u64,
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(cfg: AdamConfig, shapes: &[&[usize]]) -> Self {
        Adam {
            cfg,
            t: 0,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    /// One update step. `params` and `grads` must align with the shapes the
    /// optimizer was created with.
    pub fn step(&mut self, params: &mut [&mut Tensor<S>], grads: &[Tensor<S>]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        let scale = match self.cfg.clip_norm {
            Some(max_norm) => {
                let total: f64 = grads.iter().map(|g| g.sq_norm()).sum();
                let norm = total.sqrt();
                if norm > max_norm {
                    max_norm / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.t += 1;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bias1 = 1.0 - b1.powi(self.t as i32);
        let bias2 = 1.0 - b2.powi(self.t as i32);
        let lr = self.cfg.lr;
        let eps = self.cfg.eps;
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            debug_assert_eq!(p.shape(), g.shape());
            for i in 0..g.numel() {
                let gi = g.data()[i].to_f64() * scale;
                let mi = b1 * m.data()[i].to_f64() + (1.0 - b1) * gi;
                let vi = b2 * v.data()[i].to_f64() + (1.0 - b2) * gi * gi;
                m.data_mut()[i] = S::from_f64(mi);
                v.data_mut()[i] = S::from_f64(vi);
                let mhat = mi / bias1;
                let vhat = vi / bias2;
                let upd = lr * mhat / (vhat.sqrt() + eps);
                p.data_mut()[i] = S::from_f64(p.data()[i].to_f64() - upd);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_quadratic() {
        let mut p = Tensor::<f64>::from_vec(&[2], vec![3.0, -2.0]);
        let mut adam = Adam::new(
            AdamConfig {
                lr: 0.05,
                ..AdamConfig::default()
            },
            &[&[2]],
        );
        for _ in 0..500 {
            let g = Tensor::from_vec(&[2], vec![2.0 * p.data()[0], 2.0 * p.data()[1]]);
            adam.step(&mut [&mut p], &[g]);
        }
        assert!(p.data()[0].abs() < 1e-3);
        assert!(p.data()[1].abs() < 1e-3);
    }

    #[test]
    fn clipping_caps_update_magnitude() {
        let mut p = Tensor::<f64>::zeros(&[1]);
        let mut adam = Adam::new(
            AdamConfig {
                lr: 0.1,
                clip_norm: Some(1.0),
                ..AdamConfig::default()
            },
            &[&[1]],
        );
        let g = Tensor::from_vec(&[1], vec![1.0e6]);
        adam.step(&mut [&mut p], &[g]);
        // First Adam step magnitude is at most lr regardless of clip, but the
        // clipped gradient must equal 1.0 in the moment buffers.
        assert!((adam.m[0].data()[0] - 0.1).abs() < 1e-9);
    }
}
