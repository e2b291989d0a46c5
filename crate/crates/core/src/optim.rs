use rgin_tensor::Tensor;

use crate::params::Params;

/// Adam with bias correction. Moments are kept per parameter name so they can
/// be checkpointed alongside the weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Params<f32>,
    pub v: Params<f32>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Params::new(),
            v: Params::new(),
        }
    }
}

impl Adam {
    /// One update of `params` from `(name, gradient)` pairs.
    pub fn update(&mut self, params: &mut Params<f32>, grads: &[(String, Tensor<f32>)], lr: f64) {
        self.step += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        let step_size = (lr * c2.sqrt() / c1) as f32;
        let eps = (self.eps * c2.sqrt()) as f32;
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else {
                continue;
            };
            if self.m.get(name).is_none() {
                self.m
                    .insert(name.clone(), Tensor::zeros(g.shape().to_vec()));
                self.v
                    .insert(name.clone(), Tensor::zeros(g.shape().to_vec()));
            }
            let m = self.m.get_mut(name).unwrap().data_mut();
            let v = self.v.get_mut(name).unwrap().data_mut();
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *w -= step_size * *mi / (vi.sqrt() + eps);
            }
        }
    }
}

/// Learning rate halved every `halve_every` epochs (epochs count from 0).
pub fn lr_at(base: f64, epoch: usize, halve_every: usize) -> f64 {
    base * 0.5f64.powi((epoch / halve_every) as i32)
}
