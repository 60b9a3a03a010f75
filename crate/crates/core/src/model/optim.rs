use serde::{Deserialize, Serialize};

use super::{Grads, ParamStore, Real};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with decoupled weight decay. Moment buffers are aligned with the
/// parameter store; frozen parameters keep empty buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub step: u64,
    pub(crate) m: Vec<Vec<T>>,
    pub(crate) v: Vec<Vec<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig, params: &ParamStore<T>) -> Self {
        let zeros = |p: &super::Param<T>| if p.trainable { vec![T::zero(); p.data.len()] } else { Vec::new() };
        AdamW {
            config,
            step: 0,
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
        }
    }

    /// One update: `w <- w - lr * wd * w - lr * m_hat / (sqrt(v_hat) + eps)`.
    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &Grads<T>) {
        self.step += 1;
        let c = self.config;
        let b1 = T::lit(c.beta1);
        let b2 = T::lit(c.beta2);
        let one = T::one();
        let bc1 = T::lit(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::lit(1.0 - c.beta2.powi(self.step as i32));
        let lr = T::lit(c.lr);
        let decay = T::lit(c.lr * c.weight_decay);
        let eps = T::lit(c.eps);
        for (i, p) in params.iter_mut().enumerate() {
            let g = &grads.data[i];
            if !p.trainable || g.is_empty() || self.m[i].is_empty() {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.data.len() {
                m[j] = b1 * m[j] + (one - b1) * g[j];
                v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                let w = p.data[j];
                p.data[j] = w - decay * w - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(w: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("w", &[1], vec![w]);
        s
    }

    fn grad_of(store: &ParamStore<f64>, g: f64) -> Grads<f64> {
        let mut grads = store.zero_grads();
        grads.data[0][0] = g;
        grads
    }

    #[test]
    fn zero_gradient_no_decay_is_identity() {
        let mut s = single(1.25);
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &s);
        for _ in 0..5 {
            let g = grad_of(&s, 0.0);
            opt.update(&mut s, &g);
        }
        assert_eq!(s.get(super::super::ParamId(0))[0], 1.25);
    }

    #[test]
    fn decoupled_decay_only() {
        let mut s = single(1.0);
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.01,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &s);
        let g = grad_of(&s, 0.0);
        opt.update(&mut s, &g);
        assert!((s.get(super::super::ParamId(0))[0] - 0.999).abs() < 1e-15);
    }

    #[test]
    fn constant_gradient_step_tends_to_lr() {
        // closed form: m_hat = v_hat = 1 for g = 1 at every step, so |dw| = lr / (1 + eps)
        let lr = 0.01;
        let mut s = single(0.0);
        let cfg = AdamWConfig {
            lr,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &s);
        let mut prev = 0.0;
        for k in 0..200 {
            let g = grad_of(&s, 1.0);
            opt.update(&mut s, &g);
            let w = s.get(super::super::ParamId(0))[0];
            if k > 100 {
                assert!(((prev - w) - lr).abs() < 1e-9, "step {}", prev - w);
            }
            prev = w;
        }
    }
}
