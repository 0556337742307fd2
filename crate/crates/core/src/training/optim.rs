use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::tensor::{ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// Adam with decoupled weight decay: `p ← p·(1 − lr·λ) − lr·m̂/(√v̂ + ε)`.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    m: Vec<Tensor<f32>>,
    v: Vec<Tensor<f32>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore<f32>) -> Self {
        let zeros = || store.entries().iter().map(|e| Tensor::zeros(e.value.shape().to_vec())).collect::<Vec<_>>();
        Self { config, step: 0, m: zeros(), v: zeros() }
    }

    /// Parameters without a gradient are treated as having a zero gradient.
    pub fn update(&mut self, store: &mut ParamStore<f32>, grads: &[Option<Tensor<f32>>], lr: f64) {
        assert_eq!(grads.len(), self.m.len(), "gradient list does not match the optimizer state");
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let decay = (1.0 - lr * c.weight_decay) as f32;
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = store.value_mut(id);
            for j in 0..p.len() {
                let g = grads[i].as_ref().map_or(0.0, |g| g.data()[j]) as f64;
                let mj = c.beta1 * m.data()[j] as f64 + (1.0 - c.beta1) * g;
                let vj = c.beta2 * v.data()[j] as f64 + (1.0 - c.beta2) * g * g;
                m.data_mut()[j] = mj as f32;
                v.data_mut()[j] = vj as f32;
                let step = lr * (mj / bc1) / ((vj / bc2).sqrt() + c.eps);
                let pj = &mut p.data_mut()[j];
                *pj = *pj * decay - step as f32;
            }
        }
    }

    /// Moments keyed `adam.m.<param>` / `adam.v.<param>`.
    pub fn state_tensors(&self, store: &ParamStore<f32>) -> Vec<(String, Tensor<f32>)> {
        let mut out = Vec::with_capacity(2 * self.m.len());
        for (i, e) in store.entries().iter().enumerate() {
            out.push((format!("adam.m.{}", e.name), self.m[i].clone()));
            out.push((format!("adam.v.{}", e.name), self.v[i].clone()));
        }
        out
    }

    pub fn from_state(
        config: AdamWConfig,
        step: u64,
        store: &ParamStore<f32>,
        state: &[(String, Tensor<f32>)],
    ) -> Result<Self> {
        let find = |key: String, shape: &[usize]| -> Result<Tensor<f32>> {
            let t = state
                .iter()
                .find(|(n, _)| *n == key)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| crate::error::Error::Contract(format!("optimizer state {key} missing")))?;
            ensure!(t.shape() == shape, "optimizer state {key} has shape {:?}, expected {shape:?}", t.shape());
            Ok(t)
        };
        let mut m = Vec::new();
        let mut v = Vec::new();
        for e in store.entries() {
            m.push(find(format!("adam.m.{}", e.name), e.value.shape())?);
            v.push(find(format!("adam.v.{}", e.name), e.value.shape())?);
        }
        Ok(Self { config, step, m, v })
    }
}

/// Global L2 norm over all gradients.
pub fn global_norm(grads: &[Option<Tensor<f32>>]) -> f64 {
    grads.iter().flatten().flat_map(|g| g.data()).map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Option<Tensor<f32>>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm.is_finite() {
        let s = (max_norm / norm) as f32;
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store() -> ParamStore<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::new();
        s.add_uniform("a", &[3, 4], 2, &mut rng);
        s.add_uniform("b", &[5], 2, &mut rng);
        s
    }

    #[test]
    fn zero_gradient_shrinks_by_the_decay_factor() {
        let mut s = store();
        let before: Vec<Tensor<f32>> = s.entries().iter().map(|e| (*e.value).clone()).collect();
        let mut opt = AdamW::new(AdamWConfig::default(), &s);
        let lr = 0.05;
        opt.update(&mut s, &[None, Some(Tensor::zeros(vec![5]))], lr);
        let factor = (1.0 - lr * 0.01) as f32;
        for (b, e) in before.iter().zip(s.entries()) {
            for (x, y) in b.data().iter().zip(e.value.data()) {
                assert_eq!(*y, x * factor);
            }
        }
    }

    #[test]
    fn zero_learning_rate_is_the_identity() {
        let mut s = store();
        let before: Vec<Tensor<f32>> = s.entries().iter().map(|e| (*e.value).clone()).collect();
        let mut opt = AdamW::new(AdamWConfig::default(), &s);
        opt.update(&mut s, &[Some(Tensor::ones(vec![3, 4])), Some(Tensor::ones(vec![5]))], 0.0);
        for (b, e) in before.iter().zip(s.entries()) {
            assert_eq!(b, e.value.as_ref());
        }
    }

    #[test]
    fn first_step_moves_by_lr_against_the_gradient_sign() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::new(vec![2], vec![1.0f32, 1.0]));
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() }, &s);
        opt.update(&mut s, &[Some(Tensor::new(vec![2], vec![3.0, -0.5]))], 0.1);
        let w = s.get(s.id("w").unwrap());
        assert_abs_diff_eq!(w.data()[0], 0.9, epsilon = 1e-6);
        assert_abs_diff_eq!(w.data()[1], 1.1, epsilon = 1e-6);
    }

    #[test]
    fn clipping_caps_the_global_norm() {
        let mut g = vec![Some(Tensor::new(vec![2], vec![3.0f32, 4.0])), None];
        let n = clip_grad_norm(&mut g, 1.0);
        assert_abs_diff_eq!(n, 5.0, epsilon = 1e-12);
        assert_abs_diff_eq!(global_norm(&g), 1.0, epsilon = 1e-6);
        let mut small = vec![Some(Tensor::new(vec![1], vec![0.5f32]))];
        clip_grad_norm(&mut small, 1.0);
        assert_eq!(small[0].as_ref().unwrap().data()[0], 0.5);
    }

    #[test]
    fn state_roundtrip() {
        let mut s = store();
        let mut opt = AdamW::new(AdamWConfig::default(), &s);
        opt.update(&mut s, &[Some(Tensor::ones(vec![3, 4])), None], 0.01);
        let st = opt.state_tensors(&s);
        let back = AdamW::from_state(opt.config, opt.step, &s, &st).unwrap();
        assert_eq!(back.m, opt.m);
        assert_eq!(back.v, opt.v);
        assert!(AdamW::from_state(opt.config, 1, &s, &st[1..]).is_err());
    }
}
