//! Adam with decoupled weight decay.

use segkit_tensor::{Element, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SegError};
use crate::params::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(SegError::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Moments for every parameter of a store, in store order.
#[derive(Clone, Debug)]
pub struct OptimState<T> {
    pub config: AdamWConfig,
    /// Completed steps.
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Element> OptimState<T> {
    pub fn new(config: AdamWConfig, params: &ParamStore<T>) -> Self {
        let zeros = || params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect::<Vec<_>>();
        Self {
            config,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update at learning rate `lr`. `grads[i]` belongs to the i-th
    /// parameter; parameters without a gradient are left untouched.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: f64) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(SegError::Config(format!(
                "optimizer tracks {} parameters, store has {}, got {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let c = &self.config;
        let t = self.t as i32;
        let bc1 = T::lit(1.0 - c.beta1.powi(t));
        let bc2 = T::lit(1.0 - c.beta2.powi(t));
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one, eps, lr_t, decay) = (T::one(), T::lit(c.eps), T::lit(lr), T::lit(lr * c.weight_decay));
        let ids: Vec<_> = params.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let Some(g) = &grads[i] else {
                log::warn!("no gradient for {}; skipping its update", params.name(id));
                continue;
            };
            let p = params.get(id);
            if g.shape() != p.shape() {
                return Err(SegError::Config(format!(
                    "gradient for {} has shape {:?}, expected {:?}",
                    params.name(id),
                    g.shape(),
                    p.shape()
                )));
            }
            let mut m = self.m[i].to_vec();
            let mut v = self.v[i].to_vec();
            let mut out = p.to_vec();
            for (((pv, mv), vv), &gv) in out.iter_mut().zip(&mut m).zip(&mut v).zip(g.data()) {
                *mv = b1 * *mv + (one - b1) * gv;
                *vv = b2 * *vv + (one - b2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *pv = *pv - lr_t * (m_hat / (v_hat.sqrt() + eps)) - decay * *pv;
            }
            let shape = p.shape().to_vec();
            self.m[i] = Tensor::from_vec_unchecked(&shape, m)?;
            self.v[i] = Tensor::from_vec_unchecked(&shape, v)?;
            params.set(id, Tensor::from_vec_unchecked(&shape, out)?)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(p: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("p", Tensor::full(&[1], p)).unwrap();
        s
    }

    #[test]
    fn hand_example() {
        let mut s = single(1.0);
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.01,
            ..Default::default()
        };
        let mut opt = OptimState::new(cfg, &s);
        opt.step(&mut s, &[Some(Tensor::full(&[1], 1.0))], 0.1).unwrap();
        let p = s.get(s.id("p").unwrap()).data()[0];
        assert!((p - 0.899).abs() < 1e-7);
        assert_eq!(opt.t, 1);
    }

    #[test]
    fn zero_grad_without_decay_is_identity() {
        let mut s = single(0.37);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = OptimState::new(cfg, &s);
        opt.step(&mut s, &[Some(Tensor::zeros(&[1]))], 1e-3).unwrap();
        assert_eq!(s.get(s.id("p").unwrap()).data()[0], 0.37);
    }

    #[test]
    fn zero_grad_with_decay_shrinks() {
        let mut s = single(2.0);
        let mut opt = OptimState::new(AdamWConfig::default(), &s);
        opt.step(&mut s, &[Some(Tensor::zeros(&[1]))], 0.5).unwrap();
        let expected = 2.0 * (1.0 - 0.5 * 0.01);
        assert!((s.get(s.id("p").unwrap()).data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn missing_gradient_is_skipped() {
        let mut s = single(1.5);
        let mut opt = OptimState::new(AdamWConfig::default(), &s);
        opt.step(&mut s, &[None], 0.1).unwrap();
        assert_eq!(s.get(s.id("p").unwrap()).data()[0], 1.5);
        assert_eq!(opt.t, 1);
        assert!(opt.step(&mut s, &[], 0.1).is_err());
    }
}
