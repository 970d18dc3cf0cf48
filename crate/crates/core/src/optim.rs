//! Adaptive-moment optimizer over a [`ParamStore`]. Constant learning rate,
//! no weight decay.

use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::tensor::{Gradients, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid optimizer settings {:?}", self)));
        }
        Ok(())
    }
}

pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, store: &ParamStore) -> Result<Self> {
        cfg.validate()?;
        let zeros: Vec<Tensor> = store.iter().map(|(_, t)| Tensor::zeros(t.shape().to_vec())).collect();
        Ok(Self {
            cfg,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update. Parameters without a gradient are left as is
    /// but their moments still decay.
    pub fn step(&mut self, store: &mut ParamStore, bound: &Bound, grads: &mut Gradients) -> Result<()> {
        if bound.vars().len() != store.len() {
            return Err(Error::Contract("bound handles do not match the store".into()));
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let grad = grads.take(bound.vars()[k]);
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            let p = store.get_mut(id).data_mut();
            match grad {
                Some(g) => {
                    if g.len() != p.len() {
                        return Err(Error::Contract(format!("gradient of parameter {} has the wrong size", k)));
                    }
                    for i in 0..p.len() {
                        let gi = g.data()[i];
                        m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                        v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                        p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                    }
                }
                None => {
                    m.iter_mut().for_each(|x| *x *= beta1);
                    v.iter_mut().for_each(|x| *x *= beta2);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;

    #[test]
    fn first_step_moves_by_lr_against_the_gradient_sign() {
        let mut store = ParamStore::new();
        store.add("p", Tensor::new([3], vec![1.0, -2.0, 0.5]).unwrap()).unwrap();
        let mut opt = Adam::new(
            AdamConfig {
                lr: 0.1,
                ..AdamConfig::default()
            },
            &store,
        )
        .unwrap();
        let g = Graph::new();
        let b = store.bind(&g);
        let w = g.input(Tensor::new([3], vec![2.0, -3.0, 0.0]).unwrap());
        let loss = g.sum(g.mul(b.vars()[0], w).unwrap());
        let mut grads = g.backward(loss).unwrap();
        opt.step(&mut store, &b, &mut grads).unwrap();
        let p = store.get(store.find("p").unwrap()).data().to_vec();
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] - (-1.9)).abs() < 1e-6);
        assert_eq!(p[2], 0.5);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut store = ParamStore::new();
        store.add("p", Tensor::new([2], vec![3.0, -4.0]).unwrap()).unwrap();
        let mut opt = Adam::new(
            AdamConfig {
                lr: 0.05,
                ..AdamConfig::default()
            },
            &store,
        )
        .unwrap();
        for _ in 0..500 {
            let g = Graph::new();
            let b = store.bind(&g);
            let x = b.vars()[0];
            let loss = g.sum(g.mul(x, x).unwrap());
            let mut grads = g.backward(loss).unwrap();
            opt.step(&mut store, &b, &mut grads).unwrap();
        }
        assert!(store.get(store.find("p").unwrap()).data().iter().all(|v| v.abs() < 1e-2));
        assert_eq!(opt.steps(), 500);
    }

    #[test]
    fn bad_settings_rejected() {
        let store = ParamStore::new();
        for cfg in [
            AdamConfig { lr: 0.0, ..AdamConfig::default() },
            AdamConfig { beta1: 1.0, ..AdamConfig::default() },
        ] {
            assert!(matches!(Adam::new(cfg, &store), Err(Error::Config(_))));
        }
    }
}
