//! Adam with bias correction and a fixed learning rate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step: u64,
    /// First and second moments, indexed like the parameter store.
    pub first: Vec<Option<Tensor<T>>>,
    pub second: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, params: usize) -> Self {
        Self {
            config,
            step: 0,
            first: vec![None; params],
            second: vec![None; params],
        }
    }

    /// Apply one update. Frozen parameters are skipped even if a gradient is
    /// supplied for them.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)]) -> Result<()> {
        if self.first.len() != store.len() {
            return Err(Error::Config("optimizer state does not match parameter store".into()));
        }
        for (id, g) in grads {
            if let Some(i) = g.first_non_finite() {
                return Err(Error::NonFinite {
                    context: format!("gradient of `{}`", store.name(*id)),
                    detail: format!("element {i}"),
                });
            }
        }
        self.step += 1;
        let c = self.config;
        let b1 = T::from_f64(c.beta1);
        let b2 = T::from_f64(c.beta2);
        let one = T::one();
        let bc1 = T::from_f64(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::from_f64(1.0 - c.beta2.powi(self.step as i32));
        let lr = T::from_f64(c.lr);
        let eps = T::from_f64(c.eps);
        for (id, g) in grads {
            if !store.is_trainable(*id) {
                continue;
            }
            let i = id.index();
            let m = self.first[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.second[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let p = store.get_mut(*id);
            for (((pv, mv), vv), gv) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *mv = b1 * *mv + (one - b1) * *gv;
                *vv = b2 * *vv + (one - b2) * *gv * *gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_hyperparameters_are_default() {
        let c = AdamConfig::default();
        assert_eq!((c.beta1, c.beta2, c.lr), (0.9, 0.999, 1e-4));
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::full(&[2], 1.0), true).unwrap();
        let frozen = store.add("f", Tensor::full(&[1], 1.0), false).unwrap();
        let mut opt = Adam::new(AdamConfig { lr: 0.1, ..Default::default() }, store.len());
        let g = Tensor::from_vec(&[2], vec![3.0, -0.5]).unwrap();
        opt.step(&mut store, &[(id, g), (frozen, Tensor::full(&[1], 1.0))]).unwrap();
        assert!((store.get(id).data()[0] - 0.9).abs() < 1e-6);
        assert!((store.get(id).data()[1] - 1.1).abs() < 1e-6);
        assert_eq!(store.get(frozen).data()[0], 1.0);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::full(&[1], 5.0), true).unwrap();
        let mut opt = Adam::new(AdamConfig { lr: 0.05, ..Default::default() }, store.len());
        for _ in 0..2000 {
            let w = store.get(id).data()[0];
            opt.step(&mut store, &[(id, Tensor::full(&[1], 2.0 * (w - 2.0)))]).unwrap();
        }
        assert!((store.get(id).data()[0] - 2.0).abs() < 1e-2);
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut store = ParamStore::<f32>::new();
        let id = store.add("w", Tensor::full(&[1], 1.0), true).unwrap();
        let mut opt = Adam::new(AdamConfig::default(), 1);
        assert!(opt.step(&mut store, &[(id, Tensor::full(&[1], f32::NAN))]).is_err());
        assert_eq!(opt.step, 0);
    }
}
