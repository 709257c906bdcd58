//! Adam optimizer with per-group learning rates.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore, N_GROUPS};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// First/second-moment accumulators for one [`ParamStore`].
#[derive(Clone, Debug)]
pub struct AdamState<S: Scalar> {
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
    step: u64,
    beta1: S,
    beta2: S,
    eps: S,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(store: &ParamStore<S>) -> Self {
        let m = store
            .ids()
            .map(|id| Tensor::zeros(store.get(id).shape()))
            .collect::<Vec<_>>();
        let v = m.clone();
        AdamState {
            m,
            v,
            step: 0,
            beta1: S::from_f64_lossy(0.9),
            beta2: S::from_f64_lossy(0.999),
            eps: S::from_f64_lossy(1e-8),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One Adam update with bias correction. `lrs` holds the learning rate
    /// per parameter group; frozen parameters are skipped.
    pub fn step(
        &mut self,
        store: &mut ParamStore<S>,
        grads: &[(ParamId, Tensor<S>)],
        lrs: &[S; N_GROUPS],
    ) -> Result<()> {
        for &lr in lrs {
            if lr <= S::zero() {
                return Err(Error::config(format!("learning rate {} <= 0", lr)));
            }
        }
        self.step += 1;
        let t = S::from_u64(self.step).unwrap();
        let bc1 = S::one() - self.beta1.powf(t);
        let bc2 = S::one() - self.beta2.powf(t);
        for (id, grad) in grads {
            if store.is_frozen(*id) {
                continue;
            }
            if grad.shape() != store.get(*id).shape() {
                return Err(Error::shape(format!(
                    "adam: grad shape {:?} vs param shape {:?} for {}",
                    grad.shape(),
                    store.get(*id).shape(),
                    store.name(*id)
                )));
            }
            let lr = lrs[store.group(*id)];
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            let mut p = store.get(*id).clone();
            for i in 0..p.numel() {
                let g = grad.data()[i];
                let mi = self.beta1 * m.data()[i] + (S::one() - self.beta1) * g;
                let vi = self.beta2 * v.data()[i] + (S::one() - self.beta2) * g * g;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                p.data_mut()[i] = p.data()[i] - lr * mhat / (vhat.sqrt() + self.eps);
            }
            store.set(*id, p);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{GROUP_BASE, GROUP_ROUTER};

    fn store_with(values: &[f64]) -> (ParamStore<f64>, ParamId) {
        let mut store = ParamStore::new();
        let id = store.add(
            "p",
            Tensor::new(vec![values.len()], values.to_vec()).unwrap(),
            GROUP_BASE,
        );
        (store, id)
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let (mut store, id) = store_with(&[1.0, -2.0]);
        let mut adam = AdamState::new(&store);
        let grads = vec![(id, Tensor::zeros(&[2]))];
        adam.step(&mut store, &grads, &[0.1, 0.1, 0.1]).unwrap();
        assert_eq!(store.get(id).data(), &[1.0, -2.0]);
    }

    #[test]
    fn single_step_matches_hand_computed_adam() {
        // g=1, lr=0.1: with bias correction, mhat=1, vhat=1, so the
        // parameter moves by lr / (1 + eps) ~ 0.1.
        let (mut store, id) = store_with(&[0.0]);
        let mut adam = AdamState::new(&store);
        let grads = vec![(id, Tensor::ones(&[1]))];
        adam.step(&mut store, &grads, &[0.1, 0.1, 0.1]).unwrap();
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((store.get(id).data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn per_group_learning_rates_differ_by_factor_100() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let a = store.add("a", Tensor::zeros(&[1]), GROUP_BASE);
        let b = store.add("b", Tensor::zeros(&[1]), GROUP_ROUTER);
        let mut adam = AdamState::new(&store);
        let grads = vec![(a, Tensor::ones(&[1])), (b, Tensor::ones(&[1]))];
        adam.step(&mut store, &grads, &[1e-5, 1e-3, 1e-2]).unwrap();
        let da = store.get(a).data()[0].abs();
        let db = store.get(b).data()[0].abs();
        assert!((db / da - 100.0).abs() < 1e-6);
    }

    #[test]
    fn non_positive_lr_rejected() {
        let (mut store, id) = store_with(&[0.0]);
        let mut adam = AdamState::new(&store);
        let grads = vec![(id, Tensor::ones(&[1]))];
        assert!(adam.step(&mut store, &grads, &[0.0, 0.1, 0.1]).is_err());
    }

    #[test]
    fn frozen_params_never_move() {
        let (mut store, id) = store_with(&[5.0]);
        store.set_frozen(id, true);
        let mut adam = AdamState::new(&store);
        for _ in 0..10 {
            let grads = vec![(id, Tensor::ones(&[1]))];
            adam.step(&mut store, &grads, &[0.1, 0.1, 0.1]).unwrap();
        }
        assert_eq!(store.get(id).data(), &[5.0]);
    }
}
