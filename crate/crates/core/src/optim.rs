//! AdamW with decoupled weight decay and constant learning rate.

use crate::params::ParameterStore;
use crate::tensor::Tensor;
use std::collections::BTreeMap;

#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update to every trainable parameter that received a gradient.
    pub fn step(&mut self, store: &mut ParameterStore, grads: &BTreeMap<String, Tensor>) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for (name, grad) in grads {
            let trainable = match store.get(name) {
                Some(p) => p.trainable,
                None => false,
            };
            if !trainable {
                continue;
            }
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(grad.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(grad.shape()));
            let value = store.tensor_mut(name);
            for i in 0..grad.numel() {
                let g = grad.data()[i];
                let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * g;
                let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * g * g;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                let p = value.data()[i];
                value.data_mut()[i] =
                    p - self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * p);
            }
        }
    }

    /// Serialize moment tensors and step count into `store` under `optim.*`
    /// so training can resume exactly.
    pub fn save_state(&self, store: &mut ParameterStore) {
        store.remove_prefix("optim.");
        for (name, t) in &self.m {
            store.insert(format!("optim.m.{name}"), t.clone(), false);
        }
        for (name, t) in &self.v {
            store.insert(format!("optim.v.{name}"), t.clone(), false);
        }
        store.insert(
            "optim.step",
            Tensor::new(&[1], vec![self.step as f64]).unwrap(),
            false,
        );
    }

    pub fn load_state(&mut self, store: &ParameterStore) {
        self.m.clear();
        self.v.clear();
        for (name, p) in store.iter() {
            if let Some(rest) = name.strip_prefix("optim.m.") {
                self.m.insert(rest.to_string(), p.value.clone());
            } else if let Some(rest) = name.strip_prefix("optim.v.") {
                self.v.insert(rest.to_string(), p.value.clone());
            }
        }
        if store.contains("optim.step") {
            self.step = store.tensor("optim.step").data()[0] as u64;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_params_untouched() {
        let mut store = ParameterStore::new();
        store.insert("a", Tensor::full(&[2], 1.0), true);
        store.insert("b", Tensor::full(&[2], 1.0), false);
        let mut opt = AdamW::new(0.1, 0.0);
        let mut grads = BTreeMap::new();
        grads.insert("a".to_string(), Tensor::full(&[2], 1.0));
        grads.insert("b".to_string(), Tensor::full(&[2], 1.0));
        opt.step(&mut store, &grads);
        assert!(store.tensor("a").data()[0] < 1.0);
        assert_eq!(store.tensor("b").data()[0], 1.0);
    }

    #[test]
    fn state_round_trip_resumes_identically() {
        let mut store = ParameterStore::new();
        store.insert("w", Tensor::full(&[3], 0.5), true);
        let mut opt = AdamW::new(0.05, 0.01);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::new(&[3], vec![0.3, -0.2, 0.1]).unwrap());
        opt.step(&mut store, &grads);

        // snapshot, take one more step
        let mut snap_store = store.clone();
        opt.save_state(&mut snap_store);
        opt.step(&mut store, &grads);

        // resume from snapshot and repeat the step
        let mut resumed = AdamW::new(0.05, 0.01);
        resumed.load_state(&snap_store);
        snap_store.remove_prefix("optim.");
        resumed.step(&mut snap_store, &grads);
        assert!(store.tensor("w").max_abs_diff(snap_store.tensor("w")) == 0.0);
    }
}
