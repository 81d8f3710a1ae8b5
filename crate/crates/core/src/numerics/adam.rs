//! Adam with bias-corrected moment estimates.

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    /// Zeroed moments shaped like every parameter in `store`.
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        AdamState { config, step: 0, first: zeros.clone(), second: zeros }
    }

    /// Rebuilds a state from saved parts; moment lengths must match `store`.
    pub fn from_parts(config: AdamConfig, step: u64, first: Vec<Vec<f64>>, second: Vec<Vec<f64>>, store: &ParamStore) -> Result<Self> {
        let shapes_ok = first.len() == store.len()
            && second.len() == store.len()
            && store.iter().zip(first.iter().zip(&second)).all(|((_, t), (m, v))| m.len() == t.len() && v.len() == t.len());
        if !shapes_ok {
            return Err(Error::Checkpoint("optimizer moments do not match parameter shapes".into()));
        }
        Ok(AdamState { config, step, first, second })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.second
    }

    /// Applies one update from the gradients stored on each parameter, then
    /// clears them. Fails without mutating anything if any gradient is missing.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if store.len() != self.first.len() {
            return Err(Error::Contract("optimizer state belongs to a different parameter set".into()));
        }
        if let Some((name, _)) = store.iter().find(|(_, t)| t.grad().is_none()) {
            return Err(Error::Contract(format!("parameter {name} has no gradient")));
        }
        self.step += 1;
        let AdamConfig { learning_rate, beta1, beta2, epsilon } = self.config;
        let t = self.step as f64;
        let c1 = 1.0 - beta1.powf(t);
        let c2 = 1.0 - beta2.powf(t);
        for (i, (_, tensor)) in store.iter_mut().enumerate() {
            let grad = tensor.grad().expect("checked above").to_vec();
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (j, (w, g)) in tensor.data_mut().iter_mut().zip(grad).enumerate() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                *w -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
            tensor.clear_grad();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn scalar_store(w: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::new([1], vec![w]).unwrap());
        s
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let mut s = scalar_store(0.7);
        let mut adam = AdamState::new(AdamConfig::default(), &s);
        s.iter_mut().for_each(|(_, t)| t.accumulate_grad(&[0.0]).unwrap());
        adam.step(&mut s).unwrap();
        assert_eq!(s.iter().next().unwrap().1.data(), &[0.7]);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut s = scalar_store(1.0);
        let mut adam = AdamState::new(AdamConfig::default(), &s);
        s.iter_mut().for_each(|(_, t)| t.accumulate_grad(&[1.0]).unwrap());
        adam.step(&mut s).unwrap();
        let w = s.iter().next().unwrap().1.data()[0];
        assert!((1.0 - w - 1e-3).abs() < 1e-10, "{w}");
        assert!(s.iter().next().unwrap().1.grad().is_none(), "grads cleared");
    }

    #[test]
    fn missing_gradient_names_parameter() {
        let mut s = scalar_store(1.0);
        let mut adam = AdamState::new(AdamConfig::default(), &s);
        let err = adam.step(&mut s).unwrap_err();
        assert!(matches!(&err, Error::Contract(m) if m.contains(" w ")), "{err}");
        assert_eq!(adam.step_count(), 0);
    }

    /// Textbook Adam written out for a single scalar, used as the reference run.
    fn reference_run(steps: usize, lr: f64) -> Vec<f64> {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut w, mut m, mut v) = (0.0f64, 0.0, 0.0);
        let mut out = vec![];
        for t in 1..=steps {
            let g = 2.0 * (w - 2.0);
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32));
            let vh = v / (1.0 - b2.powi(t as i32));
            w -= lr * mh / (vh.sqrt() + eps);
            out.push(w);
        }
        out
    }

    #[test]
    fn quadratic_descent_matches_reference_and_approaches_minimum() {
        let lr = 0.1;
        let expected = reference_run(10, lr);
        let mut s = scalar_store(0.0);
        let mut adam = AdamState::new(AdamConfig { learning_rate: lr, ..Default::default() }, &s);
        let mut prev_dist = 2.0;
        for (i, want) in expected.iter().enumerate() {
            let w = s.iter().next().unwrap().1.data()[0];
            s.iter_mut().for_each(|(_, t)| t.accumulate_grad(&[2.0 * (w - 2.0)]).unwrap());
            adam.step(&mut s).unwrap();
            let w = s.iter().next().unwrap().1.data()[0];
            assert!((w - want).abs() < 1e-12, "step {i}: {w} vs {want}");
            let dist = (w - 2.0).abs();
            assert!(dist < prev_dist, "distance must shrink at step {i}");
            prev_dist = dist;
        }
    }
}
