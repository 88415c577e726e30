use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Result, Scalar, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment estimates and hyper-parameters of one Adam instance.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step_count: u64,
    pub first_moment: BTreeMap<String, Tensor<T>>,
    pub second_moment: BTreeMap<String, Tensor<T>>,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            step_count: 0,
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
            learning_rate: config.learning_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            epsilon: config.epsilon,
        }
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub state: AdamState<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            state: AdamState::new(config),
        }
    }

    pub fn from_state(state: AdamState<T>) -> Self {
        Self { state }
    }

    /// Applies one update to every parameter that has a gradient.
    ///
    /// All gradients are validated before anything is modified, so a
    /// non-finite gradient leaves both parameters and moments untouched.
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor<T>>,
        grads: &BTreeMap<String, Tensor<T>>,
    ) -> Result<()> {
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| TensorError::UnknownInput(name.clone()))?;
            if p.shape() != g.shape() {
                return Err(TensorError::ShapeMismatch {
                    node: format!("adam:{name}"),
                    expected: format!("{:?}", p.shape()),
                    found: format!("{:?}", g.shape()),
                });
            }
            if !g.all_finite() {
                return Err(TensorError::NonFiniteGradient(name.clone()));
            }
        }
        let s = &mut self.state;
        s.step_count += 1;
        let t = s.step_count as i32;
        let (b1, b2) = (s.beta1, s.beta2);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let lr = s.learning_rate;
        let eps = s.epsilon;
        for (name, g) in grads {
            let p = params.get_mut(name).expect("validated above");
            let m = s
                .first_moment
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let v = s
                .second_moment
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            for (((pv, mv), vv), &gv) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                let gd = gv.as_f64();
                let md = b1 * mv.as_f64() + (1.0 - b1) * gd;
                let vd = b2 * vv.as_f64() + (1.0 - b2) * gd * gd;
                *mv = T::from_f64_lossy(md);
                *vv = T::from_f64_lossy(vd);
                let update = lr * (md / bc1) / ((vd / bc2).sqrt() + eps);
                *pv = T::from_f64_lossy(pv.as_f64() - update);
            }
        }
        Ok(())
    }
}

/// Multiplies the learning rate by `gamma` every `step_size` epochs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLr {
    pub base_lr: f64,
    pub step_size: u64,
    pub gamma: f64,
    pub epoch: u64,
}

impl StepLr {
    pub fn new(base_lr: f64, step_size: u64, gamma: f64) -> Self {
        Self {
            base_lr,
            step_size: step_size.max(1),
            gamma,
            epoch: 0,
        }
    }

    pub fn lr_at(&self, epoch: u64) -> f64 {
        self.base_lr * self.gamma.powi((epoch / self.step_size) as i32)
    }

    /// Advances one epoch and writes the new rate into the optimizer state.
    pub fn step<T: Scalar>(&mut self, state: &mut AdamState<T>) {
        self.epoch += 1;
        state.learning_rate = self.lr_at(self.epoch);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(v: f64) -> BTreeMap<String, Tensor<f64>> {
        BTreeMap::from([("p".to_string(), Tensor::scalar(v))])
    }

    #[test]
    fn zero_gradient_leaves_everything() {
        let mut params = single(0.75);
        let mut adam = Adam::<f64>::new(AdamConfig::default());
        adam.step(&mut params, &single(0.0)).unwrap();
        assert_eq!(params["p"].data(), &[0.75]);
        assert_eq!(adam.state.first_moment["p"].data(), &[0.0]);
        assert_eq!(adam.state.second_moment["p"].data(), &[0.0]);
        assert_eq!(adam.state.step_count, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m_hat = v_hat = 1 after bias correction, so the step is lr / (1 + eps).
        let mut params = single(0.0);
        let mut adam = Adam::<f64>::new(AdamConfig::default());
        adam.step(&mut params, &single(1.0)).unwrap();
        let moved = -params["p"].data()[0];
        assert!((moved - 1e-3 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_is_rejected_untouched() {
        let mut params = single(1.0);
        let mut adam = Adam::<f64>::new(AdamConfig::default());
        let err = adam.step(&mut params, &single(f64::NAN)).unwrap_err();
        assert_eq!(err, TensorError::NonFiniteGradient("p".into()));
        assert_eq!(params["p"].data(), &[1.0]);
        assert_eq!(adam.state.step_count, 0);
    }

    #[test]
    fn step_decay_schedule() {
        let mut sched = StepLr::new(1e-3, 100, 0.95);
        let mut state = AdamState::<f32>::new(AdamConfig::default());
        for _ in 0..200 {
            sched.step(&mut state);
        }
        assert_eq!(state.learning_rate, 1e-3 * 0.95f64.powi(2));
        assert_eq!(sched.lr_at(99), 1e-3);
        assert_eq!(sched.lr_at(100), 1e-3 * 0.95);
    }
}
