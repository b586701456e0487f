//! SGD / Adam / AdamW updates and the cosine learning-rate schedule.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
    AdamW,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(Self::Sgd),
            "adam" => Ok(Self::Adam),
            "adamw" => Ok(Self::AdamW),
            other => Err(Error::InvalidArgument(format!("unknown optimizer `{other}`"))),
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Sgd => "sgd",
            Self::Adam => "adam",
            Self::AdamW => "adamw",
        })
    }
}

/// Hyper-parameters shared by the three update rules.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    /// SGD momentum, or Adam's first-moment decay.
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerConfig {
    pub fn new(kind: OptimizerKind, lr: f64, weight_decay: f64) -> Self {
        let beta1 = match kind {
            OptimizerKind::Sgd => 0.0,
            _ => 0.9,
        };
        Self {
            kind,
            lr,
            weight_decay,
            beta1,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn with_momentum(mut self, beta1: f64) -> Self {
        self.beta1 = beta1;
        self
    }
}

/// Optimizer state: moment buffers aligned with the parameter list.
#[derive(Clone, Debug)]
pub struct OptimizerState<T> {
    pub config: OptimizerConfig,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
    step: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(config: OptimizerConfig, params: &[&Tensor<T>]) -> Result<Self> {
        if !(config.lr > 0.0) || !config.lr.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {}",
                config.lr
            )));
        }
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        Ok(Self {
            config,
            first: zeros(),
            second: match config.kind {
                OptimizerKind::Sgd => Vec::new(),
                _ => zeros(),
            },
            step: 0,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update at the configured learning rate.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[&Tensor<T>]) -> Result<()> {
        let lr = self.config.lr;
        self.step_with_lr(params, grads, lr)
    }

    /// Applies one update with an explicit learning rate (for schedules).
    /// A zero rate is allowed and leaves the parameters unchanged apart from
    /// advancing the moment estimates.
    pub fn step_with_lr(&mut self, params: &mut [&mut Tensor<T>], grads: &[&Tensor<T>], lr: f64) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.first.len() {
            return Err(Error::Shape {
                op: "optimizer_step",
                detail: format!(
                    "{} params, {} grads, {} state buffers",
                    params.len(),
                    grads.len(),
                    self.first.len()
                ),
            });
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.first[i].shape() {
                return Err(Error::Shape {
                    op: "optimizer_step",
                    detail: format!(
                        "param {i}: {:?} vs grad {:?} vs state {:?}",
                        p.shape(),
                        g.shape(),
                        self.first[i].shape()
                    ),
                });
            }
        }
        if !(lr >= 0.0) || !lr.is_finite() {
            return Err(Error::InvalidArgument(format!("invalid learning rate {lr}")));
        }
        self.step += 1;
        let c = self.config;
        let (lr_t, wd, b1, b2, eps) = (T::of(lr), T::of(c.weight_decay), T::of(c.beta1), T::of(c.beta2), T::of(c.eps));
        let one = T::one();
        match c.kind {
            OptimizerKind::Sgd => {
                for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let m = self.first[i].data_mut();
                    for ((pv, &gv), mv) in p.data_mut().iter_mut().zip(g.data()).zip(m) {
                        let d = gv + wd * *pv;
                        *mv = b1 * *mv + d;
                        *pv -= lr_t * *mv;
                    }
                }
            }
            OptimizerKind::Adam | OptimizerKind::AdamW => {
                let decoupled = c.kind == OptimizerKind::AdamW;
                let bc1 = one - T::of(c.beta1.powi(self.step as i32));
                let bc2 = one - T::of(c.beta2.powi(self.step as i32));
                for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let m = self.first[i].data_mut();
                    let v = self.second[i].data_mut();
                    for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                        let d = if decoupled { gv } else { gv + wd * *pv };
                        *mv = b1 * *mv + (one - b1) * d;
                        *vv = b2 * *vv + (one - b2) * d * d;
                        let mhat = *mv / bc1;
                        let vhat = *vv / bc2;
                        let mut upd = mhat / (vhat.sqrt() + eps);
                        if decoupled {
                            upd += wd * *pv;
                        }
                        *pv -= lr_t * upd;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Cosine decay from `base_lr` at step 0 to zero at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64) -> Result<f64> {
    if total_steps == 0 || step > total_steps {
        return Err(Error::InvalidArgument(format!(
            "cosine schedule step {step} outside [0, {total_steps}]"
        )));
    }
    let frac = step as f64 / total_steps as f64;
    Ok(base_lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn one(v: f64) -> Tensor<f64> {
        Tensor::scalar(v)
    }

    #[test]
    fn sgd_plain_step() {
        let mut p = one(1.0);
        let g = one(2.0);
        let mut st = OptimizerState::new(OptimizerConfig::new(OptimizerKind::Sgd, 0.1, 0.0), &[&p]).unwrap();
        st.step(&mut [&mut p], &[&g]).unwrap();
        assert!((p.data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_matches_hand_computation() {
        // m = 0.1 g, v = 0.001 g^2; corrected: m_hat = g, v_hat = g^2.
        let (g, lr, eps) = (1.0_f64, 1e-3, 1e-8);
        let m_hat = (1.0 - 0.9) * g / (1.0 - 0.9);
        let v_hat = (1.0 - 0.999) * g * g / (1.0 - 0.999);
        let expected = 1.0 - lr * m_hat / (v_hat.sqrt() + eps);
        let mut p = one(1.0);
        let mut st = OptimizerState::new(OptimizerConfig::new(OptimizerKind::Adam, lr, 0.0), &[&p]).unwrap();
        st.step(&mut [&mut p], &[&one(g)]).unwrap();
        assert!((p.data()[0] - expected).abs() < 1e-15);
        assert!((1.0 - p.data()[0] - 1e-3).abs() < 1e-8);
    }

    #[test]
    fn adamw_pure_decoupled_decay() {
        let mut p = one(1.0);
        let mut st = OptimizerState::new(OptimizerConfig::new(OptimizerKind::AdamW, 0.1, 0.01), &[&p]).unwrap();
        st.step(&mut [&mut p], &[&one(0.0)]).unwrap();
        assert!((p.data()[0] - 0.999).abs() < 1e-15);
    }

    #[test]
    fn adam_couples_decay_into_gradient() {
        // With zero gradient, Adam's L2 term goes through the normalised
        // moment, so the first step moves by ~lr rather than lr * wd.
        let mut p = one(1.0);
        let mut st = OptimizerState::new(OptimizerConfig::new(OptimizerKind::Adam, 0.1, 0.01), &[&p]).unwrap();
        st.step(&mut [&mut p], &[&one(0.0)]).unwrap();
        assert!((p.data()[0] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn rejects_bad_inputs() {
        let p = one(1.0);
        assert!(OptimizerState::new(OptimizerConfig::new(OptimizerKind::Sgd, 0.0, 0.0), &[&p]).is_err());
        assert!(OptimizerState::new(OptimizerConfig::new(OptimizerKind::Sgd, -1.0, 0.0), &[&p]).is_err());
        let mut p = one(1.0);
        let mut st = OptimizerState::new(OptimizerConfig::new(OptimizerKind::Sgd, 0.1, 0.0), &[&p]).unwrap();
        let g = Tensor::<f64>::zeros([2]);
        assert!(st.step(&mut [&mut p], &[&g]).is_err());
        assert_eq!(st.step_count(), 0);
    }

    #[test]
    fn step_counter_increases() {
        let mut p = one(1.0);
        let mut st = OptimizerState::new(OptimizerConfig::new(OptimizerKind::AdamW, 0.1, 0.0), &[&p]).unwrap();
        for k in 1..=5 {
            st.step(&mut [&mut p], &[&one(0.5)]).unwrap();
            assert_eq!(st.step_count(), k);
        }
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 100, 0.3).unwrap(), 0.3);
        assert!(cosine_lr(100, 100, 0.3).unwrap().abs() < 1e-17);
        assert!((cosine_lr(50, 100, 0.3).unwrap() - 0.15).abs() < 1e-15);
        assert!(cosine_lr(101, 100, 0.3).is_err());
        assert!(cosine_lr(0, 0, 0.3).is_err());
    }

    proptest! {
        #[test]
        fn cosine_is_nonincreasing(total in 1usize..5000, base in 1e-6f64..10.0) {
            let mut prev = f64::INFINITY;
            for s in 0..=total {
                let lr = cosine_lr(s, total, base).unwrap();
                prop_assert!(lr <= prev);
                prop_assert!(lr >= 0.0);
                prev = lr;
            }
        }
    }
}
