use std::collections::BTreeMap;

use crate::error::{Error, Result};

use super::nn::Params;
use super::tensor::Tensor;

/// Adam / AdamW hyperparameters. `weight_decay` is decoupled; Adam without
/// weight decay is the `weight_decay = 0` case.
#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// AdamW optimizer state: first/second moment per parameter plus a step
/// counter. Moments are allocated lazily on first use.
pub struct Optimizer {
    pub cfg: AdamConfig,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    pub step: u64,
}

impl Optimizer {
    pub fn new(cfg: AdamConfig) -> Self {
        Optimizer {
            cfg,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            step: 0,
        }
    }

    /// One decoupled-weight-decay Adam step with bias correction. `lr`
    /// overrides the configured rate (schedules feed the current value).
    pub fn step(
        &mut self,
        params: &mut Params,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
    ) -> Result<()> {
        for (name, g) in grads {
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of parameter {name}")));
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powf(t);
        let bc2 = 1.0 - c.beta2.powf(t);
        for (name, g) in grads {
            let p = params.get_mut(name);
            assert_eq!(
                p.shape, g.shape,
                "gradient shape {:?} does not match parameter {name} {:?}",
                g.shape, p.shape
            );
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; p.numel()]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; p.numel()]);
            for i in 0..p.data.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g.data[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g.data[i] * g.data[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.data[i] -= lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * p.data[i]);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f64) -> Params {
        let mut p = Params::new();
        p.insert("w", Tensor::scalar(v));
        p
    }

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let mut params = one_param(0.7);
        let mut opt = Optimizer::new(AdamConfig::default());
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::scalar(0.0));
        opt.step(&mut params, &grads, 0.1).unwrap();
        assert_eq!(params.get("w").data[0], 0.7);
    }

    #[test]
    fn first_step_matches_hand_evaluation() {
        // g=1, step 1: m_hat = 1, v_hat = 1, update = -lr * 1/(1+eps) ~ -0.1
        let mut params = one_param(0.0);
        let mut opt = Optimizer::new(AdamConfig { lr: 0.1, ..Default::default() });
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::scalar(1.0));
        opt.step(&mut params, &grads, 0.1).unwrap();
        let got = params.get("w").data[0];
        let expect = -0.1 * (1.0 / (1.0 + 1e-8));
        assert!((got - expect).abs() < 1e-15, "got {got}");
    }

    #[test]
    fn weight_decay_shrinks_parameter() {
        let wd = 1e-6;
        let theta = 2.0;
        let lr = 0.1;
        let mut with_wd = one_param(theta);
        let mut without = one_param(theta);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::scalar(1.0));
        Optimizer::new(AdamConfig { lr, weight_decay: wd, ..Default::default() })
            .step(&mut with_wd, &grads, lr)
            .unwrap();
        Optimizer::new(AdamConfig { lr, ..Default::default() })
            .step(&mut without, &grads, lr)
            .unwrap();
        let diff = without.get("w").data[0] - with_wd.get("w").data[0];
        assert!((diff - lr * wd * theta).abs() < 1e-15);
    }

    #[test]
    fn nan_grad_reports_parameter_name() {
        let mut params = one_param(1.0);
        let mut opt = Optimizer::new(AdamConfig::default());
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::scalar(f64::NAN));
        let err = opt.step(&mut params, &grads, 0.1).unwrap_err();
        assert!(err.to_string().contains('w'));
        // aborted before touching the parameter
        assert_eq!(params.get("w").data[0], 1.0);
    }
}
