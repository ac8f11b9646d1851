//! Adam optimizer with per-parameter-group learning rates.

use std::collections::BTreeMap;

use ndarray::ArrayD;

use super::params::ParamSet;

/// Adam moment hyperparameters (learning rates are supplied per step, since
/// they differ per parameter group).
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam state: first/second moment estimates per parameter tensor.
pub struct Adam {
    cfg: AdamConfig,
    m: BTreeMap<String, ArrayD<f64>>,
    v: BTreeMap<String, ArrayD<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: 0,
        }
    }

    /// Applies one update. `lr_for` maps a parameter name to its group's
    /// learning rate; a rate of exactly zero freezes the tensor — it is
    /// left bit-identical and its moments are not advanced.
    pub fn step(
        &mut self,
        params: &mut ParamSet,
        grads: &BTreeMap<String, ArrayD<f64>>,
        lr_for: impl Fn(&str) -> f64,
    ) {
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        for (name, value) in params.iter_mut() {
            let lr = lr_for(name);
            if lr == 0.0 {
                continue;
            }
            let Some(grad) = grads.get(name) else {
                continue; // parameter not touched by this step's graph
            };
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            m.zip_mut_with(grad, |mi, &gi| {
                *mi = self.cfg.beta1 * *mi + (1.0 - self.cfg.beta1) * gi;
            });
            v.zip_mut_with(grad, |vi, &gi| {
                *vi = self.cfg.beta2 * *vi + (1.0 - self.cfg.beta2) * gi * gi;
            });
            ndarray::Zip::from(value)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &mi, &vi| {
                    let m_hat = mi / bc1;
                    let v_hat = vi / bc2;
                    *p -= lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::init_ones;
    use ndarray::ArrayD;

    fn quadratic_grads(params: &ParamSet) -> BTreeMap<String, ArrayD<f64>> {
        // f = ½‖p‖² → ∇f = p
        params
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let mut params = ParamSet::new();
        params.insert("w", init_ones(&[4]) * 3.0);
        let mut opt = Adam::new(AdamConfig::default());
        let initial: f64 = params.get("w").unwrap().iter().map(|v| v * v).sum();
        for _ in 0..200 {
            let grads = quadratic_grads(&params);
            opt.step(&mut params, &grads, |_| 0.05);
        }
        let fin: f64 = params.get("w").unwrap().iter().map(|v| v * v).sum();
        assert!(fin < 0.01 * initial, "‖w‖² went {initial} → {fin}");
    }

    #[test]
    fn zero_learning_rate_freezes_a_group_bit_exactly() {
        let mut params = ParamSet::new();
        params.insert("eeg.w", init_ones(&[3]) * 0.123456789);
        params.insert("exg.w", init_ones(&[3]) * 0.123456789);
        let before = params.clone();
        let mut opt = Adam::new(AdamConfig::default());
        for _ in 0..5 {
            let grads = quadratic_grads(&params);
            opt.step(&mut params, &grads, |name| {
                if name.starts_with("eeg.") {
                    0.0
                } else {
                    0.01
                }
            });
        }
        assert!(params
            .strip_prefix("eeg")
            .bit_identical(&before.strip_prefix("eeg")));
        assert!(!params
            .strip_prefix("exg")
            .bit_identical(&before.strip_prefix("exg")));
    }

    #[test]
    fn missing_gradients_leave_parameters_untouched() {
        let mut params = ParamSet::new();
        params.insert("w", init_ones(&[2]));
        let before = params.clone();
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(&mut params, &BTreeMap::new(), |_| 0.1);
        assert!(params.bit_identical(&before));
    }

    #[test]
    fn first_step_moves_by_roughly_the_learning_rate() {
        // with bias correction, |Δp| ≈ lr on the first step for any gradient scale
        let mut params = ParamSet::new();
        params.insert("w", init_ones(&[1]) * 10.0);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), init_ones(&[1]) * 1e-3);
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(&mut params, &grads, |_| 0.01);
        let moved = 10.0 - params.get("w").unwrap()[[0]];
        assert!((moved - 0.01).abs() < 1e-6, "moved {moved}");
    }
}
