//! SGD with momentum and weight decay, applied group-wise, plus the
//! inverse-power learning-rate decay.

use std::collections::BTreeMap;

use crate::error::{AbgError, Result};
use crate::mat::Mat;
use crate::nn::{Group, ParamKey, ParameterStore};

pub const MOMENTUM: f64 = 0.9;
pub const WEIGHT_DECAY: f64 = 1e-4;
pub const LR_DECAY_A: f64 = 10.0;
pub const LR_DECAY_B: f64 = 0.75;

/// v <- momentum*v + grad + weight_decay*param; param <- param - lr*v,
/// applied only to the selected groups.
pub fn sgd_step(
    store: &mut ParameterStore,
    grads: &BTreeMap<ParamKey, Mat>,
    groups: &[Group],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    assert!(lr >= 0.0, "learning rate must be non-negative");
    let keys: Vec<ParamKey> = store
        .params
        .keys()
        .filter(|k| groups.contains(&k.0))
        .cloned()
        .collect();
    for key in keys {
        let grad = grads
            .get(&key)
            .ok_or_else(|| AbgError::MissingGradient(format!("{}.{}", key.0.as_str(), key.1)))?;
        let param = store.params.get_mut(&key).unwrap();
        let vel = store
            .momentum
            .entry(key.clone())
            .or_insert_with(|| Mat::zeros(param.rows, param.cols));
        for i in 0..param.data.len() {
            vel.data[i] = momentum * vel.data[i] + grad.data[i] + weight_decay * param.data[i];
            param.data[i] -= lr * vel.data[i];
        }
    }
    Ok(())
}

/// mu = mu0 / (1 + a*p)^b with p the fraction of training completed.
pub fn lr_schedule(progress: f64, mu0: f64) -> f64 {
    debug_assert!((0.0..=1.0).contains(&progress));
    mu0 / (1.0 + LR_DECAY_A * progress).powf(LR_DECAY_B)
}
