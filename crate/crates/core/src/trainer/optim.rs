use std::collections::BTreeMap;

use super::{TrainConfig, TrainError};
use crate::model::ModelParams;
use crate::numerics::{Array, Scalar};

/// Adam moments for every parameter plus the number of completed updates.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub m: BTreeMap<String, Array<T>>,
    pub v: BTreeMap<String, Array<T>>,
    pub step: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        let zeros: BTreeMap<_, _> = params
            .tensors()
            .iter()
            .map(|(k, a)| (k.clone(), Array::zeros(a.shape())))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// Linear warmup from 0 over `warmup_steps`, then constant. Steps are 1-based.
pub fn lr_schedule(step: u64, cfg: &TrainConfig) -> f64 {
    if cfg.warmup_steps == 0 || step >= cfg.warmup_steps {
        cfg.learning_rate
    } else {
        cfg.learning_rate * step as f64 / cfg.warmup_steps as f64
    }
}

/// One AdamW update. The decay is applied to the parameters after the Adam
/// step and never enters the moments.
pub fn adamw_step<T: Scalar>(
    params: &mut ModelParams<T>,
    grads: &BTreeMap<String, Array<T>>,
    state: &mut OptimizerState<T>,
    cfg: &TrainConfig,
    lr_now: f64,
) -> Result<(), TrainError> {
    for (name, p) in params.tensors() {
        let g = grads
            .get(name)
            .ok_or_else(|| TrainError::Config(format!("no gradient for {name}")))?;
        if g.shape() != p.shape() {
            return Err(TrainError::Config(format!(
                "gradient shape {:?} for {name} {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if !g.all_finite() {
            return Err(TrainError::NonFiniteGradient(name.clone()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let bc1 = T::lit(1.0 - b1.powi(t));
    let bc2 = T::lit(1.0 - b2.powi(t));
    let (b1, b2) = (T::lit(b1), T::lit(b2));
    let (one, eps, lr) = (T::one(), T::lit(cfg.adam_epsilon), T::lit(lr_now));
    let decay = T::lit(1.0 - lr_now * cfg.weight_decay);
    for (name, p) in params.iter_mut() {
        let g = grads[name].data();
        let m = state.m.get_mut(name).expect("moment exists").data_mut();
        let v = state.v.get_mut(name).expect("moment exists").data_mut();
        for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g).zip(m).zip(v) {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
            *p *= decay;
        }
    }
    Ok(())
}
