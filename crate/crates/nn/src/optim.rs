use std::collections::BTreeMap;

use crate::graph::{Gradients, ModelGraph};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-7;
pub const DEFAULT_LR: f64 = 0.001;

/// First and second moment estimates per weight plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<S> {
    pub step: u64,
    pub m: BTreeMap<String, Tensor<S>>,
    pub v: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> AdamState<S> {
    pub fn zeros_like(weights: &BTreeMap<String, Tensor<S>>) -> Self {
        let zeros: BTreeMap<_, _> = weights
            .iter()
            .map(|(k, t)| (k.clone(), Tensor::zeros(t.dims())))
            .collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update of every weight that has a gradient.
pub fn adam_step<S: Scalar>(model: &mut ModelGraph<S>, grads: &Gradients<S>, lr: f64) {
    let state = &mut model.optimizer;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    let (b1, b2) = (S::from_f64(ADAM_BETA1), S::from_f64(ADAM_BETA2));
    let (one_b1, one_b2) = (S::from_f64(1.0 - ADAM_BETA1), S::from_f64(1.0 - ADAM_BETA2));
    for (name, g) in &grads.weights {
        let (Some(w), Some(m), Some(v)) = (
            model.weights.get_mut(name),
            state.m.get_mut(name),
            state.v.get_mut(name),
        ) else {
            continue;
        };
        for (((wv, mv), vv), &gv) in w
            .data_mut()
            .iter_mut()
            .zip(m.data_mut().iter_mut())
            .zip(v.data_mut().iter_mut())
            .zip(g.data())
        {
            *mv = b1 * *mv + one_b1 * gv;
            *vv = b2 * *vv + one_b2 * gv * gv;
            let mhat = mv.as_f64() / bc1;
            let vhat = vv.as_f64() / bc2;
            let upd = lr * mhat / (vhat.sqrt() + ADAM_EPS);
            *wv -= S::from_f64(upd);
        }
    }
}
