use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Probability floor used by the cross-entropy losses.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    MeanSquaredError,
    /// Expects a softmax head and one-hot (or soft) targets.
    CategoricalCrossEntropy,
    /// Expects a sigmoid head and targets in `[0, 1]`.
    BinaryCrossEntropy,
}

/// Loss value and gradient with respect to the head output.
pub fn head_loss<S: Scalar>(kind: LossKind, out: &Tensor<S>, target: &Tensor<S>) -> Result<(f64, Tensor<S>)> {
    if out.dims() != target.dims() {
        return Err(NnError::Shape {
            context: "loss target".into(),
            expected: out.dims().to_vec(),
            actual: target.dims().to_vec(),
        });
    }
    let count = out.len().max(1) as f64;
    let batch = out.batch().max(1) as f64;
    let mut grad = Vec::with_capacity(out.len());
    let mut loss = 0.0;
    match kind {
        LossKind::MeanSquaredError => {
            for (&p, &t) in out.data().iter().zip(target.data()) {
                let d = p.as_f64() - t.as_f64();
                loss += d * d;
                grad.push(S::from_f64(2.0 * d / count));
            }
            loss /= count;
        }
        LossKind::CategoricalCrossEntropy => {
            for (&p, &t) in out.data().iter().zip(target.data()) {
                let (p, t) = (p.as_f64(), t.as_f64());
                let pc = p.max(PROB_EPS);
                loss -= t * pc.ln();
                let g = if p > PROB_EPS { -t / p / batch } else { 0.0 };
                grad.push(S::from_f64(g));
            }
            loss /= batch;
        }
        LossKind::BinaryCrossEntropy => {
            for (&p, &t) in out.data().iter().zip(target.data()) {
                let (p, t) = (p.as_f64(), t.as_f64());
                let pc = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
                loss -= t * pc.ln() + (1.0 - t) * (1.0 - pc).ln();
                let g = if p > PROB_EPS && p < 1.0 - PROB_EPS {
                    (p - t) / (p * (1.0 - p)) / count
                } else {
                    0.0
                };
                grad.push(S::from_f64(g));
            }
            loss /= count;
        }
    }
    Ok((loss, Tensor::new(out.dims().to_vec(), grad)?))
}
