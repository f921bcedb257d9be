//! Central finite-difference gradient checking.
//!
//! Only the forward pass is used here, so the result is independent of the
//! analytic backward implementation it is compared against.

use crate::error::Result;
use crate::graph::{Mode, ModelGraph, Named};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest relative error over all checked coordinates.
    pub max_rel_error: f64,
    /// Name and flat index of the worst coordinate.
    pub worst: (String, usize),
    pub checked: usize,
    /// Coordinates skipped because the two perturbed points picked different
    /// max-pool elements, so the difference quotient straddles a kink.
    pub skipped_kinks: usize,
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / scale
}

/// Compares analytic gradients with central differences of step `h` for
/// every weight and every input coordinate (up to `max_per_tensor` per
/// tensor, evenly strided). Each evaluation runs on a clone of `model` so
/// dropout masks and batch statistics are identical across perturbations.
/// Coordinates whose ±h evaluations fall on different sides of a max-pool
/// switch are skipped and counted rather than compared.
pub fn check_gradients(
    model: &ModelGraph<f64>,
    inputs: &Named<f64>,
    targets: &Named<f64>,
    mode: Mode,
    h: f64,
    max_per_tensor: usize,
) -> Result<GradCheckReport> {
    let (_, grads) = model.clone().backward(inputs, targets, mode)?;
    let loss_of = |m: &ModelGraph<f64>, x: &Named<f64>| -> Result<(f64, Vec<u32>)> {
        m.clone().loss_and_pool_choices(x, targets, mode)
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (String::new(), 0),
        checked: 0,
        skipped_kinks: 0,
    };
    // Central difference, or None when the two points straddle a kink.
    let central = |(lp, cp): (f64, Vec<u32>), (lm, cm): (f64, Vec<u32>)| (cp == cm).then(|| (lp - lm) / (2.0 * h));
    let note = |name: &str, i: usize, a: f64, n: f64, r: &mut GradCheckReport| {
        let e = rel_error(a, n);
        r.checked += 1;
        if e > r.max_rel_error {
            r.max_rel_error = e;
            r.worst = (name.to_string(), i);
        }
    };
    for name in model.weight_names() {
        let len = model.weights[&name].len();
        let stride = (len / max_per_tensor.max(1)).max(1);
        for i in (0..len).step_by(stride) {
            let mut plus = model.clone();
            plus.weights.get_mut(&name).unwrap().data_mut()[i] += h;
            let mut minus = model.clone();
            minus.weights.get_mut(&name).unwrap().data_mut()[i] -= h;
            match central(loss_of(&plus, inputs)?, loss_of(&minus, inputs)?) {
                Some(numeric) => note(&name, i, grads.weights[&name].data()[i], numeric, &mut report),
                None => report.skipped_kinks += 1,
            }
        }
    }
    for (name, x) in inputs {
        let Some(g) = grads.inputs.get(name) else { continue };
        let stride = (x.len() / max_per_tensor.max(1)).max(1);
        for i in (0..x.len()).step_by(stride) {
            let mut xp = inputs.clone();
            xp.get_mut(name).unwrap().data_mut()[i] += h;
            let mut xm = inputs.clone();
            xm.get_mut(name).unwrap().data_mut()[i] -= h;
            match central(loss_of(model, &xp)?, loss_of(model, &xm)?) {
                Some(numeric) => note(name, i, g.data()[i], numeric, &mut report),
                None => report.skipped_kinks += 1,
            }
        }
    }
    Ok(report)
}
