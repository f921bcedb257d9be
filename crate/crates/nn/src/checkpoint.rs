use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{NnError, Result};
use crate::fxt1::{self, Array};
use crate::graph::{GraphSpec, ModelGraph};
use crate::optim::AdamState;
use crate::scalar::Scalar;

const GRAPH: &str = "graph";
const RNG: &str = "rng";
const STEP: &str = "adam.step";

/// Serialises graph description, weights, buffers, optimizer and RNG state.
pub fn to_arrays<S: Scalar>(model: &ModelGraph<S>) -> Result<Vec<Array>> {
    let spec = serde_json::to_vec(model.spec()).map_err(|e| NnError::Format(e.to_string()))?;
    let mut arrays = vec![Array::from_bytes(GRAPH, &spec), Array::from_bytes(RNG, &model.rng_state())];
    arrays.push(Array::from_i64(STEP, &[model.optimizer.step as i64]));
    for (k, t) in &model.weights {
        arrays.push(Array::from_tensor(&format!("weight/{k}"), t));
    }
    for (k, t) in &model.buffers {
        arrays.push(Array::from_tensor(&format!("buffer/{k}"), t));
    }
    for (k, t) in &model.optimizer.m {
        arrays.push(Array::from_tensor(&format!("adam.m/{k}"), t));
    }
    for (k, t) in &model.optimizer.v {
        arrays.push(Array::from_tensor(&format!("adam.v/{k}"), t));
    }
    Ok(arrays)
}

pub fn from_arrays<S: Scalar>(arrays: &[Array]) -> Result<ModelGraph<S>> {
    let mut spec: Option<GraphSpec> = None;
    let mut rng = None;
    let mut step = None;
    let mut weights = BTreeMap::new();
    let mut buffers = BTreeMap::new();
    let mut m = BTreeMap::new();
    let mut v = BTreeMap::new();
    for a in arrays {
        if a.name == GRAPH {
            spec = Some(serde_json::from_slice(&a.payload).map_err(|e| NnError::Format(e.to_string()))?);
        } else if a.name == RNG {
            let state: [u8; 48] = a
                .payload
                .as_slice()
                .try_into()
                .map_err(|_| NnError::Format("rng state must be 48 bytes".into()))?;
            rng = Some(state);
        } else if a.name == STEP {
            step = a.to_i64()?.first().copied();
        } else if let Some(k) = a.name.strip_prefix("weight/") {
            weights.insert(k.to_string(), a.to_tensor()?);
        } else if let Some(k) = a.name.strip_prefix("buffer/") {
            buffers.insert(k.to_string(), a.to_tensor()?);
        } else if let Some(k) = a.name.strip_prefix("adam.m/") {
            m.insert(k.to_string(), a.to_tensor()?);
        } else if let Some(k) = a.name.strip_prefix("adam.v/") {
            v.insert(k.to_string(), a.to_tensor()?);
        } else {
            return Err(NnError::Format(format!("unexpected array {}", a.name)));
        }
    }
    let spec = spec.ok_or_else(|| NnError::Format("checkpoint has no graph".into()))?;
    let rng = rng.ok_or_else(|| NnError::Format("checkpoint has no rng state".into()))?;
    let step = step.ok_or_else(|| NnError::Format("checkpoint has no optimizer step".into()))?;
    let optimizer = AdamState {
        step: step as u64,
        m,
        v,
    };
    ModelGraph::from_parts(spec, weights, buffers, optimizer, rng)
}

pub fn save_checkpoint<S: Scalar>(model: &ModelGraph<S>, path: &Path) -> Result<()> {
    fxt1::write_file(path, &to_arrays(model)?)
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<ModelGraph<S>> {
    from_arrays(&fxt1::read_file(path)?)
}
