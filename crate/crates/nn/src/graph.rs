//! Layered network description, weights, and the forward/backward engine.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::layers::{self, BnCache, BnShape, ConvShape, LstmCache, LstmGrads, LstmWeights};
use crate::loss::{head_loss, LossKind};
use crate::optim::AdamState;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BATCHNORM_EPS: f64 = 1e-3;
pub const BATCHNORM_MOMENTUM: f64 = 0.99;
pub const LSTM_INIT_RANGE: f64 = 0.08;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    /// Graph input. `dims` excludes the batch axis (and the time axis when
    /// `sequence` is set).
    Input {
        dims: Vec<usize>,
        #[serde(default)]
        sequence: bool,
    },
    /// Square kernel, stride 1, "same" zero padding.
    Conv2d { filters: usize, kernel: usize },
    MaxPool2d { pool: [usize; 2] },
    /// Learnable scale and shift per channel (axis 1).
    BatchNorm,
    Dense { units: usize },
    Elu,
    Dropout { rate: f64 },
    Softmax,
    Sigmoid,
    Flatten,
    /// Concatenates along the last axis.
    Concat,
    /// Outputs the final hidden states of both directions, concatenated.
    BiLstm { units: usize },
    /// `[N, T, …] -> [N·T, …]`; entry point of a time-distributed sub-graph.
    TimeDistributedFold,
    /// `[N·T, F] -> [N, T, F]`, using the batch layout recorded by `fold`.
    TimeDistributedUnfold { fold: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub name: String,
    pub layer: LayerSpec,
    #[serde(default)]
    pub inputs: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub name: String,
    pub node: String,
    pub loss: LossKind,
    #[serde(default = "one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GraphSpec {
    pub nodes: Vec<NodeSpec>,
    pub heads: Vec<HeadSpec>,
}

impl GraphSpec {
    pub fn input(&mut self, name: &str, dims: &[usize], sequence: bool) -> String {
        self.push(
            name,
            LayerSpec::Input {
                dims: dims.to_vec(),
                sequence,
            },
            &[],
        )
    }

    /// Appends a node and returns its name for chaining.
    pub fn push(&mut self, name: &str, layer: LayerSpec, inputs: &[&str]) -> String {
        self.nodes.push(NodeSpec {
            name: name.to_string(),
            layer,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
        });
        name.to_string()
    }

    pub fn head(&mut self, name: &str, node: &str, loss: LossKind) {
        self.heads.push(HeadSpec {
            name: name.to_string(),
            node: node.to_string(),
            loss,
            weight: 1.0,
        });
    }

    pub fn input_names(&self) -> Vec<&str> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.layer, LayerSpec::Input { .. }))
            .map(|n| n.name.as_str())
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Static per-sample shape: the batch axis (and time axis, if any) excluded.
#[derive(Clone, Debug, PartialEq)]
struct Shape {
    time: bool,
    dims: Vec<usize>,
}

pub type Named<S> = BTreeMap<String, Tensor<S>>;

#[derive(Clone, Debug)]
pub struct Gradients<S> {
    pub weights: Named<S>,
    pub inputs: Named<S>,
}

impl<S: Scalar> Gradients<S> {
    pub fn global_norm(&self) -> f64 {
        self.weights.values().map(|t| t.sum_sq()).sum::<f64>().sqrt()
    }

    /// Rescales weight gradients so their global L2 norm is at most `max_norm`.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            let k = S::from_f64(max_norm / norm);
            for t in self.weights.values_mut() {
                t.data_mut().iter_mut().for_each(|v| *v *= k);
            }
        }
        norm
    }
}

enum Cache<S> {
    None,
    Pool(Vec<u32>),
    Mask(Vec<S>),
    Norm(BnCache<S>),
    Lstm(Box<[LstmCache<S>; 2]>),
    Fold { n: usize, t: usize },
}

/// Batch-norm running statistics to write back: (weight name, new values).
type StatUpdates<S> = Vec<(String, Vec<S>)>;

struct Trace<S> {
    outputs: Vec<Tensor<S>>,
    caches: Vec<Cache<S>>,
}

#[derive(Clone, Debug)]
pub struct ModelGraph<S> {
    spec: GraphSpec,
    index: HashMap<String, usize>,
    pub weights: Named<S>,
    /// Non-trainable state (batch-norm moving statistics).
    pub buffers: Named<S>,
    pub optimizer: AdamState<S>,
    rng: ChaCha8Rng,
}

impl<S: Scalar> ModelGraph<S> {
    /// Validates wiring, infers shapes and initialises weights from `seed`.
    pub fn build(spec: GraphSpec, seed: u64) -> Result<Self> {
        let (index, shapes) = infer_shapes(&spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Named::new();
        let mut buffers = Named::new();
        for node in spec.nodes.iter() {
            let in_shape = node.inputs.first().map(|n| &shapes[index[n]]);
            let name = &node.name;
            match &node.layer {
                LayerSpec::Conv2d { filters, kernel } => {
                    let c = in_shape.unwrap().dims[0];
                    let fan_in = c * kernel * kernel;
                    let limit = (6.0 / fan_in as f64).sqrt();
                    weights.insert(
                        format!("{name}/kernel"),
                        uniform(&[*filters, c, *kernel, *kernel], limit, &mut rng),
                    );
                    weights.insert(format!("{name}/bias"), Tensor::zeros(&[*filters]));
                }
                LayerSpec::Dense { units } => {
                    let fin = in_shape.unwrap().dims[0];
                    let limit = (6.0 / fin as f64).sqrt();
                    weights.insert(format!("{name}/kernel"), uniform(&[fin, *units], limit, &mut rng));
                    weights.insert(format!("{name}/bias"), Tensor::zeros(&[*units]));
                }
                LayerSpec::BatchNorm => {
                    let c = in_shape.unwrap().dims[0];
                    weights.insert(format!("{name}/gamma"), Tensor::filled(&[c], S::one()));
                    weights.insert(format!("{name}/beta"), Tensor::zeros(&[c]));
                    buffers.insert(format!("{name}/moving_mean"), Tensor::zeros(&[c]));
                    buffers.insert(format!("{name}/moving_var"), Tensor::filled(&[c], S::one()));
                }
                LayerSpec::BiLstm { units } => {
                    let f = in_shape.unwrap().dims[0];
                    for dir in ["fw", "bw"] {
                        weights.insert(
                            format!("{name}/{dir}_kernel"),
                            uniform(&[f, 4 * units], LSTM_INIT_RANGE, &mut rng),
                        );
                        weights.insert(
                            format!("{name}/{dir}_recurrent"),
                            uniform(&[*units, 4 * units], LSTM_INIT_RANGE, &mut rng),
                        );
                        weights.insert(format!("{name}/{dir}_bias"), Tensor::zeros(&[4 * units]));
                    }
                }
                _ => {}
            }
        }
        let optimizer = AdamState::zeros_like(&weights);
        Ok(Self {
            spec,
            index,
            weights,
            buffers,
            optimizer,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15),
        })
    }

    /// Reassembles a model from stored parts (used by checkpoint loading).
    pub fn from_parts(
        spec: GraphSpec,
        weights: Named<S>,
        buffers: Named<S>,
        optimizer: AdamState<S>,
        rng_state: [u8; 48],
    ) -> Result<Self> {
        let (index, _) = infer_shapes(&spec)?;
        let mut model = Self {
            spec,
            index,
            weights,
            buffers,
            optimizer,
            rng: ChaCha8Rng::seed_from_u64(0),
        };
        model.set_rng_state(rng_state);
        let fresh = Self::build(model.spec.clone(), 0)?;
        for (name, t) in &fresh.weights {
            match model.weights.get(name) {
                Some(w) if w.dims() == t.dims() => {}
                _ => return Err(NnError::Format(format!("weight {name} missing or misshapen"))),
            }
        }
        if model.weights.len() != fresh.weights.len() {
            return Err(NnError::Format("unexpected extra weights".into()));
        }
        Ok(model)
    }

    pub fn spec(&self) -> &GraphSpec {
        &self.spec
    }

    /// Names of all trainable weights in deterministic order.
    pub fn weight_names(&self) -> Vec<String> {
        self.weights.keys().cloned().collect()
    }

    pub fn weight(&self, name: &str) -> Option<&Tensor<S>> {
        self.weights.get(name)
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.values().map(|t| t.len()).sum()
    }

    pub fn rng_state(&self) -> [u8; 48] {
        let mut out = [0u8; 48];
        out[..32].copy_from_slice(&self.rng.get_seed());
        out[32..].copy_from_slice(&self.rng.get_word_pos().to_le_bytes());
        out
    }

    pub fn set_rng_state(&mut self, state: [u8; 48]) {
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&state[..32]);
        let mut pos = [0u8; 16];
        pos.copy_from_slice(&state[32..]);
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_word_pos(u128::from_le_bytes(pos));
        self.rng = rng;
    }

    pub fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    /// Head outputs. Train mode draws dropout masks and updates batch-norm
    /// moving statistics.
    pub fn forward(&mut self, inputs: &Named<S>, mode: Mode) -> Result<Named<S>> {
        let trace = self.run_mut(inputs, mode)?;
        Ok(self.collect_heads(&trace))
    }

    /// Inference-mode forward pass; never mutates the model.
    pub fn predict(&self, inputs: &Named<S>) -> Result<Named<S>> {
        let (trace, _) = self.run(inputs, Mode::Infer, None)?;
        Ok(self.collect_heads(&trace))
    }

    /// Loss without gradients (inference mode), for validation.
    pub fn evaluate_loss(&self, inputs: &Named<S>, targets: &Named<S>) -> Result<f64> {
        let (trace, _) = self.run(inputs, Mode::Infer, None)?;
        let mut total = 0.0;
        for head in &self.spec.heads {
            let out = &trace.outputs[self.index[&head.node]];
            let target = lookup(targets, &head.name)?;
            let (l, _) = head_loss(head.loss, out, target)?;
            total += head.weight * l;
        }
        check_loss(total)
    }

    /// Loss of one forward pass plus every max-pool argmax. Two points with
    /// equal argmaxes lie in the same smooth piece of the loss.
    pub(crate) fn loss_and_pool_choices(
        &mut self,
        inputs: &Named<S>,
        targets: &Named<S>,
        mode: Mode,
    ) -> Result<(f64, Vec<u32>)> {
        let trace = self.run_mut(inputs, mode)?;
        let mut total = 0.0;
        for head in &self.spec.heads {
            let out = &trace.outputs[self.index[&head.node]];
            let (l, _) = head_loss(head.loss, out, lookup(targets, &head.name)?)?;
            total += head.weight * l;
        }
        let choices = trace
            .caches
            .iter()
            .flat_map(|c| match c {
                Cache::Pool(arg) => arg.as_slice(),
                _ => &[],
            })
            .copied()
            .collect();
        Ok((check_loss(total)?, choices))
    }

    /// Forward pass plus gradients of the weighted head-loss sum with respect
    /// to every weight and every graph input.
    pub fn backward(
        &mut self,
        inputs: &Named<S>,
        targets: &Named<S>,
        mode: Mode,
    ) -> Result<(f64, Gradients<S>)> {
        self.backward_impl(inputs, targets, mode, true)
    }

    /// Like [`ModelGraph::backward`] but skips gradients flowing only into
    /// graph inputs; `Gradients::inputs` is left empty. Used for training.
    pub fn backward_weights(
        &mut self,
        inputs: &Named<S>,
        targets: &Named<S>,
        mode: Mode,
    ) -> Result<(f64, Gradients<S>)> {
        self.backward_impl(inputs, targets, mode, false)
    }

    /// Per node: does any gradient need to flow into its output?
    fn gradient_mask(&self, want_inputs: bool) -> Vec<bool> {
        let mut need = Vec::with_capacity(self.spec.nodes.len());
        for node in &self.spec.nodes {
            let own = match &node.layer {
                LayerSpec::Input { .. } => want_inputs,
                LayerSpec::Conv2d { .. }
                | LayerSpec::Dense { .. }
                | LayerSpec::BatchNorm
                | LayerSpec::BiLstm { .. } => true,
                _ => false,
            };
            let upstream = node.inputs.iter().any(|n| need[self.index[n]]);
            need.push(own || upstream);
        }
        need
    }

    fn backward_impl(
        &mut self,
        inputs: &Named<S>,
        targets: &Named<S>,
        mode: Mode,
        want_inputs: bool,
    ) -> Result<(f64, Gradients<S>)> {
        let need = self.gradient_mask(want_inputs);
        let trace = self.run_mut(inputs, mode)?;
        let n_nodes = self.spec.nodes.len();
        let mut grads: Vec<Option<Tensor<S>>> = (0..n_nodes).map(|_| None).collect();
        let mut total = 0.0;
        for head in &self.spec.heads {
            let idx = self.index[&head.node];
            let target = lookup(targets, &head.name)?;
            let (l, mut g) = head_loss(head.loss, &trace.outputs[idx], target)?;
            total += head.weight * l;
            let w = S::from_f64(head.weight);
            g.data_mut().iter_mut().for_each(|v| *v *= w);
            accumulate(&mut grads[idx], g);
        }
        let total = check_loss(total)?;

        let mut wgrads: Named<S> = self
            .weights
            .iter()
            .map(|(k, v)| (k.clone(), Tensor::zeros(v.dims())))
            .collect();
        let mut igrads = Named::new();

        for idx in (0..n_nodes).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            if !need[idx] {
                continue;
            }
            let node = &self.spec.nodes[idx];
            let ins: Vec<usize> = node.inputs.iter().map(|n| self.index[n]).collect();
            let name = node.name.as_str();
            match &node.layer {
                LayerSpec::Input { .. } => {
                    igrads.insert(node.name.clone(), dy);
                }
                LayerSpec::Conv2d { filters, kernel } => {
                    let x = &trace.outputs[ins[0]];
                    let d = x.dims();
                    let s = ConvShape {
                        n: d[0],
                        c: d[1],
                        h: d[2],
                        w: d[3],
                        f: *filters,
                        k: *kernel,
                    };
                    let mut dx = need[ins[0]].then(|| Tensor::zeros(d));
                    let kname = format!("{name}/kernel");
                    let bname = format!("{name}/bias");
                    let mut dk = wgrads.remove(&kname).unwrap();
                    let mut db = wgrads.remove(&bname).unwrap();
                    layers::conv2d_backward(
                        x.data(),
                        self.weights[&kname].data(),
                        dy.data(),
                        &s,
                        dx.as_mut().map(|t| t.data_mut()),
                        dk.data_mut(),
                        db.data_mut(),
                    );
                    wgrads.insert(kname, dk);
                    wgrads.insert(bname, db);
                    if let Some(dx) = dx {
                        accumulate(&mut grads[ins[0]], dx);
                    }
                }
                LayerSpec::MaxPool2d { .. } => {
                    let x = &trace.outputs[ins[0]];
                    let d = x.dims();
                    let y = &trace.outputs[idx];
                    let Cache::Pool(arg) = &trace.caches[idx] else { unreachable!() };
                    let mut dx = Tensor::zeros(d);
                    layers::maxpool_backward(
                        dy.data(),
                        arg,
                        d[2] * d[3],
                        y.dims()[2] * y.dims()[3],
                        dx.data_mut(),
                    );
                    accumulate(&mut grads[ins[0]], dx);
                }
                LayerSpec::BatchNorm => {
                    let x = &trace.outputs[ins[0]];
                    let d = x.dims();
                    let s = bn_shape(d);
                    let gname = format!("{name}/gamma");
                    let bname = format!("{name}/beta");
                    let mut dx = Tensor::zeros(d);
                    let mut dg = wgrads.remove(&gname).unwrap();
                    let mut db = wgrads.remove(&bname).unwrap();
                    match &trace.caches[idx] {
                        Cache::Norm(cache) => layers::batchnorm_backward(
                            dy.data(),
                            self.weights[&gname].data(),
                            cache,
                            &s,
                            dx.data_mut(),
                            dg.data_mut(),
                            db.data_mut(),
                        ),
                        _ => {
                            // Inference mode: a fixed affine map.
                            let gamma = self.weights[&gname].data();
                            let mean = self.buffers[&format!("{name}/moving_mean")].data();
                            let var = self.buffers[&format!("{name}/moving_var")].data();
                            let eps = S::from_f64(BATCHNORM_EPS);
                            for ni in 0..s.n {
                                for ch in 0..s.c {
                                    let is = S::one() / (var[ch] + eps).sqrt();
                                    let base = (ni * s.c + ch) * s.inner;
                                    for i in base..base + s.inner {
                                        let g = dy.data()[i];
                                        let xh = (x.data()[i] - mean[ch]) * is;
                                        dg.data_mut()[ch] += g * xh;
                                        db.data_mut()[ch] += g;
                                        dx.data_mut()[i] += g * gamma[ch] * is;
                                    }
                                }
                            }
                        }
                    }
                    wgrads.insert(gname, dg);
                    wgrads.insert(bname, db);
                    accumulate(&mut grads[ins[0]], dx);
                }
                LayerSpec::Dense { units } => {
                    let x = &trace.outputs[ins[0]];
                    let (n, fin) = (x.dims()[0], x.dims()[1]);
                    let kname = format!("{name}/kernel");
                    let bname = format!("{name}/bias");
                    let mut dx = Tensor::zeros(x.dims());
                    let mut dk = wgrads.remove(&kname).unwrap();
                    let mut db = wgrads.remove(&bname).unwrap();
                    layers::dense_backward(
                        x.data(),
                        self.weights[&kname].data(),
                        dy.data(),
                        n,
                        fin,
                        *units,
                        dx.data_mut(),
                        dk.data_mut(),
                        db.data_mut(),
                    );
                    wgrads.insert(kname, dk);
                    wgrads.insert(bname, db);
                    accumulate(&mut grads[ins[0]], dx);
                }
                LayerSpec::Elu => {
                    let x = &trace.outputs[ins[0]];
                    let y = &trace.outputs[idx];
                    let data = x
                        .data()
                        .iter()
                        .zip(y.data())
                        .zip(dy.data())
                        .map(|((&xv, &yv), &g)| if xv > S::zero() { g } else { g * (yv + S::one()) })
                        .collect();
                    accumulate(&mut grads[ins[0]], Tensor::new(x.dims().to_vec(), data)?);
                }
                LayerSpec::Dropout { .. } => {
                    let dx = match &trace.caches[idx] {
                        Cache::Mask(mask) => {
                            let data = dy.data().iter().zip(mask).map(|(g, m)| *g * *m).collect();
                            Tensor::new(dy.dims().to_vec(), data)?
                        }
                        _ => dy,
                    };
                    accumulate(&mut grads[ins[0]], dx);
                }
                LayerSpec::Softmax => {
                    let y = &trace.outputs[idx];
                    let w = *y.dims().last().unwrap();
                    let mut dx = Tensor::zeros(y.dims());
                    layers::softmax_backward(y.data(), dy.data(), w, dx.data_mut());
                    accumulate(&mut grads[ins[0]], dx);
                }
                LayerSpec::Sigmoid => {
                    let y = &trace.outputs[idx];
                    let data = y
                        .data()
                        .iter()
                        .zip(dy.data())
                        .map(|(&p, &g)| g * p * (S::one() - p))
                        .collect();
                    accumulate(&mut grads[ins[0]], Tensor::new(y.dims().to_vec(), data)?);
                }
                LayerSpec::Flatten => {
                    let x = &trace.outputs[ins[0]];
                    accumulate(&mut grads[ins[0]], dy.reshape(x.dims().to_vec())?);
                }
                LayerSpec::Concat => {
                    let widths: Vec<usize> =
                        ins.iter().map(|&i| *trace.outputs[i].dims().last().unwrap()).collect();
                    let total_w: usize = widths.iter().sum();
                    let rows = dy.len() / total_w;
                    let mut offset = 0;
                    for (k, &i) in ins.iter().enumerate() {
                        let w = widths[k];
                        let mut part = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            part.extend_from_slice(&dy.data()[r * total_w + offset..r * total_w + offset + w]);
                        }
                        offset += w;
                        let t = Tensor::new(trace.outputs[i].dims().to_vec(), part)?;
                        accumulate(&mut grads[i], t);
                    }
                }
                LayerSpec::BiLstm { units } => {
                    let x = &trace.outputs[ins[0]];
                    let (n, t, f) = (x.dims()[0], x.dims()[1], x.dims()[2]);
                    let u = *units;
                    let Cache::Lstm(caches) = &trace.caches[idx] else { unreachable!() };
                    let mut dx = Tensor::zeros(x.dims());
                    for (di, dir) in ["fw", "bw"].iter().enumerate() {
                        let mut dh = vec![S::zero(); n * u];
                        for ni in 0..n {
                            dh[ni * u..(ni + 1) * u]
                                .copy_from_slice(&dy.data()[ni * 2 * u + di * u..ni * 2 * u + (di + 1) * u]);
                        }
                        let kn = format!("{name}/{dir}_kernel");
                        let rn = format!("{name}/{dir}_recurrent");
                        let bn = format!("{name}/{dir}_bias");
                        let w = LstmWeights {
                            kernel: self.weights[&kn].data(),
                            recurrent: self.weights[&rn].data(),
                            bias: self.weights[&bn].data(),
                        };
                        let mut gk = wgrads.remove(&kn).unwrap();
                        let mut gr = wgrads.remove(&rn).unwrap();
                        let mut gb = wgrads.remove(&bn).unwrap();
                        let dxs = layers::lstm_backward(
                            &caches[di],
                            &w,
                            &dh,
                            n,
                            f,
                            u,
                            LstmGrads {
                                kernel: gk.data_mut(),
                                recurrent: gr.data_mut(),
                                bias: gb.data_mut(),
                            },
                        );
                        wgrads.insert(kn, gk);
                        wgrads.insert(rn, gr);
                        wgrads.insert(bn, gb);
                        for (step, g) in dxs.iter().enumerate() {
                            let ti = if di == 0 { step } else { t - 1 - step };
                            for ni in 0..n {
                                let dst = &mut dx.data_mut()[(ni * t + ti) * f..(ni * t + ti + 1) * f];
                                for (d, v) in dst.iter_mut().zip(&g[ni * f..(ni + 1) * f]) {
                                    *d += *v;
                                }
                            }
                        }
                    }
                    accumulate(&mut grads[ins[0]], dx);
                }
                LayerSpec::TimeDistributedFold | LayerSpec::TimeDistributedUnfold { .. } => {
                    let x = &trace.outputs[ins[0]];
                    accumulate(&mut grads[ins[0]], dy.reshape(x.dims().to_vec())?);
                }
            }
        }
        Ok((
            total,
            Gradients {
                weights: wgrads,
                inputs: igrads,
            },
        ))
    }

    fn collect_heads(&self, trace: &Trace<S>) -> Named<S> {
        self.spec
            .heads
            .iter()
            .map(|h| (h.name.clone(), trace.outputs[self.index[&h.node]].clone()))
            .collect()
    }

    fn run_mut(&mut self, inputs: &Named<S>, mode: Mode) -> Result<Trace<S>> {
        let mut rng = self.rng.clone();
        let (trace, updates) = self.run(inputs, mode, Some(&mut rng))?;
        self.rng = rng;
        for (name, values) in updates {
            self.buffers
                .get_mut(&name)
                .expect("buffer registered at build")
                .data_mut()
                .copy_from_slice(&values);
        }
        Ok(trace)
    }

    fn run(
        &self,
        inputs: &Named<S>,
        mode: Mode,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Trace<S>, StatUpdates<S>)> {
        let n_nodes = self.spec.nodes.len();
        let mut outputs: Vec<Tensor<S>> = Vec::with_capacity(n_nodes);
        let mut caches = Vec::with_capacity(n_nodes);
        let mut updates = Vec::new();
        for (idx, node) in self.spec.nodes.iter().enumerate() {
            let ins: Vec<usize> = node.inputs.iter().map(|n| self.index[n]).collect();
            let name = node.name.as_str();
            let (out, cache) = match &node.layer {
                LayerSpec::Input { dims, sequence } => {
                    let t = lookup(inputs, name)?;
                    let lead = if *sequence { 2 } else { 1 };
                    if t.dims().len() != dims.len() + lead || &t.dims()[lead..] != dims.as_slice() {
                        return Err(NnError::Shape {
                            context: format!("input {name}"),
                            expected: dims.clone(),
                            actual: t.dims().to_vec(),
                        });
                    }
                    (t.clone(), Cache::None)
                }
                LayerSpec::Conv2d { filters, kernel } => {
                    let x = &outputs[ins[0]];
                    let d = x.dims();
                    let s = ConvShape {
                        n: d[0],
                        c: d[1],
                        h: d[2],
                        w: d[3],
                        f: *filters,
                        k: *kernel,
                    };
                    let mut y = Tensor::zeros(&[s.n, s.f, s.h, s.w]);
                    layers::conv2d_forward(
                        x.data(),
                        self.weights[&format!("{name}/kernel")].data(),
                        self.weights[&format!("{name}/bias")].data(),
                        &s,
                        y.data_mut(),
                    );
                    (y, Cache::None)
                }
                LayerSpec::MaxPool2d { pool } => {
                    let x = &outputs[ins[0]];
                    let d = x.dims();
                    let (oh, ow) = (d[2] / pool[0], d[3] / pool[1]);
                    let mut y = Tensor::zeros(&[d[0], d[1], oh, ow]);
                    let arg = layers::maxpool_forward(
                        x.data(),
                        d[0] * d[1],
                        d[2],
                        d[3],
                        pool[0],
                        pool[1],
                        y.data_mut(),
                    );
                    (y, Cache::Pool(arg))
                }
                LayerSpec::BatchNorm => {
                    let x = &outputs[ins[0]];
                    let s = bn_shape(x.dims());
                    let gamma = self.weights[&format!("{name}/gamma")].data();
                    let beta = self.weights[&format!("{name}/beta")].data();
                    let mname = format!("{name}/moving_mean");
                    let vname = format!("{name}/moving_var");
                    let eps = S::from_f64(BATCHNORM_EPS);
                    let mut y = Tensor::zeros(x.dims());
                    match mode {
                        Mode::Train => {
                            let mut mean = self.buffers[&mname].data().to_vec();
                            let mut var = self.buffers[&vname].data().to_vec();
                            let cache = layers::batchnorm_train(
                                x.data(),
                                gamma,
                                beta,
                                &s,
                                eps,
                                S::from_f64(BATCHNORM_MOMENTUM),
                                &mut mean,
                                &mut var,
                                y.data_mut(),
                            );
                            updates.push((mname, mean));
                            updates.push((vname, var));
                            (y, Cache::Norm(cache))
                        }
                        Mode::Infer => {
                            layers::batchnorm_infer(
                                x.data(),
                                gamma,
                                beta,
                                &s,
                                eps,
                                self.buffers[&mname].data(),
                                self.buffers[&vname].data(),
                                y.data_mut(),
                            );
                            (y, Cache::None)
                        }
                    }
                }
                LayerSpec::Dense { units } => {
                    let x = &outputs[ins[0]];
                    if x.dims().len() != 2 {
                        return Err(NnError::Graph(format!("dense {name} expects [N, F] input")));
                    }
                    let (n, fin) = (x.dims()[0], x.dims()[1]);
                    let mut y = Tensor::zeros(&[n, *units]);
                    layers::dense_forward(
                        x.data(),
                        self.weights[&format!("{name}/kernel")].data(),
                        self.weights[&format!("{name}/bias")].data(),
                        n,
                        fin,
                        *units,
                        y.data_mut(),
                    );
                    (y, Cache::None)
                }
                LayerSpec::Elu => {
                    let x = &outputs[ins[0]];
                    let data = x.data().iter().map(|&v| layers::elu(v)).collect();
                    (Tensor::new(x.dims().to_vec(), data)?, Cache::None)
                }
                LayerSpec::Dropout { rate } => {
                    let x = &outputs[ins[0]];
                    match (mode, rng.as_deref_mut()) {
                        (Mode::Train, Some(r)) if *rate > 0.0 => {
                            let keep = 1.0 - rate;
                            let scale = S::from_f64(1.0 / keep);
                            let mask: Vec<S> = (0..x.len())
                                .map(|_| if r.gen::<f64>() < keep { scale } else { S::zero() })
                                .collect();
                            let data = x.data().iter().zip(&mask).map(|(v, m)| *v * *m).collect();
                            (Tensor::new(x.dims().to_vec(), data)?, Cache::Mask(mask))
                        }
                        _ => (x.clone(), Cache::None),
                    }
                }
                LayerSpec::Softmax => {
                    let x = &outputs[ins[0]];
                    let w = *x.dims().last().unwrap();
                    let mut y = Tensor::zeros(x.dims());
                    layers::softmax_rows(x.data(), w, y.data_mut());
                    (y, Cache::None)
                }
                LayerSpec::Sigmoid => {
                    let x = &outputs[ins[0]];
                    let data = x.data().iter().map(|&v| layers::sigmoid(v)).collect();
                    (Tensor::new(x.dims().to_vec(), data)?, Cache::None)
                }
                LayerSpec::Flatten => {
                    let x = &outputs[ins[0]];
                    let n = x.batch();
                    (x.clone().reshape(vec![n, x.row_len()])?, Cache::None)
                }
                LayerSpec::Concat => {
                    let parts: Vec<&Tensor<S>> = ins.iter().map(|&i| &outputs[i]).collect();
                    (concat_last(&parts, name)?, Cache::None)
                }
                LayerSpec::BiLstm { units } => {
                    let x = &outputs[ins[0]];
                    let (n, t, f) = (x.dims()[0], x.dims()[1], x.dims()[2]);
                    let u = *units;
                    let step = |ti: usize| -> Vec<S> {
                        let mut v = Vec::with_capacity(n * f);
                        for ni in 0..n {
                            v.extend_from_slice(&x.data()[(ni * t + ti) * f..(ni * t + ti + 1) * f]);
                        }
                        v
                    };
                    let mut out = Tensor::zeros(&[n, 2 * u]);
                    let mut dirs = Vec::with_capacity(2);
                    for (di, dir) in ["fw", "bw"].iter().enumerate() {
                        let xs: Vec<Vec<S>> = if di == 0 {
                            (0..t).map(step).collect()
                        } else {
                            (0..t).rev().map(step).collect()
                        };
                        let w = LstmWeights {
                            kernel: self.weights[&format!("{name}/{dir}_kernel")].data(),
                            recurrent: self.weights[&format!("{name}/{dir}_recurrent")].data(),
                            bias: self.weights[&format!("{name}/{dir}_bias")].data(),
                        };
                        let cache = layers::lstm_forward(xs, &w, n, f, u);
                        let h = cache.hs.last().unwrap();
                        for ni in 0..n {
                            out.data_mut()[ni * 2 * u + di * u..ni * 2 * u + (di + 1) * u]
                                .copy_from_slice(&h[ni * u..(ni + 1) * u]);
                        }
                        dirs.push(cache);
                    }
                    let bw = dirs.pop().unwrap();
                    let fw = dirs.pop().unwrap();
                    (out, Cache::Lstm(Box::new([fw, bw])))
                }
                LayerSpec::TimeDistributedFold => {
                    let x = &outputs[ins[0]];
                    let d = x.dims();
                    let (n, t) = (d[0], d[1]);
                    let mut nd = vec![n * t];
                    nd.extend_from_slice(&d[2..]);
                    (x.clone().reshape(nd)?, Cache::Fold { n, t })
                }
                LayerSpec::TimeDistributedUnfold { fold } => {
                    let x = &outputs[ins[0]];
                    let Cache::Fold { n, t } = caches[self.index[fold]] else {
                        return Err(NnError::Graph(format!("{name}: {fold} is not a fold node")));
                    };
                    let mut nd = vec![n, t];
                    nd.extend_from_slice(&x.dims()[1..]);
                    (x.clone().reshape(nd)?, Cache::None)
                }
            };
            debug_assert_eq!(outputs.len(), idx);
            outputs.push(out);
            caches.push(cache);
        }
        Ok((Trace { outputs, caches }, updates))
    }
}

fn lookup<'a, S>(map: &'a Named<S>, name: &str) -> Result<&'a Tensor<S>> {
    map.get(name)
        .ok_or_else(|| NnError::Graph(format!("missing tensor {name}")))
}

fn check_loss(loss: f64) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(NnError::Training(format!("non-finite loss {loss}")))
    }
}

fn accumulate<S: Scalar>(slot: &mut Option<Tensor<S>>, g: Tensor<S>) {
    match slot {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
        None => *slot = Some(g),
    }
}

fn bn_shape(d: &[usize]) -> BnShape {
    BnShape {
        n: d[0],
        c: d[1],
        inner: d[2..].iter().product(),
    }
}

fn uniform<S: Scalar>(dims: &[usize], limit: f64, rng: &mut ChaCha8Rng) -> Tensor<S> {
    let n: usize = dims.iter().product();
    let data = (0..n).map(|_| S::from_f64(rng.gen_range(-limit..limit))).collect();
    Tensor::new(dims.to_vec(), data).expect("dims match")
}

fn concat_last<S: Scalar>(parts: &[&Tensor<S>], name: &str) -> Result<Tensor<S>> {
    let lead = &parts[0].dims()[..parts[0].dims().len() - 1];
    for p in parts {
        if &p.dims()[..p.dims().len() - 1] != lead {
            return Err(NnError::Shape {
                context: format!("concat {name}"),
                expected: lead.to_vec(),
                actual: p.dims().to_vec(),
            });
        }
    }
    let widths: Vec<usize> = parts.iter().map(|p| *p.dims().last().unwrap()).collect();
    let total: usize = widths.iter().sum();
    let rows: usize = lead.iter().product();
    let mut data = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for (p, &w) in parts.iter().zip(&widths) {
            data.extend_from_slice(&p.data()[r * w..(r + 1) * w]);
        }
    }
    let mut dims = lead.to_vec();
    dims.push(total);
    Tensor::new(dims, data)
}

fn infer_shapes(spec: &GraphSpec) -> Result<(HashMap<String, usize>, Vec<Shape>)> {
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut shapes: Vec<Shape> = Vec::with_capacity(spec.nodes.len());
    for (i, node) in spec.nodes.iter().enumerate() {
        let name = &node.name;
        let mut ins = Vec::new();
        for input in &node.inputs {
            let &j = index
                .get(input)
                .ok_or_else(|| NnError::Graph(format!("{name}: unknown input {input}")))?;
            ins.push(shapes[j].clone());
        }
        let expect_inputs = |k: usize| -> Result<()> {
            if ins.len() != k {
                Err(NnError::Graph(format!("{name}: expected {k} input(s), got {}", ins.len())))
            } else {
                Ok(())
            }
        };
        let static_only = |s: &Shape, rank: usize| -> Result<()> {
            if s.time || s.dims.len() != rank {
                Err(NnError::Graph(format!(
                    "{name}: expected a rank-{rank} per-sample tensor, got {:?}",
                    s.dims
                )))
            } else {
                Ok(())
            }
        };
        let shape = match &node.layer {
            LayerSpec::Input { dims, sequence } => {
                expect_inputs(0)?;
                Shape {
                    time: *sequence,
                    dims: dims.clone(),
                }
            }
            LayerSpec::Conv2d { filters, kernel } => {
                expect_inputs(1)?;
                static_only(&ins[0], 3)?;
                if kernel % 2 == 0 {
                    return Err(NnError::Graph(format!("{name}: kernel must be odd")));
                }
                Shape {
                    time: false,
                    dims: vec![*filters, ins[0].dims[1], ins[0].dims[2]],
                }
            }
            LayerSpec::MaxPool2d { pool } => {
                expect_inputs(1)?;
                static_only(&ins[0], 3)?;
                let d = &ins[0].dims;
                if d[1] / pool[0] == 0 || d[2] / pool[1] == 0 {
                    return Err(NnError::Graph(format!("{name}: pooling collapses {d:?}")));
                }
                Shape {
                    time: false,
                    dims: vec![d[0], d[1] / pool[0], d[2] / pool[1]],
                }
            }
            LayerSpec::BatchNorm => {
                expect_inputs(1)?;
                if ins[0].time || ins[0].dims.is_empty() {
                    return Err(NnError::Graph(format!("{name}: batchnorm needs [N, C, …]")));
                }
                ins[0].clone()
            }
            LayerSpec::Dense { units } => {
                expect_inputs(1)?;
                static_only(&ins[0], 1)?;
                Shape {
                    time: false,
                    dims: vec![*units],
                }
            }
            LayerSpec::Elu | LayerSpec::Sigmoid | LayerSpec::Softmax => {
                expect_inputs(1)?;
                ins[0].clone()
            }
            LayerSpec::Dropout { rate } => {
                expect_inputs(1)?;
                if !(0.0..1.0).contains(rate) {
                    return Err(NnError::Graph(format!("{name}: dropout rate {rate}")));
                }
                ins[0].clone()
            }
            LayerSpec::Flatten => {
                expect_inputs(1)?;
                if ins[0].time {
                    return Err(NnError::Graph(format!("{name}: cannot flatten a sequence")));
                }
                Shape {
                    time: false,
                    dims: vec![ins[0].dims.iter().product()],
                }
            }
            LayerSpec::Concat => {
                if ins.is_empty() {
                    return Err(NnError::Graph(format!("{name}: concat needs inputs")));
                }
                let first = &ins[0];
                let mut width = 0;
                for s in &ins {
                    if s.time != first.time
                        || s.dims.len() != first.dims.len()
                        || s.dims[..s.dims.len() - 1] != first.dims[..first.dims.len() - 1]
                    {
                        return Err(NnError::Graph(format!("{name}: incompatible concat inputs")));
                    }
                    width += s.dims.last().unwrap();
                }
                let mut dims = first.dims.clone();
                *dims.last_mut().unwrap() = width;
                Shape {
                    time: first.time,
                    dims,
                }
            }
            LayerSpec::BiLstm { units } => {
                expect_inputs(1)?;
                if !ins[0].time || ins[0].dims.len() != 1 {
                    return Err(NnError::Graph(format!("{name}: bilstm needs [N, T, F]")));
                }
                Shape {
                    time: false,
                    dims: vec![2 * units],
                }
            }
            LayerSpec::TimeDistributedFold => {
                expect_inputs(1)?;
                if !ins[0].time {
                    return Err(NnError::Graph(format!("{name}: fold needs a sequence")));
                }
                Shape {
                    time: false,
                    dims: ins[0].dims.clone(),
                }
            }
            LayerSpec::TimeDistributedUnfold { fold } => {
                expect_inputs(1)?;
                match index.get(fold).map(|&j| &spec.nodes[j].layer) {
                    Some(LayerSpec::TimeDistributedFold) => {}
                    _ => return Err(NnError::Graph(format!("{name}: {fold} is not a fold node"))),
                }
                Shape {
                    time: true,
                    dims: ins[0].dims.clone(),
                }
            }
        };
        if index.insert(name.clone(), i).is_some() {
            return Err(NnError::Graph(format!("duplicate node name {name}")));
        }
        shapes.push(shape);
    }
    for head in &spec.heads {
        if !index.contains_key(&head.node) {
            return Err(NnError::Graph(format!("head {} refers to unknown node", head.name)));
        }
    }
    Ok((index, shapes))
}
