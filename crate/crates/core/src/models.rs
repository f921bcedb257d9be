//! Effect parameter models, effect selection models and their training and
//! inference wrappers.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use fxtutor_nn::{
    load_checkpoint, save_checkpoint, train_loop, BatchSource, EpochRecord, GraphSpec, History, LayerSpec, LossKind,
    ModelGraph, Named, Tensor, TrainConfig,
};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{FeatureStore, ParamExample, SelectionExample, HISTORY_WIDTH};
use crate::dsp::{EffectKind, EffectStep, DISTORTION_MODES};
use crate::error::{Error, Result};
use crate::features::{FeatureConfig, FeaturePair};

/// Layer widths for one model family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchProfile {
    pub name: String,
    pub conv_filters: [usize; 3],
    pub fc_units: usize,
    pub lstm_units: usize,
    pub dropout: f64,
}

impl ArchProfile {
    pub fn paper() -> Self {
        Self {
            name: "paper".into(),
            conv_filters: [64, 128, 128],
            fc_units: 128,
            lstm_units: 128,
            dropout: 0.5,
        }
    }

    pub fn desk() -> Self {
        Self {
            name: "desk".into(),
            conv_filters: [16, 32, 32],
            fc_units: 64,
            lstm_units: 32,
            dropout: 0.5,
        }
    }

    /// Smallest profile; for smoke runs on a single core.
    pub fn tiny() -> Self {
        Self {
            name: "tiny".into(),
            conv_filters: [8, 16, 16],
            fc_units: 32,
            lstm_units: 16,
            dropout: 0.5,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "desk" => Ok(Self::desk()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::Config(format!("unknown architecture profile {other:?}"))),
        }
    }

    fn halved(&self) -> [usize; 3] {
        self.conv_filters.map(|f| (f / 2).max(1))
    }
}

/// Fixed affine input scaling applied when features enter a network.
const MEL_OFFSET: f32 = 30.0;
const MEL_SCALE: f32 = 40.0;
const MFCC_SCALE: f32 = 100.0;

fn push_scaled(dst_mel: &mut Vec<f32>, dst_mfcc: &mut Vec<f32>, mel: &[f32], mfcc: &[f32]) {
    dst_mel.extend(mel.iter().map(|v| (v + MEL_OFFSET) / MEL_SCALE));
    dst_mfcc.extend(mfcc.iter().map(|v| v / MFCC_SCALE));
}

fn push_pair(mel: &mut Vec<f32>, mfcc: &mut Vec<f32>, store: &FeatureStore, input: usize, target: usize) {
    push_scaled(mel, mfcc, store.mel(input), store.mfcc(input));
    push_scaled(mel, mfcc, store.mel(target), store.mfcc(target));
}

fn named(items: Vec<(&str, Tensor<f32>)>) -> Named<f32> {
    items.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

/// 3 × (conv 3×3 → ELU → max-pool), optionally preceded by batch norm.
fn conv_trunk(g: &mut GraphSpec, prefix: &str, input: &str, filters: [usize; 3], pool: [usize; 2], bn: bool) -> String {
    let mut x = input.to_string();
    if bn {
        x = g.push(&format!("{prefix}_bn"), LayerSpec::BatchNorm, &[&x]);
    }
    for (i, &f) in filters.iter().enumerate() {
        let c = g.push(&format!("{prefix}_conv{i}"), LayerSpec::Conv2d { filters: f, kernel: 3 }, &[&x]);
        let e = g.push(&format!("{prefix}_elu{i}"), LayerSpec::Elu, &[&c]);
        x = g.push(&format!("{prefix}_pool{i}"), LayerSpec::MaxPool2d { pool }, &[&e]);
    }
    g.push(&format!("{prefix}_flat"), LayerSpec::Flatten, &[&x])
}

const MEL_POOL: [usize; 2] = [4, 4];
const MFCC_POOL: [usize; 2] = [2, 4];

/// Both feature trunks joined by concatenation.
fn dual_trunk(g: &mut GraphSpec, mel: &str, mfcc: &str, filters: [usize; 3]) -> String {
    let a = conv_trunk(g, "mel", mel, filters, MEL_POOL, false);
    let b = conv_trunk(g, "mfcc", mfcc, filters, MFCC_POOL, true);
    g.push("trunk_concat", LayerSpec::Concat, &[&a, &b])
}

fn fc_block(g: &mut GraphSpec, name: &str, input: &str, units: usize, dropout: f64) -> String {
    let d = g.push(name, LayerSpec::Dense { units }, &[input]);
    let e = g.push(&format!("{name}_elu"), LayerSpec::Elu, &[&d]);
    g.push(&format!("{name}_drop"), LayerSpec::Dropout { rate: dropout }, &[&e])
}

/// Feature tensor shapes for a config and clip length.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub n_mels: usize,
    pub n_mfcc: usize,
    pub frames: usize,
}

impl InputShape {
    pub fn new(cfg: &FeatureConfig, samples: usize) -> Self {
        Self {
            n_mels: cfg.n_mels,
            n_mfcc: cfg.n_mfcc,
            frames: cfg.frames(samples),
        }
    }

    fn mel(&self) -> [usize; 3] {
        [2, self.n_mels, self.frames]
    }

    fn mfcc(&self) -> [usize; 3] {
        [2, self.n_mfcc, self.frames]
    }
}

pub const CONTINUOUS_HEAD: &str = "continuous";
pub const MODE_HEAD: &str = "mode";
pub const EFFECT_HEAD: &str = "effect";
pub const EFFECTS_HEAD: &str = "effects";

/// Graph of an effect parameter model.
pub fn param_graph(effect: EffectKind, profile: &ArchProfile, shape: InputShape) -> GraphSpec {
    let mut g = GraphSpec::default();
    let mel = g.input("mel", &shape.mel(), false);
    let mfcc = g.input("mfcc", &shape.mfcc(), false);
    let t = dual_trunk(&mut g, &mel, &mfcc, profile.conv_filters);
    let f1 = fc_block(&mut g, "fc1", &t, profile.fc_units, profile.dropout);
    let f2 = fc_block(&mut g, "fc2", &f1, profile.fc_units, profile.dropout);
    let c = g.push(CONTINUOUS_HEAD, LayerSpec::Dense { units: effect.continuous_len() }, &[&f2]);
    g.head(CONTINUOUS_HEAD, &c, LossKind::MeanSquaredError);
    if effect.has_categorical() {
        let logits = g.push("mode_logits", LayerSpec::Dense { units: DISTORTION_MODES }, &[&f2]);
        let sm = g.push(MODE_HEAD, LayerSpec::Softmax, &[&logits]);
        g.head(MODE_HEAD, &sm, LossKind::CategoricalCrossEntropy);
    }
    g
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectorKind {
    Rnn,
    RnnNi,
    CnnMultilabel,
}

impl SelectorKind {
    pub const ALL: [SelectorKind; 3] = [SelectorKind::Rnn, SelectorKind::RnnNi, SelectorKind::CnnMultilabel];

    pub fn name(self) -> &'static str {
        match self {
            Self::Rnn => "rnn",
            Self::RnnNi => "rnn_ni",
            Self::CnnMultilabel => "cnn_multilabel",
        }
    }

    pub fn is_sequence(self) -> bool {
        self != Self::CnnMultilabel
    }
}

impl fmt::Display for SelectorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SelectorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown selector kind {s:?}")))
    }
}

/// Graph of an effect selection model.
pub fn selector_graph(kind: SelectorKind, profile: &ArchProfile, shape: InputShape) -> GraphSpec {
    let mut g = GraphSpec::default();
    if kind == SelectorKind::CnnMultilabel {
        let mel = g.input("mel", &shape.mel(), false);
        let mfcc = g.input("mfcc", &shape.mfcc(), false);
        let t = dual_trunk(&mut g, &mel, &mfcc, profile.conv_filters);
        let f1 = fc_block(&mut g, "fc1", &t, profile.fc_units, profile.dropout);
        let f2 = fc_block(&mut g, "fc2", &f1, profile.fc_units, profile.dropout);
        let logits = g.push("effects_logits", LayerSpec::Dense { units: EffectKind::ALL.len() }, &[&f2]);
        let s = g.push(EFFECTS_HEAD, LayerSpec::Sigmoid, &[&logits]);
        g.head(EFFECTS_HEAD, &s, LossKind::BinaryCrossEntropy);
        return g;
    }
    let mel = g.input("mel", &shape.mel(), true);
    let mfcc = g.input("mfcc", &shape.mfcc(), true);
    let hist = g.input("history", &[HISTORY_WIDTH], true);
    let fm = g.push("fold_mel", LayerSpec::TimeDistributedFold, &[&mel]);
    let fc = g.push("fold_mfcc", LayerSpec::TimeDistributedFold, &[&mfcc]);
    let t = dual_trunk(&mut g, &fm, &fc, profile.halved());
    let d = g.push("step_fc", LayerSpec::Dense { units: profile.fc_units }, &[&t]);
    let e = g.push("step_fc_elu", LayerSpec::Elu, &[&d]);
    let un = g.push("unfold", LayerSpec::TimeDistributedUnfold { fold: fm.clone() }, &[&e]);
    let cat = g.push("with_history", LayerSpec::Concat, &[&un, &hist]);
    let l = g.push("bilstm", LayerSpec::BiLstm { units: profile.lstm_units }, &[&cat]);
    let f = fc_block(&mut g, "fc", &l, profile.fc_units, profile.dropout);
    let logits = g.push("effect_logits", LayerSpec::Dense { units: EffectKind::ALL.len() }, &[&f]);
    let s = g.push(EFFECT_HEAD, LayerSpec::Softmax, &[&logits]);
    g.head(EFFECT_HEAD, &s, LossKind::CategoricalCrossEntropy);
    g
}

/// What a checkpoint contains; stored as a JSON sidecar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub effect: Option<EffectKind>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub selector: Option<SelectorKind>,
    pub profile: ArchProfile,
    pub input: InputShape,
    pub feature_config: FeatureConfig,
    pub feature_config_hash: String,
    #[serde(default)]
    pub history: Option<History>,
}

fn sidecar(path: &Path) -> std::path::PathBuf {
    path.with_extension("json")
}

fn save_model(graph: &ModelGraph<f32>, meta: &ModelMeta, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    save_checkpoint(graph, path)?;
    fs::write(sidecar(path), serde_json::to_string_pretty(meta)?)?;
    Ok(())
}

fn load_model(path: &Path) -> Result<(ModelGraph<f32>, ModelMeta)> {
    let graph = load_checkpoint::<f32>(path)?;
    let meta: ModelMeta = serde_json::from_str(&fs::read_to_string(sidecar(path))?)?;
    if meta.feature_config.hash() != meta.feature_config_hash {
        return Err(Error::Config(format!(
            "{}: feature config does not match its recorded hash",
            path.display()
        )));
    }
    Ok((graph, meta))
}

#[derive(Clone, Debug)]
pub struct EffectParamModel {
    pub effect: EffectKind,
    pub graph: ModelGraph<f32>,
    pub meta: ModelMeta,
}

pub fn build_param_model(
    effect: EffectKind,
    profile: &ArchProfile,
    features: &FeatureConfig,
    shape: InputShape,
    seed: u64,
) -> Result<EffectParamModel> {
    let graph = ModelGraph::build(param_graph(effect, profile, shape), seed)?;
    Ok(EffectParamModel {
        effect,
        graph,
        meta: ModelMeta {
            effect: Some(effect),
            selector: None,
            profile: profile.clone(),
            input: shape,
            feature_config: features.clone(),
            feature_config_hash: features.hash(),
            history: None,
        },
    })
}

impl EffectParamModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        save_model(&self.graph, &self.meta, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (graph, meta) = load_model(path)?;
        let effect = meta
            .effect
            .ok_or_else(|| Error::Config(format!("{} is not a parameter model", path.display())))?;
        Ok(Self { effect, graph, meta })
    }
}

/// Mini-batches of parameter pairs drawn from a feature store.
pub struct ParamBatches<'a> {
    pub store: &'a FeatureStore,
    pub examples: &'a [ParamExample],
}

impl BatchSource<f32> for ParamBatches<'_> {
    fn len(&self) -> usize {
        self.examples.len()
    }

    fn batch(&self, indices: &[usize]) -> fxtutor_nn::Result<(Named<f32>, Named<f32>)> {
        let s = self.store;
        let b = indices.len();
        let (mut mel, mut mfcc) = (Vec::new(), Vec::new());
        let first = &self.examples[indices[0]];
        let k = first.continuous.len();
        let mut cont = Vec::with_capacity(b * k);
        let mut modes = Vec::new();
        for &i in indices {
            let ex = &self.examples[i];
            push_pair(&mut mel, &mut mfcc, s, ex.input, ex.target);
            cont.extend(ex.continuous.iter().map(|&v| v as f32));
            if let Some(m) = ex.categorical {
                let mut row = vec![0.0f32; DISTORTION_MODES];
                row[m] = 1.0;
                modes.extend(row);
            }
        }
        let inputs = named(vec![
            ("mel", Tensor::new(vec![b, 2, s.n_mels, s.frames], mel)?),
            ("mfcc", Tensor::new(vec![b, 2, s.n_mfcc, s.frames], mfcc)?),
        ]);
        let mut targets = named(vec![(CONTINUOUS_HEAD, Tensor::new(vec![b, k], cont)?)]);
        if first.categorical.is_some() {
            targets.insert(MODE_HEAD.into(), Tensor::new(vec![b, DISTORTION_MODES], modes)?);
        }
        Ok((inputs, targets))
    }
}

pub fn train_param_model(
    model: &mut EffectParamModel,
    store: &FeatureStore,
    train: &[ParamExample],
    val: &[ParamExample],
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<History> {
    if let Some(ex) = train.iter().chain(val).find(|e| e.effect != model.effect) {
        return Err(Error::Input(format!(
            "{} model given a {} example",
            model.effect, ex.effect
        )));
    }
    let history = train_loop(
        &mut model.graph,
        &ParamBatches { store, examples: train },
        &ParamBatches { store, examples: val },
        cfg,
        on_epoch,
    )?;
    model.meta.history = Some(history.clone());
    Ok(history)
}

fn pair_tensors(pairs: &[&FeaturePair]) -> Result<Named<f32>> {
    let p0 = pairs
        .first()
        .ok_or_else(|| Error::Input("no feature pairs given".into()))?;
    let (mut mel, mut mfcc) = (Vec::new(), Vec::new());
    for p in pairs {
        if (p.n_mels, p.n_mfcc, p.frames) != (p0.n_mels, p0.n_mfcc, p0.frames) {
            return Err(Error::Input("feature pairs differ in shape".into()));
        }
        push_scaled(&mut mel, &mut mfcc, &p.mel, &p.mfcc);
    }
    let b = pairs.len();
    Ok(named(vec![
        ("mel", Tensor::new(vec![b, 2, p0.n_mels, p0.frames], mel)?),
        ("mfcc", Tensor::new(vec![b, 2, p0.n_mfcc, p0.frames], mfcc)?),
    ]))
}

/// Turns raw head outputs into a valid step: continuous values clamped to [0, 1], mode by argmax.
pub fn decode_params(effect: EffectKind, continuous: &[f32], mode_probs: Option<&[f32]>) -> EffectStep {
    let categorical = mode_probs.map(|p| {
        (0..p.len())
            .max_by(|&a, &b| p[a].total_cmp(&p[b]).then(b.cmp(&a)))
            .unwrap_or(0)
    });
    EffectStep {
        effect,
        continuous: continuous
            .iter()
            .map(|&v| if v.is_finite() { (v as f64).clamp(0.0, 1.0) } else { 0.5 })
            .collect(),
        categorical: if effect.has_categorical() { categorical.or(Some(0)) } else { None },
    }
}

pub fn predict_params_batch(model: &EffectParamModel, pairs: &[&FeaturePair]) -> Result<Vec<EffectStep>> {
    let out = model.graph.predict(&pair_tensors(pairs)?)?;
    let cont = &out[CONTINUOUS_HEAD];
    let k = cont.row_len();
    let modes = out.get(MODE_HEAD);
    Ok((0..pairs.len())
        .map(|i| {
            let m = modes.map(|t| &t.data()[i * DISTORTION_MODES..(i + 1) * DISTORTION_MODES]);
            decode_params(model.effect, &cont.data()[i * k..(i + 1) * k], m)
        })
        .collect())
}

pub fn predict_params(model: &EffectParamModel, pair: &FeaturePair) -> Result<EffectStep> {
    Ok(predict_params_batch(model, &[pair])?.remove(0))
}

#[derive(Clone, Debug)]
pub struct SelectorModel {
    pub kind: SelectorKind,
    pub graph: ModelGraph<f32>,
    pub meta: ModelMeta,
}

pub fn build_selector(
    kind: SelectorKind,
    profile: &ArchProfile,
    features: &FeatureConfig,
    shape: InputShape,
    seed: u64,
) -> Result<SelectorModel> {
    let graph = ModelGraph::build(selector_graph(kind, profile, shape), seed)?;
    Ok(SelectorModel {
        kind,
        graph,
        meta: ModelMeta {
            effect: None,
            selector: Some(kind),
            profile: profile.clone(),
            input: shape,
            feature_config: features.clone(),
            feature_config_hash: features.hash(),
            history: None,
        },
    })
}

impl SelectorModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        save_model(&self.graph, &self.meta, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (graph, meta) = load_model(path)?;
        let kind = meta
            .selector
            .ok_or_else(|| Error::Config(format!("{} is not a selection model", path.display())))?;
        Ok(Self { kind, graph, meta })
    }
}

/// Selection training data in the layout each selector kind expects.
///
/// `rnn` sees every step's (audio so far, target) pair; `rnn_ni` sees the
/// first pair repeated while the history one-hots still advance;
/// `cnn_multilabel` uses one example per chain (initial pair, effect set).
pub struct SelectionBatches<'a> {
    pub kind: SelectorKind,
    pub store: &'a FeatureStore,
    examples: Vec<&'a SelectionExample>,
}

impl<'a> SelectionBatches<'a> {
    pub fn new(kind: SelectorKind, store: &'a FeatureStore, examples: &'a [SelectionExample]) -> Self {
        let examples = examples
            .iter()
            .filter(|e| kind.is_sequence() || e.steps.len() == 1)
            .collect();
        Self { kind, store, examples }
    }

    pub fn examples(&self) -> &[&'a SelectionExample] {
        &self.examples
    }

    fn buckets(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut by_len: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, e) in self.examples.iter().enumerate() {
            let key = if self.kind.is_sequence() { e.steps.len() } else { 1 };
            by_len.entry(key).or_default().push(i);
        }
        by_len
    }

    /// Network inputs for examples that share a step count.
    pub fn inputs(&self, indices: &[usize]) -> Result<Named<f32>> {
        let s = self.store;
        let b = indices.len();
        let (mut mel, mut mfcc, mut hist) = (Vec::new(), Vec::new(), Vec::new());
        let t = if self.kind.is_sequence() {
            self.examples[indices[0]].steps.len()
        } else {
            1
        };
        for &i in indices {
            let e = self.examples[i];
            if self.kind.is_sequence() && e.steps.len() != t {
                return Err(Error::Input("mixed step counts in one batch".into()));
            }
            for step in &e.steps[..t] {
                let render = if self.kind == SelectorKind::RnnNi {
                    e.steps[0].render
                } else {
                    step.render
                };
                push_pair(&mut mel, &mut mfcc, s, render, e.target);
                let mut row = [0.0f32; HISTORY_WIDTH];
                row[step.slot] = 1.0;
                hist.extend(row);
            }
        }
        if !self.kind.is_sequence() {
            return Ok(named(vec![
                ("mel", Tensor::new(vec![b, 2, s.n_mels, s.frames], mel)?),
                ("mfcc", Tensor::new(vec![b, 2, s.n_mfcc, s.frames], mfcc)?),
            ]));
        }
        Ok(named(vec![
            ("mel", Tensor::new(vec![b, t, 2, s.n_mels, s.frames], mel)?),
            ("mfcc", Tensor::new(vec![b, t, 2, s.n_mfcc, s.frames], mfcc)?),
            ("history", Tensor::new(vec![b, t, HISTORY_WIDTH], hist)?),
        ]))
    }
}

impl BatchSource<f32> for SelectionBatches<'_> {
    fn len(&self) -> usize {
        self.examples.len()
    }

    fn batch(&self, indices: &[usize]) -> fxtutor_nn::Result<(Named<f32>, Named<f32>)> {
        let inputs = self
            .inputs(indices)
            .map_err(|e| fxtutor_nn::NnError::Input(e.to_string()))?;
        let n = EffectKind::ALL.len();
        let mut y = vec![0.0f32; indices.len() * n];
        for (row, &i) in indices.iter().enumerate() {
            let e = self.examples[i];
            if self.kind.is_sequence() {
                y[row * n + e.label.index()] = 1.0;
            } else {
                for eff in &e.chain {
                    y[row * n + eff.index()] = 1.0;
                }
            }
        }
        let head = if self.kind.is_sequence() { EFFECT_HEAD } else { EFFECTS_HEAD };
        Ok((inputs, named(vec![(head, Tensor::new(vec![indices.len(), n], y)?)])))
    }

    fn plan(&self, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
        let mut batches = Vec::new();
        for (_, mut idx) in self.buckets() {
            idx.shuffle(rng);
            batches.extend(idx.chunks(batch_size.max(1)).map(|c| c.to_vec()));
        }
        batches.shuffle(rng);
        batches
    }

    fn eval_plan(&self, batch_size: usize) -> Vec<Vec<usize>> {
        self.buckets()
            .into_values()
            .flat_map(|idx| idx.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect::<Vec<_>>())
            .collect()
    }
}

pub fn train_selector(
    model: &mut SelectorModel,
    store: &FeatureStore,
    train: &[SelectionExample],
    val: &[SelectionExample],
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<History> {
    let history = train_loop(
        &mut model.graph,
        &SelectionBatches::new(model.kind, store, train),
        &SelectionBatches::new(model.kind, store, val),
        cfg,
        on_epoch,
    )?;
    model.meta.history = Some(history.clone());
    Ok(history)
}

/// Selector input for one decision: one feature pair and history slot per step.
#[derive(Clone, Debug)]
pub struct SelectorQuery<'a> {
    pub pairs: Vec<&'a FeaturePair>,
    pub slots: Vec<usize>,
}

/// Model output for one decision.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    /// Per-effect probability in [`EffectKind::ALL`] order, before masking.
    pub probs: Vec<f64>,
    /// Unused effects, most probable first.
    pub ranked: Vec<EffectKind>,
}

impl Ranking {
    pub fn from_probs(probs: Vec<f64>, used: &[EffectKind]) -> Result<Self> {
        let mut ranked: Vec<EffectKind> = EffectKind::ALL.iter().copied().filter(|e| !used.contains(e)).collect();
        if ranked.is_empty() {
            return Err(Error::Exhausted);
        }
        ranked.sort_by(|a, b| probs[b.index()].total_cmp(&probs[a.index()]).then(a.cmp(b)));
        Ok(Self { probs, ranked })
    }

    pub fn best(&self) -> EffectKind {
        self.ranked[0]
    }
}

fn query_tensors(kind: SelectorKind, q: &SelectorQuery) -> Result<Named<f32>> {
    if q.pairs.is_empty() || q.pairs.len() != q.slots.len() {
        return Err(Error::Input("selector query needs one slot per step".into()));
    }
    if !kind.is_sequence() {
        return pair_tensors(&q.pairs[..1]);
    }
    let mut t = pair_tensors(&q.pairs)?;
    let steps = q.pairs.len();
    for key in ["mel", "mfcc"] {
        let v = t.remove(key).expect("present");
        let mut dims = vec![1];
        dims.extend_from_slice(v.dims());
        t.insert(key.into(), v.reshape(dims)?);
    }
    let mut hist = vec![0.0f32; steps * HISTORY_WIDTH];
    for (i, &s) in q.slots.iter().enumerate() {
        if s >= HISTORY_WIDTH {
            return Err(Error::Input(format!("history slot {s} out of range")));
        }
        hist[i * HISTORY_WIDTH + s] = 1.0;
    }
    t.insert("history".into(), Tensor::new(vec![1, steps, HISTORY_WIDTH], hist)?);
    Ok(t)
}

/// Raw per-effect probabilities for one query.
pub fn selector_probs(model: &SelectorModel, q: &SelectorQuery) -> Result<Vec<f64>> {
    let out = model.graph.predict(&query_tensors(model.kind, q)?)?;
    let head = if model.kind.is_sequence() { EFFECT_HEAD } else { EFFECTS_HEAD };
    Ok(out[head].data().iter().map(|&v| v as f64).collect())
}

/// Ranks the unused effects; errors with [`Error::Exhausted`] when all are used.
pub fn predict_next_effect(model: &SelectorModel, q: &SelectorQuery, used: &[EffectKind]) -> Result<Ranking> {
    Ranking::from_probs(selector_probs(model, q)?, used)
}

/// Multi-label decoding: effects with probability ≥ 0.5 by descending
/// probability, at least the single most probable one.
pub fn decode_effect_set(probs: &[f64]) -> Vec<EffectKind> {
    let mut order: Vec<EffectKind> = EffectKind::ALL.to_vec();
    order.sort_by(|a, b| probs[b.index()].total_cmp(&probs[a.index()]).then(a.cmp(b)));
    let n = order.iter().filter(|e| probs[e.index()] >= 0.5).count().max(1);
    order.truncate(n);
    order
}

/// Held-out selection accuracy, bucketed by step number (sequence models)
/// or by number of effects (multi-label model).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub kind: Option<SelectorKind>,
    /// Top choice equals the recorded next effect.
    pub exact: [Option<f64>; 5],
    pub exact_all: f64,
    /// Top unused choice is one of the effects still missing from the target's chain.
    pub admissible: [Option<f64>; 5],
    pub admissible_all: f64,
    pub counts: [usize; 5],
}

pub fn selection_accuracy(
    model: &SelectorModel,
    store: &FeatureStore,
    test: &[SelectionExample],
    batch_size: usize,
) -> Result<AccuracyReport> {
    let data = SelectionBatches::new(model.kind, store, test);
    let mut exact = [0usize; 5];
    let mut adm = [0usize; 5];
    let mut counts = [0usize; 5];
    let n = EffectKind::ALL.len();
    for idx in data.eval_plan(batch_size) {
        let out = model.graph.predict(&data.inputs(&idx)?)?;
        let head = if model.kind.is_sequence() { EFFECT_HEAD } else { EFFECTS_HEAD };
        let probs = out[head].data();
        for (row, &i) in idx.iter().enumerate() {
            let e = data.examples()[i];
            let p: Vec<f64> = probs[row * n..(row + 1) * n].iter().map(|&v| v as f64).collect();
            if model.kind.is_sequence() {
                let bucket = e.steps.len() - 1;
                counts[bucket] += 1;
                let top = (0..n).max_by(|&a, &b| p[a].total_cmp(&p[b]).then(b.cmp(&a))).expect("5 outputs");
                if top == e.label.index() {
                    exact[bucket] += 1;
                }
                let used = e.used();
                let best = Ranking::from_probs(p, &used)?.best();
                if e.chain.contains(&best) {
                    adm[bucket] += 1;
                }
            } else {
                let bucket = e.chain.len() - 1;
                counts[bucket] += 1;
                let mut got = decode_effect_set(&p);
                let mut want = e.chain.clone();
                got.sort();
                want.sort();
                if got == want {
                    exact[bucket] += 1;
                    adm[bucket] += 1;
                }
            }
        }
    }
    let frac = |hits: &[usize; 5]| {
        let mut per = [None; 5];
        for i in 0..5 {
            if counts[i] > 0 {
                per[i] = Some(hits[i] as f64 / counts[i] as f64);
            }
        }
        let total: usize = counts.iter().sum();
        (per, hits.iter().sum::<usize>() as f64 / total.max(1) as f64)
    };
    let (exact_per, exact_all) = frac(&exact);
    let (adm_per, adm_all) = frac(&adm);
    Ok(AccuracyReport {
        kind: Some(model.kind),
        exact: exact_per,
        exact_all,
        admissible: adm_per,
        admissible_all: adm_all,
        counts,
    })
}
