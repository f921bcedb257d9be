//! The session loop: pick an effect, predict its parameters, render, score
//! against the target, and stop once the audio moves the wrong way too often.
//! Also the evaluation harness that runs whole systems over held-out pairs.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{derive_seed, map_maybe_par, Parallelism, INITIAL_SLOT};
use crate::dsp::{apply_effect, AudioBuffer, EffectKind, EffectStep};
use crate::features::{ClipFeatures, FeatureConfig, FeatureExtractor, FeaturePair};
use crate::metrics::{Analysis, Analyzer, MetricKind, MetricReport, MssmaeConfig};
use crate::models::{
    decode_effect_set, predict_next_effect, predict_params, predict_params_batch, selector_probs,
    EffectParamModel, InputShape, SelectorKind, SelectorModel, SelectorQuery,
};
use crate::{Error, Result};

/// Longest session: every effect at most once.
pub const MAX_STEPS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PolicyKind {
    #[serde(rename = "serum_rnn")]
    SerumRnn,
    #[serde(rename = "serum_rnn_ni")]
    SerumRnnNi,
    #[serde(rename = "serum_cnn")]
    SerumCnn,
    #[serde(rename = "serum_cnn_1s")]
    SerumCnn1s,
    #[serde(rename = "oracle")]
    Oracle,
    #[serde(rename = "random")]
    Random,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 6] = [
        PolicyKind::SerumRnn,
        PolicyKind::SerumRnnNi,
        PolicyKind::SerumCnn,
        PolicyKind::SerumCnn1s,
        PolicyKind::Oracle,
        PolicyKind::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::SerumRnn => "serum_rnn",
            Self::SerumRnnNi => "serum_rnn_ni",
            Self::SerumCnn => "serum_cnn",
            Self::SerumCnn1s => "serum_cnn_1s",
            Self::Oracle => "oracle",
            Self::Random => "random",
        }
    }

    /// The selection model this policy consults, if any.
    pub fn selector(self) -> Option<SelectorKind> {
        match self {
            Self::SerumRnn => Some(SelectorKind::Rnn),
            Self::SerumRnnNi => Some(SelectorKind::RnnNi),
            Self::SerumCnn | Self::SerumCnn1s => Some(SelectorKind::CnnMultilabel),
            Self::Oracle | Self::Random => None,
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown policy {s:?}")))
    }
}

/// A policy plus the seed its random choices derive from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub kind: PolicyKind,
    #[serde(default)]
    pub seed: u64,
}

impl Policy {
    pub fn new(kind: PolicyKind, seed: u64) -> Self {
        Self { kind, seed }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StopConfig {
    /// Metric increases tolerated before the session stops.
    pub tolerance: usize,
    pub mistake_metric: MetricKind,
}

impl Default for StopConfig {
    fn default() -> Self {
        Self {
            tolerance: 1,
            mistake_metric: MetricKind::Mssmae,
        }
    }
}

impl StopConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tolerance > MAX_STEPS {
            return Err(Error::Config(format!(
                "stop tolerance {} exceeds {MAX_STEPS}",
                self.tolerance
            )));
        }
        Ok(())
    }

    /// True when `next` is further from the target than `prev`.
    pub fn is_mistake(&self, prev: &MetricReport, next: &MetricReport) -> bool {
        let (a, b) = (prev.get(self.mistake_metric), next.get(self.mistake_metric));
        if self.mistake_metric.lower_is_better() {
            b > a
        } else {
            b < a
        }
    }
}

/// The five parameter models plus whichever selectors were trained.
#[derive(Clone, Debug)]
pub struct ModelSet {
    params: Vec<EffectParamModel>,
    selectors: BTreeMap<SelectorKind, SelectorModel>,
}

impl ModelSet {
    pub fn new(params: Vec<EffectParamModel>, selectors: Vec<SelectorModel>) -> Result<Self> {
        let mut by_effect: Vec<Option<EffectParamModel>> = vec![None; EffectKind::ALL.len()];
        for m in params {
            let slot = &mut by_effect[m.effect.index()];
            if slot.is_some() {
                return Err(Error::Config(format!("two parameter models for {}", m.effect)));
            }
            *slot = Some(m);
        }
        let params: Vec<EffectParamModel> = by_effect
            .into_iter()
            .zip(EffectKind::ALL)
            .map(|(m, e)| m.ok_or_else(|| Error::Config(format!("no parameter model for {e}"))))
            .collect::<Result<_>>()?;
        let set = Self {
            selectors: selectors.into_iter().map(|s| (s.kind, s)).collect(),
            params,
        };
        let meta = &set.params[0].meta;
        let metas = set
            .params
            .iter()
            .map(|m| &m.meta)
            .chain(set.selectors.values().map(|s| &s.meta));
        for m in metas {
            if m.feature_config_hash != meta.feature_config_hash || m.input != meta.input {
                return Err(Error::Config(
                    "models were trained on different feature configurations".into(),
                ));
            }
        }
        Ok(set)
    }

    pub fn params(&self, effect: EffectKind) -> &EffectParamModel {
        &self.params[effect.index()]
    }

    pub fn selector(&self, kind: SelectorKind) -> Option<&SelectorModel> {
        self.selectors.get(&kind)
    }

    pub fn feature_config(&self) -> &FeatureConfig {
        &self.params[0].meta.feature_config
    }

    pub fn input_shape(&self) -> InputShape {
        self.params[0].meta.input
    }

    /// Writes `params/<effect>.fxt` and `selectors/<kind>.fxt` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        for m in &self.params {
            m.save(&dir.join("params").join(format!("{}.fxt", m.effect)))?;
        }
        for s in self.selectors.values() {
            s.save(&dir.join("selectors").join(format!("{}.fxt", s.kind)))?;
        }
        Ok(())
    }

    /// Loads a directory written by [`ModelSet::save`]; selectors are optional.
    pub fn load(dir: &Path) -> Result<Self> {
        let params = EffectKind::ALL
            .iter()
            .map(|e| EffectParamModel::load(&dir.join("params").join(format!("{e}.fxt"))))
            .collect::<Result<Vec<_>>>()?;
        let mut selectors = Vec::new();
        for kind in SelectorKind::ALL {
            let path = dir.join("selectors").join(format!("{kind}.fxt"));
            if path.exists() {
                selectors.push(SelectorModel::load(&path)?);
            }
        }
        Self::new(params, selectors)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Running,
    /// Too many steps moved away from the target.
    Stopped,
    /// No effect left to apply.
    Exhausted,
}

#[derive(Clone, Debug)]
pub struct CommittedStep {
    pub step: EffectStep,
    pub audio: AudioBuffer,
    /// Rendered audio against the target.
    pub report: MetricReport,
    pub is_mistake: bool,
    analysis: Analysis,
}

/// What a policy would do next, before anything is rendered.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Suggestion {
    pub effect: EffectKind,
    pub step: EffectStep,
    /// Selector probabilities in [`EffectKind::ALL`] order, for model-driven policies.
    pub probs: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    pub effect: EffectKind,
    pub step: EffectStep,
    pub report: MetricReport,
    pub is_mistake: bool,
}

/// Effects decided up front by the multi-label selector.
#[derive(Clone, Debug)]
struct Plan {
    effects: Vec<EffectKind>,
    /// Present for `serum_cnn_1s`: parameters predicted from the original pair.
    params: Option<Vec<EffectStep>>,
}

#[derive(Clone, Debug)]
pub struct SessionState {
    pub input: AudioBuffer,
    pub target: AudioBuffer,
    pub policy: Policy,
    /// Input against the target.
    pub initial: MetricReport,
    pub committed: Vec<CommittedStep>,
    pub mistakes: usize,
    pub status: SessionStatus,
    /// Feature pairs built as model input; the one-shot policy stops at one.
    pub feature_extractions: usize,
    truth: Option<Vec<EffectKind>>,
    input_analysis: Analysis,
    target_analysis: Analysis,
    /// Model-input pair per state, index 0 being the untouched input.
    pairs: Vec<Option<FeaturePair>>,
    plan: Option<Plan>,
    rng: ChaCha8Rng,
}

impl SessionState {
    pub fn used(&self) -> Vec<EffectKind> {
        self.committed.iter().map(|c| c.step.effect).collect()
    }

    pub fn current_audio(&self) -> &AudioBuffer {
        self.committed.last().map_or(&self.input, |c| &c.audio)
    }

    pub fn current_report(&self) -> &MetricReport {
        self.committed.last().map_or(&self.initial, |c| &c.report)
    }

    /// Audio after `k` committed steps; 0 is the input.
    pub fn audio_at(&self, k: usize) -> Option<&AudioBuffer> {
        match k {
            0 => Some(&self.input),
            _ => self.committed.get(k - 1).map(|c| &c.audio),
        }
    }

    /// Spectral features after `k` committed steps.
    pub fn features_at(&self, k: usize) -> Option<&ClipFeatures> {
        (k <= self.committed.len()).then(|| &self.analysis_at(k).features)
    }

    pub fn target_features(&self) -> &ClipFeatures {
        &self.target_analysis.features
    }

    fn analysis_at(&self, k: usize) -> &Analysis {
        if k == 0 {
            &self.input_analysis
        } else {
            &self.committed[k - 1].analysis
        }
    }

    /// Steps that make up the session's output. A session stopped by the
    /// mistake rule ends on the step before the one that stopped it.
    pub fn kept_steps(&self) -> usize {
        match self.status {
            SessionStatus::Stopped => self.committed.len() - 1,
            _ => self.committed.len(),
        }
    }

    pub fn final_audio(&self) -> &AudioBuffer {
        self.audio_at(self.kept_steps()).expect("in range")
    }

    pub fn final_report(&self) -> &MetricReport {
        match self.kept_steps() {
            0 => &self.initial,
            k => &self.committed[k - 1].report,
        }
    }

    pub fn summary(&self) -> SessionSummary {
        SessionSummary {
            initial: self.initial,
            effects: self.used(),
            reports: self.committed.iter().map(|c| c.report).collect(),
            stopped: self.status == SessionStatus::Stopped,
        }
    }
}

/// Runs sessions against a fixed, shared model set.
#[derive(Clone, Debug)]
pub struct Engine {
    models: Arc<ModelSet>,
    analyzer: Analyzer,
}

impl Engine {
    pub fn new(models: Arc<ModelSet>, sample_rate: u32, mss: MssmaeConfig) -> Result<Self> {
        let features = FeatureExtractor::new(models.feature_config(), sample_rate)?;
        Ok(Self {
            models,
            analyzer: Analyzer::new(features, mss)?,
        })
    }

    pub fn models(&self) -> &ModelSet {
        &self.models
    }

    /// Sample counts whose feature frames match the models' input.
    pub fn clip_lengths(&self) -> std::ops::RangeInclusive<usize> {
        let hop = self.models.feature_config().hop;
        let frames = self.models.input_shape().frames;
        (frames - 1) * hop..=frames * hop - 1
    }

    pub fn analyzer(&self) -> &Analyzer {
        &self.analyzer
    }

    /// Opens a session. `truth` is the target's recorded chain, which only the
    /// oracle policy reads.
    pub fn start(
        &self,
        input: AudioBuffer,
        target: AudioBuffer,
        policy: Policy,
        truth: Option<&[EffectKind]>,
    ) -> Result<SessionState> {
        if input.sample_rate != target.sample_rate {
            return Err(Error::Input(format!(
                "sample rates differ: {} vs {}",
                input.sample_rate, target.sample_rate
            )));
        }
        if input.len() != target.len() {
            return Err(Error::Input(format!(
                "input has {} samples, target {}",
                input.len(),
                target.len()
            )));
        }
        if self.analyzer.features.sample_rate() != input.sample_rate {
            return Err(Error::Input(format!(
                "engine expects {} Hz audio, got {} Hz",
                self.analyzer.features.sample_rate(),
                input.sample_rate
            )));
        }
        if !self.clip_lengths().contains(&input.len()) {
            return Err(Error::Input(format!(
                "models expect clips of {:?} samples, got {}",
                self.clip_lengths(),
                input.len()
            )));
        }
        if let Some(kind) = policy.kind.selector() {
            if self.models.selector(kind).is_none() {
                return Err(Error::Config(format!("policy {} needs a {kind} selector", policy.kind)));
            }
        }
        if policy.kind == PolicyKind::Oracle && truth.is_none() {
            return Err(Error::Input("the oracle policy needs the ground-truth chain".into()));
        }
        let input_analysis = self.analyzer.analyse(&input)?;
        let target_analysis = self.analyzer.analyse(&target)?;
        let initial = self.analyzer.report(&input_analysis, &target_analysis)?;
        let mut state = SessionState {
            input,
            target,
            policy,
            initial,
            committed: Vec::new(),
            mistakes: 0,
            status: SessionStatus::Running,
            feature_extractions: 0,
            truth: truth.map(<[EffectKind]>::to_vec),
            input_analysis,
            target_analysis,
            pairs: vec![None],
            plan: None,
            rng: ChaCha8Rng::seed_from_u64(policy.seed),
        };
        if matches!(policy.kind, PolicyKind::SerumCnn | PolicyKind::SerumCnn1s) {
            state.plan = Some(self.plan(&mut state)?);
        }
        Ok(state)
    }

    fn plan(&self, state: &mut SessionState) -> Result<Plan> {
        let model = self.models.selector(SelectorKind::CnnMultilabel).expect("checked at start");
        self.ensure_pair(state, 0)?;
        let pair = state.pairs[0].as_ref().expect("built");
        let probs = selector_probs(model, &SelectorQuery { pairs: vec![pair], slots: vec![INITIAL_SLOT] })?;
        let effects = decode_effect_set(&probs);
        let params = if state.policy.kind == PolicyKind::SerumCnn1s {
            let steps = effects
                .iter()
                .map(|&e| predict_params(self.models.params(e), pair))
                .collect::<Result<Vec<_>>>()?;
            Some(steps)
        } else {
            None
        };
        Ok(Plan { effects, params })
    }

    fn ensure_pair(&self, state: &mut SessionState, k: usize) -> Result<()> {
        if state.pairs[k].is_none() {
            let pair = FeaturePair::from_clips(&state.analysis_at(k).features, &state.target_analysis.features)?;
            state.feature_extractions += 1;
            state.pairs[k] = Some(pair);
        }
        Ok(())
    }

    /// The policy's next move. Errors with [`Error::Exhausted`] (and marks the
    /// session exhausted) when the policy has nothing left to apply.
    pub fn suggest(&self, state: &mut SessionState) -> Result<Suggestion> {
        if state.status != SessionStatus::Running {
            return Err(Error::Input(format!("session is {:?}", state.status)));
        }
        match self.choose(state) {
            Err(Error::Exhausted) => {
                state.status = SessionStatus::Exhausted;
                Err(Error::Exhausted)
            }
            other => other,
        }
    }

    fn choose(&self, state: &mut SessionState) -> Result<Suggestion> {
        let used = state.used();
        if used.len() >= MAX_STEPS {
            return Err(Error::Exhausted);
        }
        let k = state.committed.len();
        let (effect, probs) = match state.policy.kind {
            PolicyKind::SerumRnn | PolicyKind::SerumRnnNi => {
                let kind = state.policy.kind.selector().expect("sequence policy");
                let model = self.models.selector(kind).expect("checked at start");
                let iterative = state.policy.kind == PolicyKind::SerumRnn;
                if iterative {
                    for j in 0..=k {
                        self.ensure_pair(state, j)?;
                    }
                } else {
                    self.ensure_pair(state, 0)?;
                }
                let pairs: Vec<&FeaturePair> = (0..=k)
                    .map(|j| state.pairs[if iterative { j } else { 0 }].as_ref().expect("built"))
                    .collect();
                let slots = std::iter::once(INITIAL_SLOT).chain(used.iter().map(|e| e.index())).collect();
                let ranking = predict_next_effect(model, &SelectorQuery { pairs, slots }, &used)?;
                (ranking.best(), Some(ranking.probs))
            }
            PolicyKind::SerumCnn | PolicyKind::SerumCnn1s => {
                let plan = state.plan.as_ref().expect("planned at start");
                let e = plan
                    .effects
                    .iter()
                    .copied()
                    .find(|e| !used.contains(e))
                    .ok_or(Error::Exhausted)?;
                (e, None)
            }
            PolicyKind::Oracle => {
                let truth = state.truth.as_ref().expect("checked at start");
                let e = truth.iter().copied().find(|e| !used.contains(e)).ok_or(Error::Exhausted)?;
                (e, None)
            }
            PolicyKind::Random => {
                let free: Vec<EffectKind> = EffectKind::ALL.iter().copied().filter(|e| !used.contains(e)).collect();
                let e = *free.choose(&mut state.rng).ok_or(Error::Exhausted)?;
                (e, None)
            }
        };
        let planned = state.plan.as_ref().and_then(|p| {
            let i = p.effects.iter().position(|&x| x == effect)?;
            p.params.as_ref().map(|steps| steps[i].clone())
        });
        let step = match planned {
            Some(step) => step,
            None => {
                self.ensure_pair(state, k)?;
                predict_params(self.models.params(effect), state.pairs[k].as_ref().expect("built"))?
            }
        };
        Ok(Suggestion { effect, step, probs })
    }

    /// Renders `step` on top of the current audio and applies the stopping rule.
    pub fn commit(&self, state: &mut SessionState, step: EffectStep, stop: &StopConfig) -> Result<StepResult> {
        stop.validate()?;
        if state.status != SessionStatus::Running {
            return Err(Error::Input(format!("session is {:?}", state.status)));
        }
        step.validate()?;
        if state.used().contains(&step.effect) {
            return Err(Error::Chain(format!("{} is already in the chain", step.effect)));
        }
        let audio = apply_effect(state.current_audio(), &step)?;
        let analysis = self.analyzer.analyse(&audio)?;
        let report = self.analyzer.report(&analysis, &state.target_analysis)?;
        let is_mistake = stop.is_mistake(state.current_report(), &report);
        state.committed.push(CommittedStep {
            step: step.clone(),
            audio,
            report,
            is_mistake,
            analysis,
        });
        state.pairs.push(None);
        if is_mistake {
            state.mistakes += 1;
        }
        if state.mistakes > stop.tolerance {
            state.status = SessionStatus::Stopped;
        } else if state.committed.len() >= MAX_STEPS {
            state.status = SessionStatus::Exhausted;
        }
        Ok(StepResult {
            effect: step.effect,
            step,
            report,
            is_mistake,
        })
    }

    /// What committing `step` would produce, without changing the session:
    /// the report against the target and the rendered audio's features.
    pub fn preview(&self, state: &SessionState, step: &EffectStep) -> Result<(MetricReport, ClipFeatures)> {
        step.validate()?;
        let audio = apply_effect(state.current_audio(), step)?;
        let analysis = self.analyzer.analyse(&audio)?;
        let report = self.analyzer.report(&analysis, &state.target_analysis)?;
        Ok((report, analysis.features))
    }

    /// Drops the last committed step and reopens the session.
    pub fn undo(&self, state: &mut SessionState) -> Result<()> {
        let last = state
            .committed
            .pop()
            .ok_or_else(|| Error::Input("nothing to undo".into()))?;
        state.pairs.pop();
        if last.is_mistake {
            state.mistakes -= 1;
        }
        state.status = SessionStatus::Running;
        Ok(())
    }

    /// One suggest-and-commit round.
    pub fn run_step(&self, state: &mut SessionState, stop: &StopConfig) -> Result<StepResult> {
        let s = self.suggest(state)?;
        self.commit(state, s.step, stop)
    }

    /// Steps until the policy stops, runs out of effects, or errs too often.
    pub fn run_session(
        &self,
        input: AudioBuffer,
        target: AudioBuffer,
        policy: Policy,
        stop: &StopConfig,
        truth: Option<&[EffectKind]>,
    ) -> Result<SessionState> {
        stop.validate()?;
        let mut state = self.start(input, target, policy, truth)?;
        while state.status == SessionStatus::Running {
            match self.run_step(&mut state, stop) {
                Ok(_) | Err(Error::Exhausted) => {}
                Err(e) => return Err(e),
            }
        }
        Ok(state)
    }
}

/// A held-out evaluation case.
#[derive(Clone, Debug)]
pub struct EvalPair {
    pub input: AudioBuffer,
    pub target: AudioBuffer,
    /// Effects that produced the target, in order.
    pub chain: Vec<EffectKind>,
}

/// Metric trajectory of one finished session.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub initial: MetricReport,
    pub effects: Vec<EffectKind>,
    /// One report per committed step.
    pub reports: Vec<MetricReport>,
    /// Ended by the mistake rule; the last step is then not part of the output.
    #[serde(default)]
    pub stopped: bool,
}

impl SessionSummary {
    /// Steps that make up the output.
    pub fn kept_steps(&self) -> usize {
        self.reports.len() - usize::from(self.stopped)
    }

    pub fn final_report(&self) -> &MetricReport {
        match self.kept_steps() {
            0 => &self.initial,
            k => &self.reports[k - 1],
        }
    }

    /// The session as it would have ended under `stop`, given that it was run
    /// with a looser rule. Choices never depend on the tolerance, so the
    /// stricter session is always a prefix.
    pub fn truncated(&self, stop: &StopConfig) -> SessionSummary {
        let mut mistakes = 0;
        let mut keep = self.reports.len();
        let mut stopped = self.stopped;
        let mut prev = &self.initial;
        for (i, r) in self.reports.iter().enumerate() {
            if stop.is_mistake(prev, r) {
                mistakes += 1;
            }
            prev = r;
            if mistakes > stop.tolerance {
                keep = i + 1;
                stopped = true;
                break;
            }
        }
        SessionSummary {
            initial: self.initial,
            effects: self.effects[..keep].to_vec(),
            reports: self.reports[..keep].to_vec(),
            stopped,
        }
    }
}

/// One metric's line of a system evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub system: String,
    pub metric: MetricKind,
    pub init: f64,
    #[serde(rename = "final")]
    pub final_: f64,
    pub delta: f64,
    /// `100 · delta / init`, on the means.
    pub delta_pct: f64,
    /// Mean change made by step k, over the sessions that reached it.
    pub per_step: [Option<f64>; MAX_STEPS],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub system: String,
    pub pairs: usize,
    pub stop: StopConfig,
    /// Mean number of steps in the output.
    pub mean_steps: f64,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn from_summaries(system: &str, stop: StopConfig, sessions: &[SessionSummary]) -> Self {
        let n = sessions.len().max(1) as f64;
        let rows = MetricKind::ALL
            .iter()
            .map(|&metric| {
                let init = sessions.iter().map(|s| s.initial.get(metric)).sum::<f64>() / n;
                let final_ = sessions.iter().map(|s| s.final_report().get(metric)).sum::<f64>() / n;
                let mut per_step = [None; MAX_STEPS];
                for (k, slot) in per_step.iter_mut().enumerate() {
                    let deltas: Vec<f64> = sessions
                        .iter()
                        .filter(|s| s.reports.len() > k)
                        .map(|s| {
                            let prev = if k == 0 { &s.initial } else { &s.reports[k - 1] };
                            s.reports[k].get(metric) - prev.get(metric)
                        })
                        .collect();
                    if !deltas.is_empty() {
                        *slot = Some(deltas.iter().sum::<f64>() / deltas.len() as f64);
                    }
                }
                let delta = final_ - init;
                EvalRow {
                    system: system.to_string(),
                    metric,
                    init,
                    final_,
                    delta,
                    delta_pct: if init != 0.0 { 100.0 * delta / init.abs() } else { 0.0 },
                    per_step,
                }
            })
            .collect();
        Self {
            system: system.to_string(),
            pairs: sessions.len(),
            stop,
            mean_steps: sessions.iter().map(|s| s.kept_steps() as f64).sum::<f64>() / n,
            rows,
        }
    }

    pub fn row(&self, metric: MetricKind) -> &EvalRow {
        self.rows.iter().find(|r| r.metric == metric).expect("every metric has a row")
    }

    /// Plain-text table, one line per metric.
    pub fn table(&self) -> String {
        let mut out = format!(
            "{} ({} pairs, mean {:.2} steps)\n{:<8}{:>10}{:>10}{:>10}{:>9}",
            self.system, self.pairs, self.mean_steps, "metric", "init", "final", "delta", "delta%"
        );
        for k in 1..=MAX_STEPS {
            let _ = write!(out, "{:>9}", format!("step{k}"));
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(
                out,
                "{:<8}{:>10.3}{:>10.3}{:>10.3}{:>9.2}",
                r.metric.name(),
                r.init,
                r.final_,
                r.delta,
                r.delta_pct
            );
            for v in r.per_step {
                match v {
                    Some(v) => {
                        let _ = write!(out, "{v:>9.3}");
                    }
                    None => {
                        let _ = write!(out, "{:>9}", "-");
                    }
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Runs `policy` on every pair. Random choices use a per-pair seed derived
/// from the policy seed and the pair index.
pub fn run_sessions(
    engine: &Engine,
    policy: Policy,
    pairs: &[EvalPair],
    stop: &StopConfig,
    mode: Parallelism,
) -> Result<Vec<SessionSummary>> {
    let indexed: Vec<(usize, &EvalPair)> = pairs.iter().enumerate().collect();
    map_maybe_par(&indexed, mode, |&(i, p)| {
        let policy = Policy::new(policy.kind, derive_seed(policy.seed, i as u64));
        let state = engine.run_session(p.input.clone(), p.target.clone(), policy, stop, Some(&p.chain))?;
        Ok(state.summary())
    })
    .into_iter()
    .collect()
}

pub fn evaluate_system(
    engine: &Engine,
    policy: Policy,
    pairs: &[EvalPair],
    stop: &StopConfig,
    mode: Parallelism,
) -> Result<EvalReport> {
    let sessions = run_sessions(engine, policy, pairs, stop, mode)?;
    Ok(EvalReport::from_summaries(policy.kind.name(), *stop, &sessions))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub tolerance: usize,
    /// Mean change of the mistake metric over the whole session.
    pub delta: f64,
    pub mean_steps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub system: String,
    pub metric: MetricKind,
    pub points: Vec<SweepPoint>,
}

impl Sweep {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("tolerance,delta,mean_steps\n");
        for p in &self.points {
            let _ = writeln!(out, "{},{},{}", p.tolerance, p.delta, p.mean_steps);
        }
        out
    }

    pub fn write(&self, json: &Path, csv: &Path) -> Result<()> {
        fs::write(json, serde_json::to_string_pretty(self)?)?;
        fs::write(csv, self.to_csv())?;
        Ok(())
    }
}

/// Mean session delta of `metric` at each tolerance. Sessions run once with
/// no early stop; each tolerance then cuts them where it would have stopped.
pub fn sweep_from_sessions(system: &str, metric: MetricKind, tolerances: &[usize], sessions: &[SessionSummary]) -> Sweep {
    let n = sessions.len().max(1) as f64;
    let points = tolerances
        .iter()
        .map(|&tolerance| {
            let stop = StopConfig { tolerance, mistake_metric: metric };
            let cut: Vec<SessionSummary> = sessions.iter().map(|s| s.truncated(&stop)).collect();
            SweepPoint {
                tolerance,
                delta: cut.iter().map(|s| s.final_report().get(metric) - s.initial.get(metric)).sum::<f64>() / n,
                mean_steps: cut.iter().map(|s| s.kept_steps() as f64).sum::<f64>() / n,
            }
        })
        .collect();
    Sweep {
        system: system.to_string(),
        metric,
        points,
    }
}

pub fn sweep_stopping_tolerance(
    engine: &Engine,
    policy: Policy,
    pairs: &[EvalPair],
    metric: MetricKind,
    tolerances: &[usize],
    mode: Parallelism,
) -> Result<Sweep> {
    if let Some(&t) = tolerances.iter().find(|&&t| t > MAX_STEPS) {
        return Err(Error::Config(format!("stop tolerance {t} exceeds {MAX_STEPS}")));
    }
    let open = StopConfig { tolerance: MAX_STEPS, mistake_metric: metric };
    let sessions = run_sessions(engine, policy, pairs, &open, mode)?;
    Ok(sweep_from_sessions(policy.kind.name(), metric, tolerances, &sessions))
}

/// Predicts parameters for many (input, target) pairs with one model; used
/// to score parameter models on held-out pairs.
pub fn predict_many(model: &EffectParamModel, pairs: &[FeaturePair], batch: usize) -> Result<Vec<EffectStep>> {
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(batch.max(1)) {
        let refs: Vec<&FeaturePair> = chunk.iter().collect();
        out.extend(predict_params_batch(model, &refs)?);
    }
    Ok(out)
}
