//! End-to-end stages behind the command line: corpus rendering, training,
//! evaluation. Every artifact directory gets a `provenance-<command>.json`
//! naming the hash of the run configuration that produced it.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{
    build_param_pairs, build_selection_sequences, derive_seed, generate_corpus, generate_manifest, split_records,
    CorpusConfig, FeatureStore, Manifest, ParamExample, Parallelism, SelectionExample, SourceBank, Splits,
};
use crate::dsp::{apply_effect, EffectKind};
use crate::ensemble::{EvalPair, StopConfig, MAX_STEPS};
use crate::features::{FeatureConfig, FeatureExtractor};
use crate::metrics::{Analyzer, MetricKind, MetricReport, MssmaeConfig};
use crate::models::{
    build_param_model, build_selector, predict_params_batch, selection_accuracy, train_param_model,
    train_selector, AccuracyReport, ArchProfile, EffectParamModel, InputShape, SelectorKind, SelectorModel,
};
use crate::{Error, Result};
use fxtutor_nn::{EpochRecord, TrainConfig};

/// Seed streams split off the corpus seed.
const EVAL_STREAM: u64 = 0xe7a1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub corpus: PathBuf,
    pub checkpoints: PathBuf,
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            corpus: "runs/corpus".into(),
            checkpoints: "runs/checkpoints".into(),
            reports: "runs/reports".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            val: 0.10,
            test: 0.05,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Held-out sessions per chain length.
    pub pairs_per_length: usize,
    pub seed: u64,
    pub stop: StopConfig,
    pub tolerances: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            pairs_per_length: 40,
            seed: 0,
            stop: StopConfig::default(),
            tolerances: (0..=MAX_STEPS).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub paths: Paths,
    pub corpus: CorpusConfig,
    pub features: FeatureConfig,
    pub mssmae: MssmaeConfig,
    /// `paper`, `desk` or `tiny`.
    pub profile: String,
    pub param_training: TrainConfig,
    pub selector_training: TrainConfig,
    pub splits: SplitConfig,
    pub pair_cap: usize,
    pub sequence_cap: usize,
    pub eval: EvalConfig,
    /// Use the rayon pool for corpus rendering and evaluation. Training is
    /// always single-threaded.
    pub parallel: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            paths: Paths::default(),
            corpus: CorpusConfig::default(),
            features: FeatureConfig::default(),
            mssmae: MssmaeConfig::default(),
            profile: "desk".into(),
            param_training: TrainConfig::default(),
            selector_training: TrainConfig {
                batch_size: 32,
                ..TrainConfig::default()
            },
            splits: SplitConfig::default(),
            pair_cap: 20_000,
            sequence_cap: 20_000,
            eval: EvalConfig::default(),
            parallel: false,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.features.validate(self.corpus.sample_rate)?;
        self.mssmae.validate()?;
        ArchProfile::by_name(&self.profile)?;
        self.eval.stop.validate()?;
        if self.corpus.clips_per_combination == 0 {
            return Err(Error::Config("clips_per_combination must be positive".into()));
        }
        for t in [&self.param_training, &self.selector_training] {
            if t.batch_size == 0 {
                return Err(Error::Config("batch_size must be positive".into()));
            }
        }
        Ok(())
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))[..16].to_string()
    }

    pub fn mode(&self) -> Parallelism {
        if self.parallel {
            Parallelism::Parallel
        } else {
            Parallelism::Single
        }
    }

    pub fn profile(&self) -> ArchProfile {
        ArchProfile::by_name(&self.profile).expect("validated")
    }

    pub fn input_shape(&self) -> InputShape {
        InputShape::new(&self.features, self.corpus.samples())
    }

    pub fn extractor(&self) -> Result<FeatureExtractor> {
        FeatureExtractor::new(&self.features, self.corpus.sample_rate)
    }

    pub fn analyzer(&self) -> Result<Analyzer> {
        Analyzer::new(self.extractor()?, self.mssmae.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub command: String,
    pub config_hash: String,
    pub config: RunConfig,
}

/// Records which configuration produced the contents of `dir`.
pub fn write_provenance(dir: &Path, command: &str, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir)?;
    let p = Provenance {
        command: command.to_string(),
        config_hash: cfg.hash(),
        config: cfg.clone(),
    };
    fs::write(dir.join(format!("provenance-{command}.json")), serde_json::to_string_pretty(&p)?)?;
    Ok(())
}

/// Writes `value` as pretty JSON wrapped with the config hash.
pub fn write_report<T: Serialize>(path: &Path, cfg: &RunConfig, value: &T) -> Result<()> {
    #[derive(Serialize)]
    struct Wrapped<'a, T> {
        config_hash: String,
        report: &'a T,
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let w = Wrapped {
        config_hash: cfg.hash(),
        report: value,
    };
    fs::write(path, serde_json::to_string_pretty(&w)?)?;
    Ok(())
}

/// Renders every clip and prefix to `paths.corpus`.
pub fn render_corpus(cfg: &RunConfig) -> Result<Manifest> {
    let m = generate_corpus(&cfg.corpus, &cfg.paths.corpus, cfg.mode())?;
    write_provenance(&cfg.paths.corpus, "render-corpus", cfg)?;
    Ok(m)
}

/// A corpus with features for every render, split by clip.
pub struct Corpus {
    pub manifest: Manifest,
    pub store: FeatureStore,
    pub records: Splits<usize>,
}

impl Corpus {
    /// Builds features for `manifest` (renders are reproduced from the
    /// manifest, so the WAV files are not needed).
    pub fn from_manifest(cfg: &RunConfig, manifest: Manifest) -> Result<Self> {
        let store = FeatureStore::build(&manifest, &cfg.extractor()?, cfg.mode())?;
        let records = split_records(&manifest, cfg.splits.val, cfg.splits.test, cfg.splits.seed)?;
        Ok(Self { manifest, store, records })
    }

    /// Reads the manifest under `paths.corpus`.
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let manifest = Manifest::read(&cfg.paths.corpus)?;
        if manifest.config != cfg.corpus {
            return Err(Error::Config(format!(
                "corpus at {} was rendered with a different corpus config",
                cfg.paths.corpus.display()
            )));
        }
        Self::from_manifest(cfg, manifest)
    }

    pub fn param_splits(&self, cfg: &RunConfig, effect: EffectKind) -> Result<Splits<ParamExample>> {
        let seed = derive_seed(cfg.splits.seed, effect.index() as u64);
        let part = |records: &[usize]| build_param_pairs(&self.manifest, records, effect, cfg.pair_cap, seed);
        Ok(Splits {
            train: part(&self.records.train)?,
            val: part(&self.records.val)?,
            test: part(&self.records.test)?,
        })
    }

    pub fn selection_splits(&self, cfg: &RunConfig) -> Splits<SelectionExample> {
        let seed = derive_seed(cfg.splits.seed, 99);
        let part = |records: &[usize]| build_selection_sequences(&self.manifest, records, cfg.sequence_cap, seed);
        Splits {
            train: part(&self.records.train),
            val: part(&self.records.val),
            test: part(&self.records.test),
        }
    }
}

fn param_path(cfg: &RunConfig, effect: EffectKind) -> PathBuf {
    cfg.paths.checkpoints.join("params").join(format!("{effect}.fxt"))
}

fn selector_path(cfg: &RunConfig, kind: SelectorKind) -> PathBuf {
    cfg.paths.checkpoints.join("selectors").join(format!("{kind}.fxt"))
}

/// Trains (and saves) one parameter model per effect.
pub fn train_params(
    cfg: &RunConfig,
    corpus: &Corpus,
    effects: &[EffectKind],
    mut on_epoch: impl FnMut(EffectKind, &EpochRecord),
) -> Result<Vec<EffectParamModel>> {
    let mut out = Vec::new();
    for &effect in effects {
        let data = corpus.param_splits(cfg, effect)?;
        let seed = derive_seed(cfg.param_training.seed, effect.index() as u64);
        let mut model = build_param_model(effect, &cfg.profile(), &cfg.features, cfg.input_shape(), seed)?;
        let train = TrainConfig { seed, ..cfg.param_training.clone() };
        train_param_model(&mut model, &corpus.store, &data.train, &data.val, &train, |r| on_epoch(effect, r))?;
        model.save(&param_path(cfg, effect))?;
        out.push(model);
    }
    write_provenance(&cfg.paths.checkpoints, "train-params", cfg)?;
    Ok(out)
}

pub fn train_selectors(
    cfg: &RunConfig,
    corpus: &Corpus,
    kinds: &[SelectorKind],
    mut on_epoch: impl FnMut(SelectorKind, &EpochRecord),
) -> Result<Vec<SelectorModel>> {
    let data = corpus.selection_splits(cfg);
    let mut out = Vec::new();
    for &kind in kinds {
        let seed = derive_seed(cfg.selector_training.seed, 10 + kind as u64);
        let mut model = build_selector(kind, &cfg.profile(), &cfg.features, cfg.input_shape(), seed)?;
        let train = TrainConfig { seed, ..cfg.selector_training.clone() };
        train_selector(&mut model, &corpus.store, &data.train, &data.val, &train, |r| on_epoch(kind, r))?;
        model.save(&selector_path(cfg, kind))?;
        out.push(model);
    }
    write_provenance(&cfg.paths.checkpoints, "train-selector", cfg)?;
    Ok(out)
}

pub fn selector_accuracy(cfg: &RunConfig, corpus: &Corpus, model: &SelectorModel) -> Result<AccuracyReport> {
    let data = corpus.selection_splits(cfg);
    selection_accuracy(model, &corpus.store, &data.test, cfg.selector_training.batch_size)
}

/// Mean metric change from applying predicted parameters, per effect.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEvalRow {
    pub effect: EffectKind,
    pub pairs: usize,
    /// Input against target.
    pub init: MetricReport,
    /// Prediction rendered on the input, against target.
    #[serde(rename = "final")]
    pub final_: MetricReport,
    pub delta: MetricReport,
    pub delta_pct: MetricReport,
}

/// Scores a parameter model on held-out pairs: render its prediction on the
/// pair input and compare with the target, before and after.
pub fn evaluate_param_model(
    cfg: &RunConfig,
    corpus: &Corpus,
    model: &EffectParamModel,
    pairs: &[ParamExample],
) -> Result<ParamEvalRow> {
    if pairs.is_empty() {
        return Err(Error::Input(format!("no held-out {} pairs", model.effect)));
    }
    let analyzer = cfg.analyzer()?;
    let bank = SourceBank::new(&corpus.manifest.config)?;
    let feature_pairs: Vec<_> = pairs.iter().map(|p| corpus.store.pair(p.input, p.target)).collect();
    let mut steps = Vec::with_capacity(pairs.len());
    for chunk in feature_pairs.chunks(cfg.param_training.batch_size.max(1)) {
        steps.extend(predict_params_batch(model, &chunk.iter().collect::<Vec<_>>())?);
    }
    let mut init = Vec::new();
    let mut fin = Vec::new();
    for (p, step) in pairs.iter().zip(steps) {
        let renders = bank.render(&corpus.manifest.records[p.record])?;
        let input = &renders[p.position];
        let target = analyzer.analyse(&renders[p.position + 1])?;
        let out = apply_effect(input, &step)?;
        init.push(analyzer.report(&analyzer.analyse(input)?, &target)?);
        fin.push(analyzer.report(&analyzer.analyse(&out)?, &target)?);
    }
    let mean = |rs: &[MetricReport]| {
        let mut m = MetricReport::default();
        let n = rs.len() as f64;
        for r in rs {
            m.mse += r.mse / n;
            m.mae += r.mae / n;
            m.lsd += r.lsd / n;
            m.mfccd += r.mfccd / n;
            m.pcc += r.pcc / n;
            m.mssmae += r.mssmae / n;
        }
        m
    };
    let (init, final_) = (mean(&init), mean(&fin));
    let mut delta = MetricReport::default();
    let mut delta_pct = MetricReport::default();
    for k in MetricKind::ALL {
        let d = final_.get(k) - init.get(k);
        *delta.get_mut(k) = d;
        *delta_pct.get_mut(k) = if init.get(k) != 0.0 { 100.0 * d / init.get(k).abs() } else { 0.0 };
    }
    Ok(ParamEvalRow {
        effect: model.effect,
        pairs: pairs.len(),
        init,
        final_,
        delta,
        delta_pct,
    })
}

/// Held-out sessions drawn from a corpus rendered with a seed stream the
/// training corpus never uses: `per_length` pairs for each chain length,
/// from the dry source to the fully processed target.
pub fn eval_pairs(cfg: &RunConfig, per_length: usize) -> Result<Vec<EvalPair>> {
    let presets = cfg.corpus.presets().len().max(1);
    // Length 5 has a single combination, so it needs the most clips.
    let clips = per_length.div_ceil(presets).max(1);
    let eval_cfg = CorpusConfig {
        clips_per_combination: clips,
        seed: derive_seed(cfg.corpus.seed, EVAL_STREAM ^ cfg.eval.seed),
        ..cfg.corpus.clone()
    };
    let manifest = generate_manifest(&eval_cfg)?;
    let bank = SourceBank::new(&eval_cfg)?;
    let mut out = Vec::new();
    for len in 1..=MAX_STEPS {
        let mut of_len: Vec<_> = manifest.records.iter().filter(|r| r.chain.len() == len).collect();
        // Interleave combinations and presets so a short list still covers them.
        of_len.sort_by_key(|r| (r.clip_id % clips, r.clip_id));
        for r in of_len.into_iter().take(per_length) {
            let renders = bank.render(r)?;
            out.push(EvalPair {
                input: renders[0].clone(),
                target: renders[len].clone(),
                chain: r.effects(),
            });
        }
    }
    Ok(out)
}
