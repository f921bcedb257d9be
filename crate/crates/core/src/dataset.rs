//! Corpus generation over every effect subset, chain-prefix bookkeeping and
//! the training sets derived from it.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use fxtutor_nn::fxt1::{self, Array};
use fxtutor_nn::Tensor;
use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dsp::{
    apply_chain, preset_group, render_source, sample_params, write_wav, AudioBuffer, EffectKind, EffectStep, Preset,
    PresetGroup, DEFAULT_DURATION, DEFAULT_PITCH, DEFAULT_SAMPLE_RATE,
};
use crate::error::{Error, Result};
use crate::features::{ClipFeatures, FeatureExtractor, FeaturePair, Spectrogram};

/// Number of effect subsets, including the empty one.
pub const COMBINATIONS: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub group: PresetGroup,
    pub clips_per_combination: usize,
    pub seed: u64,
    pub pitch: i32,
    pub duration: f64,
    pub sample_rate: u32,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            group: PresetGroup::A,
            clips_per_combination: 100,
            seed: 0,
            pitch: DEFAULT_PITCH,
            duration: DEFAULT_DURATION,
            sample_rate: DEFAULT_SAMPLE_RATE,
        }
    }
}

impl CorpusConfig {
    pub fn presets(&self) -> Vec<Preset> {
        preset_group(self.group)
    }

    /// Length of every rendered clip.
    pub fn samples(&self) -> usize {
        (self.duration * self.sample_rate as f64).round() as usize
    }
}

/// Whether bulk work may use the rayon pool.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Parallelism {
    #[default]
    Single,
    Parallel,
}

pub(crate) fn map_maybe_par<T: Sync, U: Send>(items: &[T], mode: Parallelism, f: impl Fn(&T) -> U + Sync + Send) -> Vec<U> {
    match mode {
        Parallelism::Single => items.iter().map(f).collect(),
        Parallelism::Parallel => items.par_iter().map(f).collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub clip_id: usize,
    pub preset_id: String,
    pub chain: Vec<EffectStep>,
    pub seed: u64,
    pub prefix_paths: Vec<String>,
}

impl ManifestRecord {
    pub fn effects(&self) -> Vec<EffectKind> {
        self.chain.iter().map(|s| s.effect).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub config: CorpusConfig,
    pub records: Vec<ManifestRecord>,
}

/// The subset of effects encoded by the low five bits of `mask`.
pub fn combination(mask: usize) -> Vec<EffectKind> {
    EffectKind::ALL
        .iter()
        .copied()
        .filter(|e| mask & (1 << e.index()) != 0)
        .collect()
}

/// SplitMix64 finaliser; decorrelates per-clip seeds from the corpus seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn prefix_path(clip_id: usize, k: usize) -> String {
    format!("audio/{clip_id:06}_{k}.wav")
}

/// Samples every chain (order and parameters) without rendering audio.
pub fn generate_manifest(cfg: &CorpusConfig) -> Result<Manifest> {
    if cfg.clips_per_combination == 0 {
        return Err(Error::Config("clips_per_combination must be at least 1".into()));
    }
    let presets = cfg.presets();
    let mut records = Vec::with_capacity(presets.len() * COMBINATIONS * cfg.clips_per_combination);
    for preset in &presets {
        for mask in 0..COMBINATIONS {
            for _ in 0..cfg.clips_per_combination {
                let clip_id = records.len();
                let seed = derive_seed(cfg.seed, clip_id as u64);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut effects = combination(mask);
                effects.shuffle(&mut rng);
                let chain: Vec<EffectStep> = effects.iter().map(|&e| sample_params(e, &mut rng)).collect();
                let prefix_paths = (0..=chain.len()).map(|k| prefix_path(clip_id, k)).collect();
                records.push(ManifestRecord {
                    clip_id,
                    preset_id: preset.id.clone(),
                    chain,
                    seed,
                    prefix_paths,
                });
            }
        }
    }
    Ok(Manifest {
        config: cfg.clone(),
        records,
    })
}

/// Dry renders keyed by preset id.
pub struct SourceBank {
    dry: BTreeMap<String, AudioBuffer>,
}

impl SourceBank {
    pub fn new(cfg: &CorpusConfig) -> Result<Self> {
        let mut dry = BTreeMap::new();
        for p in cfg.presets() {
            let audio = render_source(&p, cfg.pitch, cfg.duration, cfg.sample_rate)?;
            dry.insert(p.id.clone(), audio);
        }
        Ok(Self { dry })
    }

    pub fn dry(&self, preset_id: &str) -> Result<&AudioBuffer> {
        self.dry
            .get(preset_id)
            .ok_or_else(|| Error::Config(format!("unknown preset {preset_id:?}")))
    }

    /// Every chain prefix of a record, element 0 being the dry render.
    pub fn render(&self, record: &ManifestRecord) -> Result<Vec<AudioBuffer>> {
        apply_chain(self.dry(&record.preset_id)?, &record.chain)
    }
}

impl Manifest {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("manifest.jsonl"), self.to_jsonl()?)?;
        fs::write(dir.join("corpus.json"), serde_json::to_string_pretty(&self.config)?)?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let config: CorpusConfig = serde_json::from_str(&fs::read_to_string(dir.join("corpus.json"))?)?;
        let file = fs::File::open(dir.join("manifest.jsonl"))?;
        let mut records = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line?;
            if !line.trim().is_empty() {
                records.push(serde_json::from_str(&line)?);
            }
        }
        Ok(Self { config, records })
    }

    /// Index of each record's first render in a flat list of all prefixes.
    pub fn render_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.records.len() + 1);
        let mut acc = 0;
        for r in &self.records {
            offsets.push(acc);
            acc += r.chain.len() + 1;
        }
        offsets.push(acc);
        offsets
    }
}

/// Samples the manifest, renders every prefix and writes WAVs plus the JSONL manifest.
pub fn generate_corpus(cfg: &CorpusConfig, dir: &Path, mode: Parallelism) -> Result<Manifest> {
    let manifest = generate_manifest(cfg)?;
    let bank = SourceBank::new(cfg)?;
    fs::create_dir_all(dir.join("audio"))?;
    let results = map_maybe_par(&manifest.records, mode, |r| -> Result<()> {
        for (audio, rel) in bank.render(r)?.iter().zip(&r.prefix_paths) {
            write_wav(&dir.join(rel), audio)?;
        }
        Ok(())
    });
    results.into_iter().collect::<Result<()>>()?;
    manifest.write(dir)?;
    Ok(manifest)
}

/// Features of every render of a manifest, stored as f32.
#[derive(Clone, Debug)]
pub struct FeatureStore {
    pub n_mels: usize,
    pub n_mfcc: usize,
    pub frames: usize,
    offsets: Vec<usize>,
    mel: Vec<Vec<f32>>,
    mfcc: Vec<Vec<f32>>,
}

impl FeatureStore {
    pub fn build(manifest: &Manifest, extractor: &FeatureExtractor, mode: Parallelism) -> Result<Self> {
        let bank = SourceBank::new(&manifest.config)?;
        let per_record = map_maybe_par(&manifest.records, mode, |r| -> Result<Vec<ClipFeatures>> {
            bank.render(r)?.iter().map(|a| extractor.clip(a)).collect()
        });
        let mut store = Self {
            n_mels: extractor.config().n_mels,
            n_mfcc: extractor.config().n_mfcc,
            frames: extractor
                .config()
                .frames((manifest.config.duration * manifest.config.sample_rate as f64).round() as usize),
            offsets: manifest.render_offsets(),
            mel: Vec::new(),
            mfcc: Vec::new(),
        };
        for clips in per_record {
            for c in clips? {
                store.mel.push(c.mel_db.data.iter().map(|&v| v as f32).collect());
                store.mfcc.push(c.mfcc.data.iter().map(|&v| v as f32).collect());
            }
        }
        Ok(store)
    }

    pub fn len(&self) -> usize {
        self.mel.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mel.is_empty()
    }

    /// Flat render id of prefix `k` of record `record`.
    pub fn render_id(&self, record: usize, k: usize) -> usize {
        self.offsets[record] + k
    }

    pub fn mel(&self, render: usize) -> &[f32] {
        &self.mel[render]
    }

    pub fn mfcc(&self, render: usize) -> &[f32] {
        &self.mfcc[render]
    }

    pub fn pair(&self, input: usize, target: usize) -> FeaturePair {
        FeaturePair {
            mel: [self.mel(input), self.mel(target)].concat(),
            mfcc: [self.mfcc(input), self.mfcc(target)].concat(),
            n_mels: self.n_mels,
            n_mfcc: self.n_mfcc,
            frames: self.frames,
        }
    }

    pub fn clip(&self, render: usize) -> ClipFeatures {
        let f = |v: &[f32], rows| Spectrogram {
            rows,
            cols: self.frames,
            data: v.iter().map(|&x| x as f64).collect(),
        };
        ClipFeatures {
            mel_db: f(self.mel(render), self.n_mels),
            mfcc: f(self.mfcc(render), self.n_mfcc),
        }
    }
}

/// One (input, target) pair for an effect parameter model; renders are
/// referenced by flat id into a [`FeatureStore`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamExample {
    pub clip_id: usize,
    pub record: usize,
    pub effect: EffectKind,
    /// Position of the effect in its chain.
    pub position: usize,
    pub input: usize,
    pub target: usize,
    pub continuous: Vec<f64>,
    pub categorical: Option<usize>,
}

/// Pairs for `effect` from the given records: the render before the effect
/// against the render right after it. Capped by uniform sampling.
pub fn build_param_pairs(
    manifest: &Manifest,
    records: &[usize],
    effect: EffectKind,
    cap: usize,
    seed: u64,
) -> Result<Vec<ParamExample>> {
    let offsets = manifest.render_offsets();
    let mut out = Vec::new();
    for &ri in records {
        let r = &manifest.records[ri];
        if let Some(j) = r.chain.iter().position(|s| s.effect == effect) {
            out.push(ParamExample {
                clip_id: r.clip_id,
                record: ri,
                effect,
                position: j,
                input: offsets[ri] + j,
                target: offsets[ri] + j + 1,
                continuous: r.chain[j].continuous.clone(),
                categorical: r.chain[j].categorical,
            });
        }
    }
    if out.is_empty() {
        return Err(Error::Input(format!("no chain in the corpus uses {effect}")));
    }
    Ok(cap_uniform(out, cap, seed))
}

fn cap_uniform<T>(items: Vec<T>, cap: usize, seed: u64) -> Vec<T> {
    if items.len() <= cap {
        return items;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = index::sample(&mut rng, items.len(), cap).into_vec();
    keep.sort_unstable();
    let mut slots: Vec<Option<T>> = items.into_iter().map(Some).collect();
    keep.into_iter().map(|i| slots[i].take().expect("unique indices")).collect()
}

/// Step 0 of a selection history carries this one-hot slot.
pub const INITIAL_SLOT: usize = 5;
pub const HISTORY_WIDTH: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionStep {
    /// Render of the audio so far.
    pub render: usize,
    /// One-hot slot: the effect applied to reach this render, or [`INITIAL_SLOT`].
    pub slot: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionExample {
    pub clip_id: usize,
    pub record: usize,
    pub steps: Vec<SelectionStep>,
    /// Final render of the chain, paired with every step.
    pub target: usize,
    pub label: EffectKind,
    /// Effects of the whole chain, in order.
    pub chain: Vec<EffectKind>,
}

impl SelectionExample {
    /// Effects already applied in this history.
    pub fn used(&self) -> Vec<EffectKind> {
        self.chain[..self.steps.len() - 1].to_vec()
    }
}

pub fn build_selection_sequences(
    manifest: &Manifest,
    records: &[usize],
    cap: usize,
    seed: u64,
) -> Vec<SelectionExample> {
    let offsets = manifest.render_offsets();
    let mut out = Vec::new();
    for &ri in records {
        let r = &manifest.records[ri];
        let chain = r.effects();
        let k = chain.len();
        for t in 0..k {
            let steps = (0..=t)
                .map(|j| SelectionStep {
                    render: offsets[ri] + j,
                    slot: if j == 0 { INITIAL_SLOT } else { chain[j - 1].index() },
                })
                .collect();
            out.push(SelectionExample {
                clip_id: r.clip_id,
                record: ri,
                steps,
                target: offsets[ri] + k,
                label: chain[t],
                chain: chain.clone(),
            });
        }
    }
    cap_uniform(out, cap, seed)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
}

/// Disjoint split keyed by clip id, so every example of one clip lands in the same part.
pub fn split<T>(items: Vec<T>, clip_of: impl Fn(&T) -> usize, val: f64, test: f64, seed: u64) -> Result<Splits<T>> {
    if items.len() < 20 {
        return Err(Error::Input(format!("need at least 20 examples to split, got {}", items.len())));
    }
    if !(val >= 0.0 && test >= 0.0 && val + test < 1.0) {
        return Err(Error::Config(format!("bad split fractions {val}/{test}")));
    }
    let clips: BTreeSet<usize> = items.iter().map(&clip_of).collect();
    let mut ids: Vec<usize> = clips.into_iter().collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = ids.len() as f64;
    let n_val = (n * val).round() as usize;
    let n_test = (n * test).round() as usize;
    let val_ids: BTreeSet<usize> = ids[..n_val].iter().copied().collect();
    let test_ids: BTreeSet<usize> = ids[n_val..n_val + n_test].iter().copied().collect();
    let mut s = Splits {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for it in items {
        let c = clip_of(&it);
        if val_ids.contains(&c) {
            s.val.push(it);
        } else if test_ids.contains(&c) {
            s.test.push(it);
        } else {
            s.train.push(it);
        }
    }
    Ok(s)
}

/// Record indices split by clip id.
pub fn split_records(manifest: &Manifest, val: f64, test: f64, seed: u64) -> Result<Splits<usize>> {
    let idx: Vec<usize> = (0..manifest.records.len()).collect();
    split(idx, |&i| manifest.records[i].clip_id, val, test, seed)
}

/// Index line of a stored parameter dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub clip_id: usize,
    pub effect: EffectKind,
    pub position: usize,
    pub continuous: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub categorical: Option<usize>,
}

/// A self-contained parameter dataset with materialised features.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredDataset {
    pub entries: Vec<IndexEntry>,
    pub features: Vec<FeaturePair>,
}

impl StoredDataset {
    pub fn from_examples(store: &FeatureStore, examples: &[ParamExample]) -> Self {
        Self {
            entries: examples
                .iter()
                .map(|e| IndexEntry {
                    clip_id: e.clip_id,
                    effect: e.effect,
                    position: e.position,
                    continuous: e.continuous.clone(),
                    categorical: e.categorical,
                })
                .collect(),
            features: examples.iter().map(|e| store.pair(e.input, e.target)).collect(),
        }
    }
}

fn dataset_paths(path: &Path) -> (PathBuf, PathBuf) {
    (path.with_extension("fxt"), path.with_extension("jsonl"))
}

/// Writes `<path>.fxt` (feature tensors) and `<path>.jsonl` (one index line per example).
pub fn write_dataset(path: &Path, data: &StoredDataset) -> Result<()> {
    let first = data
        .features
        .first()
        .ok_or_else(|| Error::Input("cannot write an empty dataset".into()))?;
    let n = data.features.len();
    let mel: Vec<f32> = data.features.iter().flat_map(|f| f.mel.iter().copied()).collect();
    let mfcc: Vec<f32> = data.features.iter().flat_map(|f| f.mfcc.iter().copied()).collect();
    let mut mel_dims = vec![n];
    mel_dims.extend(first.mel_dims());
    let mut mfcc_dims = vec![n];
    mfcc_dims.extend(first.mfcc_dims());
    let arrays = vec![
        Array::from_tensor("mel", &Tensor::new(mel_dims, mel)?),
        Array::from_tensor("mfcc", &Tensor::new(mfcc_dims, mfcc)?),
    ];
    let (fxt, jsonl) = dataset_paths(path);
    fxt1::write_file(&fxt, &arrays)?;
    let mut f = fs::File::create(jsonl)?;
    for e in &data.entries {
        writeln!(f, "{}", serde_json::to_string(e)?)?;
    }
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<StoredDataset> {
    let (fxt, jsonl) = dataset_paths(path);
    let arrays = fxt1::read_file(&fxt)?;
    let get = |name: &str| -> Result<Tensor<f32>> {
        let a = arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| Error::Input(format!("dataset lacks array {name}")))?;
        Ok(a.to_tensor::<f32>()?)
    };
    let (mel, mfcc) = (get("mel")?, get("mfcc")?);
    let (md, cd) = (mel.dims().to_vec(), mfcc.dims().to_vec());
    if md.len() != 4 || cd.len() != 4 || md[0] != cd[0] || md[3] != cd[3] {
        return Err(Error::Input(format!("inconsistent dataset tensors {md:?} / {cd:?}")));
    }
    let n = md[0];
    let entries: Vec<IndexEntry> = fs::read_to_string(jsonl)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect::<std::result::Result<_, _>>()?;
    if entries.len() != n {
        return Err(Error::Input(format!("index has {} lines for {n} examples", entries.len())));
    }
    let (ml, cl) = (mel.len() / n.max(1), mfcc.len() / n.max(1));
    let features = (0..n)
        .map(|i| FeaturePair {
            mel: mel.data()[i * ml..(i + 1) * ml].to_vec(),
            mfcc: mfcc.data()[i * cl..(i + 1) * cl].to_vec(),
            n_mels: md[2],
            n_mfcc: cd[2],
            frames: md[3],
        })
        .collect();
    Ok(StoredDataset { entries, features })
}
