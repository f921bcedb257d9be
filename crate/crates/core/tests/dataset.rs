use std::fs;

use fxtutor_core::dataset::{
    build_param_pairs, generate_manifest, read_dataset, write_dataset, CorpusConfig, FeatureStore, Manifest,
    Parallelism, StoredDataset,
};
use fxtutor_core::dsp::{EffectKind, DISTORTION_MODES};
use fxtutor_core::features::{FeatureConfig, FeatureExtractor};

fn large() -> Manifest {
    generate_manifest(&CorpusConfig {
        clips_per_combination: 50,
        seed: 11,
        ..CorpusConfig::default()
    })
    .unwrap()
}

#[test]
fn every_effect_appears_in_half_the_chains() {
    let m = large();
    let n = m.records.len();
    for e in EffectKind::ALL {
        let with = m.records.iter().filter(|r| r.effects().contains(&e)).count();
        assert_eq!(with * 2, n, "{e}");
    }
}

#[test]
fn chain_order_and_parameters_are_uniform() {
    let m = large();
    // First effect of each non-empty chain: each kind should lead a fifth of them.
    let mut first = [0usize; 5];
    let mut nonempty = 0;
    for r in m.records.iter().filter(|r| !r.chain.is_empty()) {
        first[r.chain[0].effect.index()] += 1;
        nonempty += 1;
    }
    for (i, &c) in first.iter().enumerate() {
        let share = c as f64 / nonempty as f64;
        assert!((share - 0.2).abs() < 0.02, "{}: {share}", EffectKind::ALL[i]);
    }

    let steps: Vec<_> = m.records.iter().flat_map(|r| r.chain.iter()).collect();
    for e in EffectKind::ALL {
        let of: Vec<_> = steps.iter().filter(|s| s.effect == e).collect();
        for (k, &(lo, hi)) in e.sample_ranges().iter().enumerate() {
            let vals: Vec<f64> = of.iter().map(|s| s.continuous[k]).collect();
            assert!(vals.iter().all(|v| (lo..=hi).contains(v)));
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            assert!((mean - (lo + hi) / 2.0).abs() < 0.05 * (hi - lo), "{e} param {k}: {mean}");
        }
    }

    let gains: Vec<f64> = steps
        .iter()
        .filter(|s| s.effect == EffectKind::Equalizer)
        .map(|s| s.continuous[2])
        .collect();
    assert!(gains.iter().all(|g| *g <= 0.4 || *g >= 0.6));
    let cut = gains.iter().filter(|g| **g <= 0.4).count() as f64 / gains.len() as f64;
    assert!((cut - 0.5).abs() < 0.05, "{cut}");

    let mut modes = [0usize; DISTORTION_MODES];
    for s in steps.iter().filter(|s| s.effect == EffectKind::Distortion) {
        modes[s.categorical.unwrap()] += 1;
    }
    let total: usize = modes.iter().sum();
    for c in modes {
        let share = c as f64 * DISTORTION_MODES as f64 / total as f64;
        assert!((share - 1.0).abs() < 0.25, "{modes:?}");
    }
}

#[test]
fn seeds_change_the_corpus() {
    let a = generate_manifest(&CorpusConfig { clips_per_combination: 1, seed: 1, ..CorpusConfig::default() }).unwrap();
    let b = generate_manifest(&CorpusConfig { clips_per_combination: 1, seed: 2, ..CorpusConfig::default() }).unwrap();
    assert_eq!(a.records.len(), b.records.len());
    assert_ne!(a.to_jsonl().unwrap(), b.to_jsonl().unwrap());
    assert!(generate_manifest(&CorpusConfig { clips_per_combination: 0, ..CorpusConfig::default() }).is_err());
}

#[test]
fn manifests_round_trip_and_reject_damage() {
    let m = generate_manifest(&CorpusConfig { clips_per_combination: 1, ..CorpusConfig::default() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    m.write(dir.path()).unwrap();
    assert_eq!(Manifest::read(dir.path()).unwrap(), m);

    let path = dir.path().join("manifest.jsonl");
    let mut text = fs::read_to_string(&path).unwrap();
    text.push_str("{\"clip_id\": \n");
    fs::write(&path, text).unwrap();
    assert!(Manifest::read(dir.path()).is_err());
    assert!(Manifest::read(&dir.path().join("absent")).is_err());
}

#[test]
fn stored_datasets_reject_missing_or_truncated_files() {
    let cfg = CorpusConfig { clips_per_combination: 1, ..CorpusConfig::default() };
    let mut m = generate_manifest(&cfg).unwrap();
    m.records.truncate(40);
    let extractor = FeatureExtractor::new(&FeatureConfig::default(), cfg.sample_rate).unwrap();
    let store = FeatureStore::build(&m, &extractor, Parallelism::Single).unwrap();
    let all: Vec<usize> = (0..m.records.len()).collect();
    let examples = build_param_pairs(&m, &all, EffectKind::Reverb, 4, 0).unwrap();
    let data = StoredDataset::from_examples(&store, &examples);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("reverb");
    write_dataset(&path, &data).unwrap();
    assert_eq!(read_dataset(&path).unwrap(), data);

    let empty = StoredDataset { entries: vec![], features: vec![] };
    assert!(write_dataset(&dir.path().join("empty"), &empty).is_err());
    assert!(read_dataset(&dir.path().join("absent")).is_err());

    let fxt = path.with_extension("fxt");
    let bytes = fs::read(&fxt).unwrap();
    fs::write(&fxt, &bytes[..bytes.len() / 2]).unwrap();
    assert!(read_dataset(&path).is_err());

    fs::write(&fxt, &bytes).unwrap();
    let jsonl = path.with_extension("jsonl");
    let lines: Vec<String> = fs::read_to_string(&jsonl).unwrap().lines().map(String::from).collect();
    fs::write(&jsonl, lines[..lines.len() - 1].join("\n")).unwrap();
    assert!(read_dataset(&path).is_err(), "index shorter than the feature arrays");
}
