use std::f64::consts::{PI, TAU};
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::filters::{comb, linkwitz_riley_split, one_pole_highpass, one_pole_lowpass, schroeder_allpass, Allpass1, Biquad};
use super::AudioBuffer;
use crate::error::{Error, Result};

pub const DISTORTION_MODES: usize = 12;
pub const OUTPUT_CLAMP: f32 = 1.5;
pub const MAX_CHAIN: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectKind {
    Compressor,
    Distortion,
    Equalizer,
    Phaser,
    Reverb,
}

impl EffectKind {
    pub const ALL: [EffectKind; 5] = [
        EffectKind::Compressor,
        EffectKind::Distortion,
        EffectKind::Equalizer,
        EffectKind::Phaser,
        EffectKind::Reverb,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Compressor => "compressor",
            Self::Distortion => "distortion",
            Self::Equalizer => "equalizer",
            Self::Phaser => "phaser",
            Self::Reverb => "reverb",
        }
    }

    pub fn continuous_len(self) -> usize {
        match self {
            Self::Distortion => 1,
            _ => 3,
        }
    }

    pub fn has_categorical(self) -> bool {
        self == Self::Distortion
    }

    pub fn param_names(self) -> &'static [&'static str] {
        match self {
            Self::Compressor => &["low", "mid", "high"],
            Self::Distortion => &["drive"],
            Self::Equalizer => &["cutoff", "resonance", "gain"],
            Self::Phaser => &["depth", "frequency", "feedback"],
            Self::Reverb => &["mix", "low_cut", "high_cut"],
        }
    }

    /// Sampling interval per continuous parameter used for corpus generation.
    pub fn sample_ranges(self) -> &'static [(f64, f64)] {
        match self {
            Self::Compressor => &[(0.0, 1.0); 3],
            Self::Distortion => &[(0.3, 1.0)],
            // Gain excludes (0.4, 0.6); see `sample_params`.
            Self::Equalizer => &[(0.5, 0.95), (0.0, 1.0), (0.0, 1.0)],
            Self::Phaser => &[(0.0, 1.0); 3],
            Self::Reverb => &[(0.3, 0.7), (0.0, 1.0), (0.0, 1.0)],
        }
    }
}

impl fmt::Display for EffectKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EffectKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|e| e.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown effect {s:?}")))
    }
}

/// One link of an effect chain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectStep {
    pub effect: EffectKind,
    pub continuous: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub categorical: Option<usize>,
}

impl EffectStep {
    pub fn new(effect: EffectKind, continuous: Vec<f64>, categorical: Option<usize>) -> Result<Self> {
        let s = Self {
            effect,
            continuous,
            categorical,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let e = self.effect;
        if self.continuous.len() != e.continuous_len() {
            return Err(Error::Parameter(format!(
                "{e} takes {} continuous parameters, got {}",
                e.continuous_len(),
                self.continuous.len()
            )));
        }
        if let Some(v) = self.continuous.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Parameter(format!("{e} parameter {v} outside [0, 1]")));
        }
        match (e.has_categorical(), self.categorical) {
            (true, Some(m)) if m < DISTORTION_MODES => Ok(()),
            (true, Some(m)) => Err(Error::Parameter(format!(
                "distortion mode {m} outside [0, {DISTORTION_MODES})"
            ))),
            (true, None) => Err(Error::Parameter("distortion requires a mode".into())),
            (false, Some(_)) => Err(Error::Parameter(format!("{e} takes no categorical parameter"))),
            (false, None) => Ok(()),
        }
    }
}

/// Draws parameters from the corpus sampling ranges.
pub fn sample_params<R: Rng + ?Sized>(effect: EffectKind, rng: &mut R) -> EffectStep {
    let mut continuous: Vec<f64> = effect
        .sample_ranges()
        .iter()
        .map(|&(lo, hi)| rng.gen_range(lo..=hi))
        .collect();
    let mut categorical = None;
    match effect {
        EffectKind::Equalizer => {
            // Uniform over [0, 0.4] ∪ [0.6, 1.0]: draw on a gap-free interval of the same length.
            let u: f64 = rng.gen_range(0.0..=0.8);
            continuous[2] = if u <= 0.4 { u } else { u + 0.2 };
        }
        EffectKind::Distortion => categorical = Some(rng.gen_range(0..DISTORTION_MODES)),
        _ => {}
    }
    EffectStep {
        effect,
        continuous,
        categorical,
    }
}

/// Applies one effect; output has the same length and rate and is clamped to ±[`OUTPUT_CLAMP`].
pub fn apply_effect(audio: &AudioBuffer, step: &EffectStep) -> Result<AudioBuffer> {
    step.validate()?;
    let sr = audio.sample_rate as f64;
    let x: Vec<f64> = audio.samples.iter().map(|&v| v as f64).collect();
    let p = &step.continuous;
    let y = match step.effect {
        EffectKind::Compressor => compressor(&x, [p[0], p[1], p[2]], sr),
        EffectKind::Distortion => distortion(&x, p[0], step.categorical.unwrap_or(0)),
        EffectKind::Equalizer => equalizer(&x, p[0], p[1], p[2], sr),
        EffectKind::Phaser => phaser(&x, p[0], p[1], p[2], sr),
        EffectKind::Reverb => reverb(&x, p[0], p[1], p[2], sr),
    };
    let c = OUTPUT_CLAMP as f64;
    let samples = y
        .into_iter()
        .map(|v| if v.is_finite() { v.clamp(-c, c) as f32 } else { 0.0 })
        .collect();
    Ok(AudioBuffer {
        samples,
        sample_rate: audio.sample_rate,
    })
}

/// Renders every prefix of the chain; element 0 is the input itself.
pub fn apply_chain(audio: &AudioBuffer, steps: &[EffectStep]) -> Result<Vec<AudioBuffer>> {
    if steps.len() > MAX_CHAIN {
        return Err(Error::Chain(format!("chain of {} steps exceeds {MAX_CHAIN}", steps.len())));
    }
    for (i, s) in steps.iter().enumerate() {
        if steps[..i].iter().any(|t| t.effect == s.effect) {
            return Err(Error::Chain(format!("{} appears more than once", s.effect)));
        }
    }
    let mut out = Vec::with_capacity(steps.len() + 1);
    out.push(audio.clone());
    for s in steps {
        let next = apply_effect(out.last().expect("non-empty"), s)?;
        out.push(next);
    }
    Ok(out)
}

const CROSSOVER_LOW: f64 = 200.0;
const CROSSOVER_HIGH: f64 = 2500.0;
const ATTACK_S: f64 = 0.005;
const RELEASE_S: f64 = 0.100;

fn compress_band(band: &mut [f64], amount: f64, sr: f64) {
    if amount <= 0.0 {
        return;
    }
    let ratio = 1.0 + 7.0 * amount;
    let threshold = -30.0 * amount;
    let att = (-1.0 / (ATTACK_S * sr)).exp();
    let rel = (-1.0 / (RELEASE_S * sr)).exp();
    let mut env = 0.0f64;
    for x in band.iter_mut() {
        let level = x.abs();
        let k = if level > env { att } else { rel };
        env = k * env + (1.0 - k) * level;
        let db = 20.0 * env.max(1e-9).log10();
        if db > threshold {
            let reduction = (threshold - db) * (1.0 - 1.0 / ratio);
            *x *= 10f64.powf(reduction / 20.0);
        }
    }
}

fn rms(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    (xs.iter().map(|v| v * v).sum::<f64>() / xs.len() as f64).sqrt()
}

fn compressor(x: &[f64], amounts: [f64; 3], sr: f64) -> Vec<f64> {
    let (mut low, rest) = linkwitz_riley_split(x, CROSSOVER_LOW, sr);
    let (mut mid, mut high) = linkwitz_riley_split(&rest, CROSSOVER_HIGH, sr);
    compress_band(&mut low, amounts[0], sr);
    compress_band(&mut mid, amounts[1], sr);
    compress_band(&mut high, amounts[2], sr);
    let mut y: Vec<f64> = (0..x.len()).map(|i| low[i] + mid[i] + high[i]).collect();
    // Makeup restores the overall level only, so the band balance shift stays audible.
    let (before, after) = (rms(x), rms(&y));
    if after > 0.0 {
        let g = before / after;
        y.iter_mut().for_each(|v| *v *= g);
    }
    y
}

/// Memoryless shaper for every mode except sample-hold.
fn shape(mode: usize, u: f64) -> f64 {
    match mode {
        0 => u.tanh(),
        1 => u.clamp(-1.0, 1.0),
        2 => {
            let v = u.clamp(-1.0, 1.0);
            1.5 * (v - v * v * v / 3.0)
        }
        3 => {
            let t = (u + 1.0).rem_euclid(4.0);
            if t < 2.0 {
                t - 1.0
            } else {
                3.0 - t
            }
        }
        4 => (PI * u / 2.0).sin(),
        5 => (u + 0.3).tanh() - 0.3f64.tanh(),
        6 => u.max(0.0).tanh(),
        7 => u.abs().tanh(),
        8 => (u.clamp(-1.0, 1.0) * 7.0).round() / 7.0,
        9 => u.tanh(),
        10 => {
            let v = u.clamp(-1.0, 1.0);
            4.0 * v * v * v - 3.0 * v
        }
        _ => u.signum() * (1.0 - (-u.abs()).exp()),
    }
}

const SAMPLE_HOLD_MODE: usize = 9;
const SAMPLE_HOLD_FACTOR: usize = 8;

fn distortion(x: &[f64], drive: f64, mode: usize) -> Vec<f64> {
    let g = 10f64.powf(2.0 * drive);
    if mode == SAMPLE_HOLD_MODE {
        return (0..x.len())
            .map(|i| shape(mode, g * x[i - i % SAMPLE_HOLD_FACTOR]))
            .collect();
    }
    x.iter().map(|&v| shape(mode, g * v)).collect()
}

fn equalizer(x: &[f64], cutoff: f64, resonance: f64, gain: f64, sr: f64) -> Vec<f64> {
    let freq = (20.0 * 800f64.powf(cutoff)).min(0.45 * sr);
    let q = 0.5 + 9.5 * resonance;
    let db = (gain - 0.5) * 24.0;
    let mut y = x.to_vec();
    Biquad::high_shelf(freq, q, db, sr).run(&mut y);
    y
}

const PHASER_STAGES: usize = 6;
const PHASER_CENTER_HZ: f64 = 894.4;
/// Full-depth sweep ratio; the centre then spans 200 Hz to 4 kHz.
const PHASER_SPAN: f64 = 20.0;

fn phaser(x: &[f64], depth: f64, frequency: f64, feedback: f64, sr: f64) -> Vec<f64> {
    let rate = 0.1 * 100f64.powf(frequency);
    let fb = 0.9 * feedback;
    let mut stages = vec![Allpass1::default(); PHASER_STAGES];
    let mut last = 0.0;
    let mut y = Vec::with_capacity(x.len());
    for (i, &v) in x.iter().enumerate() {
        let lfo = (TAU * rate * i as f64 / sr).sin();
        let centre = PHASER_CENTER_HZ * PHASER_SPAN.powf(0.5 * depth * lfo);
        let a = Allpass1::coefficient(centre, sr);
        let mut s = v + fb * last;
        for st in stages.iter_mut() {
            s = st.tick(s, a);
        }
        last = s;
        y.push((1.0 - 0.5 * depth) * v + 0.5 * depth * s);
    }
    y
}

const COMB_DELAYS: [usize; 8] = [1116, 1188, 1277, 1356, 1422, 1491, 1557, 1617];
const ALLPASS_DELAYS: [usize; 4] = [556, 441, 341, 225];
const REVERB_DECAY_S: f64 = 2.0;
/// Brings the wet path to roughly the dry level on steady tones.
const REVERB_WET_GAIN: f64 = 0.25;

fn reverb(x: &[f64], mix: f64, low_cut: f64, high_cut: f64, sr: f64) -> Vec<f64> {
    let scale = sr / 44100.0;
    let mut wet = vec![0.0; x.len()];
    for &d in &COMB_DELAYS {
        let delay = ((d as f64 * scale).round() as usize).max(1);
        let g = 10f64.powf(-3.0 * delay as f64 / (sr * REVERB_DECAY_S));
        for (w, c) in wet.iter_mut().zip(comb(x, delay, g)) {
            *w += c;
        }
    }
    for &d in &ALLPASS_DELAYS {
        let delay = ((d as f64 * scale).round() as usize).max(1);
        schroeder_allpass(&mut wet, delay, 0.5);
    }
    one_pole_highpass(&mut wet, 20.0 * 100f64.powf(low_cut), sr);
    one_pole_lowpass(&mut wet, (1000.0 * 16f64.powf(high_cut)).min(0.45 * sr), sr);
    x.iter()
        .zip(&wet)
        .map(|(&d, &w)| (1.0 - mix) * d + mix * REVERB_WET_GAIN * w)
        .collect()
}
