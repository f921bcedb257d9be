use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::AudioBuffer;
use crate::error::{Error, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 44_100;
/// C4.
pub const DEFAULT_PITCH: i32 = 60;
pub const DEFAULT_DURATION: f64 = 1.0;
pub const PEAK_LEVEL: f64 = 0.9;
/// Mel analysis tops out at 16 kHz, which must stay below Nyquist.
pub const MIN_SAMPLE_RATE: u32 = 32_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Waveform {
    Sine,
    Triangle,
    Saw,
    Square,
}

impl Waveform {
    /// Value at phase `p ∈ [0, 1)`.
    fn at(self, p: f64) -> f64 {
        match self {
            Self::Sine => (TAU * p).sin(),
            Self::Triangle => {
                if p < 0.25 {
                    4.0 * p
                } else if p < 0.75 {
                    2.0 - 4.0 * p
                } else {
                    4.0 * p - 4.0
                }
            }
            Self::Saw => 2.0 * p - 1.0,
            Self::Square => {
                if p < 0.5 {
                    1.0
                } else {
                    -1.0
                }
            }
        }
    }

    fn name(self) -> &'static str {
        match self {
            Self::Sine => "sine",
            Self::Triangle => "triangle",
            Self::Saw => "saw",
            Self::Square => "square",
        }
    }
}

impl fmt::Display for Waveform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Waveform {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sine" => Ok(Self::Sine),
            "triangle" => Ok(Self::Triangle),
            "saw" => Ok(Self::Saw),
            "square" => Ok(Self::Square),
            other => Err(Error::Config(format!("unsupported waveform {other:?}"))),
        }
    }
}

impl Serialize for Waveform {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Waveform {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Oscillator {
    pub waveform: Waveform,
    #[serde(default)]
    pub detune_semitones: f64,
    pub gain: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Modulation {
    /// Hz.
    pub lfo_rate: f64,
    /// Semitones of vibrato.
    pub pitch_depth: f64,
    /// Fraction of amplitude removed at the LFO trough.
    pub amp_depth: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preset {
    pub id: String,
    pub oscillators: Vec<Oscillator>,
    #[serde(default)]
    pub modulation: Option<Modulation>,
}

impl Preset {
    pub fn single(id: &str, waveform: Waveform) -> Self {
        Self {
            id: id.to_string(),
            oscillators: vec![Oscillator {
                waveform,
                detune_semitones: 0.0,
                gain: 1.0,
            }],
            modulation: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let p: Preset =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("preset: {e}")))?;
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.oscillators.is_empty() {
            return Err(Error::Config(format!("preset {} has no oscillators", self.id)));
        }
        let total: f64 = self.oscillators.iter().map(|o| o.gain).sum();
        if total.is_nan() || total <= 0.0 || self.oscillators.iter().any(|o| !o.gain.is_finite()) {
            return Err(Error::Config(format!("preset {} gains must sum > 0", self.id)));
        }
        if let Some(m) = &self.modulation {
            if !(m.lfo_rate >= 0.0 && (0.0..=1.0).contains(&m.amp_depth) && m.pitch_depth.is_finite()) {
                return Err(Error::Config(format!("preset {} has invalid modulation", self.id)));
            }
        }
        Ok(())
    }
}

/// Families of source timbres of increasing complexity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PresetGroup {
    /// Single-oscillator basic waves.
    A,
    /// Dual-oscillator stacks a fifth apart.
    B,
    /// Group B with LFO pitch and amplitude modulation.
    C,
}

fn dual(id: &str, a: Waveform, b: Waveform, gain_b: f64) -> Preset {
    Preset {
        id: id.to_string(),
        oscillators: vec![
            Oscillator {
                waveform: a,
                detune_semitones: 0.0,
                gain: 1.0,
            },
            Oscillator {
                waveform: b,
                detune_semitones: 7.0,
                gain: gain_b,
            },
        ],
        modulation: None,
    }
}

pub fn preset_group(group: PresetGroup) -> Vec<Preset> {
    use Waveform::*;
    match group {
        PresetGroup::A => vec![
            Preset::single("sine", Sine),
            Preset::single("triangle", Triangle),
            Preset::single("saw", Saw),
            Preset::single("square", Square),
        ],
        PresetGroup::B => vec![
            dual("saw_fifths", Saw, Saw, 0.8),
            dual("square_saw", Square, Saw, 0.6),
            dual("triangle_square", Triangle, Square, 0.5),
            dual("sine_saw", Sine, Saw, 0.7),
        ],
        PresetGroup::C => preset_group(PresetGroup::B)
            .into_iter()
            .enumerate()
            .map(|(i, mut p)| {
                p.id = format!("{}_mod", p.id);
                p.modulation = Some(Modulation {
                    lfo_rate: 2.0 + 1.5 * i as f64,
                    pitch_depth: 0.3,
                    amp_depth: 0.4,
                });
                p
            })
            .collect(),
    }
}

pub fn midi_to_hz(pitch: i32) -> f64 {
    440.0 * 2f64.powf((pitch as f64 - 69.0) / 12.0)
}

/// Renders a held note, peak-normalised to [`PEAK_LEVEL`]. Deterministic.
pub fn render_source(preset: &Preset, pitch_midi: i32, duration: f64, sample_rate: u32) -> Result<AudioBuffer> {
    preset.validate()?;
    if duration.is_nan() || duration <= 0.0 {
        return Err(Error::Config(format!("duration must be positive, got {duration}")));
    }
    if sample_rate < MIN_SAMPLE_RATE {
        return Err(Error::Config(format!(
            "sample rate {sample_rate} below {MIN_SAMPLE_RATE} Hz"
        )));
    }
    let n = (duration * sample_rate as f64).round() as usize;
    let sr = sample_rate as f64;
    let f0 = midi_to_hz(pitch_midi);
    let mut out = vec![0.0f64; n];
    for osc in &preset.oscillators {
        let f = f0 * 2f64.powf(osc.detune_semitones / 12.0);
        match &preset.modulation {
            None => {
                for (i, o) in out.iter_mut().enumerate() {
                    let phase = (f * i as f64 / sr).fract();
                    *o += osc.gain * osc.waveform.at(phase);
                }
            }
            Some(m) => {
                let mut phase = 0.0f64;
                for (i, o) in out.iter_mut().enumerate() {
                    let t = i as f64 / sr;
                    let lfo = (TAU * m.lfo_rate * t).sin();
                    let amp = 1.0 - m.amp_depth * (0.5 - 0.5 * (TAU * m.lfo_rate * t).cos());
                    *o += osc.gain * amp * osc.waveform.at(phase);
                    let inst = f * 2f64.powf(m.pitch_depth * lfo / 12.0);
                    phase = (phase + inst / sr).fract();
                }
            }
        }
    }
    let peak = out.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    let k = if peak > 0.0 { PEAK_LEVEL / peak } else { 0.0 };
    AudioBuffer::new(out.iter().map(|&v| (v * k) as f32).collect(), sample_rate)
}
