//! Surrogate synthesizer and effect rack.

mod effects;
mod filters;
mod source;

use std::io::Cursor;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use effects::{
    apply_chain, apply_effect, sample_params, EffectKind, EffectStep, DISTORTION_MODES, OUTPUT_CLAMP,
};
pub use source::{
    midi_to_hz, preset_group, render_source, Modulation, Oscillator, Preset, PresetGroup, Waveform,
    DEFAULT_DURATION, DEFAULT_PITCH, DEFAULT_SAMPLE_RATE, PEAK_LEVEL,
};

/// Mono audio clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AudioBuffer {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Input("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::Input(format!("non-finite sample at {i}")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn silence(len: usize, sample_rate: u32) -> Self {
        Self {
            samples: vec![0.0; len],
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        let s: f64 = self.samples.iter().map(|&v| (v as f64) * (v as f64)).sum();
        (s / self.samples.len() as f64).sqrt()
    }

    /// RMS of the sample-wise difference; lengths must match.
    pub fn rms_difference(&self, other: &AudioBuffer) -> f64 {
        assert_eq!(self.len(), other.len(), "rms_difference on unequal lengths");
        if self.is_empty() {
            return 0.0;
        }
        let s: f64 = self
            .samples
            .iter()
            .zip(&other.samples)
            .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
            .sum();
        (s / self.len() as f64).sqrt()
    }

    /// Zero-pads to `len` samples (never truncates).
    pub fn padded_to(&self, len: usize) -> AudioBuffer {
        let mut samples = self.samples.clone();
        if samples.len() < len {
            samples.resize(len, 0.0);
        }
        AudioBuffer {
            samples,
            sample_rate: self.sample_rate,
        }
    }

    pub fn scaled(&self, k: f32) -> AudioBuffer {
        AudioBuffer {
            samples: self.samples.iter().map(|v| v * k).collect(),
            sample_rate: self.sample_rate,
        }
    }
}

fn wav_spec(sample_rate: u32) -> hound::WavSpec {
    hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    }
}

/// Mono IEEE-float 32-bit little-endian WAV.
pub fn write_wav(path: &Path, audio: &AudioBuffer) -> Result<()> {
    let mut w = hound::WavWriter::create(path, wav_spec(audio.sample_rate))?;
    for &s in &audio.samples {
        w.write_sample(s)?;
    }
    w.finalize()?;
    Ok(())
}

pub fn wav_bytes(audio: &AudioBuffer) -> Result<Vec<u8>> {
    let mut cursor = Cursor::new(Vec::new());
    {
        let mut w = hound::WavWriter::new(&mut cursor, wav_spec(audio.sample_rate))?;
        for &s in &audio.samples {
            w.write_sample(s)?;
        }
        w.finalize()?;
    }
    Ok(cursor.into_inner())
}

fn decode<R: std::io::Read>(reader: hound::WavReader<R>) -> Result<AudioBuffer> {
    let spec = reader.spec();
    if spec.channels == 0 {
        return Err(Error::Input("WAV header declares no channels".into()));
    }
    let interleaved: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Float => reader.into_samples::<f32>().collect::<Result<_, _>>()?,
        hound::SampleFormat::Int => {
            let scale = 1.0 / (1i64 << (spec.bits_per_sample - 1)) as f32;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| v as f32 * scale))
                .collect::<Result<_, _>>()?
        }
    };
    // Multichannel input is averaged down to mono.
    let ch = spec.channels as usize;
    let samples = if ch == 1 {
        interleaved
    } else {
        interleaved
            .chunks_exact(ch)
            .map(|f| f.iter().sum::<f32>() / ch as f32)
            .collect()
    };
    AudioBuffer::new(samples, spec.sample_rate)
}

pub fn read_wav(path: &Path) -> Result<AudioBuffer> {
    decode(hound::WavReader::open(path)?)
}

pub fn read_wav_bytes(bytes: &[u8]) -> Result<AudioBuffer> {
    decode(hound::WavReader::new(Cursor::new(bytes))?)
}
