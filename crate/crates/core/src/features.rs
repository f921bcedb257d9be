//! STFT, Mel spectrogram (dB) and MFCC extraction.

use std::cell::RefCell;
use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dsp::AudioBuffer;
use crate::error::{Error, Result};

/// Power floor before the dB conversion; gives a floor of exactly -100 dB.
pub const POWER_FLOOR: f64 = 1e-10;
pub const DB_FLOOR: f64 = -100.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub fft_size: usize,
    pub hop: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub n_mels: usize,
    pub n_mfcc: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            fft_size: 2048,
            hop: 512,
            fmin: 20.0,
            fmax: 16000.0,
            n_mels: 128,
            n_mfcc: 30,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        if !self.fft_size.is_power_of_two() || self.fft_size < 2 {
            return Err(Error::Config(format!("fft size {} is not a power of two", self.fft_size)));
        }
        if self.hop == 0 || self.hop > self.fft_size {
            return Err(Error::Config(format!("hop {} must be in 1..={}", self.hop, self.fft_size)));
        }
        if !(self.fmin >= 0.0 && self.fmin < self.fmax) {
            return Err(Error::Config(format!("bad mel range [{}, {}]", self.fmin, self.fmax)));
        }
        if self.fmax > sample_rate as f64 / 2.0 {
            return Err(Error::Config(format!(
                "fmax {} above Nyquist for {sample_rate} Hz",
                self.fmax
            )));
        }
        if self.n_mels == 0 || self.n_mfcc == 0 || self.n_mfcc > self.n_mels {
            return Err(Error::Config(format!(
                "need 0 < n_mfcc ({}) <= n_mels ({})",
                self.n_mfcc, self.n_mels
            )));
        }
        Ok(())
    }

    pub fn frames(&self, samples: usize) -> usize {
        1 + samples / self.hop
    }

    /// Stable hex digest recorded next to trained models.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))[..16].to_string()
    }
}

/// Row-major `rows × cols` matrix; rows are frequency bins, columns frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spectrogram {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Spectrogram {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::Input(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.at(r, c)).collect()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn same_shape(&self, other: &Spectrogram) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Input(format!(
                "shape mismatch {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(n: usize) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| p.borrow_mut().plan_fft_forward(n))
}

/// Periodic "Hann" window as used for spectral analysis.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect()
}

/// Reflect-padded sample at signed position `i` (edge sample not repeated).
pub(crate) fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let m = i.rem_euclid(period);
    if m < len as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Squared or plain magnitudes of centred, Hann-windowed frames.
fn stft(samples: &[f32], fft_size: usize, hop: usize, power: bool) -> Spectrogram {
    let bins = fft_size / 2 + 1;
    let frames = 1 + samples.len() / hop;
    let window = hann(fft_size);
    let fft = plan(fft_size);
    let mut buf = vec![Complex::new(0.0, 0.0); fft_size];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut out = Spectrogram::zeros(bins, frames);
    let half = (fft_size / 2) as isize;
    for t in 0..frames {
        let start = (t * hop) as isize - half;
        for (j, b) in buf.iter_mut().enumerate() {
            let s = samples[reflect_index(start + j as isize, samples.len())] as f64;
            *b = Complex::new(s * window[j], 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for (k, b) in buf.iter().take(bins).enumerate() {
            let p = b.norm_sqr();
            out.data[k * frames + t] = if power { p } else { p.sqrt() };
        }
    }
    out
}

pub fn stft_magnitude(audio: &AudioBuffer, fft_size: usize, hop: usize) -> Result<Spectrogram> {
    if audio.is_empty() {
        return Err(Error::Input("empty audio".into()));
    }
    if !fft_size.is_power_of_two() || fft_size < 2 || hop == 0 {
        return Err(Error::Config(format!("bad stft geometry fft={fft_size} hop={hop}")));
    }
    Ok(stft(&audio.samples, fft_size, hop, false))
}

fn hz_to_mel(f: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    let min_log_mel = MIN_LOG_HZ / F_SP;
    let logstep = 6.4f64.ln() / 27.0;
    if f >= MIN_LOG_HZ {
        min_log_mel + (f / MIN_LOG_HZ).ln() / logstep
    } else {
        f / F_SP
    }
}

fn mel_to_hz(m: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    let min_log_mel = MIN_LOG_HZ / F_SP;
    let logstep = 6.4f64.ln() / 27.0;
    if m >= min_log_mel {
        MIN_LOG_HZ * (logstep * (m - min_log_mel)).exp()
    } else {
        F_SP * m
    }
}

/// Slaney-scale triangular filters with area normalisation; `n_mels × (fft_size/2+1)`.
pub fn mel_filterbank(cfg: &FeatureConfig, sample_rate: u32) -> Spectrogram {
    let bins = cfg.fft_size / 2 + 1;
    let sr = sample_rate as f64;
    let fft_freqs: Vec<f64> = (0..bins).map(|k| k as f64 * sr / cfg.fft_size as f64).collect();
    let (lo, hi) = (hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax));
    let points: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let mut w = Spectrogram::zeros(cfg.n_mels, bins);
    for m in 0..cfg.n_mels {
        let (f0, f1, f2) = (points[m], points[m + 1], points[m + 2]);
        let norm = 2.0 / (f2 - f0);
        for (k, &f) in fft_freqs.iter().enumerate() {
            let rise = (f - f0) / (f1 - f0);
            let fall = (f2 - f) / (f2 - f1);
            w.data[m * bins + k] = rise.min(fall).max(0.0) * norm;
        }
    }
    w
}

/// Orthonormal DCT-II basis, `n_out × n_in`.
pub fn dct_matrix(n_out: usize, n_in: usize) -> Spectrogram {
    let mut d = Spectrogram::zeros(n_out, n_in);
    let n = n_in as f64;
    for k in 0..n_out {
        let scale = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
        for i in 0..n_in {
            d.data[k * n_in + i] = scale * (PI * k as f64 * (2.0 * i as f64 + 1.0) / (2.0 * n)).cos();
        }
    }
    d
}

/// `a (m×k) · b (k×n)`.
fn matmul(a: &Spectrogram, b: &Spectrogram) -> Spectrogram {
    let mut out = Spectrogram::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let av = a.data[i * a.cols + k];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

pub fn power_to_db(p: f64) -> f64 {
    10.0 * p.max(POWER_FLOOR).log10()
}

/// Cached filter bank and DCT basis for one (config, sample rate).
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    cfg: FeatureConfig,
    sample_rate: u32,
    filters: Spectrogram,
    dct: Spectrogram,
}

impl FeatureExtractor {
    pub fn new(cfg: &FeatureConfig, sample_rate: u32) -> Result<Self> {
        cfg.validate(sample_rate)?;
        Ok(Self {
            cfg: cfg.clone(),
            sample_rate,
            filters: mel_filterbank(cfg, sample_rate),
            dct: dct_matrix(cfg.n_mfcc, cfg.n_mels),
        })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.cfg
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    fn check(&self, audio: &AudioBuffer) -> Result<()> {
        if audio.sample_rate != self.sample_rate {
            return Err(Error::Input(format!(
                "extractor built for {} Hz, got {} Hz",
                self.sample_rate, audio.sample_rate
            )));
        }
        if audio.is_empty() {
            return Err(Error::Input("empty audio".into()));
        }
        Ok(())
    }

    pub fn mel_db(&self, audio: &AudioBuffer) -> Result<Spectrogram> {
        self.check(audio)?;
        let power = stft(&audio.samples, self.cfg.fft_size, self.cfg.hop, true);
        let mut mel = matmul(&self.filters, &power);
        mel.data.iter_mut().for_each(|v| *v = power_to_db(*v));
        Ok(mel)
    }

    pub fn mfcc(&self, mel_db: &Spectrogram) -> Result<Spectrogram> {
        if mel_db.rows != self.cfg.n_mels {
            return Err(Error::Input(format!(
                "expected {} mel rows, got {}",
                self.cfg.n_mels, mel_db.rows
            )));
        }
        Ok(matmul(&self.dct, mel_db))
    }

    pub fn clip(&self, audio: &AudioBuffer) -> Result<ClipFeatures> {
        let mel_db = self.mel_db(audio)?;
        let mfcc = self.mfcc(&mel_db)?;
        Ok(ClipFeatures { mel_db, mfcc })
    }
}

pub fn mel_spectrogram_db(audio: &AudioBuffer, cfg: &FeatureConfig) -> Result<Spectrogram> {
    FeatureExtractor::new(cfg, audio.sample_rate)?.mel_db(audio)
}

pub fn mfcc(mel_db: &Spectrogram, n_mfcc: usize) -> Result<Spectrogram> {
    if n_mfcc == 0 || mel_db.rows < n_mfcc {
        return Err(Error::Input(format!(
            "cannot take {n_mfcc} coefficients from {} mel rows",
            mel_db.rows
        )));
    }
    Ok(matmul(&dct_matrix(n_mfcc, mel_db.rows), mel_db))
}

/// Mel-dB and MFCC matrices of a single clip.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipFeatures {
    pub mel_db: Spectrogram,
    pub mfcc: Spectrogram,
}

/// Two-channel network input: channel 0 is the current audio, channel 1 the target.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePair {
    /// `[2, n_mels, frames]`, row-major.
    pub mel: Vec<f32>,
    /// `[2, n_mfcc, frames]`, row-major.
    pub mfcc: Vec<f32>,
    pub n_mels: usize,
    pub n_mfcc: usize,
    pub frames: usize,
}

impl FeaturePair {
    pub fn from_clips(input: &ClipFeatures, target: &ClipFeatures) -> Result<Self> {
        input.mel_db.same_shape(&target.mel_db)?;
        input.mfcc.same_shape(&target.mfcc)?;
        let cast = |a: &Spectrogram, b: &Spectrogram| -> Vec<f32> {
            a.data.iter().chain(&b.data).map(|&v| v as f32).collect()
        };
        Ok(Self {
            mel: cast(&input.mel_db, &target.mel_db),
            mfcc: cast(&input.mfcc, &target.mfcc),
            n_mels: input.mel_db.rows,
            n_mfcc: input.mfcc.rows,
            frames: input.mel_db.cols,
        })
    }

    pub fn mel_dims(&self) -> [usize; 3] {
        [2, self.n_mels, self.frames]
    }

    pub fn mfcc_dims(&self) -> [usize; 3] {
        [2, self.n_mfcc, self.frames]
    }

    /// Swaps the input and target channels.
    pub fn swapped(&self) -> Self {
        let swap = |v: &[f32]| {
            let h = v.len() / 2;
            v[h..].iter().chain(&v[..h]).copied().collect()
        };
        Self {
            mel: swap(&self.mel),
            mfcc: swap(&self.mfcc),
            ..self.clone()
        }
    }
}

pub fn make_feature_pair(input: &AudioBuffer, target: &AudioBuffer, cfg: &FeatureConfig) -> Result<FeaturePair> {
    if input.sample_rate != target.sample_rate {
        return Err(Error::Input(format!(
            "sample rates differ: {} vs {}",
            input.sample_rate, target.sample_rate
        )));
    }
    if input.len() != target.len() {
        return Err(Error::Input(format!("lengths differ: {} vs {}", input.len(), target.len())));
    }
    let fx = FeatureExtractor::new(cfg, input.sample_rate)?;
    FeaturePair::from_clips(&fx.clip(input)?, &fx.clip(target)?)
}
