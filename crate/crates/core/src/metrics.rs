//! Audio similarity metrics and the aggregated report.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dsp::AudioBuffer;
use crate::error::{Error, Result};
use crate::features::{stft_magnitude, ClipFeatures, FeatureExtractor, Spectrogram};

pub const LOG_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpectralErrorKind {
    Mse,
    Mae,
    Lsd,
}

/// Raw (unscaled) error between two equally shaped matrices.
pub fn spectral_error(s: &Spectrogram, s_hat: &Spectrogram, kind: SpectralErrorKind) -> Result<f64> {
    s.same_shape(s_hat)?;
    if s.data.is_empty() {
        return Err(Error::Input("empty matrices".into()));
    }
    let n = s.data.len() as f64;
    let diffs = s.data.iter().zip(&s_hat.data).map(|(a, b)| a - b);
    Ok(match kind {
        SpectralErrorKind::Mse => diffs.map(|d| d * d).sum::<f64>() / n,
        SpectralErrorKind::Mae => diffs.map(f64::abs).sum::<f64>() / n,
        SpectralErrorKind::Lsd => {
            let mut total = 0.0;
            for c in 0..s.cols {
                let mut acc = 0.0;
                for r in 0..s.rows {
                    let d = s.at(r, c) - s_hat.at(r, c);
                    acc += d * d;
                }
                total += (acc / s.rows as f64).sqrt();
            }
            total / s.cols as f64
        }
    })
}

/// Mean over frames of the Euclidean distance between coefficient vectors.
pub fn mfccd(c: &Spectrogram, c_hat: &Spectrogram) -> Result<f64> {
    c.same_shape(c_hat)?;
    if c.cols == 0 {
        return Err(Error::Input("no frames".into()));
    }
    let mut total = 0.0;
    for t in 0..c.cols {
        let mut acc = 0.0;
        for r in 0..c.rows {
            let d = c.at(r, t) - c_hat.at(r, t);
            acc += d * d;
        }
        total += acc.sqrt();
    }
    Ok(total / c.cols as f64)
}

/// Pearson correlation of the flattened matrices, in [-1, 1].
pub fn pcc(s: &Spectrogram, s_hat: &Spectrogram) -> Result<f64> {
    s.same_shape(s_hat)?;
    let n = s.data.len() as f64;
    let ma = s.data.iter().sum::<f64>() / n;
    let mb = s_hat.data.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (a, b) in s.data.iter().zip(&s_hat.data) {
        let (da, db) = (a - ma, b - mb);
        cov += da * db;
        va += da * da;
        vb += db * db;
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::UndefinedCorrelation(
            "one of the spectrograms is constant".into(),
        ));
    }
    Ok((cov / (va.sqrt() * vb.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MssmaeConfig {
    pub fft_sizes: Vec<usize>,
    pub overlap: f64,
    pub alpha: f64,
}

impl Default for MssmaeConfig {
    fn default() -> Self {
        Self {
            fft_sizes: vec![64, 128, 256, 512, 1024, 2048],
            overlap: 0.75,
            alpha: 0.1,
        }
    }
}

impl MssmaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.fft_sizes.is_empty() || !(0.0..1.0).contains(&self.overlap) {
            return Err(Error::Config("mssmae needs at least one fft size and overlap in [0, 1)".into()));
        }
        if let Some(&f) = self.fft_sizes.iter().find(|&&f| self.hop(f) == 0 || !f.is_power_of_two()) {
            return Err(Error::Config(format!("bad mssmae fft size {f}")));
        }
        Ok(())
    }

    pub fn hop(&self, fft_size: usize) -> usize {
        (fft_size as f64 * (1.0 - self.overlap)).round() as usize
    }
}

/// Magnitude spectrograms at every configured resolution.
pub fn multiscale_magnitudes(audio: &AudioBuffer, cfg: &MssmaeConfig) -> Result<Vec<Spectrogram>> {
    cfg.fft_sizes
        .iter()
        .map(|&f| stft_magnitude(audio, f, cfg.hop(f)))
        .collect()
}

fn mssmae_from_mags(a: &[Spectrogram], b: &[Spectrogram], alpha: f64) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Input("scale count mismatch".into()));
    }
    let mut total = 0.0;
    for (s, t) in a.iter().zip(b) {
        s.same_shape(t)?;
        let n = s.data.len() as f64;
        let (mut lin, mut log) = (0.0, 0.0);
        for (&x, &y) in s.data.iter().zip(&t.data) {
            lin += (x - y).abs();
            log += ((x + LOG_EPS).ln() - (y + LOG_EPS).ln()).abs();
        }
        total += lin / n + alpha * log / n;
    }
    Ok(total / a.len() as f64)
}

/// Raw multi-scale spectral MAE.
pub fn mssmae(out: &AudioBuffer, target: &AudioBuffer, cfg: &MssmaeConfig) -> Result<f64> {
    cfg.validate()?;
    if out.len() != target.len() || out.sample_rate != target.sample_rate {
        return Err(Error::Input(format!(
            "clips differ in length or rate: {}@{} vs {}@{}",
            out.len(),
            out.sample_rate,
            target.len(),
            target.sample_rate
        )));
    }
    mssmae_from_mags(
        &multiscale_magnitudes(out, cfg)?,
        &multiscale_magnitudes(target, cfg)?,
        cfg.alpha,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Mse,
    Mae,
    Lsd,
    Mfccd,
    Pcc,
    Mssmae,
}

impl MetricKind {
    pub const ALL: [MetricKind; 6] = [
        MetricKind::Mse,
        MetricKind::Mae,
        MetricKind::Lsd,
        MetricKind::Mfccd,
        MetricKind::Pcc,
        MetricKind::Mssmae,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Mse => "mse",
            Self::Mae => "mae",
            Self::Lsd => "lsd",
            Self::Mfccd => "mfccd",
            Self::Pcc => "pcc",
            Self::Mssmae => "mssmae",
        }
    }

    /// Every metric except PCC is an error.
    pub fn lower_is_better(self) -> bool {
        self != Self::Pcc
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown metric {s:?}")))
    }
}

/// All six metrics; mse, mae, pcc and mssmae are multiplied by 100.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mse: f64,
    pub mae: f64,
    pub lsd: f64,
    pub mfccd: f64,
    pub pcc: f64,
    pub mssmae: f64,
}

impl MetricReport {
    pub fn get(&self, kind: MetricKind) -> f64 {
        match kind {
            MetricKind::Mse => self.mse,
            MetricKind::Mae => self.mae,
            MetricKind::Lsd => self.lsd,
            MetricKind::Mfccd => self.mfccd,
            MetricKind::Pcc => self.pcc,
            MetricKind::Mssmae => self.mssmae,
        }
    }

    /// Field-wise `self - before`.
    pub fn delta(&self, before: &MetricReport) -> MetricReport {
        let mut d = *self;
        for k in MetricKind::ALL {
            *d.get_mut(k) -= before.get(k);
        }
        d
    }

    pub fn get_mut(&mut self, kind: MetricKind) -> &mut f64 {
        match kind {
            MetricKind::Mse => &mut self.mse,
            MetricKind::Mae => &mut self.mae,
            MetricKind::Lsd => &mut self.lsd,
            MetricKind::Mfccd => &mut self.mfccd,
            MetricKind::Pcc => &mut self.pcc,
            MetricKind::Mssmae => &mut self.mssmae,
        }
    }
}

/// Everything the report needs from one clip, computed once.
#[derive(Clone, Debug)]
pub struct Analysis {
    pub features: ClipFeatures,
    pub magnitudes: Vec<Spectrogram>,
}

/// Extractors for the report; reusable across many clips of one sample rate.
#[derive(Clone, Debug)]
pub struct Analyzer {
    pub features: FeatureExtractor,
    pub mss: MssmaeConfig,
}

impl Analyzer {
    pub fn new(features: FeatureExtractor, mss: MssmaeConfig) -> Result<Self> {
        mss.validate()?;
        Ok(Self { features, mss })
    }

    pub fn analyse(&self, audio: &AudioBuffer) -> Result<Analysis> {
        Ok(Analysis {
            features: self.features.clip(audio)?,
            magnitudes: multiscale_magnitudes(audio, &self.mss)?,
        })
    }

    pub fn report(&self, a: &Analysis, b: &Analysis) -> Result<MetricReport> {
        let (sa, sb) = (&a.features.mel_db, &b.features.mel_db);
        Ok(MetricReport {
            mse: 100.0 * spectral_error(sa, sb, SpectralErrorKind::Mse)?,
            mae: 100.0 * spectral_error(sa, sb, SpectralErrorKind::Mae)?,
            lsd: spectral_error(sa, sb, SpectralErrorKind::Lsd)?,
            mfccd: mfccd(&a.features.mfcc, &b.features.mfcc)?,
            pcc: 100.0 * pcc(sa, sb)?,
            mssmae: 100.0 * mssmae_from_mags(&a.magnitudes, &b.magnitudes, self.mss.alpha)?,
        })
    }
}

pub fn metric_report(
    a: &AudioBuffer,
    b: &AudioBuffer,
    features: &crate::features::FeatureConfig,
    mss: &MssmaeConfig,
) -> Result<MetricReport> {
    if a.len() != b.len() || a.sample_rate != b.sample_rate {
        return Err(Error::Input("clips differ in length or sample rate".into()));
    }
    let analyzer = Analyzer::new(FeatureExtractor::new(features, a.sample_rate)?, mss.clone())?;
    analyzer.report(&analyzer.analyse(a)?, &analyzer.analyse(b)?)
}
