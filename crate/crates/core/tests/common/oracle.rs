//! Brute-force reference implementations used as test oracles.
#![allow(dead_code)]

use std::f64::consts::PI;

/// Numpy-style reflection by repeated mirroring.
pub fn reflect(mut i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let last = len as isize - 1;
    loop {
        if i < 0 {
            i = -i;
        } else if i > last {
            i = 2 * last - i;
        } else {
            return i as usize;
        }
    }
}

/// Magnitude (or power) STFT via a direct DFT; returns `[bin][frame]`.
pub fn stft(x: &[f64], n: usize, hop: usize, power: bool) -> Vec<Vec<f64>> {
    let frames = 1 + x.len() / hop;
    let bins = n / 2 + 1;
    let mut out = vec![vec![0.0; frames]; bins];
    for t in 0..frames {
        let frame: Vec<f64> = (0..n)
            .map(|j| {
                let w = (PI * j as f64 / n as f64).sin().powi(2);
                w * x[reflect((t * hop + j) as isize - (n / 2) as isize, x.len())]
            })
            .collect();
        for (k, row) in out.iter_mut().enumerate() {
            let (mut re, mut im) = (0.0, 0.0);
            for (j, &v) in frame.iter().enumerate() {
                let a = -2.0 * PI * ((k * j) % n) as f64 / n as f64;
                re += v * a.cos();
                im += v * a.sin();
            }
            let p = re * re + im * im;
            row[t] = if power { p } else { p.sqrt() };
        }
    }
    out
}

pub fn hz_to_mel(f: f64) -> f64 {
    if f < 1000.0 {
        3.0 * f / 200.0
    } else {
        15.0 + 27.0 * (f / 1000.0).ln() / 6.4f64.ln()
    }
}

pub fn mel_to_hz(m: f64) -> f64 {
    if m < 15.0 {
        200.0 * m / 3.0
    } else {
        1000.0 * 6.4f64.powf((m - 15.0) / 27.0)
    }
}

/// Slaney-normalised triangular filters; `[mel][bin]`.
pub fn mel_filters(sr: f64, n_fft: usize, n_mels: usize, fmin: f64, fmax: f64) -> Vec<Vec<f64>> {
    let (lo, hi) = (hz_to_mel(fmin), hz_to_mel(fmax));
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    (0..n_mels)
        .map(|m| {
            (0..n_fft / 2 + 1)
                .map(|k| {
                    let f = k as f64 * sr / n_fft as f64;
                    let w = if f <= edges[m] || f >= edges[m + 2] {
                        0.0
                    } else if f <= edges[m + 1] {
                        (f - edges[m]) / (edges[m + 1] - edges[m])
                    } else {
                        (edges[m + 2] - f) / (edges[m + 2] - edges[m + 1])
                    };
                    w * 2.0 / (edges[m + 2] - edges[m])
                })
                .collect()
        })
        .collect()
}

pub fn mel_db(x: &[f64], sr: f64, n_fft: usize, hop: usize, n_mels: usize, fmin: f64, fmax: f64) -> Vec<Vec<f64>> {
    let p = stft(x, n_fft, hop, true);
    let fb = mel_filters(sr, n_fft, n_mels, fmin, fmax);
    let frames = p[0].len();
    fb.iter()
        .map(|w| {
            (0..frames)
                .map(|t| {
                    let e: f64 = w.iter().zip(&p).map(|(a, row)| a * row[t]).sum();
                    10.0 * e.max(1e-10).log10()
                })
                .collect()
        })
        .collect()
}

/// Orthonormal DCT-II of one vector, first `k` coefficients.
pub fn dct(v: &[f64], k: usize) -> Vec<f64> {
    let n = v.len() as f64;
    (0..k)
        .map(|q| {
            let s: f64 = v
                .iter()
                .enumerate()
                .map(|(i, x)| x * (PI / n * (i as f64 + 0.5) * q as f64).cos())
                .sum();
            s * if q == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() }
        })
        .collect()
}

pub fn idct(c: &[f64]) -> Vec<f64> {
    let n = c.len() as f64;
    (0..c.len())
        .map(|i| {
            c.iter()
                .enumerate()
                .map(|(q, x)| {
                    let s = if q == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
                    s * x * (PI / n * (i as f64 + 0.5) * q as f64).cos()
                })
                .sum()
        })
        .collect()
}

pub fn mse(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let (mut s, mut n) = (0.0, 0.0);
    for (ra, rb) in a.iter().zip(b) {
        for (x, y) in ra.iter().zip(rb) {
            s += (x - y).powi(2);
            n += 1.0;
        }
    }
    s / n
}

pub fn mae(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let (mut s, mut n) = (0.0, 0.0);
    for (ra, rb) in a.iter().zip(b) {
        for (x, y) in ra.iter().zip(rb) {
            s += (x - y).abs();
            n += 1.0;
        }
    }
    s / n
}

/// Rows are bins, columns frames.
pub fn lsd(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let frames = a[0].len();
    let per_frame: Vec<f64> = (0..frames)
        .map(|t| {
            let s: f64 = a.iter().zip(b).map(|(ra, rb)| (ra[t] - rb[t]).powi(2)).sum();
            (s / a.len() as f64).sqrt()
        })
        .collect();
    per_frame.iter().sum::<f64>() / frames as f64
}

pub fn mfccd(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let frames = a[0].len();
    (0..frames)
        .map(|t| {
            a.iter()
                .zip(b)
                .map(|(ra, rb)| (ra[t] - rb[t]).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .sum::<f64>()
        / frames as f64
}

pub fn pcc(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let x: Vec<f64> = a.concat();
    let y: Vec<f64> = b.concat();
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let cov: f64 = x.iter().zip(&y).map(|(p, q)| (p - mx) * (q - my)).sum::<f64>() / n;
    let sx = (x.iter().map(|p| (p - mx).powi(2)).sum::<f64>() / n).sqrt();
    let sy = (y.iter().map(|q| (q - my).powi(2)).sum::<f64>() / n).sqrt();
    cov / (sx * sy)
}

pub fn mssmae(x: &[f64], y: &[f64], sizes: &[usize], overlap: f64, alpha: f64) -> f64 {
    let mut total = 0.0;
    for &n in sizes {
        let hop = (n as f64 * (1.0 - overlap)).round() as usize;
        let a = stft(x, n, hop, false);
        let b = stft(y, n, hop, false);
        let la: Vec<Vec<f64>> = a.iter().map(|r| r.iter().map(|v| (v + 1e-7).ln()).collect()).collect();
        let lb: Vec<Vec<f64>> = b.iter().map(|r| r.iter().map(|v| (v + 1e-7).ln()).collect()).collect();
        total += mae(&a, &b) + alpha * mae(&la, &lb);
    }
    total / sizes.len() as f64
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}
