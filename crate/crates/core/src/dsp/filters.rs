//! Small filter building blocks. All state is f64.

use std::f64::consts::PI;

/// Transposed direct form II biquad, coefficients normalised by a0.
#[derive(Clone, Debug)]
pub struct Biquad {
    b0: f64,
    b1: f64,
    b2: f64,
    a1: f64,
    a2: f64,
    z1: f64,
    z2: f64,
}

impl Biquad {
    fn normalised(b0: f64, b1: f64, b2: f64, a0: f64, a1: f64, a2: f64) -> Self {
        Self {
            b0: b0 / a0,
            b1: b1 / a0,
            b2: b2 / a0,
            a1: a1 / a0,
            a2: a2 / a0,
            z1: 0.0,
            z2: 0.0,
        }
    }

    pub fn lowpass(freq: f64, q: f64, sample_rate: f64) -> Self {
        let w = 2.0 * PI * freq / sample_rate;
        let (s, c) = w.sin_cos();
        let alpha = s / (2.0 * q);
        Self::normalised((1.0 - c) / 2.0, 1.0 - c, (1.0 - c) / 2.0, 1.0 + alpha, -2.0 * c, 1.0 - alpha)
    }

    pub fn highpass(freq: f64, q: f64, sample_rate: f64) -> Self {
        let w = 2.0 * PI * freq / sample_rate;
        let (s, c) = w.sin_cos();
        let alpha = s / (2.0 * q);
        Self::normalised((1.0 + c) / 2.0, -(1.0 + c), (1.0 + c) / 2.0, 1.0 + alpha, -2.0 * c, 1.0 - alpha)
    }

    /// RBJ cookbook high shelf.
    pub fn high_shelf(freq: f64, q: f64, gain_db: f64, sample_rate: f64) -> Self {
        let a = 10f64.powf(gain_db / 40.0);
        let w = 2.0 * PI * freq / sample_rate;
        let (s, c) = w.sin_cos();
        let alpha = s / (2.0 * q);
        let sa = 2.0 * a.sqrt() * alpha;
        Self::normalised(
            a * ((a + 1.0) + (a - 1.0) * c + sa),
            -2.0 * a * ((a - 1.0) + (a + 1.0) * c),
            a * ((a + 1.0) + (a - 1.0) * c - sa),
            (a + 1.0) - (a - 1.0) * c + sa,
            2.0 * ((a - 1.0) - (a + 1.0) * c),
            (a + 1.0) - (a - 1.0) * c - sa,
        )
    }

    #[inline]
    pub fn tick(&mut self, x: f64) -> f64 {
        let y = self.b0 * x + self.z1;
        self.z1 = self.b1 * x - self.a1 * y + self.z2;
        self.z2 = self.b2 * x - self.a2 * y;
        y
    }

    pub fn run(&mut self, xs: &mut [f64]) {
        for x in xs {
            *x = self.tick(*x);
        }
    }
}

const BUTTERWORTH_Q: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// 4th-order Linkwitz-Riley split into (low, high).
pub fn linkwitz_riley_split(xs: &[f64], freq: f64, sample_rate: f64) -> (Vec<f64>, Vec<f64>) {
    let mut low = xs.to_vec();
    let mut high = xs.to_vec();
    for _ in 0..2 {
        Biquad::lowpass(freq, BUTTERWORTH_Q, sample_rate).run(&mut low);
        Biquad::highpass(freq, BUTTERWORTH_Q, sample_rate).run(&mut high);
    }
    (low, high)
}

/// One-pole low-pass.
pub fn one_pole_lowpass(xs: &mut [f64], freq: f64, sample_rate: f64) {
    let a = (-2.0 * PI * freq / sample_rate).exp();
    let mut y = 0.0;
    for x in xs {
        y = (1.0 - a) * *x + a * y;
        *x = y;
    }
}

/// One-pole high-pass (input minus its one-pole low-pass).
pub fn one_pole_highpass(xs: &mut [f64], freq: f64, sample_rate: f64) {
    let a = (-2.0 * PI * freq / sample_rate).exp();
    let mut y = 0.0;
    for x in xs {
        y = (1.0 - a) * *x + a * y;
        *x -= y;
    }
}

/// First-order all-pass with a per-sample coefficient.
#[derive(Clone, Debug, Default)]
pub struct Allpass1 {
    x1: f64,
    y1: f64,
}

impl Allpass1 {
    /// Coefficient placing the 90° phase point at `freq`.
    pub fn coefficient(freq: f64, sample_rate: f64) -> f64 {
        let t = (PI * freq / sample_rate).tan();
        (t - 1.0) / (t + 1.0)
    }

    #[inline]
    pub fn tick(&mut self, x: f64, a: f64) -> f64 {
        let y = a * x + self.x1 - a * self.y1;
        self.x1 = x;
        self.y1 = y;
        y
    }
}

/// Feedback comb: y[n] = x[n - d] + g·y[n - d].
pub fn comb(xs: &[f64], delay: usize, gain: f64) -> Vec<f64> {
    let mut buf = vec![0.0; delay];
    let mut out = Vec::with_capacity(xs.len());
    for (i, &x) in xs.iter().enumerate() {
        let j = i % delay;
        let y = buf[j];
        buf[j] = x + gain * y;
        out.push(y);
    }
    out
}

/// Schroeder all-pass section.
pub fn schroeder_allpass(xs: &mut [f64], delay: usize, gain: f64) {
    let mut buf = vec![0.0; delay];
    for (i, x) in xs.iter_mut().enumerate() {
        let j = i % delay;
        let delayed = buf[j];
        let v = *x + gain * delayed;
        buf[j] = v;
        *x = delayed - gain * v;
    }
}
