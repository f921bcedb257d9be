#![allow(dead_code)]

pub mod oracle;

use fxtutor_core::features::Spectrogram;

pub fn to_rows(s: &Spectrogram) -> Vec<Vec<f64>> {
    (0..s.rows).map(|r| s.data[r * s.cols..(r + 1) * s.cols].to_vec()).collect()
}

pub fn from_rows(rows: &[Vec<f64>]) -> Spectrogram {
    Spectrogram::new(rows.len(), rows[0].len(), rows.concat()).unwrap()
}
