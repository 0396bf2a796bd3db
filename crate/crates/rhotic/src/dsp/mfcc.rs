//! Mel-frequency cepstral coefficients.
//!
//! Filter bank convention: triangular filters on a 550-based natural-log mel
//! scale (`mel = 550 ln(1 + f/550)`), centered every 100 mel starting at
//! 100 mel, each spanning +-100 mel, up to Nyquist. Log filter energies are
//! floored at 1e-10 of the loudest filter so silent frames stay finite, then
//! DCT-II yields the cepstrum; c0 is excluded and c1..c13 are kept.

use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

/// Number of cepstral coefficients kept (c1..c13).
pub const N_MFCC: usize = 13;

/// Relative floor applied to filter energies before the log.
const LOG_FLOOR_RATIO: f64 = 1e-10;

/// Cepstral coefficients for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct MfccFrame {
    pub coefficients: [f64; N_MFCC],
}

fn hz_to_mel(hz: f64) -> f64 {
    550.0 * (1.0 + hz / 550.0).ln()
}

fn mel_to_hz(mel: f64) -> f64 {
    550.0 * ((mel / 550.0).exp() - 1.0)
}

/// Mel filter bank plus FFT plan, reusable across frames at one rate.
pub struct MfccExtractor {
    fft: Arc<dyn Fft<f64>>,
    fft_size: usize,
    rate: f64,
    /// Per-filter triangular weights over FFT bins: (first_bin, weights).
    filters: Vec<(usize, Vec<f64>)>,
}

impl MfccExtractor {
    pub fn new(frame_len: usize, rate: f64) -> Self {
        let fft_size = frame_len.next_power_of_two().max(256);
        let fft = FftPlanner::new().plan_fft_forward(fft_size);

        let nyquist = rate / 2.0;
        let n_bins = fft_size / 2 + 1;
        let bin_hz = rate / fft_size as f64;

        let mut filters = Vec::new();
        let mut center = 100.0;
        while mel_to_hz(center + 100.0) <= nyquist {
            let lo_hz = mel_to_hz(center - 100.0);
            let hi_hz = mel_to_hz(center + 100.0);
            let first_bin = (lo_hz / bin_hz).ceil().max(0.0) as usize;
            let last_bin = ((hi_hz / bin_hz).floor() as usize).min(n_bins - 1);
            let mut weights = Vec::with_capacity(last_bin.saturating_sub(first_bin) + 1);
            for bin in first_bin..=last_bin {
                let mel = hz_to_mel(bin as f64 * bin_hz);
                let w = if mel <= center {
                    (mel - (center - 100.0)) / 100.0
                } else {
                    ((center + 100.0) - mel) / 100.0
                };
                weights.push(w.max(0.0));
            }
            filters.push((first_bin, weights));
            center += 100.0;
        }
        assert!(
            filters.len() > N_MFCC,
            "filter bank too small for {N_MFCC} coefficients"
        );

        MfccExtractor {
            fft,
            fft_size,
            rate,
            filters,
        }
    }

    pub fn sample_rate(&self) -> f64 {
        self.rate
    }

    pub fn n_filters(&self) -> usize {
        self.filters.len()
    }

    /// Compute c1..c13 of an already-windowed frame.
    pub fn mfcc(&self, windowed_frame: &[f64]) -> MfccFrame {
        let mut buf: Vec<Complex64> = windowed_frame
            .iter()
            .map(|&x| Complex64::new(x, 0.0))
            .collect();
        buf.resize(self.fft_size, Complex64::new(0.0, 0.0));
        self.fft.process(&mut buf);

        let n_bins = self.fft_size / 2 + 1;
        let power: Vec<f64> = buf[..n_bins].iter().map(|c| c.norm_sqr()).collect();

        let mut energies: Vec<f64> = self
            .filters
            .iter()
            .map(|(first, weights)| {
                weights
                    .iter()
                    .enumerate()
                    .map(|(i, w)| w * power[first + i])
                    .sum()
            })
            .collect();

        let max_energy = energies.iter().cloned().fold(0.0f64, f64::max);
        let floor = if max_energy > 0.0 {
            max_energy * LOG_FLOOR_RATIO
        } else {
            LOG_FLOOR_RATIO
        };
        for e in &mut energies {
            *e = e.max(floor).ln();
        }

        // DCT-II, keeping k = 1..=13 (c0 carries only overall level).
        let m = energies.len() as f64;
        let mut coefficients = [0.0; N_MFCC];
        for (k, c) in coefficients.iter_mut().enumerate() {
            let kk = (k + 1) as f64;
            *c = energies
                .iter()
                .enumerate()
                .map(|(j, &e)| e * (std::f64::consts::PI * kk * (j as f64 + 0.5) / m).cos())
                .sum::<f64>()
                * (2.0 / m).sqrt();
        }
        MfccFrame { coefficients }
    }
}
