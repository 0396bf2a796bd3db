//! Audio clips: WAV ingest, interval extraction, pre-emphasis, resampling.

use std::path::Path;

use crate::error::{Error, Result};

/// A mono audio buffer with its sample rate.
///
/// 44.1 kHz input is expected; other rates are accepted and processed at
/// their native rate (the loader logs a warning to stderr).
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: f64,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: f64) -> Self {
        AudioClip {
            samples,
            sample_rate,
        }
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate
    }

    /// Read a mono WAV file. PCM 16/24/32-bit and 32-bit float are accepted;
    /// anything multichannel is an error.
    pub fn read_wav(path: &Path) -> Result<AudioClip> {
        let reader = hound::WavReader::open(path)
            .map_err(|e| Error::Audio(format!("{}: {e}", path.display())))?;
        let spec = reader.spec();
        if spec.channels != 1 {
            return Err(Error::Audio(format!(
                "{}: expected mono audio, found {} channels",
                path.display(),
                spec.channels
            )));
        }
        let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
            (hound::SampleFormat::Int, 16) => {
                let scale = 1.0 / 32768.0;
                reader
                    .into_samples::<i16>()
                    .map(|s| s.map(|v| v as f64 * scale))
                    .collect::<std::result::Result<_, _>>()
            }
            (hound::SampleFormat::Int, 24) => {
                let scale = 1.0 / 8_388_608.0;
                reader
                    .into_samples::<i32>()
                    .map(|s| s.map(|v| v as f64 * scale))
                    .collect::<std::result::Result<_, _>>()
            }
            (hound::SampleFormat::Int, 32) => {
                let scale = 1.0 / 2_147_483_648.0;
                reader
                    .into_samples::<i32>()
                    .map(|s| s.map(|v| v as f64 * scale))
                    .collect::<std::result::Result<_, _>>()
            }
            (hound::SampleFormat::Float, 32) => reader
                .into_samples::<f32>()
                .map(|s| s.map(|v| v as f64))
                .collect::<std::result::Result<_, _>>(),
            (fmt, bits) => {
                return Err(Error::Audio(format!(
                    "{}: unsupported WAV format {fmt:?}/{bits}-bit",
                    path.display()
                )))
            }
        }
        .map_err(|e| Error::Audio(format!("{}: {e}", path.display())))?;

        if !samples.iter().all(|s| s.is_finite()) {
            return Err(Error::Audio(format!(
                "{}: non-finite samples",
                path.display()
            )));
        }
        if (spec.sample_rate as f64 - 44_100.0).abs() > 0.5 {
            eprintln!(
                "warning: {} is {} Hz, not 44100 Hz; processing at native rate",
                path.display(),
                spec.sample_rate
            );
        }
        Ok(AudioClip::new(samples, spec.sample_rate as f64))
    }

    /// Write the clip as 16-bit PCM WAV.
    pub fn write_wav(&self, path: &Path) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate.round() as u32,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut writer = hound::WavWriter::create(path, spec)
            .map_err(|e| Error::Audio(format!("{}: {e}", path.display())))?;
        for &s in &self.samples {
            let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
            writer
                .write_sample(v)
                .map_err(|e| Error::Audio(format!("{}: {e}", path.display())))?;
        }
        writer
            .finalize()
            .map_err(|e| Error::Audio(format!("{}: {e}", path.display())))?;
        Ok(())
    }
}

/// Cut `[onset - buffer, offset + buffer]` out of the clip, clamped to the
/// clip edges. The default buffer is 10 ms on each side.
pub fn extract_interval(
    clip: &AudioClip,
    onset: f64,
    offset: f64,
    buffer: f64,
) -> Result<AudioClip> {
    if !(onset < offset) {
        return Err(Error::Validation(format!(
            "empty interval: onset {onset} >= offset {offset}"
        )));
    }
    let dur = clip.duration();
    // Allow sub-sample slack: offsets round-trip through manifests at
    // microsecond precision.
    if onset < 0.0 || offset > dur + 1e-5 {
        return Err(Error::Validation(format!(
            "interval [{onset}, {offset}] outside clip of duration {dur}"
        )));
    }
    let t0 = (onset - buffer).max(0.0);
    let t1 = (offset + buffer).min(dur);
    let i0 = (t0 * clip.sample_rate).round() as usize;
    let i1 = ((t1 * clip.sample_rate).round() as usize).min(clip.samples.len());
    Ok(AudioClip::new(
        clip.samples[i0..i1].to_vec(),
        clip.sample_rate,
    ))
}

/// First-difference pre-emphasis above `cutoff` Hz:
/// `y[n] = x[n] - alpha * x[n-1]` with `alpha = exp(-2*pi*cutoff/rate)`
/// and no history (`y[0] = x[0]`).
pub fn preemphasize(samples: &[f64], rate: f64, cutoff: f64) -> Vec<f64> {
    assert!(rate > 2.0 * cutoff, "rate must exceed twice the cutoff");
    let alpha = (-2.0 * std::f64::consts::PI * cutoff / rate).exp();
    let mut out = Vec::with_capacity(samples.len());
    let mut prev = 0.0;
    for &x in samples {
        out.push(x - alpha * prev);
        prev = x;
    }
    out
}

/// Half-width of the resampling kernel in input samples at the cutoff rate.
const SINC_LOBES: f64 = 32.0;

/// Windowed-sinc (Blackman) resampler.
///
/// The anti-alias cutoff sits at the lower of the two Nyquist frequencies,
/// so downsampling (the normal direction here: 44.1 kHz down to twice the
/// formant ceiling) is properly band-limited.
pub fn resample(clip: &AudioClip, new_rate: f64) -> AudioClip {
    assert!(new_rate > 0.0);
    if (new_rate - clip.sample_rate).abs() < 1e-9 {
        return clip.clone();
    }
    let x = &clip.samples;
    let n_in = x.len();
    let n_out = ((n_in as f64) * new_rate / clip.sample_rate).round() as usize;
    if n_in == 0 || n_out == 0 {
        return AudioClip::new(Vec::new(), new_rate);
    }

    // Cutoff in cycles per input sample, with a little margin below Nyquist.
    let fc = 0.5 * (new_rate.min(clip.sample_rate) / clip.sample_rate) * 0.95;
    let half_width = (SINC_LOBES / (2.0 * fc)).ceil();
    let hw = half_width as isize;

    let mut out = Vec::with_capacity(n_out);
    for m in 0..n_out {
        let center = m as f64 * clip.sample_rate / new_rate;
        let k0 = (center - half_width).ceil() as isize;
        let k1 = (center + half_width).floor() as isize;
        let mut acc = 0.0;
        for k in k0.max(0)..=k1.min(n_in as isize - 1) {
            let u = k as f64 - center;
            acc += x[k as usize] * kernel(u, fc, hw as f64);
        }
        out.push(acc);
    }
    AudioClip::new(out, new_rate)
}

fn kernel(u: f64, fc: f64, half_width: f64) -> f64 {
    if u.abs() > half_width {
        return 0.0;
    }
    // Blackman window over [-half_width, half_width].
    let t = (u / half_width + 1.0) * 0.5;
    let w = 0.42 - 0.5 * (2.0 * std::f64::consts::PI * t).cos()
        + 0.08 * (4.0 * std::f64::consts::PI * t).cos();
    2.0 * fc * sinc(2.0 * fc * u) * w
}

fn sinc(v: f64) -> f64 {
    if v.abs() < 1e-12 {
        1.0
    } else {
        let pv = std::f64::consts::PI * v;
        pv.sin() / pv
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interval_buffer_and_clamps() {
        let clip = AudioClip::new(vec![0.0; 44_100], 44_100.0);
        // 10 ms buffer on each side
        let cut = extract_interval(&clip, 0.50, 0.62, 0.010).unwrap();
        assert_eq!(cut.samples.len(), ((0.63_f64 - 0.49) * 44_100.0).round() as usize);
        // left edge clamps to 0
        let cut = extract_interval(&clip, 0.005, 0.100, 0.010).unwrap();
        assert_eq!(cut.samples.len(), (0.110_f64 * 44_100.0).round() as usize);
        // right edge clamps to duration
        let cut = extract_interval(&clip, 0.90, 1.0, 0.010).unwrap();
        assert_eq!(cut.samples.len(), ((1.0_f64 - 0.89) * 44_100.0).round() as usize);
    }

    #[test]
    fn empty_interval_rejected() {
        let clip = AudioClip::new(vec![0.0; 1000], 44_100.0);
        assert!(extract_interval(&clip, 0.5, 0.5, 0.010).is_err());
        assert!(extract_interval(&clip, 0.6, 0.5, 0.010).is_err());
    }

    #[test]
    fn preemphasis_zero_input() {
        let y = preemphasize(&[0.0; 16], 44_100.0, 50.0);
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn preemphasis_unit_impulse() {
        // Frozen: exp(-2*pi*50/44100) = 0.992901521200722
        let alpha = 0.992_901_521_200_722_1;
        let mut x = vec![0.0; 8];
        x[0] = 1.0;
        let y = preemphasize(&x, 44_100.0, 50.0);
        assert!((y[0] - 1.0).abs() < 1e-15);
        assert!((y[1] + alpha).abs() < 1e-12);
        assert!(y[2..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn preemphasis_is_linear() {
        let x: Vec<f64> = (0..64).map(|i| ((i * 7 + 3) % 13) as f64 - 6.0).collect();
        let y: Vec<f64> = (0..64).map(|i| ((i * 5 + 1) % 11) as f64 - 5.0).collect();
        let (a, b) = (2.5, -1.25);
        let combo: Vec<f64> = x.iter().zip(&y).map(|(&u, &v)| a * u + b * v).collect();
        let lhs = preemphasize(&combo, 44_100.0, 50.0);
        let px = preemphasize(&x, 44_100.0, 50.0);
        let py = preemphasize(&y, 44_100.0, 50.0);
        for i in 0..64 {
            assert!((lhs[i] - (a * px[i] + b * py[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn resample_preserves_sinusoid() {
        // 500 Hz tone at 44.1 kHz, downsampled to 11.025 kHz: the tone is far
        // below the new Nyquist and must come through with small error.
        let rate = 44_100.0;
        let n = 4410;
        let samples: Vec<f64> = (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * 500.0 * i as f64 / rate).sin())
            .collect();
        let clip = AudioClip::new(samples, rate);
        let out = resample(&clip, 11_025.0);
        assert_eq!(out.samples.len(), 1102 + 1 - 1 + 1); // n * 11025/44100 rounded
        // Compare interior samples against the analytic tone (skip kernel edges).
        let mut max_err: f64 = 0.0;
        for m in 200..out.samples.len() - 200 {
            let t = m as f64 / 11_025.0;
            let want = (2.0 * std::f64::consts::PI * 500.0 * t).sin();
            max_err = max_err.max((out.samples[m] - want).abs());
        }
        assert!(max_err < 1e-3, "max interior error {max_err}");
    }

    #[test]
    fn wav_round_trip_16bit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wav");
        let samples: Vec<f64> = (0..441).map(|i| (i as f64 / 441.0) * 0.5 - 0.25).collect();
        let clip = AudioClip::new(samples.clone(), 44_100.0);
        clip.write_wav(&path).unwrap();
        let back = AudioClip::read_wav(&path).unwrap();
        assert_eq!(back.samples.len(), 441);
        assert_eq!(back.sample_rate, 44_100.0);
        for (a, b) in samples.iter().zip(&back.samples) {
            assert!((a - b).abs() < 1.0 / 32_000.0);
        }
    }
}
