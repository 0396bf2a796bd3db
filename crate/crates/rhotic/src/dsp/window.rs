//! Gaussian-like analysis windows and frame slicing.

/// One windowed analysis frame.
#[derive(Debug, Clone)]
pub struct AnalysisFrame {
    /// Frame center relative to the interval start, in seconds.
    pub center_time: f64,
    /// Samples with the window already applied.
    pub samples: Vec<f64>,
}

/// Gaussian-like window over `n_samples` points:
/// `w(t) = (exp(-48 (t - 1/2)^2) - e^-12) / (1 - e^-12)` for `t` in `[0, 1]`.
///
/// The edges are exactly zero, the center of an odd-length window is exactly
/// one, and the shape is symmetric.
pub fn gaussian_window(n_samples: usize) -> Vec<f64> {
    assert!(n_samples >= 2);
    let edge = (-12.0f64).exp();
    (0..n_samples)
        .map(|i| {
            let t = i as f64 / (n_samples - 1) as f64;
            let g = (-48.0 * (t - 0.5) * (t - 0.5)).exp();
            (g - edge) / (1.0 - edge)
        })
        .collect()
}

/// Nominal analysis window duration in seconds. The physical frame holds
/// twice this many samples, matching the Gaussian-window convention where
/// the effective width is half the frame.
pub const WINDOW_DURATION: f64 = 0.005;

/// Step between frame centers, seconds.
pub const FRAME_STEP: f64 = 0.005;

/// Slice a signal into windowed frames.
///
/// Physical frame length is `2 * WINDOW_DURATION` of samples; centers advance
/// by `FRAME_STEP` and the frame sequence is centered symmetrically within
/// the signal. Returns an empty vector when the signal is shorter than one
/// frame.
pub fn frames(samples: &[f64], rate: f64) -> Vec<AnalysisFrame> {
    let frame_len = (2.0 * WINDOW_DURATION * rate).round() as usize;
    if frame_len < 4 || samples.len() < frame_len {
        return Vec::new();
    }
    let duration = samples.len() as f64 / rate;
    let frame_dur = frame_len as f64 / rate;
    let n_frames = ((duration - frame_dur) / FRAME_STEP).floor() as usize + 1;
    let t1 = (duration - (n_frames - 1) as f64 * FRAME_STEP) / 2.0;
    let window = gaussian_window(frame_len);

    let mut out = Vec::with_capacity(n_frames);
    for i in 0..n_frames {
        let center = t1 + i as f64 * FRAME_STEP;
        let start = ((center * rate).round() as isize - (frame_len / 2) as isize)
            .clamp(0, samples.len() as isize - frame_len as isize) as usize;
        let windowed: Vec<f64> = samples[start..start + frame_len]
            .iter()
            .zip(&window)
            .map(|(s, w)| s * w)
            .collect();
        out.push(AnalysisFrame {
            center_time: center,
            samples: windowed,
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_peak_edges_symmetry() {
        let w = gaussian_window(101);
        assert!((w[50] - 1.0).abs() < 1e-15); // center = 1
        assert!(w[0].abs() < 1e-15); // w(0) = 0
        assert!(w[100].abs() < 1e-15); // w(1) = 0
        assert!((w[25] - w[75]).abs() < 1e-12); // w(0.25) = w(0.75)
        for i in 0..50 {
            assert!((w[i] - w[100 - i]).abs() < 1e-12);
        }
    }

    #[test]
    fn frame_centers_advance_by_step() {
        let rate = 10_000.0;
        let samples = vec![1.0; 2000]; // 200 ms
        let fs = frames(&samples, rate);
        assert!(fs.len() > 30);
        for pair in fs.windows(2) {
            assert!((pair[1].center_time - pair[0].center_time - FRAME_STEP).abs() < 1e-12);
        }
        // physical length is 10 ms of samples
        assert_eq!(fs[0].samples.len(), 100);
    }

    #[test]
    fn short_signal_yields_no_frames() {
        assert!(frames(&[0.0; 50], 10_000.0).is_empty());
    }
}
