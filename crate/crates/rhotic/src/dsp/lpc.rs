//! Linear predictive coding: Burg estimation and iteratively reweighted
//! robust refinement.
//!
//! The predictor convention throughout is
//! `x[n] ~= sum_{i=1..p} a_i * x[n-i]`, so the synthesis filter is
//! `1 / A(z)` with `A(z) = 1 - sum a_i z^-i`. Burg's lattice recursion keeps
//! every reflection coefficient inside [-1, 1], which pins all roots of
//! `A(z)` to the closed unit disc.

use crate::error::{Error, Result};

/// An all-pole model of one analysis frame.
#[derive(Debug, Clone)]
pub struct LpcModel {
    /// Predictor coefficients `a_1..a_p`.
    pub coefficients: Vec<f64>,
    /// RMS of the final prediction error.
    pub gain: f64,
    /// Sample rate of the signal the model was fit to, Hz.
    pub effective_rate: f64,
}

impl LpcModel {
    pub fn order(&self) -> usize {
        self.coefficients.len()
    }
}

/// LPC order used for five-formant analysis (two poles per formant).
pub const FORMANT_LPC_ORDER: usize = 10;

const ZERO_ENERGY: f64 = 1e-30;

/// Burg's method.
///
/// Returns the model and the reflection coefficient sequence. Fails on
/// frames no longer than the order; a zero-energy frame is reported as
/// degenerate so the caller can mark the formant frame missing.
pub fn burg_lpc(frame: &[f64], order: usize, rate: f64) -> Result<(LpcModel, Vec<f64>)> {
    if order < 2 {
        return Err(Error::Validation(format!("LPC order {order} < 2")));
    }
    let n = frame.len();
    if n <= order {
        return Err(Error::Validation(format!(
            "frame length {n} must exceed LPC order {order}"
        )));
    }
    let energy: f64 = frame.iter().map(|x| x * x).sum();
    if energy <= ZERO_ENERGY {
        return Err(Error::Unusable("zero-energy frame".into()));
    }

    let mut f = frame.to_vec(); // forward prediction error
    let mut b = frame.to_vec(); // backward prediction error
    let mut a: Vec<f64> = Vec::with_capacity(order);
    let mut reflections = Vec::with_capacity(order);
    let mut err = energy / n as f64;

    for m in 1..=order {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in m..n {
            num += f[i] * b[i - 1];
            den += f[i] * f[i] + b[i - 1] * b[i - 1];
        }
        if den <= ZERO_ENERGY {
            return Err(Error::Unusable("degenerate frame in Burg recursion".into()));
        }
        let k = 2.0 * num / den; // |k| <= 1 by AM-GM
        reflections.push(k);

        let prev = a.clone();
        a.push(0.0);
        for i in 1..m {
            a[i - 1] = prev[i - 1] - k * prev[m - i - 1];
        }
        a[m - 1] = k;

        for i in (m..n).rev() {
            let fi = f[i];
            let bi = b[i - 1];
            f[i] = fi - k * bi;
            b[i] = bi - k * fi;
        }
        err *= 1.0 - k * k;
    }

    Ok((
        LpcModel {
            coefficients: a,
            gain: err.max(0.0).sqrt(),
            effective_rate: rate,
        },
        reflections,
    ))
}

/// Default Huber clip point for robust refinement, in residual sigmas.
pub const ROBUST_STDEV_LIMIT: f64 = 1.5;
/// Default refinement iteration cap.
pub const ROBUST_MAX_ITER: usize = 5;
/// Default relative-change stopping tolerance.
pub const ROBUST_TOL: f64 = 1e-6;

/// Iteratively reweighted least-squares refinement of an LPC fit.
///
/// Each pass computes prediction residuals of the current model, Huber-
/// downweights samples whose residual exceeds `stdev_limit` sigmas, and
/// re-solves the weighted normal equations. Stops after `max_iter` passes or
/// when the largest relative coefficient change drops below `tol`; a
/// non-convergent fit returns the last iterate rather than an error.
pub fn robust_refine(
    frame: &[f64],
    model: &LpcModel,
    stdev_limit: f64,
    max_iter: usize,
    tol: f64,
) -> LpcModel {
    let p = model.order();
    let n = frame.len();
    if max_iter == 0 || n <= 2 * p {
        return model.clone();
    }

    let mut coeffs = model.coefficients.clone();
    let mut gain = model.gain;

    for _ in 0..max_iter {
        // Residuals of the current predictor over n = p..N.
        let mut resid = Vec::with_capacity(n - p);
        for i in p..n {
            let mut pred = 0.0;
            for (j, &c) in coeffs.iter().enumerate() {
                pred += c * frame[i - 1 - j];
            }
            resid.push(frame[i] - pred);
        }
        let sigma = (resid.iter().map(|e| e * e).sum::<f64>() / resid.len() as f64).sqrt();
        if sigma < 1e-14 {
            break; // essentially exact fit; weights are all 1 and nothing moves
        }
        let clip = stdev_limit * sigma;
        let weights: Vec<f64> = resid
            .iter()
            .map(|e| {
                let ae = e.abs();
                if ae <= clip {
                    1.0
                } else {
                    clip / ae
                }
            })
            .collect();

        // Weighted normal equations: R c = r with
        // R[j][k] = sum_i w_i x[i-1-j] x[i-1-k], r[j] = sum_i w_i x[i] x[i-1-j].
        let mut r_mat = vec![vec![0.0; p]; p];
        let mut r_vec = vec![0.0; p];
        for (idx, i) in (p..n).enumerate() {
            let w = weights[idx];
            if w == 0.0 {
                continue;
            }
            for j in 0..p {
                let xj = frame[i - 1 - j];
                r_vec[j] += w * frame[i] * xj;
                for k in j..p {
                    r_mat[j][k] += w * xj * frame[i - 1 - k];
                }
            }
        }
        for j in 0..p {
            for k in 0..j {
                r_mat[j][k] = r_mat[k][j];
            }
        }

        let Some(new_coeffs) = solve_spd(&mut r_mat, &mut r_vec) else {
            break; // singular system: keep the last iterate
        };

        let mut max_rel = 0.0f64;
        for (old, new) in coeffs.iter().zip(&new_coeffs) {
            let denom = old.abs().max(new.abs()).max(1e-12);
            max_rel = max_rel.max((old - new).abs() / denom);
        }
        coeffs = new_coeffs;

        // Weighted residual RMS as the refined gain.
        let mut se = 0.0;
        let mut sw = 0.0;
        for (idx, i) in (p..n).enumerate() {
            let mut pred = 0.0;
            for (j, &c) in coeffs.iter().enumerate() {
                pred += c * frame[i - 1 - j];
            }
            let e = frame[i] - pred;
            se += weights[idx] * e * e;
            sw += weights[idx];
        }
        if sw > 0.0 {
            gain = (se / sw).sqrt();
        }

        if max_rel < tol {
            break;
        }
    }

    LpcModel {
        coefficients: coeffs,
        gain,
        effective_rate: model.effective_rate,
    }
}

/// Gaussian elimination with partial pivoting; returns None when singular.
fn solve_spd(a: &mut [Vec<f64>], b: &mut [f64]) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let mut pivot = col;
        for row in col + 1..n {
            if a[row][col].abs() > a[pivot][col].abs() {
                pivot = row;
            }
        }
        if a[pivot][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let factor = a[row][col] / a[col][col];
            if factor == 0.0 {
                continue;
            }
            for k in col..n {
                a[row][k] -= factor * a[col][k];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for col in (0..n).rev() {
        let mut acc = b[col];
        for k in col + 1..n {
            acc -= a[col][k] * x[k];
        }
        x[col] = acc / a[col][col];
    }
    Some(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ar2_signal(a1: f64, a2: f64, n: usize, noise: f64, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = vec![0.0f64; n + 200];
        for i in 2..x.len() {
            let e: f64 = rng.gen_range(-1.0..1.0) * noise;
            x[i] = a1 * x[i - 1] + a2 * x[i - 2] + e;
        }
        x.split_off(200) // drop the burn-in
    }

    #[test]
    fn burg_recovers_ar2_generator() {
        let x = ar2_signal(1.5, -0.9, 4000, 1.0, 42);
        let (model, _) = burg_lpc(&x, 2, 10_000.0).unwrap();
        assert!(
            (model.coefficients[0] - 1.5).abs() < 0.02,
            "a1 = {}",
            model.coefficients[0]
        );
        assert!(
            (model.coefficients[1] + 0.9).abs() < 0.02,
            "a2 = {}",
            model.coefficients[1]
        );
    }

    #[test]
    fn burg_sinusoid_pole_angle() {
        let rate = 10_000.0;
        let freq = 1_000.0;
        let x: Vec<f64> = (0..1000)
            .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / rate).sin())
            .collect();
        let (model, _) = burg_lpc(&x, 2, rate).unwrap();
        // Roots of z^2 - a1 z - a2; for a conjugate pair the angle comes from
        // cos(theta) = a1 / (2 sqrt(-a2)).
        let a1 = model.coefficients[0];
        let a2 = model.coefficients[1];
        let radius = (-a2).sqrt();
        assert!(a2 < 0.0, "expected complex pole pair");
        let theta = (a1 / (2.0 * radius)).acos();
        let want = 2.0 * std::f64::consts::PI * freq / rate;
        assert!(
            (theta - want).abs() / want < 0.01,
            "pole angle {theta} vs {want}"
        );
    }

    #[test]
    fn burg_white_noise_has_weak_reflections() {
        // No predictable structure: prediction error stays near the input
        // energy and every reflection coefficient is small.
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x: Vec<f64> = (0..4000).map(|_| rng.gen_range(-1.0f64..1.0)).collect();
            let energy_per_sample = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
            let (model, refl) = burg_lpc(&x, 10, 10_000.0).unwrap();
            assert!(refl.iter().all(|k| k.abs() < 0.1), "reflections {refl:?}");
            let ratio = model.gain * model.gain / energy_per_sample;
            assert!(ratio > 0.9 && ratio <= 1.01, "error/energy ratio {ratio}");
        }
    }

    #[test]
    fn burg_reflections_bounded_by_one() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x: Vec<f64> = (0..256)
                .map(|i| {
                    (0.3 * i as f64).sin() + 0.5 * (0.7 * i as f64).cos() + rng.gen_range(-0.2..0.2)
                })
                .collect();
            let (_, refl) = burg_lpc(&x, 10, 10_000.0).unwrap();
            assert!(refl.iter().all(|k| k.abs() <= 1.0 + 1e-12));
        }
    }

    #[test]
    fn burg_rejects_short_and_silent_frames() {
        assert!(burg_lpc(&[1.0, 2.0], 4, 10_000.0).is_err());
        assert!(burg_lpc(&[0.0; 64], 4, 10_000.0).is_err());
    }

    fn impulse_response_ar2(a1: f64, a2: f64, n: usize) -> Vec<f64> {
        let mut x = vec![0.0f64; n];
        x[0] = 1.0;
        for i in 2..n {
            x[i] = a1 * x[i - 1] + a2 * x[i - 2];
        }
        x
    }

    #[test]
    fn refine_is_fixed_point_on_clean_data() {
        // A model whose residuals vanish has nothing to reweight: the
        // refinement must return it unchanged.
        let x = impulse_response_ar2(1.5, -0.9, 600);
        let exact = LpcModel {
            coefficients: vec![1.5, -0.9],
            gain: 0.0,
            effective_rate: 10_000.0,
        };
        let refined = robust_refine(&x, &exact, ROBUST_STDEV_LIMIT, ROBUST_MAX_ITER, ROBUST_TOL);
        for (a, b) in exact.coefficients.iter().zip(&refined.coefficients) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn refine_removes_burg_bias_on_deterministic_decay() {
        // Burg's forward+backward compromise is biased on a deterministic
        // decaying signal; the least-squares refit recovers the exact
        // predictor.
        let x = impulse_response_ar2(1.5, -0.9, 600);
        let (burg, _) = burg_lpc(&x, 2, 10_000.0).unwrap();
        let refined = robust_refine(&x, &burg, ROBUST_STDEV_LIMIT, ROBUST_MAX_ITER, ROBUST_TOL);
        assert!((refined.coefficients[0] - 1.5).abs() < 1e-9);
        assert!((refined.coefficients[1] + 0.9).abs() < 1e-9);
        let burg_err = (burg.coefficients[0] - 1.5).abs() + (burg.coefficients[1] + 0.9).abs();
        assert!(burg_err > 1e-6, "burg unexpectedly exact: {burg_err}");
    }

    #[test]
    fn refine_zero_iterations_is_identity() {
        let x = ar2_signal(1.2, -0.7, 400, 1.0, 3);
        let (model, _) = burg_lpc(&x, 2, 10_000.0).unwrap();
        let refined = robust_refine(&x, &model, 1.5, 0, 1e-6);
        assert_eq!(model.coefficients, refined.coefficients);
    }

    #[test]
    fn refine_recovers_from_spikes() {
        // Contaminate 2% of samples with large spikes; the refined
        // coefficients must land closer to the clean fit than the direct fit.
        let clean = ar2_signal(1.5, -0.9, 2000, 1.0, 11);
        let (clean_model, _) = burg_lpc(&clean, 2, 10_000.0).unwrap();

        let mut spiky = clean.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let scale = clean.iter().map(|v| v.abs()).fold(0.0f64, f64::max);
        for _ in 0..40 {
            let idx = rng.gen_range(0..spiky.len());
            spiky[idx] += if rng.gen_bool(0.5) { 1.0 } else { -1.0 } * scale * 3.0;
        }
        let (raw_model, _) = burg_lpc(&spiky, 2, 10_000.0).unwrap();
        let refined = robust_refine(&spiky, &raw_model, 1.5, 5, 1e-6);

        let dist = |m: &LpcModel| -> f64 {
            m.coefficients
                .iter()
                .zip(&clean_model.coefficients)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        };
        assert!(
            dist(&refined) < dist(&raw_model),
            "refined {:?} raw {:?} clean {:?}",
            refined.coefficients,
            raw_model.coefficients,
            clean_model.coefficients
        );
    }
}
