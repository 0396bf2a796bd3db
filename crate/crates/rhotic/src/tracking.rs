//! Formant-ceiling optimization and track extraction.
//!
//! Each utterance's analysis band is tuned in two passes: a coarse grid
//! search over 4500-7500 Hz in 500 Hz steps, then a finer 250 Hz search
//! re-constrained to the participant's interquartile range of first-pass
//! winners. The objective is the summed RMS residual of quadratic fits to
//! the F1-F3 tracks: a good ceiling yields smooth, well-separated tracks.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dsp::{
    self, burg_lpc, lpc_to_formants, preemphasize, resample, robust_refine, AudioClip,
    FormantFrame, FORMANT_LPC_ORDER,
};
use crate::error::{Error, Result};

/// First-pass ceiling grid, Hz.
pub const PASS1_MIN: f64 = 4500.0;
pub const PASS1_MAX: f64 = 7500.0;
pub const PASS1_STEP: f64 = 500.0;

/// Second-pass grid step, Hz.
pub const PASS2_STEP: f64 = 250.0;

/// Ceiling used when no utterance of a participant produced a usable search.
pub const GLOBAL_DEFAULT_CEILING: f64 = 5500.0;

/// Minimum usable frames for a ceiling candidate to count.
const MIN_VALID_FRAMES: usize = 3;

/// Which mechanism produced an utterance's ceiling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CeilingPass {
    First,
    Second,
    Fallback,
    Manual,
}

/// Outcome of a ceiling search for one utterance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CeilingSearchResult {
    pub utterance_id: String,
    pub winning_ceiling: f64,
    /// Exhaustive (ceiling, summed RMS residual) table over the searched
    /// grid; failed candidates carry infinite error.
    pub per_ceiling_error: Vec<(f64, f64)>,
    pub pass: CeilingPass,
}

/// A per-frame formant track plus the ceiling that produced it.
#[derive(Debug, Clone)]
pub struct FormantTrack {
    pub utterance_id: String,
    pub frames: Vec<FormantFrame>,
    /// Frame centers, seconds from interval start.
    pub times: Vec<f64>,
    pub ceiling: f64,
    pub frame_step: f64,
}

impl FormantTrack {
    pub fn n_valid(&self) -> usize {
        self.frames.iter().filter(|f| !f.missing).count()
    }

    pub fn usable(&self) -> bool {
        self.n_valid() >= 1
    }
}

/// Run the per-frame analysis chain at one ceiling: resample to twice the
/// ceiling, pre-emphasize, window, Burg-fit, robustly refine, convert.
pub fn track(interval: &AudioClip, ceiling: f64, utterance_id: &str) -> Result<FormantTrack> {
    if !(3_000.0..=9_000.0).contains(&ceiling) {
        return Err(Error::Validation(format!(
            "ceiling {ceiling} Hz outside [3000, 9000]"
        )));
    }
    let rate = 2.0 * ceiling;
    let resampled = resample(interval, rate);
    let emphasized = preemphasize(&resampled.samples, rate, dsp::PREEMPHASIS_CUTOFF);
    let frames = dsp::frames(&emphasized, rate);

    let mut out_frames = Vec::with_capacity(frames.len());
    let mut times = Vec::with_capacity(frames.len());
    for frame in &frames {
        times.push(frame.center_time);
        let formant_frame = match burg_lpc(&frame.samples, FORMANT_LPC_ORDER, rate) {
            Ok((model, _)) => {
                let refined = robust_refine(
                    &frame.samples,
                    &model,
                    dsp::lpc::ROBUST_STDEV_LIMIT,
                    dsp::lpc::ROBUST_MAX_ITER,
                    dsp::lpc::ROBUST_TOL,
                );
                lpc_to_formants(&refined, ceiling)
            }
            Err(_) => FormantFrame::missing(),
        };
        out_frames.push(formant_frame);
    }

    Ok(FormantTrack {
        utterance_id: utterance_id.to_string(),
        frames: out_frames,
        times,
        ceiling,
        frame_step: dsp::FRAME_STEP,
    })
}

/// Quadratic least-squares fit; returns the RMS residual.
fn quadratic_rms_residual(times: &[f64], values: &[f64]) -> f64 {
    let n = times.len();
    debug_assert!(n >= MIN_VALID_FRAMES);
    // Normal equations for y = c0 + c1 t + c2 t^2.
    let mut s = [0.0f64; 5];
    let mut b = [0.0f64; 3];
    for (&t, &y) in times.iter().zip(values) {
        let t2 = t * t;
        s[0] += 1.0;
        s[1] += t;
        s[2] += t2;
        s[3] += t2 * t;
        s[4] += t2 * t2;
        b[0] += y;
        b[1] += t * y;
        b[2] += t2 * y;
    }
    let mut a = [
        [s[0], s[1], s[2]],
        [s[1], s[2], s[3]],
        [s[2], s[3], s[4]],
    ];
    // Gaussian elimination, 3x3.
    for col in 0..3 {
        let mut pivot = col;
        for row in col + 1..3 {
            if a[row][col].abs() > a[pivot][col].abs() {
                pivot = row;
            }
        }
        if a[pivot][col].abs() < 1e-12 {
            // Degenerate time support: fall back to the residual around the mean.
            let mean = values.iter().sum::<f64>() / n as f64;
            return (values.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / n as f64)
                .sqrt();
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..3 {
            let f = a[row][col] / a[col][col];
            for k in col..3 {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut c = [0.0f64; 3];
    for col in (0..3).rev() {
        let mut acc = b[col];
        for k in col + 1..3 {
            acc -= a[col][k] * c[k];
        }
        c[col] = acc / a[col][col];
    }
    let sse: f64 = times
        .iter()
        .zip(values)
        .map(|(&t, &y)| {
            let fit = c[0] + c[1] * t + c[2] * t * t;
            (y - fit) * (y - fit)
        })
        .sum();
    (sse / n as f64).sqrt()
}

/// Track-smoothness objective at one ceiling: the unweighted sum over
/// F1..F3 of the RMS residual of a quadratic fit in time. Returns None when
/// fewer than three frames carry all of F1..F3.
pub fn ceiling_error(interval: &AudioClip, ceiling: f64) -> Option<f64> {
    let track = track(interval, ceiling, "candidate").ok()?;
    let mut times = Vec::new();
    let mut series = [Vec::new(), Vec::new(), Vec::new()];
    for (frame, &t) in track.frames.iter().zip(&track.times) {
        if frame.missing || frame.frequencies.len() < 3 {
            continue;
        }
        times.push(t);
        for (k, s) in series.iter_mut().enumerate() {
            s.push(frame.frequencies[k]);
        }
    }
    if times.len() < MIN_VALID_FRAMES {
        return None;
    }
    Some(
        series
            .iter()
            .map(|s| quadratic_rms_residual(&times, s))
            .sum(),
    )
}

fn search_grid(
    interval: &AudioClip,
    grid: &[f64],
    utterance_id: &str,
    pass: CeilingPass,
) -> Option<CeilingSearchResult> {
    let mut table = Vec::with_capacity(grid.len());
    let mut best: Option<(f64, f64)> = None;
    for &ceiling in grid {
        let err = ceiling_error(interval, ceiling).unwrap_or(f64::INFINITY);
        table.push((ceiling, err));
        // Strict comparison: ties go to the lower ceiling, which comes first.
        if err.is_finite() && best.map_or(true, |(_, e)| err < e) {
            best = Some((ceiling, err));
        }
    }
    best.map(|(ceiling, _)| CeilingSearchResult {
        utterance_id: utterance_id.to_string(),
        winning_ceiling: ceiling,
        per_ceiling_error: table,
        pass,
    })
}

/// First-pass grid: 4500..7500 Hz in 500 Hz steps.
pub fn pass1_grid() -> Vec<f64> {
    let mut grid = Vec::new();
    let mut c = PASS1_MIN;
    while c <= PASS1_MAX + 1e-9 {
        grid.push(c);
        c += PASS1_STEP;
    }
    grid
}

/// Coarse search. Returns None (caller falls back) when no grid candidate
/// yields three analyzable frames.
pub fn search_ceiling_pass1(interval: &AudioClip, utterance_id: &str) -> Option<CeilingSearchResult> {
    search_grid(interval, &pass1_grid(), utterance_id, CeilingPass::First)
}

/// Build the second-pass grid from a participant's first-pass winners:
/// type-7 quartiles, with Q1 snapped down and Q3 snapped up to the 250 Hz
/// lattice so both endpoints are covered.
pub fn pass2_grid(pass1_winners: &[f64]) -> Vec<f64> {
    let q1 = crate::util::quantile_type7(pass1_winners, 0.25);
    let q3 = crate::util::quantile_type7(pass1_winners, 0.75);
    let lo = (q1 / PASS2_STEP).floor() * PASS2_STEP;
    let hi = (q3 / PASS2_STEP).ceil() * PASS2_STEP;
    let mut grid = Vec::new();
    let mut c = lo;
    while c <= hi + 1e-9 {
        grid.push(c);
        c += PASS2_STEP;
    }
    grid
}

/// Refined search over the participant-constrained grid. Requires at least
/// four first-pass winners for the participant; fewer keeps the first-pass
/// result.
pub fn search_ceiling_pass2(
    pass1_winners: &[f64],
    interval: &AudioClip,
    utterance_id: &str,
) -> Option<CeilingSearchResult> {
    if pass1_winners.len() < 4 {
        return None;
    }
    search_grid(
        interval,
        &pass2_grid(pass1_winners),
        utterance_id,
        CeilingPass::Second,
    )
}

/// Participant-average fallback ceiling; 5500 Hz when nothing succeeded.
pub fn fallback_ceiling(winning_ceilings: &[f64]) -> f64 {
    if winning_ceilings.is_empty() {
        GLOBAL_DEFAULT_CEILING
    } else {
        winning_ceilings.iter().sum::<f64>() / winning_ceilings.len() as f64
    }
}

/// Resolved ceiling decisions for a set of utterances, keyed by utterance id.
pub type CeilingDecisions = BTreeMap<String, CeilingSearchResult>;

/// Run the full two-pass protocol for one participant's intervals.
///
/// `intervals` maps utterance id to (interval audio, manual ceiling). Manual
/// ceilings bypass both passes. Utterances whose searches fail everywhere
/// get the participant-average fallback.
pub fn optimize_participant_ceilings(
    intervals: &BTreeMap<String, (AudioClip, Option<f64>)>,
) -> CeilingDecisions {
    let mut decisions: CeilingDecisions = BTreeMap::new();
    let mut pass1: BTreeMap<String, CeilingSearchResult> = BTreeMap::new();

    for (id, (interval, manual)) in intervals {
        if let Some(ceiling) = manual {
            decisions.insert(
                id.clone(),
                CeilingSearchResult {
                    utterance_id: id.clone(),
                    winning_ceiling: *ceiling,
                    per_ceiling_error: vec![(*ceiling, 0.0)],
                    pass: CeilingPass::Manual,
                },
            );
            continue;
        }
        if let Some(result) = search_ceiling_pass1(interval, id) {
            pass1.insert(id.clone(), result);
        }
    }

    let winners: Vec<f64> = pass1.values().map(|r| r.winning_ceiling).collect();

    for (id, (interval, manual)) in intervals {
        if manual.is_some() {
            continue;
        }
        let decided = match pass1.get(id) {
            Some(first) => match search_ceiling_pass2(&winners, interval, id) {
                Some(second) => second,
                None => first.clone(),
            },
            None => CeilingSearchResult {
                utterance_id: id.clone(),
                winning_ceiling: fallback_ceiling(&winners),
                per_ceiling_error: Vec::new(),
                pass: CeilingPass::Fallback,
            },
        };
        decisions.insert(id.clone(), decided);
    }
    decisions
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{resonator_clip, ResonatorSpec};

    fn test_interval(f1: f64, f2: f64, f3: f64, seed: u64) -> AudioClip {
        // A resonance ladder continues past the top grid ceiling so every
        // candidate band is filled, the way a real vocal tract fills it.
        // The first rung mirrors the F2-F3 gap: the 5 ms analysis window
        // smears neighbors together, and asymmetric spacing would bias F3.
        let mut resonances = vec![(f1, 40.0), (f2, 70.0), (f3, 100.0)];
        let mut freq = f3 + (f3 - f2).min(950.0);
        let mut bw = 180.0f64;
        while freq < 8_200.0 {
            resonances.push((freq, bw));
            freq += 880.0;
            bw = (bw + 40.0).min(400.0);
        }
        resonator_clip(
            &ResonatorSpec {
                resonances,
                f0: 125.0,
                duration: 0.4,
                noise_level: 0.05,
                sample_rate: 44_100.0,
            },
            seed,
        )
    }

    #[test]
    fn pass1_grid_has_seven_candidates() {
        let grid = pass1_grid();
        assert_eq!(grid, vec![4500.0, 5000.0, 5500.0, 6000.0, 6500.0, 7000.0, 7500.0]);
    }

    #[test]
    fn pass1_winner_minimizes_table() {
        let clip = test_interval(500.0, 1500.0, 2500.0, 42);
        let result = search_ceiling_pass1(&clip, "u1").unwrap();
        assert_eq!(result.per_ceiling_error.len(), 7);
        let min = result
            .per_ceiling_error
            .iter()
            .map(|(_, e)| *e)
            .fold(f64::INFINITY, f64::min);
        let winner_err = result
            .per_ceiling_error
            .iter()
            .find(|(c, _)| *c == result.winning_ceiling)
            .unwrap()
            .1;
        assert_eq!(winner_err, min);
        // Ties break toward the lower ceiling.
        let first_min = result
            .per_ceiling_error
            .iter()
            .find(|(_, e)| *e == min)
            .unwrap()
            .0;
        assert_eq!(first_min, result.winning_ceiling);
    }

    #[test]
    fn pass2_grid_snaps_iqr_to_lattice() {
        let winners = [5000.0, 5000.0, 5500.0, 6000.0];
        // Q1 = 5000, Q3 = 5625 -> snapped to [5000, 5750]
        assert_eq!(pass2_grid(&winners), vec![5000.0, 5250.0, 5500.0, 5750.0]);
    }

    #[test]
    fn pass2_degenerate_iqr_single_candidate() {
        let winners = [5500.0, 5500.0, 5500.0, 5500.0];
        assert_eq!(pass2_grid(&winners), vec![5500.0]);
    }

    #[test]
    fn pass2_requires_four_winners() {
        let clip = test_interval(500.0, 1500.0, 2500.0, 1);
        assert!(search_ceiling_pass2(&[5000.0, 5500.0, 6000.0], &clip, "u1").is_none());
    }

    #[test]
    fn fallback_is_mean_or_default() {
        assert_eq!(fallback_ceiling(&[5000.0, 6000.0]), 5500.0);
        assert_eq!(fallback_ceiling(&[5250.0]), 5250.0);
        assert_eq!(fallback_ceiling(&[]), GLOBAL_DEFAULT_CEILING);
    }

    #[test]
    fn track_recovers_constructed_resonances() {
        let clip = test_interval(500.0, 1500.0, 2200.0, 9);
        let track = track(&clip, 5500.0, "u1").unwrap();
        assert!(track.usable());
        let mut f3_errors: Vec<f64> = track
            .frames
            .iter()
            .filter(|f| !f.missing && f.frequencies.len() >= 3)
            .map(|f| (f.frequencies[2] - 2200.0).abs())
            .collect();
        assert!(f3_errors.len() >= 10);
        f3_errors.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = f3_errors[f3_errors.len() / 2];
        assert!(median < 50.0, "median |F3 - 2200| = {median}");
    }

    #[test]
    fn track_deterministic_and_zero_audio_unusable() {
        let clip = test_interval(480.0, 1800.0, 2331.0, 5);
        let a = track(&clip, 5500.0, "u1").unwrap();
        let b = track(&clip, 5500.0, "u1").unwrap();
        assert_eq!(a.frames, b.frames);

        let silent = AudioClip::new(vec![0.0; 8820], 44_100.0);
        let t = track(&silent, 5500.0, "u2").unwrap();
        assert!(!t.usable());
        assert!(t.frames.iter().all(|f| f.missing));
    }

    #[test]
    fn manual_ceiling_bypasses_search() {
        let mut intervals = BTreeMap::new();
        intervals.insert(
            "u1".to_string(),
            (test_interval(500.0, 1500.0, 2500.0, 3), Some(5250.0)),
        );
        let decisions = optimize_participant_ceilings(&intervals);
        let d = &decisions["u1"];
        assert_eq!(d.pass, CeilingPass::Manual);
        assert_eq!(d.winning_ceiling, 5250.0);
    }

    #[test]
    fn winner_always_member_of_grid() {
        let clip = test_interval(520.0, 1660.0, 3343.0, 17);
        let result = search_ceiling_pass1(&clip, "u1").unwrap();
        assert!(pass1_grid().contains(&result.winning_ceiling));
        let winners = [result.winning_ceiling; 4];
        if let Some(second) = search_ceiling_pass2(&winners, &clip, "u1") {
            assert!(pass2_grid(&winners).contains(&second.winning_ceiling));
        }
    }
}
