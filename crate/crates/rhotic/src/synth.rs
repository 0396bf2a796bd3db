//! Synthetic corpus generation.
//!
//! Produces a desk-scale labeled corpus whose audio comes from all-pole
//! resonators: rhotic-class tokens carry a narrow F3-F2 distance, derhotic
//! tokens a wide one, with per-stratum scaling so younger and female
//! speakers sit at higher absolute frequencies. The generator also emits a
//! norms table whose means equal the neutral targets, so the corpus is
//! self-consistent end to end.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::corpus::{derive_label, Label, Sex, UtteranceRecord};
use crate::dsp::AudioClip;
use crate::error::{Error, Result};
use crate::features::{Channel, NormRow, NormTable};
use crate::util::derive_seed;

/// An all-pole synthesis recipe: resonances as (frequency, bandwidth) pairs
/// driven by a pulse train mixed with noise.
#[derive(Debug, Clone)]
pub struct ResonatorSpec {
    pub resonances: Vec<(f64, f64)>,
    pub f0: f64,
    pub duration: f64,
    /// 0 = pure pulse train, 1 = pure noise.
    pub noise_level: f64,
    pub sample_rate: f64,
}

/// Synthesize one clip from a resonator recipe.
pub fn resonator_clip(spec: &ResonatorSpec, seed: u64) -> AudioClip {
    let rate = spec.sample_rate;
    let n = (spec.duration * rate).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Excitation: impulse train at f0 plus white noise, shaped by a leaky
    // integrator so the source falls ~6 dB/oct like a glottal spectrum.
    // The analysis chain's 50 Hz pre-emphasis undoes exactly this tilt.
    let period = rate / spec.f0;
    let mut excitation = vec![0.0f64; n];
    let mut next_pulse = 0.0f64;
    while (next_pulse as usize) < n {
        excitation[next_pulse as usize] += 1.0 - spec.noise_level;
        next_pulse += period;
    }
    let noise_scale = spec.noise_level / period.sqrt(); // per-sample noise energy comparable to pulses
    for e in excitation.iter_mut() {
        *e += rng.gen_range(-1.0..1.0) * noise_scale;
    }
    let tilt = (-2.0 * std::f64::consts::PI * 50.0 / rate).exp();
    let mut acc = 0.0;
    for e in excitation.iter_mut() {
        acc = tilt * acc + *e;
        *e = acc;
    }

    // Cascade of two-pole resonator sections.
    let mut samples = excitation;
    for &(freq, bw) in &spec.resonances {
        let r = (-std::f64::consts::PI * bw / rate).exp();
        let w = 2.0 * std::f64::consts::PI * freq / rate;
        let a1 = 2.0 * r * w.cos();
        let a2 = -r * r;
        let g = (1.0 - r) * (1.0 - r); // keep section gain tame
        let mut y1 = 0.0;
        let mut y2 = 0.0;
        for s in samples.iter_mut() {
            let y = g * *s + a1 * y1 + a2 * y2;
            y2 = y1;
            y1 = y;
            *s = y;
        }
    }

    // Remove the integrator's DC drift, then normalize to a fixed peak so
    // 16-bit output never clips.
    let mean = samples.iter().sum::<f64>() / n as f64;
    for s in samples.iter_mut() {
        *s -= mean;
    }
    let peak = samples.iter().map(|s| s.abs()).fold(0.0f64, f64::max);
    if peak > 0.0 {
        let scale = 0.3 / peak;
        for s in samples.iter_mut() {
            *s *= scale;
        }
    }
    AudioClip::new(samples, rate)
}

/// Formant targets for one (age, sex) stratum.
///
/// F1-F3 carry the class contrast; F4/F5 fill the upper band so the
/// synthesized tract matches the five-formant analysis assumption the same
/// way real speech does.
#[derive(Debug, Clone, Copy)]
pub struct StratumTargets {
    /// Neutral-tract (derhotic) F1..F5, Hz.
    pub neutral: [f64; 5],
    /// Fully rhotic F1..F5, Hz.
    pub rhotic: [f64; 5],
    /// Scale factor relative to the 10-year-old female anchor.
    pub scale: f64,
}

/// Vocal-tract scale factor: larger for younger speakers, slightly smaller
/// for post-pubertal males, normalized so a 10-year-old female is 1.0.
fn stratum_scale(age: u32, sex: Sex) -> f64 {
    let a = (age.clamp(6, 18) - 6) as f64 / 12.0;
    let base = 1.30 - 0.30 * a;
    let sex_factor = match sex {
        Sex::F => 1.0,
        Sex::M => 0.95 - 0.05 * (((age as f64) - 10.0) / 8.0).clamp(0.0, 1.0),
    };
    base * sex_factor / 1.20
}

/// Per-stratum class targets. The F3-F2 separations (531 Hz rhotic,
/// 1683 Hz neutral at the anchor stratum) scale with the stratum factor.
pub fn stratum_targets(age: u32, sex: Sex) -> StratumTargets {
    let s = stratum_scale(age, sex);
    StratumTargets {
        neutral: [
            520.0 * s,
            1660.0 * s,
            1660.0 * s + 1683.0 * s,
            3900.0 * s,
            4800.0 * s,
        ],
        rhotic: [
            480.0 * s,
            1800.0 * s,
            1800.0 * s + 531.0 * s,
            3600.0 * s,
            4700.0 * s,
        ],
        scale: s,
    }
}

/// Bandwidths paired with the five stratum targets, Hz.
pub const TARGET_BANDWIDTHS: [f64; 5] = [60.0, 90.0, 130.0, 200.0, 250.0];

/// Highest frequency the resonance ladder must reach, Hz. Resonances above
/// F5 continue at roughly uniform-tube spacing up to here so that every
/// ceiling candidate's analysis band stays filled; an under-filled band
/// leaves an idle LPC pole pair that wanders into the formant slots.
pub const LADDER_TOP: f64 = 8_200.0;

/// Spacing of the filler ladder at the anchor stratum, Hz.
pub const LADDER_STEP: f64 = 880.0;

/// Corpus recipe.
#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub n_participants: usize,
    /// Participant ages cycle through this list.
    pub ages: Vec<u32>,
    pub tokens_per_participant: usize,
    /// Derhotic:rhotic token mix, e.g. (2, 1).
    pub class_mix: (u32, u32),
    /// Per-formant target jitter, Hz at the anchor stratum.
    pub jitter_sd: f64,
    /// Excitation noise mix in [0, 1].
    pub noise_level: f64,
    /// Fraction of tokens whose ratings move toward 0.5 (still on the
    /// correct side of the 0.66 cutoff).
    pub rater_noise_fraction: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_participants: 30,
            ages: vec![7, 8, 9, 10, 11, 12, 13, 14, 15, 16, 17, 19, 24],
            tokens_per_participant: 30,
            class_mix: (2, 1),
            jitter_sd: 40.0,
            noise_level: 0.12,
            rater_noise_fraction: 0.0,
            seed: 1,
        }
    }
}

/// Words cycled through the manifest; the pipeline never interprets them.
const WORDS: [&str; 6] = ["ear", "door", "rabbit", "carrot", "bird", "story"];

/// One synthesized token.
pub struct SynthUtterance {
    pub clip: AudioClip,
    pub record: UtteranceRecord,
}

/// Synthesize one utterance for a stratum and class.
pub fn synth_utterance(
    utterance_id: &str,
    participant_id: &str,
    age: u32,
    sex: Sex,
    label: Label,
    jitter_sd: f64,
    noise_level: f64,
    rater_noise: bool,
    seed: u64,
) -> SynthUtterance {
    let targets = stratum_targets(age, sex);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = Normal::new(0.0, jitter_sd * targets.scale).unwrap();

    let base = match label {
        Label::FullyRhotic => targets.rhotic,
        Label::Derhotic => targets.neutral,
    };
    // Jitter F1 and F2 freely; jitter the F3-F2 distance so the class
    // separation survives exactly. F4/F5 jitter independently.
    let f1 = base[0] + jitter.sample(&mut rng);
    let f2 = base[1] + jitter.sample(&mut rng);
    let distance = (base[2] - base[1]) + jitter.sample(&mut rng);
    let f3 = f2 + distance.max(150.0);
    let f4 = (base[3] + jitter.sample(&mut rng)).max(f3 + 300.0);
    let f5 = (base[4] + jitter.sample(&mut rng)).max(f4 + 300.0);

    let f0 = (220.0 - 4.0 * (age.clamp(6, 20) - 6) as f64) * rng.gen_range(0.95..1.05);
    let duration = rng.gen_range(0.15..0.30);
    let mut resonances: Vec<(f64, f64)> = [f1, f2, f3, f4, f5]
        .into_iter()
        .zip(TARGET_BANDWIDTHS)
        .collect();
    let mut freq = f5 + LADDER_STEP * targets.scale;
    let mut bw = 300.0f64;
    while freq < LADDER_TOP {
        resonances.push((freq + jitter.sample(&mut rng), bw));
        freq += LADDER_STEP * targets.scale;
        bw = (bw + 40.0).min(450.0);
    }
    let clip = resonator_clip(
        &ResonatorSpec {
            resonances,
            f0,
            duration,
            noise_level,
            sample_rate: 44_100.0,
        },
        derive_seed(seed, &[0xa0]),
    );

    let ratings: Vec<u8> = match (label, rater_noise) {
        (Label::FullyRhotic, false) => vec![1, 1, 1],
        (Label::Derhotic, false) => vec![0, 0, 0],
        // Noisy raters disagree but stay on the correct side of 0.66.
        (Label::FullyRhotic, true) => vec![1, 1, 0],
        (Label::Derhotic, true) => vec![1, 0, 0],
    };
    let mean_rating = ratings.iter().map(|&r| r as f64).sum::<f64>() / ratings.len() as f64;
    debug_assert_eq!(derive_label(mean_rating), label);

    let word = WORDS[(seed % WORDS.len() as u64) as usize];
    // Floor to manifest precision so the stored offset never exceeds the
    // actual clip duration.
    let offset = (clip.duration() * 1e6).floor() / 1e6;
    let record = UtteranceRecord {
        utterance_id: utterance_id.to_string(),
        participant_id: participant_id.to_string(),
        age,
        sex,
        word: word.to_string(),
        audio_path: format!("audio/{utterance_id}.wav"),
        rhotic_onset: 0.0,
        rhotic_offset: offset,
        ratings: Some(ratings),
        mean_rating,
        label,
        manual_ceiling: None,
    };
    SynthUtterance { clip, record }
}

/// Norms table matching the generator: means are the neutral targets, with
/// fixed per-channel spreads scaled by stratum.
pub fn synth_norms() -> NormTable {
    let mut rows = Vec::new();
    let mut push_stratum = |age_label: String, age: u32, sex: Sex| {
        let t = stratum_targets(age, sex);
        let s = t.scale;
        rows.push(NormRow {
            age: age_label.clone(),
            sex,
            channel: Channel::F1,
            mean: t.neutral[0],
            sd: 90.0 * s,
        });
        rows.push(NormRow {
            age: age_label.clone(),
            sex,
            channel: Channel::F2,
            mean: t.neutral[1],
            sd: 160.0 * s,
        });
        rows.push(NormRow {
            age: age_label.clone(),
            sex,
            channel: Channel::F3,
            mean: t.neutral[2],
            sd: 200.0 * s,
        });
        rows.push(NormRow {
            age: age_label,
            sex,
            channel: Channel::F3MinusF2,
            mean: t.neutral[2] - t.neutral[1],
            sd: 350.0 * s,
        });
    };
    for sex in [Sex::F, Sex::M] {
        for age in 6..=17u32 {
            push_stratum(age.to_string(), age, sex);
        }
        push_stratum("Adult".to_string(), 18, sex);
    }
    NormTable::from_rows(rows).expect("generated norms are valid")
}

/// Generate the corpus on disk: WAV files under `out_dir/audio/`, a
/// manifest CSV, and a matching norms CSV.
pub fn synth_corpus(spec: &SynthSpec, out_dir: &Path) -> Result<Vec<UtteranceRecord>> {
    let audio_dir = out_dir.join("audio");
    std::fs::create_dir_all(&audio_dir).map_err(|e| Error::io(&audio_dir, e))?;

    let mut records = Vec::new();
    for p in 0..spec.n_participants {
        let participant_id = format!("p{p:03}");
        let age = spec.ages[p % spec.ages.len()];
        let sex = if p % 2 == 0 { Sex::F } else { Sex::M };

        let (d, r) = spec.class_mix;
        let n_derhotic =
            (spec.tokens_per_participant * d as usize) / (d as usize + r as usize);
        let mut labels: Vec<Label> = (0..spec.tokens_per_participant)
            .map(|t| {
                if t < n_derhotic {
                    Label::Derhotic
                } else {
                    Label::FullyRhotic
                }
            })
            .collect();
        let mut order_rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[p as u64, 0xff]));
        use rand::seq::SliceRandom;
        labels.shuffle(&mut order_rng);

        for (t, label) in labels.into_iter().enumerate() {
            let utterance_id = format!("{participant_id}-u{t:03}");
            let token_seed = derive_seed(spec.seed, &[p as u64, t as u64]);
            let rater_noise = spec.rater_noise_fraction > 0.0
                && ChaCha8Rng::seed_from_u64(derive_seed(token_seed, &[0xbb]))
                    .gen_bool(spec.rater_noise_fraction);
            let synth = synth_utterance(
                &utterance_id,
                &participant_id,
                age,
                sex,
                label,
                spec.jitter_sd,
                spec.noise_level,
                rater_noise,
                token_seed,
            );
            synth
                .clip
                .write_wav(&out_dir.join(&synth.record.audio_path))?;
            records.push(synth.record);
        }
    }

    crate::corpus::write_manifest(&out_dir.join("manifest.csv"), &records)?;
    synth_norms().write_csv(&out_dir.join("norms.csv"))?;
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn anchor_stratum_matches_published_distances() {
        let t = stratum_targets(10, Sex::F);
        assert!((t.rhotic[2] - t.rhotic[1] - 531.0).abs() < 1e-9);
        assert!((t.neutral[2] - t.neutral[1] - 1683.0).abs() < 1e-9);
        assert!((t.rhotic[1] - 1800.0).abs() < 1e-9);
        assert!((t.rhotic[2] - 2331.0).abs() < 1e-9);
        assert!((t.scale - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rhotic_distance_below_neutral_in_every_stratum() {
        for sex in [Sex::F, Sex::M] {
            for age in 6..=30u32 {
                let t = stratum_targets(age, sex);
                assert!(t.rhotic[2] - t.rhotic[1] < t.neutral[2] - t.neutral[1]);
            }
        }
    }

    #[test]
    fn same_seed_same_waveform() {
        let spec = ResonatorSpec {
            resonances: vec![(500.0, 80.0), (1500.0, 110.0), (2500.0, 160.0)],
            f0: 230.0,
            duration: 0.2,
            noise_level: 0.4,
            sample_rate: 44_100.0,
        };
        let a = resonator_clip(&spec, 11);
        let b = resonator_clip(&spec, 11);
        assert_eq!(a.samples, b.samples);
        let c = resonator_clip(&spec, 12);
        assert_ne!(a.samples, c.samples);
    }

    #[test]
    fn utterance_label_and_interval_consistent() {
        let u = synth_utterance("u0", "p0", 10, Sex::F, Label::FullyRhotic, 40.0, 0.4, false, 5);
        assert_eq!(u.record.label, Label::FullyRhotic);
        assert_eq!(u.record.mean_rating, 1.0);
        assert_eq!(u.record.rhotic_onset, 0.0);
        assert!((u.record.rhotic_offset - u.clip.duration()).abs() < 1e-12);
        assert!(u.clip.duration() >= 0.15 && u.clip.duration() < 0.30);

        let noisy = synth_utterance("u1", "p0", 10, Sex::F, Label::FullyRhotic, 40.0, 0.4, true, 5);
        assert!((noisy.record.mean_rating - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(noisy.record.label, Label::FullyRhotic);
    }

    #[test]
    fn corpus_counts_and_mix() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            n_participants: 4,
            tokens_per_participant: 6,
            ..SynthSpec::default()
        };
        let records = synth_corpus(&spec, dir.path()).unwrap();
        assert_eq!(records.len(), 24);
        for p in 0..4 {
            let pid = format!("p{p:03}");
            let tokens: Vec<_> = records
                .iter()
                .filter(|r| r.participant_id == pid)
                .collect();
            assert_eq!(tokens.len(), 6);
            let derhotic = tokens.iter().filter(|r| r.label == Label::Derhotic).count();
            assert_eq!(derhotic, 4); // 2:1 mix
        }
        assert!(dir.path().join("manifest.csv").exists());
        assert!(dir.path().join("norms.csv").exists());
        assert!(dir.path().join("audio/p000-u000.wav").exists());
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            n_participants: 2,
            tokens_per_participant: 4,
            ..SynthSpec::default()
        };
        synth_corpus(&spec, dir_a.path()).unwrap();
        synth_corpus(&spec, dir_b.path()).unwrap();
        let a = std::fs::read(dir_a.path().join("manifest.csv")).unwrap();
        let b = std::fs::read(dir_b.path().join("manifest.csv")).unwrap();
        assert_eq!(a, b);
        let a = std::fs::read(dir_a.path().join("audio/p001-u002.wav")).unwrap();
        let b = std::fs::read(dir_b.path().join("audio/p001-u002.wav")).unwrap();
        assert_eq!(a, b);
    }
}
