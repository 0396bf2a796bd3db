//! Stage orchestration: manifest to feature file, dataset assembly,
//! out-of-box evaluation, and the personalization report format.
//!
//! Extraction parallelizes over participants (the second ceiling pass
//! needs all of a participant's first-pass winners) with results merged in
//! participant order, so output files are byte-stable for any job count.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Label, Sex, UtteranceRecord};
use crate::dsp::{self, extract_interval, preemphasize, AudioClip, MfccExtractor};
use crate::error::{Error, Result};
use crate::eval::{Condition, ParticipantMetrics};
use crate::features::{
    bin_aggregate, build_channels, impute, normalize_age_sex, normalize_utterance, Channel,
    ChannelSeries, FeatureRecord, FeatureSet, NormTable,
};
use crate::models::{ModelBundle, Sample};
use crate::tracking::{self, CeilingSearchResult};
use crate::tuning::PersonalizationResult;

/// Per-utterance ceiling audit entry for the extraction diagnostics file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CeilingDiagnostic {
    pub utterance_id: String,
    pub result: CeilingSearchResult,
}

/// Extraction output: features plus audit information.
pub struct ExtractionOutcome {
    pub features: Vec<FeatureRecord>,
    pub diagnostics: Vec<CeilingDiagnostic>,
    /// Utterances dropped as unusable (no analyzable frames), with reasons.
    pub skipped: Vec<(String, String)>,
}

/// Resolve an audio path relative to the manifest's directory.
fn resolve_audio(manifest_dir: &Path, audio_path: &str) -> std::path::PathBuf {
    let p = Path::new(audio_path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest_dir.join(p)
    }
}

fn formant_features(
    record: &UtteranceRecord,
    interval: &AudioClip,
    ceiling: f64,
    feature_set: FeatureSet,
    norms: Option<&NormTable>,
) -> Result<FeatureRecord> {
    let track = tracking::track(interval, ceiling, &record.utterance_id)?;
    if !track.usable() {
        return Err(Error::Unusable(format!(
            "{}: no analyzable frames",
            record.utterance_id
        )));
    }
    let channels = build_channels(&track);
    let mut normalized: Vec<ChannelSeries> = Vec::with_capacity(channels.len());
    for series in &channels {
        let filled = impute(series)?;
        let z = match feature_set {
            FeatureSet::FormantAsnorm => {
                if filled.channel == Channel::DeltaF3MinusF2 {
                    // The norms tables carry static formant values only.
                    normalize_utterance(&filled)
                } else {
                    let norms = norms.ok_or_else(|| {
                        Error::Validation("age-and-sex normalization needs a norms table".into())
                    })?;
                    normalize_age_sex(&filled, record.age, record.sex, norms)?
                }
            }
            FeatureSet::FormantUnorm => normalize_utterance(&filled),
            FeatureSet::Mfcc => unreachable!("handled separately"),
        };
        normalized.push(z);
    }
    let tensor = bin_aggregate(&normalized, feature_set);
    Ok(FeatureRecord {
        utterance_id: record.utterance_id.clone(),
        participant_id: record.participant_id.clone(),
        age: record.age,
        sex: record.sex,
        label: record.label,
        feature_set,
        dims: [tensor.n_bins, tensor.n_channels, tensor.n_stats],
        flattened_means: tensor.flattened_means(),
        values: tensor.values,
    })
}

fn mfcc_features(record: &UtteranceRecord, interval: &AudioClip) -> Result<FeatureRecord> {
    let rate = interval.sample_rate;
    let emphasized = preemphasize(&interval.samples, rate, dsp::PREEMPHASIS_CUTOFF);
    let frames = dsp::frames(&emphasized, rate);
    if frames.is_empty() {
        return Err(Error::Unusable(format!(
            "{}: interval shorter than one analysis frame",
            record.utterance_id
        )));
    }
    let extractor = MfccExtractor::new(frames[0].samples.len(), rate);
    let coefficients: Vec<[f64; dsp::N_MFCC]> = frames
        .iter()
        .map(|f| extractor.mfcc(&f.samples).coefficients)
        .collect();

    let mut normalized = Vec::with_capacity(dsp::N_MFCC);
    for c in 0..dsp::N_MFCC {
        let series = ChannelSeries {
            channel: Channel::F1, // channel ids are formant-specific; unused here
            values: coefficients.iter().map(|row| row[c]).collect(),
            missing: vec![false; coefficients.len()],
        };
        normalized.push(normalize_utterance(&series));
    }
    let tensor = bin_aggregate(&normalized, FeatureSet::Mfcc);
    Ok(FeatureRecord {
        utterance_id: record.utterance_id.clone(),
        participant_id: record.participant_id.clone(),
        age: record.age,
        sex: record.sex,
        label: record.label,
        feature_set: FeatureSet::Mfcc,
        dims: [tensor.n_bins, tensor.n_channels, tensor.n_stats],
        flattened_means: tensor.flattened_means(),
        values: tensor.values,
    })
}

fn extract_participant(
    records: &[&UtteranceRecord],
    manifest_dir: &Path,
    feature_set: FeatureSet,
    norms: Option<&NormTable>,
) -> Result<(Vec<FeatureRecord>, Vec<CeilingDiagnostic>, Vec<(String, String)>)> {
    let mut features = Vec::new();
    let mut diagnostics = Vec::new();
    let mut skipped = Vec::new();

    // Load and cut every interval first.
    let mut intervals: BTreeMap<String, (AudioClip, Option<f64>)> = BTreeMap::new();
    for record in records {
        let clip = AudioClip::read_wav(&resolve_audio(manifest_dir, &record.audio_path))?;
        let interval = extract_interval(
            &clip,
            record.rhotic_onset,
            record.rhotic_offset,
            dsp::INTERVAL_BUFFER,
        )?;
        intervals.insert(
            record.utterance_id.clone(),
            (interval, record.manual_ceiling),
        );
    }

    match feature_set {
        FeatureSet::Mfcc => {
            for record in records {
                let (interval, _) = &intervals[&record.utterance_id];
                match mfcc_features(record, interval) {
                    Ok(f) => features.push(f),
                    Err(Error::Unusable(reason)) => {
                        skipped.push((record.utterance_id.clone(), reason))
                    }
                    Err(e) => return Err(e),
                }
            }
        }
        _ => {
            let decisions = tracking::optimize_participant_ceilings(&intervals);
            for record in records {
                let decision = &decisions[&record.utterance_id];
                diagnostics.push(CeilingDiagnostic {
                    utterance_id: record.utterance_id.clone(),
                    result: decision.clone(),
                });
                let (interval, _) = &intervals[&record.utterance_id];
                match formant_features(
                    record,
                    interval,
                    decision.winning_ceiling,
                    feature_set,
                    norms,
                ) {
                    Ok(f) => features.push(f),
                    Err(Error::Unusable(reason)) => {
                        skipped.push((record.utterance_id.clone(), reason))
                    }
                    Err(e) => return Err(e),
                }
            }
        }
    }
    Ok((features, diagnostics, skipped))
}

/// Extract features for every manifest record.
///
/// `jobs` sizes the worker pool (0 = rayon default). Audio paths resolve
/// relative to `manifest_dir`. The norms table is required for the
/// age-and-sex feature set only.
pub fn extract_features(
    records: &[UtteranceRecord],
    manifest_dir: &Path,
    feature_set: FeatureSet,
    norms: Option<&NormTable>,
    jobs: usize,
) -> Result<ExtractionOutcome> {
    let mut by_participant: BTreeMap<&str, Vec<&UtteranceRecord>> = BTreeMap::new();
    for r in records {
        by_participant
            .entry(r.participant_id.as_str())
            .or_default()
            .push(r);
    }
    let groups: Vec<Vec<&UtteranceRecord>> = by_participant.into_values().collect();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Validation(format!("thread pool: {e}")))?;
    let results: Vec<Result<_>> = pool.install(|| {
        groups
            .par_iter()
            .map(|group| extract_participant(group, manifest_dir, feature_set, norms))
            .collect()
    });

    let mut outcome = ExtractionOutcome {
        features: Vec::new(),
        diagnostics: Vec::new(),
        skipped: Vec::new(),
    };
    for result in results {
        let (features, diagnostics, skipped) = result?;
        outcome.features.extend(features);
        outcome.diagnostics.extend(diagnostics);
        outcome.skipped.extend(skipped);
    }
    Ok(outcome)
}

/// Group samples by participant id.
pub fn by_participant(samples: &[Sample]) -> BTreeMap<String, Vec<Sample>> {
    let mut map: BTreeMap<String, Vec<Sample>> = BTreeMap::new();
    for s in samples {
        map.entry(s.participant_id.clone()).or_default().push(s.clone());
    }
    map
}

/// Out-of-box per-participant metrics for a scored sample set.
pub fn out_of_box_metrics(
    bundle: &ModelBundle,
    samples: &[Sample],
    meta: &BTreeMap<String, (u32, Sex)>,
) -> Result<Vec<ParticipantMetrics>> {
    let mut tokens: BTreeMap<String, (u32, Sex, Vec<Label>, Vec<Label>)> = BTreeMap::new();
    for s in samples {
        let (age, sex) = meta
            .get(&s.participant_id)
            .copied()
            .ok_or_else(|| Error::Validation(format!("no metadata for {}", s.participant_id)))?;
        let entry = tokens
            .entry(s.participant_id.clone())
            .or_insert((age, sex, Vec::new(), Vec::new()));
        entry.2.push(if s.positive {
            Label::FullyRhotic
        } else {
            Label::Derhotic
        });
        entry.3.push(if bundle.score(s)? >= bundle.decision_threshold {
            Label::FullyRhotic
        } else {
            Label::Derhotic
        });
    }
    Ok(crate::eval::score_participants(&tokens, Condition::OutOfBox))
}

/// Personalization stage output file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PersonalizationReport {
    pub schema_version: u32,
    pub tool_version: String,
    pub seed: u64,
    pub results: Vec<PersonalizationResult>,
}

pub fn write_personalization_report(path: &Path, report: &PersonalizationReport) -> Result<()> {
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| Error::Validation(format!("serialize personalization report: {e}")))?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn read_personalization_report(path: &Path) -> Result<PersonalizationReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))
}

/// Write ceiling diagnostics as a JSON array.
pub fn write_diagnostics(path: &Path, diagnostics: &[CeilingDiagnostic]) -> Result<()> {
    let json = serde_json::to_string_pretty(diagnostics)
        .map_err(|e| Error::Validation(format!("serialize diagnostics: {e}")))?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

/// Write the split file with a stable layout.
pub fn write_split_file(path: &Path, split: &crate::corpus::SplitFile) -> Result<()> {
    let json = serde_json::to_string_pretty(split)
        .map_err(|e| Error::Validation(format!("serialize splits: {e}")))?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn read_split_file(path: &Path) -> Result<crate::corpus::SplitFile> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))
}

pub fn write_evaluation_report(
    path: &Path,
    report: &crate::eval::EvaluationReport,
) -> Result<()> {
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| Error::Validation(format!("serialize report: {e}")))?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn read_evaluation_report(path: &Path) -> Result<crate::eval::EvaluationReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))
}

/// Write features as JSON Lines (delegates to the features module; here so
/// callers find every stage writer in one place).
pub fn write_features(path: &Path, features: &[FeatureRecord]) -> Result<()> {
    crate::features::write_feature_file(path, features)
}

/// Participant metadata (age, sex) from feature records.
pub fn participant_meta(features: &[FeatureRecord]) -> BTreeMap<String, (u32, Sex)> {
    let mut map = BTreeMap::new();
    for f in features {
        map.entry(f.participant_id.clone())
            .or_insert((f.age, f.sex));
    }
    map
}

/// Select samples whose utterance ids belong to a subset id list.
pub fn select_samples(samples: &[Sample], ids: &[String]) -> Vec<Sample> {
    let wanted: std::collections::BTreeSet<&str> = ids.iter().map(|s| s.as_str()).collect();
    samples
        .iter()
        .filter(|s| wanted.contains(s.utterance_id.as_str()))
        .cloned()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{synth_corpus, SynthSpec};

    #[test]
    fn extraction_is_deterministic_across_job_counts() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            n_participants: 2,
            tokens_per_participant: 4,
            ..SynthSpec::default()
        };
        let records = synth_corpus(&spec, dir.path()).unwrap();
        let norms = NormTable::read_csv(&dir.path().join("norms.csv")).unwrap();

        let one = extract_features(
            &records,
            dir.path(),
            FeatureSet::FormantAsnorm,
            Some(&norms),
            1,
        )
        .unwrap();
        let four = extract_features(
            &records,
            dir.path(),
            FeatureSet::FormantAsnorm,
            Some(&norms),
            4,
        )
        .unwrap();
        assert_eq!(one.features.len(), four.features.len());
        for (a, b) in one.features.iter().zip(&four.features) {
            assert_eq!(a.utterance_id, b.utterance_id);
            assert_eq!(a.values, b.values);
        }
        assert!(one.skipped.is_empty(), "{:?}", one.skipped);
        // Formant tensors are 10 x 5 x 8.
        assert_eq!(one.features[0].dims, [10, 5, 8]);
        assert_eq!(one.features[0].flattened_means.len(), 50);
    }

    #[test]
    fn mfcc_extraction_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            n_participants: 1,
            tokens_per_participant: 2,
            ..SynthSpec::default()
        };
        let records = synth_corpus(&spec, dir.path()).unwrap();
        let out = extract_features(&records, dir.path(), FeatureSet::Mfcc, None, 1).unwrap();
        assert_eq!(out.features.len(), 2);
        assert_eq!(out.features[0].dims, [10, 13, 8]);
        assert_eq!(out.features[0].flattened_means.len(), 130);
        assert!(out.features[0].values.iter().all(|v| v.is_finite()));
    }
}
