//! Corpus handling: manifest ingest, label derivation, participant
//! profiling, split construction, and class-ratio down-sampling.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean-rating cutoff above which (inclusive) a token counts as fully
/// rhotic.
pub const LABEL_THRESHOLD: f64 = 0.66;

/// Tolerance when a manifest row carries both raw ratings and a mean:
/// generous enough for 2-3 decimal rounding of the mean.
const RATING_AGREEMENT_TOL: f64 = 5e-3;

/// Participants with more tokens than this are down-sampled per participant
/// in validation/test; smaller participants are exempt.
pub const PER_PARTICIPANT_DOWNSAMPLE_MIN_TOKENS: usize = 200;

/// Stimulability requires the rhotic:derhotic ratio to exceed this.
pub const STIMULABLE_MIN_RATIO: f64 = 0.33;

/// Speakers more accurate than this are excluded from validation/test.
pub const STIMULABLE_MAX_ACCURACY: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sex {
    F,
    M,
}

impl fmt::Display for Sex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Sex::F => write!(f, "F"),
            Sex::M => write!(f, "M"),
        }
    }
}

impl std::str::FromStr for Sex {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "F" | "f" => Ok(Sex::F),
            "M" | "m" => Ok(Sex::M),
            other => Err(format!("sex must be F or M, got {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Derhotic,
    FullyRhotic,
}

/// One labeled audio token.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub utterance_id: String,
    pub participant_id: String,
    pub age: u32,
    pub sex: Sex,
    pub word: String,
    pub audio_path: String,
    pub rhotic_onset: f64,
    pub rhotic_offset: f64,
    /// Raw binary listener ratings, when available.
    pub ratings: Option<Vec<u8>>,
    pub mean_rating: f64,
    pub label: Label,
    pub manual_ceiling: Option<f64>,
}

/// Derive the binary label from a mean listener rating.
pub fn derive_label(mean_rating: f64) -> Label {
    if mean_rating >= LABEL_THRESHOLD {
        Label::FullyRhotic
    } else {
        Label::Derhotic
    }
}

/// Per-speaker token counts and the stimulability gate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParticipantProfile {
    pub participant_id: String,
    pub age: u32,
    pub sex: Sex,
    pub n_rhotic: usize,
    pub n_derhotic: usize,
    pub accuracy: f64,
    pub stimulable: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subset {
    Train,
    Validation,
    Test,
}

impl fmt::Display for Subset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Subset::Train => write!(f, "train"),
            Subset::Validation => write!(f, "validation"),
            Subset::Test => write!(f, "test"),
        }
    }
}

/// The utterances kept in one subset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub subset: Subset,
    pub kept_utterance_ids: BTreeSet<String>,
    pub rng_seed: u64,
    /// Derhotic:rhotic bound applied by down-sampling, when any.
    pub downsample_ratio: Option<(u32, u32)>,
}

/// Serialized form of the three splits.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitFile {
    pub seed: u64,
    /// Requested token balance, e.g. [70, 15, 15].
    pub target_balance: [u32; 3],
    /// Derhotic:rhotic ratios: per-participant for validation/test, global
    /// for train.
    pub valid_test_ratio: (u32, u32),
    pub train_ratio: (u32, u32),
    pub subsets: BTreeMap<String, Vec<String>>,
}

impl SplitFile {
    pub fn from_assignments(assignments: &[SplitAssignment; 3], seed: u64) -> SplitFile {
        let mut subsets = BTreeMap::new();
        for a in assignments {
            subsets.insert(
                a.subset.to_string(),
                a.kept_utterance_ids.iter().cloned().collect(),
            );
        }
        SplitFile {
            seed,
            target_balance: [70, 15, 15],
            valid_test_ratio: (2, 1),
            train_ratio: (1, 1),
            subsets,
        }
    }

    pub fn ids(&self, subset: Subset) -> &[String] {
        self.subsets
            .get(&subset.to_string())
            .map(|v| v.as_slice())
            .unwrap_or(&[])
    }
}

fn parse_field<T: std::str::FromStr>(
    path: &Path,
    row: usize,
    name: &str,
    raw: &str,
) -> Result<T>
where
    T::Err: fmt::Display,
{
    raw.trim().parse::<T>().map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        row,
        message: format!("field {name}: {e}"),
    })
}

/// Load a manifest CSV.
///
/// Columns: `utterance_id,participant_id,age,sex,word,audio_path,
/// rhotic_onset_s,rhotic_offset_s,ratings,mean_rating,manual_ceiling_hz`.
/// `ratings` is `;`-separated 0/1; one of `ratings` / `mean_rating` may be
/// empty, and when both are present they must agree.
pub fn load_manifest(path: &Path) -> Result<Vec<UtteranceRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Validation(format!("cannot open manifest {}: {e}", path.display())))?;

    let mut records = Vec::new();
    for (idx, row) in reader.records().enumerate() {
        let row_no = idx + 1;
        let row = row.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            row: row_no,
            message: e.to_string(),
        })?;
        if row.len() != 11 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                row: row_no,
                message: format!("expected 11 columns, found {}", row.len()),
            });
        }

        let ratings_raw = row[8].trim();
        let mean_raw = row[9].trim();
        let ratings: Option<Vec<u8>> = if ratings_raw.is_empty() {
            None
        } else {
            let mut rs = Vec::new();
            for part in ratings_raw.split(';') {
                match part.trim() {
                    "0" => rs.push(0),
                    "1" => rs.push(1),
                    other => {
                        return Err(Error::Parse {
                            path: path.to_path_buf(),
                            row: row_no,
                            message: format!("ratings must be ;-separated 0/1, got {other:?}"),
                        })
                    }
                }
            }
            Some(rs)
        };

        let mean_rating = match (&ratings, mean_raw.is_empty()) {
            (Some(rs), true) => rs.iter().map(|&r| r as f64).sum::<f64>() / rs.len() as f64,
            (Some(rs), false) => {
                let derived = rs.iter().map(|&r| r as f64).sum::<f64>() / rs.len() as f64;
                let given: f64 = parse_field(path, row_no, "mean_rating", mean_raw)?;
                if (derived - given).abs() > RATING_AGREEMENT_TOL {
                    return Err(Error::Parse {
                        path: path.to_path_buf(),
                        row: row_no,
                        message: format!(
                            "mean_rating {given} disagrees with ratings mean {derived:.4}"
                        ),
                    });
                }
                derived
            }
            (None, false) => parse_field(path, row_no, "mean_rating", mean_raw)?,
            (None, true) => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    row: row_no,
                    message: "row needs ratings or mean_rating".into(),
                })
            }
        };
        if !(0.0..=1.0).contains(&mean_rating) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                row: row_no,
                message: format!("mean_rating {mean_rating} outside [0, 1]"),
            });
        }

        let onset: f64 = parse_field(path, row_no, "rhotic_onset_s", &row[6])?;
        let offset: f64 = parse_field(path, row_no, "rhotic_offset_s", &row[7])?;
        if !(onset >= 0.0 && onset < offset) {
            return Err(Error::Validation(format!(
                "{} row {row_no}: rhotic interval [{onset}, {offset}] is empty or negative",
                path.display()
            )));
        }

        let manual_ceiling = if row[10].trim().is_empty() {
            None
        } else {
            Some(parse_field::<f64>(path, row_no, "manual_ceiling_hz", &row[10])?)
        };

        records.push(UtteranceRecord {
            utterance_id: row[0].to_string(),
            participant_id: row[1].to_string(),
            age: parse_field(path, row_no, "age", &row[2])?,
            sex: parse_field(path, row_no, "sex", &row[3])?,
            word: row[4].to_string(),
            audio_path: row[5].to_string(),
            rhotic_onset: onset,
            rhotic_offset: offset,
            ratings,
            mean_rating,
            label: derive_label(mean_rating),
            manual_ceiling,
        });
    }
    Ok(records)
}

/// Write records back out in the manifest CSV schema.
pub fn write_manifest(path: &Path, records: &[UtteranceRecord]) -> Result<()> {
    let mut writer =
        csv::Writer::from_path(path).map_err(|e| Error::Validation(format!("{e}")))?;
    writer
        .write_record([
            "utterance_id",
            "participant_id",
            "age",
            "sex",
            "word",
            "audio_path",
            "rhotic_onset_s",
            "rhotic_offset_s",
            "ratings",
            "mean_rating",
            "manual_ceiling_hz",
        ])
        .map_err(|e| Error::Validation(format!("{e}")))?;
    for r in records {
        let ratings = r
            .ratings
            .as_ref()
            .map(|rs| {
                rs.iter()
                    .map(|v| v.to_string())
                    .collect::<Vec<_>>()
                    .join(";")
            })
            .unwrap_or_default();
        let ceiling = r
            .manual_ceiling
            .map(|c| format!("{c}"))
            .unwrap_or_default();
        writer
            .write_record([
                r.utterance_id.as_str(),
                r.participant_id.as_str(),
                &r.age.to_string(),
                &r.sex.to_string(),
                r.word.as_str(),
                r.audio_path.as_str(),
                &format!("{:.6}", r.rhotic_onset),
                &format!("{:.6}", r.rhotic_offset),
                &ratings,
                &format!("{:.6}", r.mean_rating),
                &ceiling,
            ])
            .map_err(|e| Error::Validation(format!("{e}")))?;
    }
    writer.flush().map_err(|e| Error::Validation(format!("{e}")))?;
    Ok(())
}

/// Summarize each participant and apply the stimulability gate: the
/// rhotic:derhotic ratio must exceed 0.33 (no derhotic tokens counts as
/// stimulable) and overall accuracy must not exceed 0.8.
pub fn profile_participants(records: &[UtteranceRecord]) -> Vec<ParticipantProfile> {
    let mut by_participant: BTreeMap<&str, (u32, Sex, usize, usize)> = BTreeMap::new();
    for r in records {
        let entry = by_participant
            .entry(&r.participant_id)
            .or_insert((r.age, r.sex, 0, 0));
        match r.label {
            Label::FullyRhotic => entry.2 += 1,
            Label::Derhotic => entry.3 += 1,
        }
    }
    by_participant
        .into_iter()
        .map(|(id, (age, sex, n_rhotic, n_derhotic))| {
            let accuracy = n_rhotic as f64 / (n_rhotic + n_derhotic) as f64;
            let ratio_ok =
                n_derhotic == 0 || (n_rhotic as f64 / n_derhotic as f64) > STIMULABLE_MIN_RATIO;
            ParticipantProfile {
                participant_id: id.to_string(),
                age,
                sex,
                n_rhotic,
                n_derhotic,
                accuracy,
                stimulable: ratio_ok && accuracy <= STIMULABLE_MAX_ACCURACY,
            }
        })
        .collect()
}

/// Age bins used for stratified assignment and fairness tables. Ages below
/// the first bin fold into it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AgeBin {
    To9,
    From10To12,
    From13To17,
    Adult,
}

impl AgeBin {
    pub fn of(age: u32) -> AgeBin {
        match age {
            0..=9 => AgeBin::To9,
            10..=12 => AgeBin::From10To12,
            13..=17 => AgeBin::From13To17,
            _ => AgeBin::Adult,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            AgeBin::To9 => "7-9",
            AgeBin::From10To12 => "10-12",
            AgeBin::From13To17 => "13-17",
            AgeBin::Adult => "18+",
        }
    }

    pub fn all() -> [AgeBin; 4] {
        [
            AgeBin::To9,
            AgeBin::From10To12,
            AgeBin::From13To17,
            AgeBin::Adult,
        ]
    }
}

/// Projected post-down-sampling token contribution of a participant if
/// placed in validation/test.
fn projected_valid_test_tokens(p: &ParticipantProfile) -> usize {
    let total = p.n_rhotic + p.n_derhotic;
    if total > PER_PARTICIPANT_DOWNSAMPLE_MIN_TOKENS {
        p.n_rhotic + p.n_derhotic.min(2 * p.n_rhotic)
    } else {
        total
    }
}

/// Projected contribution if placed in train (global 1:1 keeps one derhotic
/// token per rhotic token as long as derhotic tokens dominate overall).
fn projected_train_tokens(p: &ParticipantProfile) -> usize {
    2 * p.n_rhotic.min(p.n_derhotic) + p.n_rhotic.saturating_sub(p.n_derhotic)
}

/// Build train/validation/test splits.
///
/// Test is filled first, then validation, drawing only stimulable
/// participants, greedily round-robin over (age-bin x sex) cells in
/// descending cell size with a seeded shuffle inside each cell. Candidates
/// are accepted while they move the projected post-down-sampling token
/// share closer to 15%. Everyone else lands in train.
pub fn build_splits(
    records: &[UtteranceRecord],
    profiles: &[ParticipantProfile],
    seed: u64,
) -> Result<[SplitAssignment; 3]> {
    let stimulable: Vec<&ParticipantProfile> = profiles.iter().filter(|p| p.stimulable).collect();
    if stimulable.len() < 3 {
        return Err(Error::Validation(format!(
            "need at least 3 stimulable participants to build splits, found {}",
            stimulable.len()
        )));
    }

    // Cells keyed by (age bin, sex), members sorted for determinism, then
    // shuffled under the seed.
    let mut cells: BTreeMap<(AgeBin, String), Vec<&ParticipantProfile>> = BTreeMap::new();
    for p in &stimulable {
        cells
            .entry((AgeBin::of(p.age), p.sex.to_string()))
            .or_default()
            .push(p);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cell_list: Vec<Vec<&ParticipantProfile>> = Vec::new();
    for members in cells.values_mut() {
        members.sort_by(|a, b| a.participant_id.cmp(&b.participant_id));
        members.shuffle(&mut rng);
        cell_list.push(members.clone());
    }
    cell_list.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| {
        a[0].participant_id.cmp(&b[0].participant_id)
    }));

    // Round-robin iterator over cells.
    let mut order: Vec<&ParticipantProfile> = Vec::with_capacity(stimulable.len());
    let mut offsets = vec![0usize; cell_list.len()];
    loop {
        let mut advanced = false;
        for (cell, offset) in cell_list.iter().zip(offsets.iter_mut()) {
            if *offset < cell.len() {
                order.push(cell[*offset]);
                *offset += 1;
                advanced = true;
            }
        }
        if !advanced {
            break;
        }
    }

    let by_id: BTreeMap<&str, &ParticipantProfile> = profiles
        .iter()
        .map(|p| (p.participant_id.as_str(), p))
        .collect();

    let mut test_ids: BTreeSet<String> = BTreeSet::new();
    let mut valid_ids: BTreeSet<String> = BTreeSet::new();

    let projected_share = |held: &BTreeSet<String>, other: &BTreeSet<String>| -> f64 {
        let mut held_tokens = 0usize;
        let mut total = 0usize;
        for p in by_id.values() {
            if held.contains(&p.participant_id) {
                let t = projected_valid_test_tokens(p);
                held_tokens += t;
                total += t;
            } else if other.contains(&p.participant_id) {
                total += projected_valid_test_tokens(p);
            } else {
                total += projected_train_tokens(p);
            }
        }
        if total == 0 {
            0.0
        } else {
            held_tokens as f64 / total as f64
        }
    };

    let target = 0.15;
    // Fill test, then validation, in that order.
    for fill_test in [true, false] {
        for p in &order {
            if test_ids.contains(&p.participant_id) || valid_ids.contains(&p.participant_id) {
                continue;
            }
            // Never drain train completely.
            if test_ids.len() + valid_ids.len() + 1 >= stimulable.len().max(3) {
                break;
            }
            let (held, other) = if fill_test {
                (&mut test_ids, &valid_ids)
            } else {
                (&mut valid_ids, &test_ids)
            };
            let before = projected_share(held, other);
            held.insert(p.participant_id.clone());
            let after = projected_share(held, other);
            let keep = held.len() == 1 || (after - target).abs() < (before - target).abs();
            if !keep {
                held.remove(&p.participant_id);
                break;
            }
        }
    }

    let mut train_set = BTreeSet::new();
    let mut valid_set = BTreeSet::new();
    let mut test_set = BTreeSet::new();
    for r in records {
        if test_ids.contains(&r.participant_id) {
            test_set.insert(r.utterance_id.clone());
        } else if valid_ids.contains(&r.participant_id) {
            valid_set.insert(r.utterance_id.clone());
        } else {
            train_set.insert(r.utterance_id.clone());
        }
    }

    Ok([
        SplitAssignment {
            subset: Subset::Train,
            kept_utterance_ids: train_set,
            rng_seed: seed,
            downsample_ratio: None,
        },
        SplitAssignment {
            subset: Subset::Validation,
            kept_utterance_ids: valid_set,
            rng_seed: seed,
            downsample_ratio: None,
        },
        SplitAssignment {
            subset: Subset::Test,
            kept_utterance_ids: test_set,
            rng_seed: seed,
            downsample_ratio: None,
        },
    ])
}

/// How down-sampling is applied to a split.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DownsamplePolicy {
    /// Bound each participant's derhotic:rhotic ratio, but only for
    /// participants holding more than `min_tokens` tokens in the split.
    PerParticipant { ratio: (u32, u32), min_tokens: usize },
    /// Bound the split-wide derhotic:rhotic ratio.
    Global { ratio: (u32, u32) },
}

impl DownsamplePolicy {
    /// Validation/test policy: 2:1 per participant, >200-token guard.
    pub fn valid_test() -> Self {
        DownsamplePolicy::PerParticipant {
            ratio: (2, 1),
            min_tokens: PER_PARTICIPANT_DOWNSAMPLE_MIN_TOKENS,
        }
    }

    /// Train policy: 1:1 across the whole subset.
    pub fn train() -> Self {
        DownsamplePolicy::Global { ratio: (1, 1) }
    }

    fn ratio(&self) -> (u32, u32) {
        match self {
            DownsamplePolicy::PerParticipant { ratio, .. } => *ratio,
            DownsamplePolicy::Global { ratio } => *ratio,
        }
    }
}

/// Remove randomly chosen derhotic tokens until the requested
/// derhotic:rhotic bound holds. Rhotic tokens are never removed; a split
/// already within the bound passes through unchanged.
pub fn downsample(
    split: &SplitAssignment,
    records: &[UtteranceRecord],
    policy: DownsamplePolicy,
    seed: u64,
) -> SplitAssignment {
    let kept: Vec<&UtteranceRecord> = records
        .iter()
        .filter(|r| split.kept_utterance_ids.contains(&r.utterance_id))
        .collect();

    let (num, den) = policy.ratio();
    let mut removed: BTreeSet<String> = BTreeSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut prune = |group: &[&UtteranceRecord], rng: &mut ChaCha8Rng| {
        let n_rhotic = group
            .iter()
            .filter(|r| r.label == Label::FullyRhotic)
            .count();
        let mut derhotic: Vec<&str> = group
            .iter()
            .filter(|r| r.label == Label::Derhotic)
            .map(|r| r.utterance_id.as_str())
            .collect();
        let keep_derhotic = (n_rhotic * num as usize) / den as usize;
        if derhotic.len() <= keep_derhotic {
            return;
        }
        derhotic.sort(); // deterministic base order before the shuffle
        derhotic.shuffle(rng);
        for id in derhotic.into_iter().skip(keep_derhotic) {
            removed.insert(id.to_string());
        }
    };

    match policy {
        DownsamplePolicy::Global { .. } => prune(&kept, &mut rng),
        DownsamplePolicy::PerParticipant { min_tokens, .. } => {
            let mut by_participant: BTreeMap<&str, Vec<&UtteranceRecord>> = BTreeMap::new();
            for r in &kept {
                by_participant
                    .entry(r.participant_id.as_str())
                    .or_default()
                    .push(r);
            }
            for group in by_participant.values() {
                if group.len() > min_tokens {
                    prune(group, &mut rng);
                }
            }
        }
    }

    SplitAssignment {
        subset: split.subset,
        kept_utterance_ids: split
            .kept_utterance_ids
            .iter()
            .filter(|id| !removed.contains(*id))
            .cloned()
            .collect(),
        rng_seed: seed,
        downsample_ratio: Some(policy.ratio()),
    }
}
