//! Feature construction: formant channels, imputation, normalization,
//! 10-bin temporal aggregation, and the feature-file format.
//!
//! Conventions fixed here and used throughout:
//! - population (divisor n) standard deviation;
//! - skew and excess kurtosis of zero-variance bins are 0;
//! - the eight per-bin statistics are, in order: mean, median, sd,
//!   variance, skew, kurtosis, min, max.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Label, Sex};
use crate::error::{Error, Result};
use crate::tracking::FormantTrack;
use crate::util;

/// Number of temporal bins.
pub const N_BINS: usize = 10;
/// Number of per-bin statistics.
pub const N_STATS: usize = 8;
/// Formant-mode channel count: F1, F2, F3, F3-F2, delta(F3-F2).
pub const N_FORMANT_CHANNELS: usize = 5;
/// MFCC-mode channel count.
pub const N_MFCC_CHANNELS: usize = 13;

/// Floor applied to the standard deviation when z-standardizing a
/// (near-)constant series at utterance level.
pub const SD_FLOOR: f64 = 1e-8;

/// Normalized channels in formant mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Channel {
    F1,
    F2,
    F3,
    F3MinusF2,
    DeltaF3MinusF2,
}

impl Channel {
    pub fn norm_key(&self) -> Option<&'static str> {
        match self {
            Channel::F1 => Some("F1"),
            Channel::F2 => Some("F2"),
            Channel::F3 => Some("F3"),
            Channel::F3MinusF2 => Some("F3minusF2"),
            Channel::DeltaF3MinusF2 => None, // utterance-standardized always
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Channel::F1 => "F1",
            Channel::F2 => "F2",
            Channel::F3 => "F3",
            Channel::F3MinusF2 => "F3minusF2",
            Channel::DeltaF3MinusF2 => "dF3minusF2",
        }
    }
}

/// One row of the norms table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NormRow {
    /// "6".."17" or "Adult".
    pub age: String,
    pub sex: Sex,
    pub channel: Channel,
    pub mean: f64,
    pub sd: f64,
}

/// Age-and-sex stratified means and spreads for the static formant
/// channels.
#[derive(Debug, Clone)]
pub struct NormTable {
    rows: BTreeMap<(String, String, String), (f64, f64)>,
    /// Youngest and oldest numeric age present, per sex.
    age_range: BTreeMap<String, (u32, u32)>,
    has_adult: bool,
}

impl NormTable {
    pub fn from_rows(rows: Vec<NormRow>) -> Result<NormTable> {
        let mut map = BTreeMap::new();
        let mut age_range: BTreeMap<String, (u32, u32)> = BTreeMap::new();
        let mut has_adult = false;
        for row in rows {
            if !(row.sd > 0.0) {
                return Err(Error::Validation(format!(
                    "norms row ({}, {}, {}) has non-positive sd {}",
                    row.age,
                    row.sex,
                    row.channel.label(),
                    row.sd
                )));
            }
            if row.age == "Adult" {
                has_adult = true;
            } else {
                let age: u32 = row.age.parse().map_err(|_| {
                    Error::Validation(format!("norms age {:?} is neither a year nor Adult", row.age))
                })?;
                age_range
                    .entry(row.sex.to_string())
                    .and_modify(|(lo, hi)| {
                        *lo = (*lo).min(age);
                        *hi = (*hi).max(age);
                    })
                    .or_insert((age, age));
            }
            let key = (
                row.age.clone(),
                row.sex.to_string(),
                row.channel.norm_key().unwrap_or("").to_string(),
            );
            map.insert(key, (row.mean, row.sd));
        }
        Ok(NormTable {
            rows: map,
            age_range,
            has_adult,
        })
    }

    /// Resolve an age to a stratum label: 18+ (or past the table's numeric
    /// range) maps to Adult, younger ages clamp to the covered range.
    pub fn stratum(&self, age: u32, sex: Sex) -> String {
        let range = self.age_range.get(&sex.to_string());
        match range {
            Some(&(lo, hi)) => {
                if age >= 18 || (age > hi && self.has_adult) {
                    if self.has_adult {
                        "Adult".to_string()
                    } else {
                        hi.to_string()
                    }
                } else {
                    age.clamp(lo, hi).to_string()
                }
            }
            None => "Adult".to_string(),
        }
    }

    pub fn lookup(&self, age: u32, sex: Sex, channel: Channel) -> Result<(f64, f64)> {
        let stratum = self.stratum(age, sex);
        let key = (
            stratum.clone(),
            sex.to_string(),
            channel.norm_key().unwrap_or("").to_string(),
        );
        self.rows
            .get(&key)
            .copied()
            .ok_or_else(|| Error::MissingNormsRow {
                stratum,
                sex: sex.to_string(),
                channel: channel.label().to_string(),
            })
    }

    /// Load the `age,sex,channel,mean_hz,sd_hz` CSV.
    pub fn read_csv(path: &Path) -> Result<NormTable> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| Error::Validation(format!("cannot open norms {}: {e}", path.display())))?;
        let mut rows = Vec::new();
        for (idx, record) in reader.records().enumerate() {
            let row_no = idx + 1;
            let record = record.map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                row: row_no,
                message: e.to_string(),
            })?;
            if record.len() != 5 {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    row: row_no,
                    message: format!("expected 5 columns, found {}", record.len()),
                });
            }
            let channel = match &record[2] {
                "F1" => Channel::F1,
                "F2" => Channel::F2,
                "F3" => Channel::F3,
                "F3minusF2" => Channel::F3MinusF2,
                other => {
                    return Err(Error::Parse {
                        path: path.to_path_buf(),
                        row: row_no,
                        message: format!("unknown channel {other:?}"),
                    })
                }
            };
            rows.push(NormRow {
                age: record[0].to_string(),
                sex: record[1].parse().map_err(|e| Error::Parse {
                    path: path.to_path_buf(),
                    row: row_no,
                    message: e,
                })?,
                channel,
                mean: record[3].parse().map_err(|e| Error::Parse {
                    path: path.to_path_buf(),
                    row: row_no,
                    message: format!("mean_hz: {e}"),
                })?,
                sd: record[4].parse().map_err(|e| Error::Parse {
                    path: path.to_path_buf(),
                    row: row_no,
                    message: format!("sd_hz: {e}"),
                })?,
            });
        }
        NormTable::from_rows(rows)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("age,sex,channel,mean_hz,sd_hz\n");
        for ((age, sex, channel), (mean, sd)) in &self.rows {
            out.push_str(&format!("{age},{sex},{channel},{mean:.6},{sd:.6}\n"));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// One channel's values over the track frames, with a missingness mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSeries {
    pub channel: Channel,
    pub values: Vec<f64>,
    pub missing: Vec<bool>,
}

impl ChannelSeries {
    pub fn n_present(&self) -> usize {
        self.missing.iter().filter(|&&m| !m).count()
    }
}

/// Build the five formant-mode channels: F1, F2, F3, D = F3-F2, and the
/// frame-to-frame delta of D (first delta is 0). Missing frames propagate
/// into the masks.
pub fn build_channels(track: &FormantTrack) -> [ChannelSeries; N_FORMANT_CHANNELS] {
    let n = track.frames.len();
    let mut f = [
        (Channel::F1, vec![0.0; n], vec![true; n]),
        (Channel::F2, vec![0.0; n], vec![true; n]),
        (Channel::F3, vec![0.0; n], vec![true; n]),
    ];
    for (i, frame) in track.frames.iter().enumerate() {
        if frame.missing || frame.frequencies.len() < 3 {
            continue;
        }
        for (k, series) in f.iter_mut().enumerate() {
            series.1[i] = frame.frequencies[k];
            series.2[i] = false;
        }
    }

    let mut d_values = vec![0.0; n];
    let mut d_missing = vec![true; n];
    for i in 0..n {
        if !f[1].2[i] && !f[2].2[i] {
            d_values[i] = f[2].1[i] - f[1].1[i];
            d_missing[i] = false;
        }
    }
    let mut dd_values = vec![0.0; n];
    let mut dd_missing = vec![true; n];
    for i in 0..n {
        if d_missing[i] {
            continue;
        }
        if i == 0 {
            dd_values[i] = 0.0;
            dd_missing[i] = false;
        } else if !d_missing[i - 1] {
            dd_values[i] = d_values[i] - d_values[i - 1];
            dd_missing[i] = false;
        }
    }

    let [f1, f2, f3] = f;
    [
        ChannelSeries {
            channel: f1.0,
            values: f1.1,
            missing: f1.2,
        },
        ChannelSeries {
            channel: f2.0,
            values: f2.1,
            missing: f2.2,
        },
        ChannelSeries {
            channel: f3.0,
            values: f3.1,
            missing: f3.2,
        },
        ChannelSeries {
            channel: Channel::F3MinusF2,
            values: d_values,
            missing: d_missing,
        },
        ChannelSeries {
            channel: Channel::DeltaF3MinusF2,
            values: dd_values,
            missing: dd_missing,
        },
    ]
}

/// Fill gaps: interior gaps take the mean of the nearest present neighbors
/// on each side, leading/trailing gaps copy the nearest present value.
/// Fails when every value is missing.
pub fn impute(series: &ChannelSeries) -> Result<ChannelSeries> {
    let n = series.values.len();
    if series.n_present() == 0 {
        return Err(Error::Unusable(format!(
            "channel {} is entirely missing",
            series.channel.label()
        )));
    }
    let mut values = series.values.clone();

    // Nearest present value to the left / right of every index.
    let mut left: Vec<Option<f64>> = vec![None; n];
    let mut last = None;
    for i in 0..n {
        if !series.missing[i] {
            last = Some(series.values[i]);
        }
        left[i] = last;
    }
    let mut right: Vec<Option<f64>> = vec![None; n];
    let mut next = None;
    for i in (0..n).rev() {
        if !series.missing[i] {
            next = Some(series.values[i]);
        }
        right[i] = next;
    }
    for i in 0..n {
        if !series.missing[i] {
            continue;
        }
        values[i] = match (left[i], right[i]) {
            (Some(l), Some(r)) => 0.5 * (l + r),
            (Some(l), None) => l,
            (None, Some(r)) => r,
            (None, None) => unreachable!("at least one value is present"),
        };
    }
    Ok(ChannelSeries {
        channel: series.channel,
        values,
        missing: vec![false; n],
    })
}

/// Z-standardize against the (age, sex) norms row for the channel.
pub fn normalize_age_sex(
    series: &ChannelSeries,
    age: u32,
    sex: Sex,
    norms: &NormTable,
) -> Result<ChannelSeries> {
    let (mean, sd) = norms.lookup(age, sex, series.channel)?;
    Ok(ChannelSeries {
        channel: series.channel,
        values: series.values.iter().map(|x| (x - mean) / sd).collect(),
        missing: series.missing.clone(),
    })
}

/// Z-standardize within the utterance using population statistics; a
/// constant series maps to all zeros via the sd floor.
pub fn normalize_utterance(series: &ChannelSeries) -> ChannelSeries {
    let mean = util::mean(&series.values);
    let sd = util::population_sd(&series.values).max(SD_FLOOR);
    ChannelSeries {
        channel: series.channel,
        values: series.values.iter().map(|x| (x - mean) / sd).collect(),
        missing: series.missing.clone(),
    }
}

/// Which normalization produced a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureSet {
    FormantAsnorm,
    FormantUnorm,
    Mfcc,
}

impl FeatureSet {
    pub fn n_channels(&self) -> usize {
        match self {
            FeatureSet::Mfcc => N_MFCC_CHANNELS,
            _ => N_FORMANT_CHANNELS,
        }
    }

    pub fn parse(s: &str) -> Result<FeatureSet> {
        match s {
            "formant-asnorm" => Ok(FeatureSet::FormantAsnorm),
            "formant-unorm" => Ok(FeatureSet::FormantUnorm),
            "mfcc" => Ok(FeatureSet::Mfcc),
            other => Err(Error::Validation(format!(
                "unknown feature set {other:?}; expected formant-asnorm, formant-unorm, or mfcc"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            FeatureSet::FormantAsnorm => "formant-asnorm",
            FeatureSet::FormantUnorm => "formant-unorm",
            FeatureSet::Mfcc => "mfcc",
        }
    }
}

/// `10 x channels x 8` statistics array, bin-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureTensor {
    pub feature_set: FeatureSet,
    pub n_bins: usize,
    pub n_channels: usize,
    pub n_stats: usize,
    /// values[(bin * n_channels + channel) * n_stats + stat]
    pub values: Vec<f64>,
}

impl FeatureTensor {
    pub fn get(&self, bin: usize, channel: usize, stat: usize) -> f64 {
        self.values[(bin * self.n_channels + channel) * self.n_stats + stat]
    }

    /// Only the mean statistic, bin-major: length `n_bins * n_channels`.
    pub fn flattened_means(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_bins * self.n_channels);
        for bin in 0..self.n_bins {
            for ch in 0..self.n_channels {
                out.push(self.get(bin, ch, 0));
            }
        }
        out
    }

    /// Per-step input rows for sequence models: `n_bins` rows of
    /// `n_channels * n_stats` features.
    pub fn step_features(&self) -> Vec<Vec<f64>> {
        let row = self.n_channels * self.n_stats;
        (0..self.n_bins)
            .map(|b| self.values[b * row..(b + 1) * row].to_vec())
            .collect()
    }
}

/// Eight statistics of one bin's samples.
fn bin_stats(xs: &[f64]) -> [f64; N_STATS] {
    debug_assert!(!xs.is_empty());
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let median = util::median(xs);
    let m2 = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let sd = m2.sqrt();
    let (skew, kurtosis) = if m2 > 0.0 {
        let m3 = xs.iter().map(|x| (x - mean).powi(3)).sum::<f64>() / n;
        let m4 = xs.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / n;
        (m3 / m2.powf(1.5), m4 / (m2 * m2) - 3.0)
    } else {
        (0.0, 0.0) // zero-variance convention
    };
    let min = xs.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    [mean, median, sd, m2, skew, kurtosis, min, max]
}

/// Partition frame indices into ten contiguous bins by `i * L / 10`
/// boundaries and aggregate each (bin, channel) into the eight statistics.
/// Empty bins copy the nearest non-empty bin (ties toward the earlier bin).
pub fn bin_aggregate(series_set: &[ChannelSeries], feature_set: FeatureSet) -> FeatureTensor {
    let n_channels = series_set.len();
    let length = series_set[0].values.len();
    assert!(length >= 1, "bin_aggregate needs at least one frame");
    assert!(series_set.iter().all(|s| s.values.len() == length));

    let bounds: Vec<(usize, usize)> = (0..N_BINS)
        .map(|i| (i * length / N_BINS, (i + 1) * length / N_BINS))
        .collect();

    // Nearest non-empty bin for each bin index.
    let nearest: Vec<usize> = (0..N_BINS)
        .map(|i| {
            if bounds[i].0 < bounds[i].1 {
                return i;
            }
            let mut best = usize::MAX;
            let mut best_dist = usize::MAX;
            for (j, &(a, b)) in bounds.iter().enumerate() {
                if a < b {
                    let dist = i.abs_diff(j);
                    if dist < best_dist {
                        best = j;
                        best_dist = dist;
                    }
                }
            }
            best
        })
        .collect();

    let mut values = vec![0.0; N_BINS * n_channels * N_STATS];
    for (ch, series) in series_set.iter().enumerate() {
        for bin in 0..N_BINS {
            let (a, b) = bounds[nearest[bin]];
            let stats = bin_stats(&series.values[a..b]);
            let base = (bin * n_channels + ch) * N_STATS;
            values[base..base + N_STATS].copy_from_slice(&stats);
        }
    }
    FeatureTensor {
        feature_set,
        n_bins: N_BINS,
        n_channels,
        n_stats: N_STATS,
        values,
    }
}

/// Flattened shallow-classifier view: the mean of every (bin, channel).
pub fn flatten_for_shallow(tensor: &FeatureTensor) -> Vec<f64> {
    tensor.flattened_means()
}

/// One utterance's features as stored in the JSON-Lines feature file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub utterance_id: String,
    pub participant_id: String,
    pub age: u32,
    pub sex: Sex,
    pub label: Label,
    pub feature_set: FeatureSet,
    pub dims: [usize; 3],
    pub values: Vec<f64>,
    pub flattened_means: Vec<f64>,
}

impl FeatureRecord {
    pub fn tensor(&self) -> FeatureTensor {
        FeatureTensor {
            feature_set: self.feature_set,
            n_bins: self.dims[0],
            n_channels: self.dims[1],
            n_stats: self.dims[2],
            values: self.values.clone(),
        }
    }
}

/// Write feature records as JSON Lines.
pub fn write_feature_file(path: &Path, records: &[FeatureRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = std::io::BufWriter::new(file);
    for record in records {
        let line = serde_json::to_string(record)
            .map_err(|e| Error::Validation(format!("serialize feature record: {e}")))?;
        writeln!(writer, "{line}").map_err(|e| Error::io(path, e))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

pub fn read_feature_file(path: &Path) -> Result<Vec<FeatureRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = std::io::BufReader::new(file);
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: FeatureRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            row: idx + 1,
            message: e.to_string(),
        })?;
        records.push(record);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::FormantFrame;

    fn series(channel: Channel, values: Vec<f64>) -> ChannelSeries {
        let missing = vec![false; values.len()];
        ChannelSeries {
            channel,
            values,
            missing,
        }
    }

    fn track_from(frames: Vec<FormantFrame>) -> FormantTrack {
        let times = (0..frames.len()).map(|i| i as f64 * 0.005).collect();
        FormantTrack {
            utterance_id: "u".into(),
            frames,
            times,
            ceiling: 5500.0,
            frame_step: 0.005,
        }
    }

    fn frame(f1: f64, f2: f64, f3: f64) -> FormantFrame {
        FormantFrame {
            frequencies: vec![f1, f2, f3],
            bandwidths: vec![80.0, 100.0, 150.0],
            missing: false,
        }
    }

    #[test]
    fn channels_distance_and_delta() {
        let track = track_from(vec![
            frame(500.0, 1800.0, 2331.0),
            frame(500.0, 1800.0, 2331.0),
            FormantFrame::missing(),
            frame(520.0, 1700.0, 2400.0),
        ]);
        let channels = build_channels(&track);
        let d = &channels[3];
        assert_eq!(d.channel, Channel::F3MinusF2);
        assert!((d.values[0] - 531.0).abs() < 1e-12);
        assert!(!d.missing[0]);
        assert!(d.missing[2]); // propagated
        let dd = &channels[4];
        assert_eq!(dd.values[0], 0.0);
        assert!(!dd.missing[0]);
        assert_eq!(dd.values[1], 0.0); // constant D
        assert!(dd.missing[2]);
        assert!(dd.missing[3]); // predecessor missing
    }

    #[test]
    fn impute_interior_and_edges() {
        let s = ChannelSeries {
            channel: Channel::F1,
            values: vec![1.0, 0.0, 3.0],
            missing: vec![false, true, false],
        };
        assert_eq!(impute(&s).unwrap().values, vec![1.0, 2.0, 3.0]);

        let s = ChannelSeries {
            channel: Channel::F1,
            values: vec![0.0, 4.0, 4.0],
            missing: vec![true, false, false],
        };
        assert_eq!(impute(&s).unwrap().values, vec![4.0, 4.0, 4.0]);

        let s = series(Channel::F1, vec![1.0, 2.0, 3.0]);
        assert_eq!(impute(&s).unwrap().values, vec![1.0, 2.0, 3.0]);

        let s = ChannelSeries {
            channel: Channel::F1,
            values: vec![0.0; 3],
            missing: vec![true; 3],
        };
        assert!(impute(&s).is_err());
    }

    #[test]
    fn age_sex_normalization_formula() {
        let norms = crate::synth::synth_norms();
        // The anchor stratum's F3minusF2 row is (1683, 350).
        let (mean, sd) = norms.lookup(10, Sex::F, Channel::F3MinusF2).unwrap();
        assert!((mean - 1683.0).abs() < 1e-9);
        assert!((sd - 350.0).abs() < 1e-9);
        let s = series(Channel::F3MinusF2, vec![531.0, 1683.0]);
        let z = normalize_age_sex(&s, 10, Sex::F, &norms).unwrap();
        assert!((z.values[0] - (-3.291_428_571_428_571_4)).abs() < 1e-12);
        assert!(z.values[1].abs() < 1e-12);
    }

    #[test]
    fn age_stratum_clamping() {
        let norms = crate::synth::synth_norms();
        assert_eq!(norms.stratum(6, Sex::F), "6");
        assert_eq!(norms.stratum(17, Sex::M), "17");
        assert_eq!(norms.stratum(18, Sex::M), "Adult");
        assert_eq!(norms.stratum(36, Sex::F), "Adult");
        assert_eq!(norms.stratum(3, Sex::F), "6"); // clamped up
    }

    #[test]
    fn missing_norms_row_is_named() {
        let rows = vec![NormRow {
            age: "10".into(),
            sex: Sex::F,
            channel: Channel::F1,
            mean: 500.0,
            sd: 90.0,
        }];
        let table = NormTable::from_rows(rows).unwrap();
        let s = series(Channel::F2, vec![1.0]);
        let err = normalize_age_sex(&s, 10, Sex::F, &table).unwrap_err();
        assert!(err.to_string().contains("F2"), "{err}");
    }

    #[test]
    fn zero_sd_norms_rejected_at_load() {
        let rows = vec![NormRow {
            age: "10".into(),
            sex: Sex::F,
            channel: Channel::F1,
            mean: 500.0,
            sd: 0.0,
        }];
        assert!(NormTable::from_rows(rows).is_err());
    }

    #[test]
    fn utterance_normalization_population_sd() {
        let s = series(Channel::F1, vec![1.0, 2.0, 3.0]);
        let z = normalize_utterance(&s);
        // Frozen: population sd of [1,2,3] puts the extremes at +-1.224744871...
        assert!((z.values[0] + 1.224_744_871_391_589).abs() < 1e-12);
        assert!(z.values[1].abs() < 1e-12);
        assert!((z.values[2] - 1.224_744_871_391_589).abs() < 1e-12);

        // Constant series hits the sd floor and maps to zeros.
        let s = series(Channel::F1, vec![5.0; 8]);
        assert!(normalize_utterance(&s).values.iter().all(|&v| v == 0.0));

        // Standardizing an already-standard series is the identity.
        let z2 = normalize_utterance(&z);
        for (a, b) in z.values.iter().zip(&z2.values) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn bins_constant_series_conventions() {
        let s = series(Channel::F1, vec![5.0; 20]);
        let t = bin_aggregate(&[s], FeatureSet::FormantUnorm);
        for bin in 0..N_BINS {
            let stats: Vec<f64> = (0..N_STATS).map(|k| t.get(bin, 0, k)).collect();
            assert_eq!(stats, vec![5.0, 5.0, 0.0, 0.0, 0.0, 0.0, 5.0, 5.0]);
        }
    }

    #[test]
    fn bins_ramp_means() {
        let s = series(Channel::F1, (0..100).map(|i| i as f64).collect());
        let t = bin_aggregate(&[s], FeatureSet::FormantUnorm);
        for bin in 0..N_BINS {
            assert!((t.get(bin, 0, 0) - (4.5 + 10.0 * bin as f64)).abs() < 1e-12);
        }
    }

    #[test]
    fn bins_short_series_copy_nearest() {
        // L = 7: bins 0, 3, 6 are empty under the index-partition rule.
        let s = series(Channel::F1, vec![10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0]);
        let t = bin_aggregate(&[s], FeatureSet::FormantUnorm);
        // Partition: [0,0) [0,1) [1,2) [2,2) [2,3) [3,4) [4,4) [4,5) [5,6) [6,7)
        assert_eq!(t.get(1, 0, 0), 10.0);
        assert_eq!(t.get(0, 0, 0), 10.0); // empty bin 0 copies bin 1
        assert_eq!(t.get(2, 0, 0), 20.0);
        assert_eq!(t.get(3, 0, 0), 20.0); // tie between bins 2 and 4 goes left
        assert_eq!(t.get(4, 0, 0), 30.0);
        assert_eq!(t.get(6, 0, 0), 40.0); // copies bin 5
        assert_eq!(t.get(9, 0, 0), 70.0);
    }

    #[test]
    fn variance_is_sd_squared_and_min_median_max_ordered() {
        let values: Vec<f64> = (0..37).map(|i| ((i * 13 + 5) % 17) as f64).collect();
        let s = series(Channel::F2, values);
        let t = bin_aggregate(&[s], FeatureSet::FormantUnorm);
        for bin in 0..N_BINS {
            let sd = t.get(bin, 0, 2);
            let var = t.get(bin, 0, 3);
            assert!((var - sd * sd).abs() < 1e-9);
            let (min, med, max) = (t.get(bin, 0, 6), t.get(bin, 0, 1), t.get(bin, 0, 7));
            assert!(min <= med && med <= max);
        }
    }

    #[test]
    fn flatten_lengths_and_constant_case() {
        let channels: Vec<ChannelSeries> = (0..N_FORMANT_CHANNELS)
            .map(|_| series(Channel::F1, vec![5.0; 20]))
            .collect();
        let t = bin_aggregate(&channels, FeatureSet::FormantAsnorm);
        let flat = flatten_for_shallow(&t);
        assert_eq!(flat.len(), 50);
        assert!(flat.iter().all(|&v| v == 5.0));

        let channels: Vec<ChannelSeries> = (0..N_MFCC_CHANNELS)
            .map(|_| series(Channel::F1, vec![1.0; 20]))
            .collect();
        let t = bin_aggregate(&channels, FeatureSet::Mfcc);
        assert_eq!(flatten_for_shallow(&t).len(), 130);
    }

    #[test]
    fn feature_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("features.jsonl");
        let t = bin_aggregate(
            &[series(Channel::F1, vec![1.0, 2.0, 3.0, 4.0])],
            FeatureSet::FormantUnorm,
        );
        let record = FeatureRecord {
            utterance_id: "u1".into(),
            participant_id: "p1".into(),
            age: 10,
            sex: Sex::F,
            label: Label::FullyRhotic,
            feature_set: FeatureSet::FormantUnorm,
            dims: [t.n_bins, t.n_channels, t.n_stats],
            values: t.values.clone(),
            flattened_means: t.flattened_means(),
        };
        write_feature_file(&path, &[record.clone()]).unwrap();
        let back = read_feature_file(&path).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].values, record.values);
        assert_eq!(back[0].tensor(), t);
    }
}
