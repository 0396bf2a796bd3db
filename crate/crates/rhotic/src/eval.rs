//! Participant-level evaluation: F1, participant-weighted confusion
//! matrices, condition comparison, and age/sex strata tables.
//!
//! The positive class is FullyRhotic everywhere, and degenerate 0/0
//! precision, recall, or F1 is defined as 0.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{AgeBin, Label, Sex};
use crate::util;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    OutOfBox,
    Personalized,
    Final,
}

/// Confusion counts and derived scores for one participant.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParticipantMetrics {
    pub participant_id: String,
    pub age: u32,
    pub sex: Sex,
    pub condition: Condition,
    pub n_tokens: usize,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl ParticipantMetrics {
    #[allow(clippy::too_many_arguments)]
    pub fn from_counts(
        participant_id: &str,
        age: u32,
        sex: Sex,
        condition: Condition,
        tp: usize,
        fp: usize,
        tn: usize,
        fn_: usize,
    ) -> ParticipantMetrics {
        let precision = safe_div(tp, tp + fp);
        let recall = safe_div(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        ParticipantMetrics {
            participant_id: participant_id.to_string(),
            age,
            sex,
            condition,
            n_tokens: tp + fp + tn + fn_,
            tp,
            fp,
            tn,
            fn_,
            precision,
            recall,
            f1,
        }
    }

    pub fn accuracy(&self) -> f64 {
        safe_div(self.tp + self.tn, self.n_tokens)
    }
}

fn safe_div(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// F1 over label/prediction pairs with FullyRhotic positive.
pub fn f1(labels: &[Label], predictions: &[Label]) -> f64 {
    assert_eq!(labels.len(), predictions.len());
    let to_bool = |l: &Label| *l == Label::FullyRhotic;
    let lb: Vec<bool> = labels.iter().map(to_bool).collect();
    let pb: Vec<bool> = predictions.iter().map(to_bool).collect();
    f1_from_bools(&lb, &pb)
}

pub fn f1_from_bools(labels: &[bool], predictions: &[bool]) -> f64 {
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (&l, &p) in labels.iter().zip(predictions) {
        match (l, p) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fn_ += 1,
            (false, false) => {}
        }
    }
    if 2 * tp + fp + fn_ == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    }
}

/// Unweighted (one value per participant) mean, sd, and median of F1.
pub fn participant_summary(metrics: &[ParticipantMetrics]) -> (f64, f64, f64) {
    assert!(!metrics.is_empty());
    let f1s: Vec<f64> = metrics.iter().map(|m| m.f1).collect();
    (
        util::mean(&f1s),
        util::population_sd(&f1s),
        util::median(&f1s),
    )
}

/// Participant-weighted confusion matrix, rows = ground truth
/// (derhotic, rhotic), each row normalized by that participant's true-class
/// total before averaging across participants. Participants lacking a class
/// are excluded from that row's average only.
pub fn weighted_confusion(metrics: &[ParticipantMetrics]) -> [[f64; 2]; 2] {
    let mut derhotic_rows: Vec<[f64; 2]> = Vec::new();
    let mut rhotic_rows: Vec<[f64; 2]> = Vec::new();
    for m in metrics {
        let derhotic_total = m.tn + m.fp;
        if derhotic_total > 0 {
            derhotic_rows.push([
                m.tn as f64 / derhotic_total as f64,
                m.fp as f64 / derhotic_total as f64,
            ]);
        }
        let rhotic_total = m.tp + m.fn_;
        if rhotic_total > 0 {
            rhotic_rows.push([
                m.fn_ as f64 / rhotic_total as f64,
                m.tp as f64 / rhotic_total as f64,
            ]);
        }
    }
    let avg = |rows: &[[f64; 2]]| -> [f64; 2] {
        if rows.is_empty() {
            return [0.0, 0.0];
        }
        let n = rows.len() as f64;
        [
            rows.iter().map(|r| r[0]).sum::<f64>() / n,
            rows.iter().map(|r| r[1]).sum::<f64>() / n,
        ]
    };
    [avg(&derhotic_rows), avg(&rhotic_rows)]
}

/// One (age bin, sex) cell of the fairness table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StratumCell {
    pub age_bin: String,
    pub sex: Sex,
    pub n_participants: usize,
    pub mean_f1: Option<f64>,
    pub token_accuracy: Option<f64>,
}

/// Per-(age-bin x sex) breakdown: participant count, mean participant F1,
/// and pooled token-level accuracy. Empty cells report n = 0 with null
/// metrics.
pub fn fairness_breakdown(metrics: &[ParticipantMetrics]) -> Vec<StratumCell> {
    let mut cells = Vec::new();
    for bin in AgeBin::all() {
        for sex in [Sex::F, Sex::M] {
            let members: Vec<&ParticipantMetrics> = metrics
                .iter()
                .filter(|m| AgeBin::of(m.age) == bin && m.sex == sex)
                .collect();
            if members.is_empty() {
                cells.push(StratumCell {
                    age_bin: bin.label().to_string(),
                    sex,
                    n_participants: 0,
                    mean_f1: None,
                    token_accuracy: None,
                });
                continue;
            }
            let f1s: Vec<f64> = members.iter().map(|m| m.f1).collect();
            let correct: usize = members.iter().map(|m| m.tp + m.tn).sum();
            let total: usize = members.iter().map(|m| m.n_tokens).sum();
            cells.push(StratumCell {
                age_bin: bin.label().to_string(),
                sex,
                n_participants: members.len(),
                mean_f1: Some(util::mean(&f1s)),
                token_accuracy: Some(safe_div(correct, total)),
            });
        }
    }
    cells
}

/// Aggregate statistics for one condition.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConditionSummary {
    pub condition: Condition,
    pub n_participants: usize,
    pub mean_f1: f64,
    pub sd_f1: f64,
    pub median_f1: f64,
    /// Rows = ground truth (derhotic, rhotic); row-normalized.
    pub confusion: [[f64; 2]; 2],
}

/// The versioned evaluation report written by the evaluate stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub schema_version: u32,
    pub tool_version: String,
    pub seed: u64,
    pub feature_set: String,
    pub per_participant: Vec<ParticipantMetrics>,
    pub summaries: Vec<ConditionSummary>,
    pub strata: Vec<StratumCell>,
}

impl EvaluationReport {
    pub fn build(
        per_participant: Vec<ParticipantMetrics>,
        seed: u64,
        feature_set: &str,
    ) -> EvaluationReport {
        let mut summaries = Vec::new();
        for condition in [Condition::OutOfBox, Condition::Personalized, Condition::Final] {
            let subset: Vec<ParticipantMetrics> = per_participant
                .iter()
                .filter(|m| m.condition == condition)
                .cloned()
                .collect();
            if subset.is_empty() {
                continue;
            }
            let (mean_f1, sd_f1, median_f1) = participant_summary(&subset);
            summaries.push(ConditionSummary {
                condition,
                n_participants: subset.len(),
                mean_f1,
                sd_f1,
                median_f1,
                confusion: weighted_confusion(&subset),
            });
        }
        // Strata tables describe the final condition when present, else
        // out-of-box.
        let strata_condition = if per_participant
            .iter()
            .any(|m| m.condition == Condition::Final)
        {
            Condition::Final
        } else {
            Condition::OutOfBox
        };
        let strata_rows: Vec<ParticipantMetrics> = per_participant
            .iter()
            .filter(|m| m.condition == strata_condition)
            .cloned()
            .collect();
        EvaluationReport {
            schema_version: 1,
            tool_version: crate::VERSION.to_string(),
            seed,
            feature_set: feature_set.to_string(),
            strata: fairness_breakdown(&strata_rows),
            per_participant,
            summaries,
        }
    }

    /// Flat CSV export of the strata tables.
    pub fn strata_csv(&self) -> String {
        let mut out = String::from("age_bin,sex,n_participants,mean_f1,token_accuracy\n");
        for cell in &self.strata {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                cell.age_bin,
                cell.sex,
                cell.n_participants,
                cell.mean_f1.map(|v| format!("{v:.6}")).unwrap_or_default(),
                cell.token_accuracy
                    .map(|v| format!("{v:.6}"))
                    .unwrap_or_default(),
            ));
        }
        out
    }
}

/// Compute per-participant metrics from scored tokens grouped by
/// participant: (age, sex, labels, predictions) keyed by participant id.
pub fn score_participants(
    tokens: &BTreeMap<String, (u32, Sex, Vec<Label>, Vec<Label>)>,
    condition: Condition,
) -> Vec<ParticipantMetrics> {
    tokens
        .iter()
        .map(|(pid, (age, sex, labels, preds))| {
            let mut tp = 0;
            let mut fp = 0;
            let mut tn = 0;
            let mut fn_ = 0;
            for (l, p) in labels.iter().zip(preds) {
                match (l, p) {
                    (Label::FullyRhotic, Label::FullyRhotic) => tp += 1,
                    (Label::Derhotic, Label::FullyRhotic) => fp += 1,
                    (Label::Derhotic, Label::Derhotic) => tn += 1,
                    (Label::FullyRhotic, Label::Derhotic) => fn_ += 1,
                }
            }
            ParticipantMetrics::from_counts(pid, *age, *sex, condition, tp, fp, tn, fn_)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f1_hand_cases() {
        use Label::{Derhotic as D, FullyRhotic as R};
        // P = 1, R = 0.5 -> F1 = 2/3
        let v = f1(&[R, R, D, D], &[R, D, D, D]);
        assert!((v - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(f1(&[R, D, R], &[R, D, R]), 1.0);
        assert_eq!(f1(&[R, D], &[D, R]), 0.0);
        // Degenerate: no positives anywhere -> 0 by convention.
        assert_eq!(f1(&[D, D], &[D, D]), 0.0);
    }

    fn metrics(pid: &str, f1_target: f64) -> ParticipantMetrics {
        ParticipantMetrics {
            participant_id: pid.into(),
            age: 10,
            sex: Sex::F,
            condition: Condition::OutOfBox,
            n_tokens: 10,
            tp: 0,
            fp: 0,
            tn: 0,
            fn_: 0,
            precision: f1_target,
            recall: f1_target,
            f1: f1_target,
        }
    }

    #[test]
    fn summary_unweighted() {
        let ms = vec![metrics("a", 0.7), metrics("b", 0.8), metrics("c", 0.9)];
        let (mean, _sd, median) = participant_summary(&ms);
        assert!((mean - 0.8).abs() < 1e-12);
        assert!((median - 0.8).abs() < 1e-12);

        let single = vec![metrics("a", 0.75)];
        let (mean, sd, median) = participant_summary(&single);
        assert_eq!(mean, 0.75);
        assert_eq!(median, 0.75);
        assert_eq!(sd, 0.0);
    }

    #[test]
    fn confusion_identity_for_perfect_predictions() {
        let m = ParticipantMetrics::from_counts("p", 10, Sex::F, Condition::OutOfBox, 5, 0, 5, 0);
        let c = weighted_confusion(&[m]);
        assert_eq!(c, [[1.0, 0.0], [0.0, 1.0]]);
    }

    #[test]
    fn confusion_rows_sum_to_one_and_average_participants() {
        let a = ParticipantMetrics::from_counts("a", 10, Sex::F, Condition::OutOfBox, 8, 2, 8, 2);
        let b = ParticipantMetrics::from_counts("b", 11, Sex::M, Condition::OutOfBox, 2, 8, 2, 8);
        let c = weighted_confusion(&[a, b]);
        for row in c {
            assert!((row[0] + row[1] - 1.0).abs() < 1e-9);
        }
        // Swapped error patterns average symmetrically.
        assert!((c[0][0] - 0.5).abs() < 1e-12);
        assert!((c[1][1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn single_class_participant_excluded_from_missing_row() {
        // Only rhotic tokens: the derhotic row comes from the other one.
        let only_rhotic =
            ParticipantMetrics::from_counts("a", 9, Sex::F, Condition::OutOfBox, 5, 0, 0, 0);
        let both =
            ParticipantMetrics::from_counts("b", 9, Sex::F, Condition::OutOfBox, 5, 5, 5, 5);
        let c = weighted_confusion(&[only_rhotic, both]);
        assert!((c[0][0] - 0.5).abs() < 1e-12); // from b alone
        assert!((c[1][1] - 0.75).abs() < 1e-12); // mean of 0.5 and 1.0
    }

    #[test]
    fn fairness_cells_partition_participants() {
        let ms = vec![
            ParticipantMetrics::from_counts("a", 8, Sex::F, Condition::OutOfBox, 1, 1, 1, 1),
            ParticipantMetrics::from_counts("b", 11, Sex::F, Condition::OutOfBox, 1, 1, 1, 1),
            ParticipantMetrics::from_counts("c", 15, Sex::M, Condition::OutOfBox, 1, 1, 1, 1),
            ParticipantMetrics::from_counts("d", 22, Sex::M, Condition::OutOfBox, 1, 1, 1, 1),
        ];
        let cells = fairness_breakdown(&ms);
        assert_eq!(cells.len(), 8); // 4 bins x 2 sexes
        let total: usize = cells.iter().map(|c| c.n_participants).sum();
        assert_eq!(total, 4);
        // Bins with no members report n = 0 and null metrics.
        let empty = cells
            .iter()
            .find(|c| c.age_bin == "13-17" && c.sex == Sex::F)
            .unwrap();
        assert_eq!(empty.n_participants, 0);
        assert!(empty.mean_f1.is_none());
    }

    #[test]
    fn report_aggregates_recomputable() {
        let ms = vec![
            ParticipantMetrics::from_counts("a", 8, Sex::F, Condition::OutOfBox, 4, 1, 4, 1),
            ParticipantMetrics::from_counts("b", 12, Sex::M, Condition::OutOfBox, 3, 2, 3, 2),
        ];
        let report = EvaluationReport::build(ms.clone(), 7, "formant-asnorm");
        let summary = &report.summaries[0];
        let (mean, sd, median) = participant_summary(&ms);
        assert_eq!(summary.mean_f1, mean);
        assert_eq!(summary.sd_f1, sd);
        assert_eq!(summary.median_f1, median);
        // Permutation invariance.
        let mut reversed = ms.clone();
        reversed.reverse();
        let report2 = EvaluationReport::build(reversed, 7, "formant-asnorm");
        assert_eq!(report2.summaries[0].mean_f1, summary.mean_f1);
        assert_eq!(report2.summaries[0].confusion, summary.confusion);
    }
}
