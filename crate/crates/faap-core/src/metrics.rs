//! Group-fairness criteria and accuracy, computed by exact counting.
//!
//! Labels are {-1, +1} end to end: `y` is the target, `z` the protected
//! attribute, `y_pred` the model output. Rates are formed from integer
//! counts, so two implementations that count the same records agree to the
//! last bit. Undefined rates (empty denominators) are errors, never silent
//! zeros.
//!
//! The equalized-odds gap is reported as the SUM of the two absolute rate
//! differences, |FPR₊ − FPR₋| + |FNR₊ − FNR₋|; see
//! [`DEO_CONVENTION`].

use alloc::vec::Vec;

use crate::error::CoreError;

/// How the two equalized-odds rate gaps are combined into one number.
pub const DEO_CONVENTION: &str = "sum";

/// One prediction outcome: true label, protected attribute, predicted label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PredictionRecord {
    pub y_true: i8,
    pub z: i8,
    pub y_pred: i8,
}

impl PredictionRecord {
    pub fn new(y_true: i8, z: i8, y_pred: i8) -> Result<Self, CoreError> {
        for v in [y_true, z, y_pred] {
            if v != -1 && v != 1 {
                return Err(CoreError::InvalidLabel { value: v });
            }
        }
        Ok(PredictionRecord { y_true, z, y_pred })
    }
}

/// Confusion counts for one protected group.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GroupConfusion {
    pub true_positive: u64,
    pub false_positive: u64,
    pub true_negative: u64,
    pub false_negative: u64,
}

impl GroupConfusion {
    pub fn total(&self) -> u64 {
        self.true_positive + self.false_positive + self.true_negative + self.false_negative
    }

    fn positives(&self) -> u64 {
        self.true_positive + self.false_negative
    }

    fn negatives(&self) -> u64 {
        self.true_negative + self.false_positive
    }

    fn predicted_positive(&self) -> u64 {
        self.true_positive + self.false_positive
    }

    /// P(ŷ=1 | group); `None` when the group is empty.
    pub fn acceptance_rate(&self) -> Option<f64> {
        ratio(self.predicted_positive(), self.total())
    }

    /// P(ŷ=1 | y=-1, group); `None` when the group has no negatives.
    pub fn false_positive_rate(&self) -> Option<f64> {
        ratio(self.false_positive, self.negatives())
    }

    /// P(ŷ=-1 | y=1, group); `None` when the group has no positives.
    pub fn false_negative_rate(&self) -> Option<f64> {
        ratio(self.false_negative, self.positives())
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    if den == 0 {
        None
    } else {
        Some(num as f64 / den as f64)
    }
}

/// Accuracy plus both fairness gaps for one model/dataset pair.
#[derive(Debug, Clone, PartialEq)]
pub struct FairnessReport {
    pub accuracy: f64,
    pub dp_gap: f64,
    pub deo_gap: f64,
    /// Confusions for z=-1 and z=+1, in that order.
    pub group_confusions: [GroupConfusion; 2],
    pub n_records: usize,
    /// Aggregation rule used for `deo_gap`.
    pub deo_convention: &'static str,
}

fn confusions(records: &[PredictionRecord]) -> [GroupConfusion; 2] {
    let mut groups = [GroupConfusion::default(), GroupConfusion::default()];
    for r in records {
        let g = &mut groups[if r.z == 1 { 1 } else { 0 }];
        match (r.y_true, r.y_pred) {
            (1, 1) => g.true_positive += 1,
            (1, -1) => g.false_negative += 1,
            (-1, 1) => g.false_positive += 1,
            (-1, -1) => g.true_negative += 1,
            _ => unreachable!("records are validated at construction"),
        }
    }
    groups
}

fn group_label(idx: usize) -> i8 {
    if idx == 1 {
        1
    } else {
        -1
    }
}

/// |P(ŷ=1 | z=-1) − P(ŷ=1 | z=+1)| by exact counting.
pub fn demographic_parity_gap(records: &[PredictionRecord]) -> Result<f64, CoreError> {
    let groups = confusions(records);
    let mut rates = [0.0; 2];
    for (i, g) in groups.iter().enumerate() {
        rates[i] = g
            .acceptance_rate()
            .ok_or(CoreError::EmptyGroup { group: group_label(i) })?;
    }
    Ok((rates[0] - rates[1]).abs())
}

/// |FPR₊ − FPR₋| + |FNR₊ − FNR₋| by exact counting.
pub fn equalized_odds_gap(records: &[PredictionRecord]) -> Result<f64, CoreError> {
    let groups = confusions(records);
    let mut fpr = [0.0; 2];
    let mut fnr = [0.0; 2];
    for (i, g) in groups.iter().enumerate() {
        if g.total() == 0 {
            return Err(CoreError::EmptyGroup { group: group_label(i) });
        }
        fpr[i] = g.false_positive_rate().ok_or(CoreError::EmptyClassWithinGroup {
            group: group_label(i),
            label: -1,
        })?;
        fnr[i] = g.false_negative_rate().ok_or(CoreError::EmptyClassWithinGroup {
            group: group_label(i),
            label: 1,
        })?;
    }
    Ok((fpr[1] - fpr[0]).abs() + (fnr[1] - fnr[0]).abs())
}

/// Fraction of records with `y_pred == y_true`.
pub fn accuracy(records: &[PredictionRecord]) -> Result<f64, CoreError> {
    if records.is_empty() {
        return Err(CoreError::EmptyInput);
    }
    let correct = records.iter().filter(|r| r.y_pred == r.y_true).count();
    Ok(correct as f64 / records.len() as f64)
}

/// All three metrics plus per-group confusions in one report.
pub fn audit(records: &[PredictionRecord]) -> Result<FairnessReport, CoreError> {
    Ok(FairnessReport {
        accuracy: accuracy(records)?,
        dp_gap: demographic_parity_gap(records)?,
        deo_gap: equalized_odds_gap(records)?,
        group_confusions: confusions(records),
        n_records: records.len(),
        deo_convention: DEO_CONVENTION,
    })
}

/// Convenience constructor for record lists in tests and harness code.
pub fn records_from(triples: &[(i8, i8, i8)]) -> Result<Vec<PredictionRecord>, CoreError> {
    triples.iter().map(|&(y, z, p)| PredictionRecord::new(y, z, p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(y: i8, z: i8, p: i8) -> PredictionRecord {
        PredictionRecord::new(y, z, p).unwrap()
    }

    #[test]
    fn dp_gap_fully_separated_groups() {
        // All z=+1 accepted, all z=-1 rejected.
        let records = [rec(1, 1, 1), rec(1, 1, 1), rec(1, -1, -1), rec(1, -1, -1)];
        assert_eq!(demographic_parity_gap(&records).unwrap(), 1.0);
    }

    #[test]
    fn dp_gap_half_versus_full() {
        let records = [rec(1, 1, 1), rec(1, 1, -1), rec(1, -1, 1), rec(1, -1, 1)];
        assert_eq!(demographic_parity_gap(&records).unwrap(), 0.5);
    }

    #[test]
    fn dp_gap_identical_prediction_multisets_is_zero() {
        let records = [rec(1, 1, 1), rec(1, 1, -1), rec(-1, -1, 1), rec(1, -1, -1)];
        assert_eq!(demographic_parity_gap(&records).unwrap(), 0.0);
    }

    #[test]
    fn dp_gap_missing_group_errors() {
        let records = [rec(1, 1, 1), rec(-1, 1, -1)];
        assert_eq!(
            demographic_parity_gap(&records),
            Err(CoreError::EmptyGroup { group: -1 })
        );
    }

    #[test]
    fn deo_gap_perfect_predictions_is_zero() {
        let records = [
            rec(1, 1, 1),
            rec(-1, 1, -1),
            rec(1, -1, 1),
            rec(-1, -1, -1),
        ];
        assert_eq!(equalized_odds_gap(&records).unwrap(), 0.0);
    }

    #[test]
    fn deo_gap_one_sided_false_positives() {
        // z=+1: FPR 1, FNR 0. z=-1: FPR 0, FNR 0. Gap = 1.
        let records = [
            rec(-1, 1, 1),
            rec(-1, 1, 1),
            rec(1, 1, 1),
            rec(1, 1, 1),
            rec(-1, -1, -1),
            rec(-1, -1, -1),
            rec(1, -1, 1),
            rec(1, -1, 1),
        ];
        assert_eq!(equalized_odds_gap(&records).unwrap(), 1.0);
    }

    #[test]
    fn deo_gap_identical_group_confusions_is_zero() {
        let block = [rec(1, 1, 1), rec(1, 1, -1), rec(-1, 1, 1), rec(-1, 1, -1)];
        let mut records: Vec<_> = block.to_vec();
        records.extend(block.iter().map(|r| rec(r.y_true, -1, r.y_pred)));
        assert_eq!(equalized_odds_gap(&records).unwrap(), 0.0);
    }

    #[test]
    fn deo_gap_requires_both_classes_per_group() {
        let records = [rec(1, 1, 1), rec(-1, 1, -1), rec(1, -1, 1), rec(1, -1, 1)];
        assert_eq!(
            equalized_odds_gap(&records),
            Err(CoreError::EmptyClassWithinGroup { group: -1, label: -1 })
        );
    }

    #[test]
    fn accuracy_counts() {
        let records = [rec(1, 1, 1), rec(1, -1, 1), rec(-1, 1, -1), rec(-1, -1, 1)];
        assert_eq!(accuracy(&records).unwrap(), 0.75);
        assert_eq!(accuracy(&[]), Err(CoreError::EmptyInput));
        let all_wrong: Vec<_> = records.iter().map(|r| rec(r.y_true, r.z, -r.y_true)).collect();
        assert_eq!(accuracy(&all_wrong).unwrap(), 0.0);
    }

    #[test]
    fn audit_matches_individual_metrics() {
        let records = [
            rec(1, 1, 1),
            rec(-1, 1, 1),
            rec(1, -1, -1),
            rec(-1, -1, -1),
            rec(1, 1, 1),
            rec(-1, -1, 1),
        ];
        let report = audit(&records).unwrap();
        assert_eq!(report.accuracy, accuracy(&records).unwrap());
        assert_eq!(report.dp_gap, demographic_parity_gap(&records).unwrap());
        assert_eq!(report.deo_gap, equalized_odds_gap(&records).unwrap());
        assert_eq!(report.n_records, 6);
        assert_eq!(report.deo_convention, "sum");
        let totals: u64 = report.group_confusions.iter().map(|g| g.total()).sum();
        assert_eq!(totals, 6);
    }

    #[test]
    fn audit_single_group_errors() {
        let records = [rec(1, 1, 1), rec(-1, 1, -1)];
        assert!(matches!(audit(&records), Err(CoreError::EmptyGroup { group: -1 })));
    }

    #[test]
    fn labels_outside_pm_one_rejected() {
        assert_eq!(
            PredictionRecord::new(0, 1, 1),
            Err(CoreError::InvalidLabel { value: 0 })
        );
    }
}
