//! Classification metrics over confusion matrices: accuracy, weighted and
//! macro precision/recall/F1, Cohen's kappa, and disorder-stratified reports.
//!
//! Sums that feed ratios stay in integer space as long as possible, so the
//! support-weighted recall equals accuracy bit for bit and kappa's
//! degeneracy test is exact rather than a float comparison.

mod render;

pub use render::{confusion_to_csv, report_to_json, report_to_text};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::signal::Disorder;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("empty confusion matrix")]
    Empty,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("{0}")]
    InvalidArgument(String),
}

/// Rows are true classes, columns predicted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    class_names: Vec<String>,
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn from_counts(
        counts: Vec<Vec<u64>>,
        class_names: Vec<String>,
    ) -> Result<Self, MetricsError> {
        let k = class_names.len();
        if k == 0 {
            return Err(MetricsError::InvalidArgument("no classes".into()));
        }
        if counts.len() != k || counts.iter().any(|row| row.len() != k) {
            return Err(MetricsError::ShapeMismatch(format!(
                "counts must be {k}x{k} to match the class list"
            )));
        }
        Ok(ConfusionMatrix { class_names, counts })
    }

    pub fn k(&self) -> usize {
        self.class_names.len()
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn with_class_names(mut self, names: Vec<String>) -> Result<Self, MetricsError> {
        if names.len() != self.k() {
            return Err(MetricsError::ShapeMismatch(format!(
                "{} names for {} classes",
                names.len(),
                self.k()
            )));
        }
        self.class_names = names;
        Ok(self)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k()).map(|i| self.counts[i][i]).sum()
    }

    /// Per-class support (true-label counts).
    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|row| row.iter().sum()).collect()
    }

    /// Per-class prediction counts.
    pub fn col_sums(&self) -> Vec<u64> {
        (0..self.k())
            .map(|j| self.counts.iter().map(|row| row[j]).sum())
            .collect()
    }

    fn require_nonempty(&self) -> Result<(), MetricsError> {
        if self.total() == 0 {
            return Err(MetricsError::Empty);
        }
        Ok(())
    }
}

/// Counts labels into a matrix with placeholder class names; attach real
/// names with [`ConfusionMatrix::with_class_names`].
pub fn confusion_matrix(
    true_labels: &[usize],
    predicted_labels: &[usize],
    k: usize,
) -> Result<ConfusionMatrix, MetricsError> {
    if true_labels.len() != predicted_labels.len() {
        return Err(MetricsError::ShapeMismatch(format!(
            "{} true labels vs {} predictions",
            true_labels.len(),
            predicted_labels.len()
        )));
    }
    if k == 0 {
        return Err(MetricsError::InvalidArgument("no classes".into()));
    }
    let mut counts = vec![vec![0u64; k]; k];
    for (&t, &p) in true_labels.iter().zip(predicted_labels) {
        if t >= k || p >= k {
            return Err(MetricsError::InvalidArgument(format!(
                "label pair ({t}, {p}) out of range for {k} classes"
            )));
        }
        counts[t][p] += 1;
    }
    let names = (0..k).map(|i| format!("class_{i}")).collect();
    ConfusionMatrix::from_counts(counts, names)
}

pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64, MetricsError> {
    cm.require_nonempty()?;
    Ok(cm.trace() as f64 / cm.total() as f64)
}

/// Scores for one class. `zero_division` marks any ratio whose denominator
/// was zero and was therefore defined as 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    pub zero_division: bool,
}

pub fn per_class_scores(cm: &ConfusionMatrix) -> Result<Vec<ClassScores>, MetricsError> {
    cm.require_nonempty()?;
    let rows = cm.row_sums();
    let cols = cm.col_sums();
    let mut out = Vec::with_capacity(cm.k());
    for i in 0..cm.k() {
        let tp = cm.counts[i][i];
        let (support, predicted) = (rows[i], cols[i]);
        let mut zero_division = false;
        let mut ratio = |num: u64, den: u64| {
            if den == 0 {
                zero_division = true;
                0.0
            } else {
                num as f64 / den as f64
            }
        };
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, support);
        // 2TP/(2TP + FP + FN), kept in integers until the one division
        let f1 = ratio(2 * tp, 2 * tp + (predicted - tp) + (support - tp));
        out.push(ClassScores { precision, recall, f1, support, zero_division });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    /// Support-weighted mean, the reporting default.
    Weighted,
    /// Unweighted mean over classes with nonzero support, for diagnostics.
    Macro,
}

/// Averaged precision, recall, and F1 plus the full per-class F1 list.
/// Classes with zero support are excluded from both averages; the per-class
/// list still covers every class.
pub fn precision_recall_f1(
    cm: &ConfusionMatrix,
    averaging: Averaging,
) -> Result<(f64, f64, f64, Vec<f64>), MetricsError> {
    let scores = per_class_scores(cm)?;
    let per_class_f1: Vec<f64> = scores.iter().map(|s| s.f1).collect();
    let (p, r, f1) = match averaging {
        Averaging::Weighted => {
            let total: u64 = scores.iter().map(|s| s.support).sum();
            let p = scores.iter().map(|s| s.support as f64 * s.precision).sum::<f64>()
                / total as f64;
            // support * (TP/support) is TP, so recall is summed as integers;
            // this keeps weighted recall equal to accuracy exactly
            let tp_sum: u64 = (0..cm.k()).map(|i| cm.counts[i][i]).sum();
            let r = tp_sum as f64 / total as f64;
            let f1 =
                scores.iter().map(|s| s.support as f64 * s.f1).sum::<f64>() / total as f64;
            (p, r, f1)
        }
        Averaging::Macro => {
            let present: Vec<&ClassScores> =
                scores.iter().filter(|s| s.support > 0).collect();
            let n = present.len() as f64;
            (
                present.iter().map(|s| s.precision).sum::<f64>() / n,
                present.iter().map(|s| s.recall).sum::<f64>() / n,
                present.iter().map(|s| s.f1).sum::<f64>() / n,
            )
        }
    };
    Ok((p, r, f1, per_class_f1))
}

/// Chance-corrected agreement. `degenerate` is set when expected agreement
/// is exactly 1 (all mass in a single class on both axes), where the score
/// is defined as 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Kappa {
    pub value: f64,
    pub degenerate: bool,
}

pub fn cohens_kappa(cm: &ConfusionMatrix) -> Result<Kappa, MetricsError> {
    cm.require_nonempty()?;
    let total = cm.total();
    let rows = cm.row_sums();
    let cols = cm.col_sums();
    // expected-agreement numerator in integers so the degeneracy test and
    // permutation invariance are exact
    let pe_num: u128 = rows
        .iter()
        .zip(&cols)
        .map(|(&r, &c)| u128::from(r) * u128::from(c))
        .sum();
    let total_sq = u128::from(total) * u128::from(total);
    if pe_num == total_sq {
        return Ok(Kappa { value: 0.0, degenerate: true });
    }
    let p0 = cm.trace() as f64 / total as f64;
    let pe = pe_num as f64 / total_sq as f64;
    Ok(Kappa { value: (p0 - pe) / (1.0 - pe), degenerate: false })
}

/// Everything the report tables carry for one evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Disorder name when this report covers one stratum.
    pub stratum: Option<String>,
    pub accuracy: f64,
    pub precision_weighted: f64,
    pub recall_weighted: f64,
    pub f1_weighted: f64,
    pub per_class_f1: Vec<f64>,
    pub kappa: f64,
    pub kappa_degenerate: bool,
    /// Classes where some ratio hit 0/0 and was defined as 0.
    pub zero_division_classes: Vec<String>,
    pub confusion: ConfusionMatrix,
}

pub fn metrics_report(
    cm: &ConfusionMatrix,
    stratum: Option<&str>,
) -> Result<MetricsReport, MetricsError> {
    let accuracy = accuracy(cm)?;
    let (precision_weighted, recall_weighted, f1_weighted, per_class_f1) =
        precision_recall_f1(cm, Averaging::Weighted)?;
    let kappa = cohens_kappa(cm)?;
    let scores = per_class_scores(cm)?;
    let zero_division_classes = scores
        .iter()
        .zip(cm.class_names())
        .filter(|(s, _)| s.zero_division)
        .map(|(_, n)| n.clone())
        .collect();
    Ok(MetricsReport {
        stratum: stratum.map(str::to_string),
        accuracy,
        precision_weighted,
        recall_weighted,
        f1_weighted,
        per_class_f1,
        kappa: kappa.value,
        kappa_degenerate: kappa.degenerate,
        zero_division_classes,
        confusion: cm.clone(),
    })
}

/// One report per disorder over the segments of that disorder's subjects.
/// Disorders with no segments are left out, with a warning in the log.
pub fn stratified_report(
    true_labels: &[usize],
    predicted_labels: &[usize],
    disorders: &[Disorder],
    class_names: &[String],
) -> Result<BTreeMap<Disorder, MetricsReport>, MetricsError> {
    if true_labels.len() != predicted_labels.len() || true_labels.len() != disorders.len() {
        return Err(MetricsError::ShapeMismatch(format!(
            "{} true labels, {} predictions, {} disorder tags",
            true_labels.len(),
            predicted_labels.len(),
            disorders.len()
        )));
    }
    let mut out = BTreeMap::new();
    for &d in Disorder::ALL.iter() {
        let idx: Vec<usize> = disorders
            .iter()
            .enumerate()
            .filter(|(_, x)| **x == d)
            .map(|(i, _)| i)
            .collect();
        if idx.is_empty() {
            log::warn!("no segments for disorder {}, omitting its report", d.name());
            continue;
        }
        let t: Vec<usize> = idx.iter().map(|&i| true_labels[i]).collect();
        let p: Vec<usize> = idx.iter().map(|&i| predicted_labels[i]).collect();
        let cm = confusion_matrix(&t, &p, class_names.len())?
            .with_class_names(class_names.to_vec())?;
        out.insert(d, metrics_report(&cm, Some(d.name()))?);
    }
    Ok(out)
}
