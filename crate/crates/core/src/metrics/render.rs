//! Report output: pretty JSON, an aligned text table, and the confusion
//! matrix as CSV. All three are deterministic byte for byte.

use std::fmt::Write as _;

use super::{ConfusionMatrix, MetricsError, MetricsReport};

pub fn report_to_json(report: &MetricsReport) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report serializes");
    s.push('\n');
    s
}

/// Headline metrics as `label  value` rows, with the per-class F1 list in
/// tuple form on the last row.
pub fn report_to_text(report: &MetricsReport) -> String {
    let mut rows: Vec<(String, String)> = vec![
        ("segments".into(), report.confusion.total().to_string()),
        ("accuracy".into(), format!("{:.4}", report.accuracy)),
        ("precision (weighted)".into(), format!("{:.4}", report.precision_weighted)),
        ("recall (weighted)".into(), format!("{:.4}", report.recall_weighted)),
        ("f1 (weighted)".into(), format!("{:.4}", report.f1_weighted)),
        (
            "kappa".into(),
            if report.kappa_degenerate {
                format!("{:.4} (degenerate)", report.kappa)
            } else {
                format!("{:.4}", report.kappa)
            },
        ),
    ];
    let tuple: Vec<String> = report.per_class_f1.iter().map(|v| format!("{v:.2}")).collect();
    rows.push((
        format!("f1 ({})", report.confusion.class_names().join(", ")),
        format!("({})", tuple.join(", ")),
    ));
    if !report.zero_division_classes.is_empty() {
        rows.push(("zero-division classes".into(), report.zero_division_classes.join(", ")));
    }

    let width = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0);
    let mut out = String::new();
    writeln!(out, "== {} ==", report.stratum.as_deref().unwrap_or("overall")).unwrap();
    for (label, value) in rows {
        writeln!(out, "{label:<width$}  {value}").unwrap();
    }
    out
}

/// Counts with a `true_class` label column and predicted classes as the
/// remaining header cells.
pub fn confusion_to_csv(cm: &ConfusionMatrix) -> Result<String, MetricsError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["true_class".to_string()];
    header.extend(cm.class_names().iter().cloned());
    let write = |r: Result<(), csv::Error>| {
        r.map_err(|e| MetricsError::InvalidArgument(format!("csv write failed: {e}")))
    };
    write(w.write_record(&header))?;
    for (name, row) in cm.class_names().iter().zip(cm.counts()) {
        let mut record = vec![name.clone()];
        record.extend(row.iter().map(u64::to_string));
        write(w.write_record(&record))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| MetricsError::InvalidArgument(format!("csv flush failed: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[cfg(test)]
mod tests {
    use crate::metrics::{confusion_matrix, metrics_report};

    use super::*;

    fn sample_report() -> MetricsReport {
        let cm = confusion_matrix(&[0, 0, 1, 1, 1, 2], &[0, 1, 1, 1, 2, 2], 3)
            .unwrap()
            .with_class_names(vec!["wake".into(), "light".into(), "deep".into()])
            .unwrap();
        metrics_report(&cm, None).unwrap()
    }

    #[test]
    fn json_round_trips_and_is_stable() {
        let report = sample_report();
        let a = report_to_json(&report);
        let b = report_to_json(&report);
        assert_eq!(a, b);
        let back: MetricsReport = serde_json::from_str(&a).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn text_table_lines_are_aligned() {
        let report = sample_report();
        let text = report_to_text(&report);
        assert!(text.starts_with("== overall ==\n"));
        assert!(text.contains("accuracy"));
        assert!(text.contains("(0.67, 0.67, 0.67)"), "per-class tuple missing:\n{text}");
        // every metric row puts its value in the same column
        let cols: Vec<usize> = text
            .lines()
            .skip(1)
            .map(|l| l.rfind("  ").expect("two-space separator") + 2)
            .collect();
        assert!(cols.windows(2).all(|w| w[0] == w[1]), "ragged columns:\n{text}");

        let mut named = report.clone();
        named.stratum = Some("osa".into());
        assert!(report_to_text(&named).starts_with("== osa ==\n"));
    }

    #[test]
    fn csv_parses_back_to_the_same_counts() {
        let report = sample_report();
        let csv_text = confusion_to_csv(&report.confusion).unwrap();
        let mut lines = csv_text.lines();
        assert_eq!(lines.next().unwrap(), "true_class,wake,light,deep");
        assert_eq!(csv_text.lines().count(), 4);

        let mut reader = csv::Reader::from_reader(csv_text.as_bytes());
        for (record, expect) in reader.records().zip(report.confusion.counts()) {
            let record = record.unwrap();
            let row: Vec<u64> =
                (1..record.len()).map(|i| record[i].parse().unwrap()).collect();
            assert_eq!(&row, expect);
        }
    }
}
