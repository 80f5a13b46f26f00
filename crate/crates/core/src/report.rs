//! Plain-text table rendering for evaluation, ablation, grading, and
//! training-log reports. JSON output comes straight from the serde
//! serializations of the underlying types.

use crate::grading::GradingReport;
use crate::metrics::GradeScores;
use crate::train::{AblationTable, EpochLog, EvaluationReport};

/// Renders an aligned table with a header row and a separator line.
fn format_table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let render = |cells: &[String]| -> String {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut out = String::new();
    let header: Vec<String> = headers.iter().map(|h| h.to_string()).collect();
    out.push_str(&render(&header));
    out.push('\n');
    out.push_str(
        &widths
            .iter()
            .map(|w| "-".repeat(*w))
            .collect::<Vec<_>>()
            .join("  "),
    );
    out.push('\n');
    for row in rows {
        out.push_str(&render(row));
        out.push('\n');
    }
    out
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"))
}

/// Per-class segmentation scores plus the mean row.
pub fn evaluation_table(report: &EvaluationReport) -> String {
    let mut rows: Vec<Vec<String>> = report
        .per_class
        .iter()
        .map(|c| {
            vec![
                c.grade.name().to_string(),
                opt(c.iou),
                opt(c.dice),
                c.truth_pixels.to_string(),
            ]
        })
        .collect();
    rows.push(vec![
        "mean".to_string(),
        opt(report.mean_iou),
        opt(report.mean_dice),
        String::new(),
    ]);
    let mut out = format!("split: {} ({} patches)\n", report.split, report.patches);
    out.push_str(&format_table(&["grade", "IoU", "DC", "truth px"], &rows));
    out
}

/// The loss-comparison table of an ablation run.
pub fn ablation_table(table: &AblationTable) -> String {
    let rows: Vec<Vec<String>> = table
        .rows
        .iter()
        .map(|r| {
            vec![
                r.loss.label().to_string(),
                opt(r.mean_iou),
                opt(r.mean_dice),
                format!("{:.4}", r.final_train_loss),
            ]
        })
        .collect();
    let mut out = format!("evaluated on split: {}\n", table.split);
    out.push_str(&format_table(
        &["loss", "mean IoU", "mean DC", "final train loss"],
        &rows,
    ));
    out
}

/// Scan-level one-vs-rest classification scores per grade.
pub fn classification_table(scores: &[GradeScores]) -> String {
    let rows: Vec<Vec<String>> = scores
        .iter()
        .map(|s| {
            vec![
                s.grade.name().to_string(),
                s.support.to_string(),
                opt(s.true_positive_rate),
                opt(s.positive_predictive_value),
                opt(s.f1),
            ]
        })
        .collect();
    format_table(&["grade", "support", "TPR", "PPV", "F1"], &rows)
}

/// One-scan grading summary.
pub fn grading_summary(report: &GradingReport) -> String {
    let mut out = format!(
        "scan {}: grade {} (threshold {} px)\n",
        report.scan_id,
        report.assigned_grade.name(),
        report.threshold_used
    );
    if report.grades_present.is_empty() {
        out.push_str("no tumor grade above threshold\n");
    } else {
        let rows: Vec<Vec<String>> = report
            .grades_present
            .iter()
            .map(|(g, n)| vec![g.name().to_string(), n.to_string()])
            .collect();
        out.push_str(&format_table(&["grade", "pixels"], &rows));
    }
    out
}

/// The per-epoch training log.
pub fn training_log_table(log: &[EpochLog]) -> String {
    let rows: Vec<Vec<String>> = log
        .iter()
        .map(|l| {
            vec![
                l.epoch.to_string(),
                format!("{:.6}", l.train_loss),
                opt(l.val_mean_dice),
            ]
        })
        .collect();
    format_table(&["epoch", "train loss", "val mean DC"], &rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::GradeGroup;
    use crate::loss::LossKind;
    use crate::synth::Split;
    use crate::train::{AblationRow, ClassScore};
    use std::collections::BTreeMap;

    #[test]
    fn evaluation_table_lists_classes_and_means() {
        let report = EvaluationReport {
            split: Split::Test,
            patches: 8,
            mean_iou: Some(0.41923),
            mean_dice: Some(0.5),
            per_class: vec![ClassScore {
                grade: GradeGroup::GrG2,
                iou: Some(0.25),
                dice: None,
                truth_pixels: 123,
            }],
        };
        let text = evaluation_table(&report);
        assert!(text.contains("split: test (8 patches)"), "{text}");
        assert!(text.contains("GrG2") && text.contains("0.2500") && text.contains("n/a"));
        assert!(text.contains("mean") && text.contains("0.4192"));
        // aligned: header and separator equal width
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[1].len(), lines[2].len());
    }

    #[test]
    fn ablation_table_uses_loss_labels() {
        let table = AblationTable {
            split: Split::Val,
            rows: vec![
                AblationRow {
                    loss: LossKind::CrossEntropy,
                    mean_iou: Some(0.3873),
                    mean_dice: Some(0.5),
                    final_train_loss: 0.9,
                },
                AblationRow {
                    loss: LossKind::Hybrid,
                    mean_iou: Some(0.4192),
                    mean_dice: Some(0.55),
                    final_train_loss: 0.8,
                },
            ],
        };
        let text = ablation_table(&table);
        assert!(text.contains("L_c") && text.contains("L_h"), "{text}");
        assert!(text.contains("0.3873") && text.contains("0.4192"));
    }

    #[test]
    fn grading_summary_names_the_grade() {
        let report = GradingReport {
            scan_id: "scan_003".into(),
            grades_present: BTreeMap::from([(GradeGroup::GrG4, 88u64)]),
            assigned_grade: GradeGroup::GrG4,
            threshold_used: 1,
        };
        let text = grading_summary(&report);
        assert!(text.contains("scan_003") && text.contains("GrG4") && text.contains("88"));

        let benign = GradingReport {
            scan_id: "s".into(),
            grades_present: BTreeMap::new(),
            assigned_grade: GradeGroup::Background,
            threshold_used: 32,
        };
        assert!(grading_summary(&benign).contains("no tumor grade"));
    }

    #[test]
    fn training_log_lists_epochs() {
        let log = vec![
            EpochLog {
                epoch: 1,
                train_loss: 2.5,
                val_mean_dice: None,
            },
            EpochLog {
                epoch: 2,
                train_loss: 1.25,
                val_mean_dice: Some(0.5),
            },
        ];
        let text = training_log_table(&log);
        assert!(text.contains("2.500000") && text.contains("0.5000") && text.contains("n/a"));
    }
}
