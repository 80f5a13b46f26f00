//! Scan-level grading by the maximum-grade rule.
//!
//! A scan's grade is the most severe grade group whose pixel count across all
//! of the scan's patch masks reaches a presence threshold; a scan with no
//! passing tumor grade is benign ([`GradeGroup::Background`]). With
//! morphological cleanup enabled a threshold of one pixel suffices; without
//! it a larger threshold guards against stray single-pixel predictions.

use crate::error::{Error, Result};
use crate::labels::{grade_from_class_index, GradeGroup};
use crate::metrics::ClassificationTally;
use crate::raster::Raster;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Presence threshold when the mask has been morphologically cleaned.
pub const DEFAULT_THRESHOLD_WITH_POSTPROCESS: u64 = 1;
/// Presence threshold for raw network output.
pub const DEFAULT_THRESHOLD_WITHOUT_POSTPROCESS: u64 = 32;

/// Grading outcome for one scan.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GradingReport {
    pub scan_id: String,
    /// Grades whose pixel count reached the threshold, with their counts.
    pub grades_present: BTreeMap<GradeGroup, u64>,
    /// Most severe present tumor grade; background when the scan is benign.
    pub assigned_grade: GradeGroup,
    pub threshold_used: u64,
}

impl GradingReport {
    /// True when no tumor grade passed the presence threshold.
    pub fn is_benign(&self) -> bool {
        self.assigned_grade == GradeGroup::Background
    }
}

/// Sums pixel counts per grade group across patch masks.
pub fn count_grade_pixels(patch_masks: &[Raster<u8>]) -> Result<[u64; GradeGroup::ALL.len()]> {
    let mut counts = [0u64; GradeGroup::ALL.len()];
    for mask in patch_masks {
        for &c in mask.pixels() {
            let grade = grade_from_class_index(c as usize)?;
            counts[grade.index()] += 1;
        }
    }
    Ok(counts)
}

/// Grades a scan from its patch masks via the maximum-grade rule.
pub fn grade_scan(
    scan_id: &str,
    patch_masks: &[Raster<u8>],
    presence_threshold: u64,
) -> Result<GradingReport> {
    if patch_masks.is_empty() {
        return Err(Error::EmptyInput(format!(
            "scan {scan_id:?} has no patch masks"
        )));
    }
    let counts = count_grade_pixels(patch_masks)?;
    let grades_present: BTreeMap<GradeGroup, u64> = GradeGroup::ALL
        .iter()
        .filter_map(|&g| {
            let n = counts[g.index()];
            (n > 0 && n >= presence_threshold).then_some((g, n))
        })
        .collect();
    let assigned_grade = grades_present
        .keys()
        .copied()
        .filter(|g| g.is_tumor())
        .max()
        .unwrap_or(GradeGroup::Background);
    Ok(GradingReport {
        scan_id: scan_id.to_string(),
        grades_present,
        assigned_grade,
        threshold_used: presence_threshold,
    })
}

/// One-vs-rest tally of predicted versus true scan grades.
///
/// The two maps must cover exactly the same scan ids.
pub fn evaluate_grading(
    predicted: &BTreeMap<String, GradeGroup>,
    truth: &BTreeMap<String, GradeGroup>,
) -> Result<ClassificationTally> {
    let missing_predicted: Vec<String> = truth
        .keys()
        .filter(|k| !predicted.contains_key(*k))
        .cloned()
        .collect();
    let missing_truth: Vec<String> = predicted
        .keys()
        .filter(|k| !truth.contains_key(*k))
        .cloned()
        .collect();
    if !missing_predicted.is_empty() || !missing_truth.is_empty() {
        return Err(Error::ScanIdMismatch {
            missing_predicted,
            missing_truth,
        });
    }
    let mut tally = ClassificationTally::new();
    for (scan_id, &t) in truth {
        tally.record(predicted[scan_id], t);
    }
    Ok(tally)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::classification_report;
    use crate::tiling::{extract_patches, plan_grid, MASK_FILL};
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask_of(width: usize, height: usize, class: GradeGroup) -> Raster<u8> {
        Raster::filled(width, height, class.index() as u8)
    }

    #[test]
    fn maximum_grade_wins() {
        let patches = vec![
            mask_of(4, 4, GradeGroup::GrG2),
            mask_of(4, 4, GradeGroup::GrG3),
            mask_of(4, 4, GradeGroup::GrG4),
        ];
        let report = grade_scan("s1", &patches, 1).unwrap();
        assert_eq!(report.assigned_grade, GradeGroup::GrG4);
        assert_eq!(report.grades_present.len(), 3);
        assert_eq!(report.grades_present[&GradeGroup::GrG3], 16);
        assert!(!report.is_benign());
    }

    #[test]
    fn all_background_is_benign() {
        let patches = vec![mask_of(8, 8, GradeGroup::Background); 3];
        let report = grade_scan("s2", &patches, 1).unwrap();
        assert_eq!(report.assigned_grade, GradeGroup::Background);
        assert!(report.is_benign());
        assert_eq!(report.grades_present[&GradeGroup::Background], 192);
    }

    #[test]
    fn threshold_suppresses_sparse_grades() {
        let mut patch = mask_of(10, 10, GradeGroup::Background);
        // 3 px of GrG5, 50 px of GrG2
        for x in 0..3 {
            patch.set(x, 0, GradeGroup::GrG5.index() as u8);
        }
        for i in 0..50usize {
            patch.set(i % 10, 1 + i / 10, GradeGroup::GrG2.index() as u8);
        }
        let report = grade_scan("s3", &[patch.clone()], 10).unwrap();
        assert!(!report.grades_present.contains_key(&GradeGroup::GrG5));
        assert_eq!(report.assigned_grade, GradeGroup::GrG2);

        let report = grade_scan("s3", &[patch], 1).unwrap();
        assert_eq!(report.assigned_grade, GradeGroup::GrG5);
    }

    #[test]
    fn empty_patch_sequence_is_an_error() {
        assert!(matches!(
            grade_scan("s4", &[], 1),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn out_of_range_class_is_an_error() {
        let bad = Raster::filled(2, 2, 7u8);
        assert!(grade_scan("s5", &[bad], 1).is_err());
    }

    fn random_patch(rng: &mut ChaCha8Rng) -> Raster<u8> {
        let data = (0..64).map(|_| rng.random_range(0..6u8)).collect();
        Raster::from_vec(8, 8, data).unwrap()
    }

    #[test]
    fn adding_patches_never_lowers_the_grade() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..20 {
            let patches: Vec<_> = (0..6).map(|_| random_patch(&mut rng)).collect();
            let mut prev = GradeGroup::Background;
            for k in 1..=patches.len() {
                let grade = grade_scan("s", &patches[..k], 5).unwrap().assigned_grade;
                assert!(grade >= prev, "grade dropped from {prev} to {grade}");
                prev = grade;
            }
        }
    }

    #[test]
    fn patch_order_does_not_matter() {
        let mut rng = ChaCha8Rng::seed_from_u64(78);
        let patches: Vec<_> = (0..8).map(|_| random_patch(&mut rng)).collect();
        let report = grade_scan("s", &patches, 7).unwrap();
        for _ in 0..5 {
            let mut shuffled = patches.clone();
            shuffled.shuffle(&mut rng);
            let other = grade_scan("s", &shuffled, 7).unwrap();
            assert_eq!(other.assigned_grade, report.assigned_grade);
            assert_eq!(other.grades_present, report.grades_present);
        }
    }

    #[test]
    fn threshold_one_matches_stitched_mask_maximum() {
        let mut rng = ChaCha8Rng::seed_from_u64(79);
        for _ in 0..10 {
            // sparse scan mask so some scans are benign
            let (w, h) = (30usize, 22usize);
            let mut scan = Raster::filled(w, h, 0u8);
            for _ in 0..rng.random_range(0..4) {
                let (x, y) = (rng.random_range(0..w), rng.random_range(0..h));
                scan.set(x, y, rng.random_range(1..6));
            }
            let plan = plan_grid(w as u32, h as u32, 8).unwrap();
            let patches = extract_patches("s", &scan, &plan, MASK_FILL).unwrap();
            let masks: Vec<_> = patches.into_iter().map(|p| p.pixels).collect();
            let got = grade_scan("s", &masks, 1).unwrap().assigned_grade;
            let want = scan
                .pixels()
                .iter()
                .map(|&c| grade_from_class_index(c as usize).unwrap())
                .filter(|g| g.is_tumor())
                .max()
                .unwrap_or(GradeGroup::Background);
            assert_eq!(got, want);
        }
    }

    #[test]
    fn grading_report_serializes_with_grade_names() {
        let report = grade_scan("scan-9", &[mask_of(2, 2, GradeGroup::GrG4)], 1).unwrap();
        let json = serde_json::to_string(&report).unwrap();
        assert!(json.contains("\"assigned_grade\":\"grg4\""), "{json}");
        assert!(json.contains("\"grades_present\":{\"grg4\":4}"), "{json}");
        let back: GradingReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn evaluate_grading_perfect_predictions() {
        let truth: BTreeMap<String, GradeGroup> = [
            ("a".into(), GradeGroup::GrG1),
            ("b".into(), GradeGroup::GrG4),
            ("c".into(), GradeGroup::Background),
        ]
        .into();
        let tally = evaluate_grading(&truth.clone(), &truth).unwrap();
        for row in classification_report(&tally) {
            if row.support > 0 {
                assert_eq!(row.true_positive_rate, Some(1.0));
                assert_eq!(row.positive_predictive_value, Some(1.0));
                assert_eq!(row.f1, Some(1.0));
            }
        }
    }

    #[test]
    fn evaluate_grading_counts_confusions() {
        let truth: BTreeMap<String, GradeGroup> = [("a".into(), GradeGroup::GrG3)].into();
        let predicted: BTreeMap<String, GradeGroup> = [("a".into(), GradeGroup::GrG4)].into();
        let tally = evaluate_grading(&predicted, &truth).unwrap();
        assert_eq!(tally.counts(GradeGroup::GrG4).false_positive, 1);
        assert_eq!(tally.counts(GradeGroup::GrG3).false_negative, 1);
        assert_eq!(tally.counts(GradeGroup::GrG1).true_negative, 1);
    }

    #[test]
    fn evaluate_grading_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(80);
        let grade =
            |rng: &mut ChaCha8Rng| GradeGroup::ALL[rng.random_range(0..GradeGroup::ALL.len())];
        let mut predicted = BTreeMap::new();
        let mut truth = BTreeMap::new();
        for i in 0..20 {
            predicted.insert(format!("scan{i}"), grade(&mut rng));
            truth.insert(format!("scan{i}"), grade(&mut rng));
        }
        let tally = evaluate_grading(&predicted, &truth).unwrap();
        for g in GradeGroup::ALL {
            let mut want = (0u64, 0u64, 0u64, 0u64);
            for scan_id in truth.keys() {
                match (predicted[scan_id] == g, truth[scan_id] == g) {
                    (true, true) => want.0 += 1,
                    (true, false) => want.1 += 1,
                    (false, true) => want.2 += 1,
                    (false, false) => want.3 += 1,
                }
            }
            let c = tally.counts(g);
            assert_eq!(
                (
                    c.true_positive,
                    c.false_positive,
                    c.false_negative,
                    c.true_negative
                ),
                want,
                "grade {g}"
            );
        }
    }

    #[test]
    fn evaluate_grading_reports_missing_ids() {
        let predicted: BTreeMap<String, GradeGroup> = [
            ("a".into(), GradeGroup::GrG1),
            ("x".into(), GradeGroup::GrG2),
        ]
        .into();
        let truth: BTreeMap<String, GradeGroup> = [
            ("a".into(), GradeGroup::GrG1),
            ("b".into(), GradeGroup::GrG2),
        ]
        .into();
        match evaluate_grading(&predicted, &truth) {
            Err(Error::ScanIdMismatch {
                missing_predicted,
                missing_truth,
            }) => {
                assert_eq!(missing_predicted, vec!["b".to_string()]);
                assert_eq!(missing_truth, vec!["x".to_string()]);
            }
            other => panic!("expected scan id mismatch, got {other:?}"),
        }
    }
}
