//! Evaluation arithmetic: classification accuracy, throughput, pixel-level
//! segmentation scores, and the IoU detection rule.
//!
//! Crack is the positive class. Degenerate 0/0 ratios follow one stated
//! convention: a score is 1 when both masks are empty (perfect agreement)
//! and 0 otherwise.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::ModelGraph;
use crate::tensor::Tensor;

/// Pixel- or image-level confusion counts, crack = positive.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn add(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }
}

/// Precision, recall, F1, and IoU in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
}

/// Wall-clock throughput of sequential single-image forwards.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TimingStats {
    pub image_count: usize,
    pub seconds: f64,
    pub fps: f64,
}

impl TimingStats {
    pub fn new(image_count: usize, seconds: f64) -> Self {
        TimingStats {
            image_count,
            seconds,
            fps: image_count as f64 / seconds,
        }
    }
}

/// Fraction of label pairs that agree.
pub fn classification_accuracy<T: PartialEq>(preds: &[T], truths: &[T]) -> Result<f64> {
    if preds.is_empty() || preds.len() != truths.len() {
        return Err(Error::Empty(format!(
            "accuracy needs matching nonempty label lists ({} vs {})",
            preds.len(),
            truths.len()
        )));
    }
    let correct = preds.iter().zip(truths).filter(|(p, t)| p == t).count();
    Ok(correct as f64 / preds.len() as f64)
}

/// Time sequential single-image forwards, after one untimed warm-up pass on
/// the first image. Measures model forward time only, not image loading.
pub fn measure_fps(model: &ModelGraph, images: &[Tensor]) -> Result<TimingStats> {
    let first = images
        .first()
        .ok_or_else(|| Error::Empty("measure_fps on zero images".into()))?;
    model.forward(first)?;
    let start = Instant::now();
    for image in images {
        model.forward(image)?;
    }
    let seconds = start.elapsed().as_secs_f64();
    Ok(TimingStats::new(images.len(), seconds))
}

/// Exact confusion counts between two same-shape binary masks.
pub fn pixel_confusion(pred: &Tensor, gt: &Tensor) -> Result<ConfusionCounts> {
    if pred.shape() != gt.shape() {
        return Err(Error::Shape(format!(
            "mask shapes differ: {:?} vs {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    let mut counts = ConfusionCounts::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        if (p != 0.0 && p != 1.0) || (g != 0.0 && g != 1.0) {
            return Err(Error::InvalidArgument(
                "masks must contain only 0 and 1".into(),
            ));
        }
        match (p != 0.0, g != 0.0) {
            (true, true) => counts.tp += 1,
            (true, false) => counts.fp += 1,
            (false, true) => counts.fn_ += 1,
            (false, false) => counts.tn += 1,
        }
    }
    Ok(counts)
}

fn ratio(num: u64, den: u64, both_empty: bool) -> f64 {
    if den == 0 {
        if both_empty {
            1.0
        } else {
            0.0
        }
    } else {
        num as f64 / den as f64
    }
}

/// Scores from confusion counts: P = tp/(tp+fp), R = tp/(tp+fn),
/// F1 = 2PR/(P+R), IoU = tp/(tp+fp+fn).
pub fn seg_scores(counts: &ConfusionCounts) -> SegScores {
    let both_empty = counts.tp + counts.fp + counts.fn_ == 0;
    let precision = ratio(counts.tp, counts.tp + counts.fp, both_empty);
    let recall = ratio(counts.tp, counts.tp + counts.fn_, both_empty);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else if both_empty {
        1.0
    } else {
        0.0
    };
    let iou = ratio(counts.tp, counts.tp + counts.fp + counts.fn_, both_empty);
    SegScores { precision, recall, f1, iou }
}

/// Detection rule: a crack counts as detected iff its IoU strictly exceeds
/// the threshold `d`.
pub fn detect_decision(iou: f64, d: f64) -> bool {
    iou > d
}

/// Scores of one evaluated image.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageScore {
    pub counts: ConfusionCounts,
    pub scores: SegScores,
    pub detected: bool,
}

/// Segmentation evaluation over a dataset, reporting both aggregation modes
/// side by side:
/// - `micro`: scores of the summed pixel counts;
/// - `macro_mean`: the mean of per-image scores.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub image_count: usize,
    pub micro: SegScores,
    pub macro_mean: SegScores,
    pub micro_counts: ConfusionCounts,
    pub detection_rate: f64,
    pub detection_threshold: f64,
    pub per_image: Vec<ImageScore>,
}

/// Score a list of (predicted, ground-truth) mask pairs.
pub fn dataset_report(pairs: &[(Tensor, Tensor)], detection_threshold: f64) -> Result<MetricsReport> {
    let counts: Vec<ConfusionCounts> = pairs
        .iter()
        .map(|(pred, gt)| pixel_confusion(pred, gt))
        .collect::<Result<_>>()?;
    report_from_counts(&counts, detection_threshold)
}

/// Build the two-mode report from per-image confusion counts.
pub fn report_from_counts(
    counts_list: &[ConfusionCounts],
    detection_threshold: f64,
) -> Result<MetricsReport> {
    if counts_list.is_empty() {
        return Err(Error::Empty("dataset_report on zero images".into()));
    }
    let mut per_image = Vec::with_capacity(counts_list.len());
    let mut total = ConfusionCounts::default();
    for &counts in counts_list {
        let scores = seg_scores(&counts);
        total.add(&counts);
        per_image.push(ImageScore {
            counts,
            scores,
            detected: detect_decision(scores.iou, detection_threshold),
        });
    }
    let n = per_image.len() as f64;
    let macro_mean = SegScores {
        precision: per_image.iter().map(|s| s.scores.precision).sum::<f64>() / n,
        recall: per_image.iter().map(|s| s.scores.recall).sum::<f64>() / n,
        f1: per_image.iter().map(|s| s.scores.f1).sum::<f64>() / n,
        iou: per_image.iter().map(|s| s.scores.iou).sum::<f64>() / n,
    };
    let detection_rate = per_image.iter().filter(|s| s.detected).count() as f64 / n;
    Ok(MetricsReport {
        image_count: per_image.len(),
        micro: seg_scores(&total),
        macro_mean,
        micro_counts: total,
        detection_rate,
        detection_threshold,
        per_image,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOL: f64 = 1e-12;

    fn mask(shape: &[usize], bits: &[u8]) -> Tensor {
        Tensor::new(shape, bits.iter().map(|&b| b as f64).collect()).unwrap()
    }

    #[test]
    fn accuracy_all_correct_is_one() {
        let labels = [1usize, 0, 1, 1];
        assert_eq!(classification_accuracy(&labels, &labels).unwrap(), 1.0);
    }

    #[test]
    fn accuracy_division_case() {
        // 181 correct of 193.
        let mut preds = vec![1usize; 193];
        let truths = vec![1usize; 193];
        for p in preds.iter_mut().take(12) {
            *p = 0;
        }
        let acc = classification_accuracy(&preds, &truths).unwrap();
        assert!((acc - 181.0 / 193.0).abs() < TOL);
    }

    #[test]
    fn accuracy_invariant_under_pair_permutation() {
        let preds = [1usize, 0, 0, 1, 1];
        let truths = [1usize, 1, 0, 0, 1];
        let a = classification_accuracy(&preds, &truths).unwrap();
        let perm = [4usize, 2, 0, 3, 1];
        let p2: Vec<usize> = perm.iter().map(|&i| preds[i]).collect();
        let t2: Vec<usize> = perm.iter().map(|&i| truths[i]).collect();
        assert_eq!(a, classification_accuracy(&p2, &t2).unwrap());
    }

    #[test]
    fn accuracy_rejects_empty() {
        let empty: [usize; 0] = [];
        assert!(classification_accuracy(&empty, &empty).is_err());
    }

    #[test]
    fn timing_stats_arithmetic() {
        let t = TimingStats::new(10, 0.25);
        assert!((t.fps - 40.0).abs() < TOL);
        assert_eq!(t.image_count, 10);
    }

    #[test]
    fn pixel_confusion_enumerated_case() {
        // pred {(0,0),(0,1)} vs gt {(0,1),(1,1)} on 2x2.
        let pred = mask(&[2, 2], &[1, 1, 0, 0]);
        let gt = mask(&[2, 2], &[0, 1, 0, 1]);
        let c = pixel_confusion(&pred, &gt).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_, c.tn), (1, 1, 1, 1));
        assert_eq!(c.total(), 4);
    }

    #[test]
    fn pixel_confusion_swap_exchanges_fp_fn() {
        let pred = mask(&[2, 2], &[1, 1, 0, 0]);
        let gt = mask(&[2, 2], &[0, 1, 0, 1]);
        let a = pixel_confusion(&pred, &gt).unwrap();
        let b = pixel_confusion(&gt, &pred).unwrap();
        assert_eq!(a.fp, b.fn_);
        assert_eq!(a.fn_, b.fp);
        assert_eq!(a.tp, b.tp);
    }

    #[test]
    fn pixel_confusion_identical_masks() {
        let m = mask(&[2, 2], &[1, 0, 0, 1]);
        let c = pixel_confusion(&m, &m).unwrap();
        assert_eq!(c.fp, 0);
        assert_eq!(c.fn_, 0);
    }

    #[test]
    fn pixel_confusion_rejects_non_binary() {
        let bad = Tensor::new(&[2], vec![0.5, 1.0]).unwrap();
        let ok = mask(&[2], &[0, 1]);
        assert!(pixel_confusion(&bad, &ok).is_err());
    }

    #[test]
    fn seg_scores_hand_case() {
        let s = seg_scores(&ConfusionCounts { tp: 1, fp: 1, fn_: 1, tn: 1 });
        assert!((s.precision - 0.5).abs() < TOL);
        assert!((s.recall - 0.5).abs() < TOL);
        assert!((s.f1 - 0.5).abs() < TOL);
        assert!((s.iou - 1.0 / 3.0).abs() < TOL);
    }

    #[test]
    fn seg_scores_perfect_and_disjoint() {
        let perfect = seg_scores(&ConfusionCounts { tp: 5, fp: 0, fn_: 0, tn: 3 });
        assert_eq!(
            (perfect.precision, perfect.recall, perfect.f1, perfect.iou),
            (1.0, 1.0, 1.0, 1.0)
        );
        let disjoint = seg_scores(&ConfusionCounts { tp: 0, fp: 2, fn_: 3, tn: 0 });
        assert_eq!(
            (disjoint.precision, disjoint.recall, disjoint.f1, disjoint.iou),
            (0.0, 0.0, 0.0, 0.0)
        );
    }

    #[test]
    fn seg_scores_empty_conventions() {
        let both_empty = seg_scores(&ConfusionCounts { tp: 0, fp: 0, fn_: 0, tn: 4 });
        assert_eq!(both_empty.iou, 1.0);
        assert_eq!(both_empty.f1, 1.0);
        let pred_only = seg_scores(&ConfusionCounts { tp: 0, fp: 2, fn_: 0, tn: 2 });
        assert_eq!(pred_only.precision, 0.0);
        assert_eq!(pred_only.recall, 0.0);
    }

    #[test]
    fn detect_decision_is_strict() {
        assert!(detect_decision(0.51, 0.5));
        assert!(!detect_decision(0.50, 0.5));
        assert!(!detect_decision(0.49, 0.5));
    }

    #[test]
    fn single_image_micro_equals_macro() {
        let pred = mask(&[2, 2], &[1, 1, 0, 0]);
        let gt = mask(&[2, 2], &[0, 1, 0, 1]);
        let r = dataset_report(&[(pred, gt)], 0.5).unwrap();
        assert_eq!(r.micro, r.macro_mean);
    }

    #[test]
    fn different_pixel_totals_split_micro_and_macro() {
        // Image A: tp=1, fp=1, fn=0 over 4 px -> P=0.5, R=1, IoU=0.5.
        let pa = mask(&[2, 2], &[1, 1, 0, 0]);
        let ga = mask(&[2, 2], &[1, 0, 0, 0]);
        // Image B (larger): tp=2, fp=0, fn=6 -> P=1, R=0.25, IoU=0.25.
        let pb = mask(&[4, 4], &[1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0]);
        let gb = mask(&[4, 4], &[1, 1, 1, 1, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0]);
        let r = dataset_report(&[(pa, ga), (pb, gb)], 0.5).unwrap();
        // Micro: tp=3, fp=1, fn=6 -> P=0.75, R=1/3, IoU=0.3.
        assert!((r.micro.precision - 0.75).abs() < TOL);
        assert!((r.micro.recall - 1.0 / 3.0).abs() < TOL);
        assert!((r.micro.iou - 0.3).abs() < TOL);
        // Macro: P=(0.5+1)/2, R=(1+0.25)/2, IoU=(0.5+0.25)/2.
        assert!((r.macro_mean.precision - 0.75).abs() < TOL);
        assert!((r.macro_mean.recall - 0.625).abs() < TOL);
        assert!((r.macro_mean.iou - 0.375).abs() < TOL);
        assert_ne!(r.micro.recall, r.macro_mean.recall);
    }

    #[test]
    fn report_rejects_empty_input() {
        assert!(dataset_report(&[], 0.5).is_err());
    }
}
