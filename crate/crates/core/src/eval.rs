//! AP / AP50 with greedy score-ranked matching and the all-point
//! interpolated precision envelope.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::proposal::{iou, BBox};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub image_id: u64,
    pub category: String,
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBox {
    pub image_id: u64,
    pub category: String,
    pub bbox: BBox,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdAp {
    pub iou: f64,
    pub ap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// Mean AP over the evaluated IoU thresholds.
    pub ap: f64,
    pub ap50: f64,
    pub per_threshold: Vec<ThresholdAp>,
}

/// `0.50, 0.55, ..., 0.95`.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|k| (50 + 5 * k) as f64 / 100.0).collect()
}

/// Evaluates at the standard `0.50:0.05:0.95` thresholds.
pub fn evaluate(predictions: &[ScoredBox], ground_truth: &[GroundTruthBox]) -> Result<EvalResult> {
    evaluate_ap(predictions, ground_truth, &coco_thresholds())
}

pub fn evaluate_ap(
    predictions: &[ScoredBox],
    ground_truth: &[GroundTruthBox],
    thresholds: &[f64],
) -> Result<EvalResult> {
    if ground_truth.is_empty() {
        return Err(Error::UndefinedMetric("no ground-truth boxes".into()));
    }
    if thresholds.is_empty() {
        return Err(Error::config("no IoU thresholds"));
    }
    if let Some(p) = predictions.iter().find(|p| !p.score.is_finite()) {
        return Err(Error::NumericDomain(format!("prediction score {}", p.score)));
    }
    let categories: BTreeSet<&str> = ground_truth.iter().map(|g| g.category.as_str()).collect();
    let ap_at = |thr: f64| -> f64 {
        let total: f64 = categories
            .iter()
            .map(|c| category_ap(predictions, ground_truth, c, thr))
            .sum();
        total / categories.len() as f64
    };
    let per_threshold: Vec<ThresholdAp> = thresholds
        .iter()
        .map(|&t| ThresholdAp { iou: t, ap: ap_at(t) })
        .collect();
    let ap = per_threshold.iter().map(|t| t.ap).sum::<f64>() / per_threshold.len() as f64;
    let ap50 = per_threshold
        .iter()
        .find(|t| t.iou == 0.5)
        .map_or_else(|| ap_at(0.5), |t| t.ap);
    Ok(EvalResult {
        ap,
        ap50,
        per_threshold,
    })
}

fn category_ap(preds: &[ScoredBox], gts: &[GroundTruthBox], category: &str, thr: f64) -> f64 {
    let mut by_image: BTreeMap<u64, Vec<(BBox, bool)>> = BTreeMap::new();
    let mut n_gt = 0usize;
    for g in gts.iter().filter(|g| g.category == category) {
        by_image.entry(g.image_id).or_default().push((g.bbox, false));
        n_gt += 1;
    }
    let mut ranked: Vec<&ScoredBox> = preds.iter().filter(|p| p.category == category).collect();
    // stable: equal scores keep input order
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score));

    let mut hits = Vec::with_capacity(ranked.len());
    for p in ranked {
        let mut best: Option<(usize, f64)> = None;
        if let Some(gt) = by_image.get(&p.image_id) {
            for (gi, (g, used)) in gt.iter().enumerate() {
                if *used {
                    continue;
                }
                let v = iou(&p.bbox, g);
                if v >= thr && best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((gi, v));
                }
            }
        }
        match best {
            Some((gi, _)) => {
                by_image.get_mut(&p.image_id).expect("matched image")[gi].1 = true;
                hits.push(true);
            }
            None => hits.push(false),
        }
    }
    envelope_ap(&hits, n_gt)
}

/// Area under the monotone precision envelope of a ranked hit list.
pub(crate) fn envelope_ap(hits: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 || hits.is_empty() {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(hits.len());
    let mut recall = Vec::with_capacity(hits.len());
    for (i, &h) in hits.iter().enumerate() {
        if h {
            tp += 1;
        }
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(tp as f64 / n_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        if *r > prev_recall {
            ap += (r - prev_recall) * p;
            prev_recall = *r;
        }
    }
    ap
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gt(img: u64, b: BBox) -> GroundTruthBox {
        GroundTruthBox { image_id: img, category: "polyp".into(), bbox: b }
    }

    fn pred(img: u64, b: BBox, score: f64) -> ScoredBox {
        ScoredBox { image_id: img, category: "polyp".into(), bbox: b, score }
    }

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn false_positive_then_true_positive() {
        let g = bx(0.0, 0.0, 10.0, 10.0);
        // iou((0,0,10,10), (0,0,10,3)) = 0.3 ; iou with (0,0,10,8) = 0.8
        let low = bx(0.0, 0.0, 10.0, 3.0);
        let high = bx(0.0, 0.0, 10.0, 8.0);
        assert!((iou(&g, &low) - 0.3).abs() < 1e-12);
        assert!((iou(&g, &high) - 0.8).abs() < 1e-12);
        let r = evaluate(&[pred(1, low, 0.95), pred(1, high, 0.90)], &[gt(1, g)]).unwrap();
        assert!((r.ap50 - 0.5).abs() < 1e-9);
    }

    #[test]
    fn perfect_and_empty() {
        let g = bx(1.0, 1.0, 5.0, 5.0);
        let r = evaluate(&[pred(3, g, 1.0)], &[gt(3, g)]).unwrap();
        assert_eq!((r.ap, r.ap50), (1.0, 1.0));
        let r = evaluate(&[], &[gt(3, g)]).unwrap();
        assert_eq!((r.ap, r.ap50), (0.0, 0.0));
        assert_eq!(r.per_threshold.len(), 10);
        assert!(matches!(evaluate(&[], &[]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn predictions_do_not_cross_images_or_categories() {
        let g = bx(0.0, 0.0, 4.0, 4.0);
        let r = evaluate(&[pred(2, g, 0.9)], &[gt(1, g)]).unwrap();
        assert_eq!(r.ap50, 0.0);
        let mut other = pred(1, g, 0.9);
        other.category = "cell".into();
        assert_eq!(evaluate(&[other], &[gt(1, g)]).unwrap().ap50, 0.0);
    }

    #[test]
    fn duplicate_detection_counts_once() {
        let g = bx(0.0, 0.0, 4.0, 4.0);
        let r = evaluate(&[pred(1, g, 0.9), pred(1, g, 0.8)], &[gt(1, g)]).unwrap();
        assert_eq!(r.ap50, 1.0);
        let r = evaluate(&[pred(1, g, 0.9)], &[gt(1, g), gt(1, bx(8.0, 8.0, 9.0, 9.0))]).unwrap();
        assert_eq!(r.ap50, 0.5);
    }

    #[test]
    fn thresholds_are_exact() {
        let t = coco_thresholds();
        assert_eq!(t[0], 0.5);
        assert_eq!(t[9], 0.95);
    }
}
