//! Detection and rotation metrics: IOU, NMS, recall at IOU, MABO,
//! PASCAL-style average precision with all-points interpolation, and
//! rotation-accuracy bins with circular angle distance.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::boxes::{BBox, Detection, GroundTruth, Proposal};
use crate::error::{CoreError, Result};

/// Intersection over union with continuous areas.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x + a.w).min(b.x + b.w) - a.x.max(b.x);
    let iy = (a.y + a.h).min(b.y + b.h) - a.y.max(b.y);
    if ix <= 0.0 || iy <= 0.0 {
        return 0.0;
    }
    let inter = ix * iy;
    inter / (a.area() + b.area() - inter)
}

/// Greedy NMS over one image's detections: descending score, ties broken by
/// earlier index; a box is suppressed when its IOU with a kept box exceeds
/// the threshold.
pub fn nms(detections: &[Detection], overlap_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        detections[b]
            .score
            .partial_cmp(&detections[a].score)
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        if kept
            .iter()
            .all(|&k| iou(&detections[i].bbox, &detections[k].bbox) <= overlap_threshold)
        {
            kept.push(i);
        }
    }
    kept.sort_unstable();
    kept.into_iter().map(|i| detections[i].clone()).collect()
}

fn by_image<'a, T, F: Fn(&T) -> &str>(items: &'a [T], id: F) -> HashMap<&'a str, Vec<&'a T>> {
    let mut map: HashMap<&str, Vec<&T>> = HashMap::new();
    for item in items {
        map.entry(id(item)).or_default().push(item);
    }
    map
}

/// Fraction of ground-truth boxes covered by at least one proposal with
/// IOU >= tau in the same image.
pub fn recall_at_iou(proposals: &[Proposal], gts: &[GroundTruth], tau: f64) -> Result<f64> {
    if gts.is_empty() {
        return Err(CoreError::invalid("recall_at_iou", "no ground truths"));
    }
    let props = by_image(proposals, |p| p.image_id.as_str());
    let covered = gts
        .iter()
        .filter(|gt| {
            props
                .get(gt.image_id.as_str())
                .map(|ps| ps.iter().any(|p| iou(&p.bbox, &gt.bbox) >= tau))
                .unwrap_or(false)
        })
        .count();
    Ok(covered as f64 / gts.len() as f64)
}

/// Mean over ground-truth boxes of the best IOU achieved by any proposal in
/// the same image (single class, so ABO == MABO).
pub fn mabo(proposals: &[Proposal], gts: &[GroundTruth]) -> Result<f64> {
    if gts.is_empty() {
        return Err(CoreError::invalid("mabo", "no ground truths"));
    }
    let props = by_image(proposals, |p| p.image_id.as_str());
    let total: f64 = gts
        .iter()
        .map(|gt| {
            props
                .get(gt.image_id.as_str())
                .map(|ps| {
                    ps.iter()
                        .map(|p| iou(&p.bbox, &gt.bbox))
                        .fold(0.0, f64::max)
                })
                .unwrap_or(0.0)
        })
        .sum();
    Ok(total / gts.len() as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrPoint {
    pub score: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PRCurve {
    pub points: Vec<PrPoint>,
    pub ap: f64,
}

/// Per-detection match outcome, in descending-score order.
pub struct MatchedDetections {
    /// Indices into the original detection slice, descending score.
    pub order: Vec<usize>,
    /// For each entry of `order`: matched ground-truth index, or None (FP).
    pub matched_gt: Vec<Option<usize>>,
}

/// Greedy one-to-one matching by descending score (PASCAL convention): each
/// detection takes the highest-IOU unmatched ground truth of its image if
/// that IOU >= tau.
pub fn match_detections(
    detections: &[Detection],
    gts: &[GroundTruth],
    tau: f64,
) -> MatchedDetections {
    let mut gt_by_image: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, gt) in gts.iter().enumerate() {
        gt_by_image.entry(gt.image_id.as_str()).or_default().push(i);
    }
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        detections[b]
            .score
            .partial_cmp(&detections[a].score)
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut taken = vec![false; gts.len()];
    let mut matched_gt = Vec::with_capacity(order.len());
    for &di in &order {
        let det = &detections[di];
        let mut best: Option<(usize, f64)> = None;
        if let Some(candidates) = gt_by_image.get(det.image_id.as_str()) {
            for &gi in candidates {
                if taken[gi] {
                    continue;
                }
                let v = iou(&det.bbox, &gts[gi].bbox);
                if v >= tau && best.map(|(_, bv)| v > bv).unwrap_or(true) {
                    best = Some((gi, v));
                }
            }
        }
        if let Some((gi, _)) = best {
            taken[gi] = true;
            matched_gt.push(Some(gi));
        } else {
            matched_gt.push(None);
        }
    }
    MatchedDetections { order, matched_gt }
}

/// Precision/recall after each detection in descending-score order; AP is the
/// area under the curve with precision monotonized from the right.
pub fn average_precision(
    detections: &[Detection],
    gts: &[GroundTruth],
    tau: f64,
) -> Result<PRCurve> {
    if gts.is_empty() {
        return Err(CoreError::invalid("average_precision", "no ground truths"));
    }
    let matches = match_detections(detections, gts, tau);
    let n_gt = gts.len() as f64;
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(matches.order.len());
    for (k, (&di, m)) in matches.order.iter().zip(&matches.matched_gt).enumerate() {
        if m.is_some() {
            tp += 1;
        }
        points.push(PrPoint {
            score: detections[di].score,
            precision: tp as f64 / (k + 1) as f64,
            recall: tp as f64 / n_gt,
        });
    }
    // monotonize precision from the right
    let mut running = 0.0f64;
    let mut interp = vec![0.0; points.len()];
    for i in (0..points.len()).rev() {
        running = running.max(points[i].precision);
        interp[i] = running;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, &prec) in points.iter().zip(&interp) {
        ap += (p.recall - prev_recall) * prec;
        prev_recall = p.recall;
    }
    Ok(PRCurve { points, ap })
}

/// Circular angular distance in degrees, in [0, 180].
pub fn angular_distance_deg(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    d.min(360.0 - d)
}

/// Fraction of (prediction, ground truth) angle pairs within each tolerance.
pub fn rotation_accuracy(pairs: &[(f64, f64)], deltas_deg: &[f64]) -> Result<Vec<f64>> {
    if pairs.is_empty() {
        return Err(CoreError::invalid("rotation_accuracy", "no angle pairs"));
    }
    Ok(deltas_deg
        .iter()
        .map(|&delta| {
            pairs
                .iter()
                .filter(|(p, g)| angular_distance_deg(*p, *g) < delta)
                .count() as f64
                / pairs.len() as f64
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn bb(x: f64, y: f64, w: f64, h: f64) -> BBox {
        BBox::new(x, y, w, h)
    }

    fn det(id: &str, b: BBox, score: f64) -> Detection {
        Detection {
            image_id: id.to_string(),
            bbox: b,
            score,
            angle_deg: 0.0,
        }
    }

    fn gt(id: &str, b: BBox) -> GroundTruth {
        GroundTruth {
            image_id: id.to_string(),
            bbox: b,
            angle_deg: 0.0,
        }
    }

    #[test]
    fn iou_basics() {
        let a = bb(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bb(5.0, 5.0, 1.0, 1.0)), 0.0);
        assert_relative_eq!(iou(&a, &bb(1.0, 0.0, 2.0, 2.0)), 2.0 / 6.0, epsilon = 1e-12);
    }

    #[test]
    fn nms_keeps_higher_scored_duplicate() {
        let b = bb(0.0, 0.0, 4.0, 4.0);
        let kept = nms(&[det("i", b, 0.9), det("i", b, 0.8)], 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);
    }

    #[test]
    fn recall_and_mabo_definitions() {
        let gts = vec![
            gt("i", bb(0.0, 0.0, 4.0, 4.0)),
            gt("i", bb(10.0, 10.0, 4.0, 4.0)),
            gt("i", bb(20.0, 20.0, 4.0, 4.0)),
        ];
        let props: Vec<Proposal> = gts[..2]
            .iter()
            .map(|g| Proposal {
                image_id: g.image_id.clone(),
                bbox: g.bbox,
                score: 1.0,
                cluster: 0,
            })
            .collect();
        assert_relative_eq!(
            recall_at_iou(&props, &gts, 0.5).unwrap(),
            2.0 / 3.0,
            epsilon = 1e-12
        );
        assert_relative_eq!(mabo(&props, &gts).unwrap(), 2.0 / 3.0, epsilon = 1e-12);
        assert!(recall_at_iou(&props, &[], 0.5).is_err());
    }

    #[test]
    fn perfect_detector_has_unit_ap() {
        let gts = vec![gt("a", bb(0.0, 0.0, 4.0, 4.0)), gt("b", bb(2.0, 2.0, 4.0, 4.0))];
        let dets: Vec<Detection> = gts
            .iter()
            .map(|g| det(&g.image_id, g.bbox, 0.9))
            .collect();
        let pr = average_precision(&dets, &gts, 0.5).unwrap();
        assert_eq!(pr.ap, 1.0);
    }

    #[test]
    fn all_false_detections_have_zero_ap() {
        let gts = vec![gt("a", bb(0.0, 0.0, 4.0, 4.0))];
        let dets = vec![det("a", bb(50.0, 50.0, 4.0, 4.0), 0.9)];
        assert_eq!(average_precision(&dets, &gts, 0.5).unwrap().ap, 0.0);
    }

    #[test]
    fn angular_distance_wraps() {
        assert_eq!(angular_distance_deg(0.0, 355.0), 5.0);
        assert_eq!(angular_distance_deg(0.0, 180.0), 180.0);
        assert_eq!(angular_distance_deg(-170.0, 170.0), 20.0);
    }

    #[test]
    fn rotation_accuracy_bins() {
        let pairs = vec![(0.0, 0.0), (0.0, 180.0), (0.0, 355.0)];
        let acc = rotation_accuracy(&pairs, &[10.0, 20.0, 30.0]).unwrap();
        assert_eq!(acc, vec![2.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0]);
    }
}
