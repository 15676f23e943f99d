//! Property-based invariants for the geometry and metric layers.

use proptest::prelude::*;

use derotnet_core::boxes::{BBox, Detection, GroundTruth, Proposal};
use derotnet_core::derotation::{
    derotate_backward, derotate_forward, normalize_pose, RotationVector,
};
use derotnet_core::eval::{average_precision, iou, mabo, nms, recall_at_iou};
use derotnet_core::Tensor;

fn arb_bbox() -> impl Strategy<Value = BBox> {
    (
        -20.0f64..60.0,
        -20.0f64..60.0,
        1.0f64..40.0,
        1.0f64..40.0,
    )
        .prop_map(|(x, y, w, h)| BBox::new(x, y, w, h))
}

fn arb_gts(max: usize) -> impl Strategy<Value = Vec<GroundTruth>> {
    prop::collection::vec((arb_bbox(), -180.0f64..180.0), 1..=max).prop_map(|v| {
        v.into_iter()
            .map(|(bbox, angle_deg)| GroundTruth {
                image_id: "img".into(),
                bbox,
                angle_deg,
            })
            .collect()
    })
}

fn arb_detections(max: usize) -> impl Strategy<Value = Vec<Detection>> {
    prop::collection::vec((arb_bbox(), 0.0f64..1.0, -180.0f64..180.0), 0..=max).prop_map(|v| {
        v.into_iter()
            .map(|(bbox, score, angle_deg)| Detection {
                image_id: "img".into(),
                bbox,
                score,
                angle_deg,
            })
            .collect()
    })
}

fn to_proposals(detections: &[Detection]) -> Vec<Proposal> {
    detections
        .iter()
        .map(|d| Proposal {
            image_id: d.image_id.clone(),
            bbox: d.bbox,
            score: d.score,
            cluster: 0,
        })
        .collect()
}

fn arb_map() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, 36..=36)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn iou_is_symmetric_and_bounded(a in arb_bbox(), b in arb_bbox()) {
        let v = iou(&a, &b);
        prop_assert_eq!(v, iou(&b, &a));
        prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
        // self-overlap: (y + h) - y need not equal h exactly in floating
        // point, so allow a tiny slack
        prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn iou_is_translation_invariant(a in arb_bbox(), b in arb_bbox(),
                                    dx in -30.0f64..30.0, dy in -30.0f64..30.0) {
        let shift = |r: &BBox| BBox::new(r.x + dx, r.y + dy, r.w, r.h);
        let before = iou(&a, &b);
        let after = iou(&shift(&a), &shift(&b));
        prop_assert!((before - after).abs() < 1e-9);
    }

    #[test]
    fn nms_output_is_an_antichain(dets in arb_detections(12), thr in 0.1f64..0.9) {
        let kept = nms(&dets, thr);
        prop_assert!(kept.len() <= dets.len());
        for i in 0..kept.len() {
            for j in i + 1..kept.len() {
                prop_assert!(iou(&kept[i].bbox, &kept[j].bbox) <= thr);
            }
        }
        // every suppressed detection overlaps some kept one above the threshold
        for d in &dets {
            let survived = kept.iter().any(|k| k.bbox == d.bbox && k.score == d.score);
            if !survived {
                prop_assert!(kept.iter().any(|k| iou(&d.bbox, &k.bbox) > thr));
            }
        }
    }

    #[test]
    fn adding_a_proposal_never_hurts_coverage(dets in arb_detections(8),
                                              gts in arb_gts(4),
                                              extra in arb_bbox()) {
        let base = to_proposals(&dets);
        if base.is_empty() {
            return Ok(());
        }
        let mut more = base.clone();
        more.push(Proposal { image_id: "img".into(), bbox: extra, score: 0.0, cluster: 0 });
        prop_assert!(recall_at_iou(&more, &gts, 0.5)? >= recall_at_iou(&base, &gts, 0.5)?);
        prop_assert!(mabo(&more, &gts)? >= mabo(&base, &gts)? - 1e-12);
    }

    #[test]
    fn ap_invariant_under_monotone_score_transform(dets in arb_detections(10),
                                                   gts in arb_gts(4)) {
        let ap1 = average_precision(&dets, &gts, 0.5)?.ap;
        let squashed: Vec<Detection> = dets
            .iter()
            .map(|d| Detection { score: (3.0 * d.score + 1.0).tanh(), ..d.clone() })
            .collect();
        let ap2 = average_precision(&squashed, &gts, 0.5)?.ap;
        prop_assert!((ap1 - ap2).abs() < 1e-12);
    }

    #[test]
    fn ap_stays_in_unit_interval(dets in arb_detections(10), gts in arb_gts(5)) {
        let ap = average_precision(&dets, &gts, 0.5)?.ap;
        prop_assert!((0.0..=1.0 + 1e-12).contains(&ap));
    }

    #[test]
    fn normalize_pose_lands_on_unit_circle(angle in -180.0f64..180.0,
                                           log_scale in -30.0f64..30.0) {
        let scale = 10.0f64.powf(log_scale);
        let raw = RotationVector::from_angle_deg(angle);
        let l = normalize_pose(raw.cos_a * scale, raw.sin_a * scale)?;
        let norm = (l.cos_a * l.cos_a + l.sin_a * l.sin_a).sqrt();
        prop_assert!((norm - 1.0).abs() < 1e-12);
        prop_assert!((l.cos_a - raw.cos_a).abs() < 1e-9);
        prop_assert!((l.sin_a - raw.sin_a).abs() < 1e-9);
    }

    #[test]
    fn derotation_is_linear(a in arb_map(), b in arb_map(), angle in -180.0f64..180.0,
                            scale in -2.0f64..2.0) {
        let pose = RotationVector::from_angle_deg(angle);
        let ta = Tensor::from_values(&[1, 1, 6, 6], a.clone()).unwrap();
        let tb = Tensor::from_values(&[1, 1, 6, 6], b.clone()).unwrap();
        let combo = Tensor::from_values(
            &[1, 1, 6, 6],
            a.iter().zip(&b).map(|(x, y)| scale * x + y).collect(),
        )
        .unwrap();
        let (ya, _) = derotate_forward(&ta, &[pose])?;
        let (yb, _) = derotate_forward(&tb, &[pose])?;
        let (yc, _) = derotate_forward(&combo, &[pose])?;
        for ((va, vb), vc) in ya.values().iter().zip(yb.values()).zip(yc.values()) {
            prop_assert!((scale * va + vb - vc).abs() < 1e-12);
        }
    }

    #[test]
    fn derotation_backward_is_the_adjoint(x in arb_map(), g in arb_map(),
                                          angle in -180.0f64..180.0) {
        let pose = RotationVector::from_angle_deg(angle);
        let tx = Tensor::from_values(&[1, 1, 6, 6], x).unwrap();
        let tg = Tensor::from_values(&[1, 1, 6, 6], g).unwrap();
        let (y, record) = derotate_forward(&tx, &[pose])?;
        let xt = derotate_backward(&tg, &record)?;
        let lhs: f64 = y.values().iter().zip(tg.values()).map(|(a, b)| a * b).sum();
        let rhs: f64 = tx.values().iter().zip(xt.values()).map(|(a, b)| a * b).sum();
        prop_assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(rhs.abs()).max(1.0));
    }
}
