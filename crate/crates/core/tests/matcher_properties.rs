use std::collections::BTreeMap;

use ctxprobe::eval::{match_image, score_condition, EvalParams, MatchResult};
use ctxprobe::ingest::{join, parse_annotations, parse_predictions, SceneTags};
use ctxprobe::stratify::{Condition, StratifiedTestSet};
use ctxprobe::types::{BoundingBox, ClassDistribution, Detection, GroundTruthInstance, ImageId};
use proptest::prelude::*;
use serde_json::json;

fn gt_strategy() -> impl Strategy<Value = Vec<GroundTruthInstance>> {
    prop::collection::vec((0u32..6, 0u32..6, 2u32..6, 2u32..6, 1u32..4), 0..8).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(i, (x, y, w, h, c))| GroundTruthInstance {
                id: i as u64,
                image_id: ImageId::from(1),
                class_id: c,
                bbox: BoundingBox::new(x as f64 * 4.0, y as f64 * 4.0, w as f64 * 3.0, h as f64 * 3.0)
                    .unwrap(),
            })
            .collect()
    })
}

/// Ground truth plus detections that are jittered copies of it, with
/// class flips, and a few free-floating false positives. Confidences sit on a
/// coarse grid so ties are common.
fn scene() -> impl Strategy<Value = (Vec<Detection>, Vec<GroundTruthInstance>)> {
    gt_strategy().prop_flat_map(|gts| {
        let n = gts.len();
        let copies = prop::collection::vec(
            (0..n.max(1), -3i32..=3, -3i32..=3, -2i32..=2, 0u32..4, 0u32..=10),
            0..(2 * n + 1),
        );
        let spurious =
            prop::collection::vec((0u32..30, 0u32..30, 2u32..12, 2u32..12, 1u32..4, 0u32..=10), 0..4);
        (Just(gts), copies, spurious).prop_map(|(gts, copies, spurious)| {
            let mut dets = Vec::new();
            for (g, dx, dy, dw, flip, conf) in copies {
                let Some(src) = gts.get(g) else { continue };
                let b = src.bbox;
                let w = (b.w() + dw as f64).max(1.0);
                let h = (b.h() + dw as f64).max(1.0);
                let class = if flip == 0 { src.class_id % 3 + 1 } else { src.class_id };
                dets.push(
                    Detection::new(
                        ImageId::from(1),
                        class,
                        BoundingBox::new(b.x() + dx as f64, b.y() + dy as f64, w, h).unwrap(),
                        conf as f64 / 10.0,
                    )
                    .unwrap(),
                );
            }
            for (x, y, w, h, c, conf) in spurious {
                let b = BoundingBox::new(x as f64, y as f64, w as f64, h as f64).unwrap();
                dets.push(Detection::new(ImageId::from(1), c, b, conf as f64 / 10.0).unwrap());
            }
            (dets, gts)
        })
    })
}

fn check_partition(r: &MatchResult, dets: usize, gts: usize) -> Result<(), TestCaseError> {
    let mut seen = vec![0u8; dets];
    for d in r
        .matched
        .iter()
        .map(|p| p.detection)
        .chain(r.misclassified.iter().map(|p| p.detection))
        .chain(r.duplicates.iter().copied())
        .chain(r.unmatched_detections.iter().copied())
    {
        seen[d] += 1;
    }
    prop_assert!(seen.iter().all(|&s| s == 1), "detection partition {seen:?}");
    let mut gseen = vec![0u8; gts];
    for g in r
        .matched
        .iter()
        .map(|p| p.gt)
        .chain(r.confused_gt.iter().copied())
        .chain(r.unmatched_gt.iter().copied())
    {
        gseen[g] += 1;
    }
    prop_assert!(gseen.iter().all(|&s| s == 1), "ground-truth partition {gseen:?}");
    prop_assert_eq!(r.matched.len() + r.unmatched_gt.len() + r.confused_gt.len(), gts);
    Ok(())
}

/// Matched pairs described by content, so they can be compared across
/// reorderings of the inputs.
fn content(r: &MatchResult, dets: &[Detection], gts: &[GroundTruthInstance]) -> Vec<String> {
    let mut v: Vec<String> = r
        .matched
        .iter()
        .map(|p| {
            let d = &dets[p.detection];
            format!("{:?}/{}/{} -> {}", d.bbox.to_array(), d.class_id, d.confidence(), gts[p.gt].id)
        })
        .collect();
    v.sort();
    v
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn every_detection_and_object_lands_in_exactly_one_bucket((dets, gts) in scene(), t in 0.05f64..=1.0) {
        let r = match_image(&dets, &gts, t).unwrap();
        check_partition(&r, dets.len(), gts.len())?;
        for p in &r.matched {
            prop_assert_eq!(dets[p.detection].class_id, gts[p.gt].class_id);
            prop_assert!(p.iou >= t);
        }
        for p in &r.misclassified {
            prop_assert_ne!(dets[p.detection].class_id, gts[p.gt].class_id);
        }
    }

    #[test]
    fn raising_the_threshold_never_adds_correct_detections((dets, gts) in scene()) {
        let mut last = usize::MAX;
        for step in 1..=20 {
            let t = step as f64 * 0.05;
            let correct = match_image(&dets, &gts, t).unwrap().matched.len();
            prop_assert!(correct <= last, "threshold {t}: {correct} > {last}");
            last = correct;
        }
    }

    #[test]
    fn input_order_does_not_change_the_matching(
        (dets, gts) in scene(),
        rot_d in 0usize..16,
        rot_g in 0usize..16,
    ) {
        let r = match_image(&dets, &gts, 0.5).unwrap();
        let mut d2 = dets.clone();
        let mut g2 = gts.clone();
        d2.reverse();
        g2.reverse();
        if !d2.is_empty() { let k = rot_d % d2.len(); d2.rotate_left(k); }
        if !g2.is_empty() { let k = rot_g % g2.len(); g2.rotate_left(k); }
        let r2 = match_image(&d2, &g2, 0.5).unwrap();
        prop_assert_eq!(content(&r, &dets, &gts), content(&r2, &d2, &g2));
        prop_assert_eq!(r.duplicates.len(), r2.duplicates.len());
        prop_assert_eq!(r.misclassified.len(), r2.misclassified.len());
        prop_assert_eq!(r.confused_gt.len(), r2.confused_gt.len());
        prop_assert_eq!(r.unmatched_detections.len(), r2.unmatched_detections.len());
    }

    #[test]
    fn union_accuracy_is_the_object_weighted_mean(scenes in prop::collection::vec(scene(), 2..8), split in 1usize..7) {
        let scenes: Vec<_> = scenes.into_iter().filter(|(_, g)| !g.is_empty()).collect();
        prop_assume!(scenes.len() >= 2);
        let split = split.min(scenes.len() - 1);
        let mut images = Vec::new();
        let mut anns = Vec::new();
        let mut preds = Vec::new();
        for (i, (dets, gts)) in scenes.iter().enumerate() {
            images.push(json!({"id": i, "file_name": format!("{i}.jpg"), "width": 64, "height": 64}));
            for g in gts {
                anns.push(json!({"id": anns.len(), "image_id": i, "category_id": g.class_id, "bbox": g.bbox}));
            }
            for d in dets {
                preds.push(json!({"image_id": i, "category_id": d.class_id, "bbox": d.bbox, "score": d.confidence()}));
            }
        }
        let cats: Vec<_> = (1..4).map(|c| json!({"id": c, "name": format!("c{c}")})).collect();
        let doc = json!({"images": images, "categories": cats, "annotations": anns});
        let dataset = parse_annotations(doc.to_string().as_bytes()).unwrap();
        let predictions = parse_predictions(json!(preds).to_string().as_bytes()).unwrap();
        let u = join(dataset, &SceneTags::default(), Some(&predictions));

        let score = |ids: Vec<usize>| {
            let set = StratifiedTestSet {
                condition: Condition::unconstrained("s"),
                seed: 0,
                tolerance: 1.0,
                image_ids: ids.into_iter().map(|i| ImageId::from(i as u64)).collect(),
                achieved: ClassDistribution::new(BTreeMap::from([(1, 1.0)])).unwrap(),
                target: ClassDistribution::new(BTreeMap::from([(1, 1.0)])).unwrap(),
                divergence: 0.0,
            };
            let m = score_condition(&set, &u, EvalParams::default()).unwrap().metrics;
            prop_assert_eq!(m.check_consistency(), Ok(()));
            Ok(m)
        };
        let a = score((0..split).collect())?;
        let b = score((split..scenes.len()).collect())?;
        let all = score((0..scenes.len()).collect())?;
        let weighted = (a.accuracy * a.total_gt as f64 + b.accuracy * b.total_gt as f64)
            / (a.total_gt + b.total_gt) as f64;
        prop_assert!((all.accuracy - weighted).abs() < 1e-12);
        prop_assert_eq!(all.correct, a.correct + b.correct);
    }
}
