//! Average precision and recall of axis-aligned 3D detections.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::geometry::{iou_aabb3d, Detection, LabeledBox};

pub const DEFAULT_THRESHOLDS: [f64; 2] = [0.25, 0.5];

/// Indices of `dets` by descending score, ties in input order.
fn ranked(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    order
}

/// True-positive flag for every detection (in input order). Detections are
/// visited by descending score; each takes the highest-IoU unmatched GT of
/// its class with IoU at least `iou_threshold`.
pub fn match_detections(dets: &[Detection], gts: &[LabeledBox], iou_threshold: f64) -> Vec<bool> {
    let mut taken = vec![false; gts.len()];
    let mut flags = vec![false; dets.len()];
    for i in ranked(dets) {
        let d = &dets[i];
        let mut best: Option<(f64, usize)> = None;
        for (j, gt) in gts.iter().enumerate() {
            if taken[j] || gt.class != d.class {
                continue;
            }
            let iou = iou_aabb3d(&d.bbox, &gt.bbox);
            if iou >= iou_threshold && best.is_none_or(|(b, _)| iou > b) {
                best = Some((iou, j));
            }
        }
        if let Some((_, j)) = best {
            taken[j] = true;
            flags[i] = true;
        }
    }
    flags
}

/// Area under the precision-recall curve with the non-increasing precision
/// envelope. `flags` must be in descending score order. `None` without GT.
pub fn average_precision(flags: &[bool], num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return None;
    }
    let mut precision = Vec::with_capacity(flags.len());
    let mut recall = Vec::with_capacity(flags.len());
    let mut tp = 0usize;
    for (i, &f) in flags.iter().enumerate() {
        tp += f as usize;
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(tp as f64 / num_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev) * p;
        prev = *r;
    }
    Some(ap)
}

/// Fraction of GT boxes matched. `None` without GT.
pub fn recall(flags: &[bool], num_gt: usize) -> Option<f64> {
    (num_gt > 0).then(|| flags.iter().filter(|&&f| f).count() as f64 / num_gt as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdMetrics {
    pub iou: f64,
    /// Per class; `None` for classes without GT.
    pub ap: Vec<Option<f64>>,
    pub recall: Vec<Option<f64>>,
    pub map: f64,
    pub ar: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub class_names: Vec<String>,
    pub num_gt: Vec<usize>,
    pub num_pred: Vec<usize>,
    pub thresholds: Vec<ThresholdMetrics>,
}

impl EvalReport {
    pub fn at(&self, iou: f64) -> Option<&ThresholdMetrics> {
        self.thresholds.iter().find(|t| t.iou == iou)
    }

    /// Classes with at least one GT instance.
    pub fn evaluated_classes(&self) -> usize {
        self.num_gt.iter().filter(|&&n| n > 0).count()
    }

    /// Tab-separated blocks, one per metric: a `#` title line, a header of
    /// class names plus the aggregate column, then one row of values.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        let header = |s: &mut String, title: &str, last: &str| {
            let _ = writeln!(s, "# {title}");
            let mut cols: Vec<&str> = self.class_names.iter().map(String::as_str).collect();
            cols.push(last);
            let _ = writeln!(s, "{}", cols.join("\t"));
        };
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
        for t in &self.thresholds {
            for (name, values, agg, agg_name) in
                [("AP", &t.ap, t.map, "mAP"), ("recall", &t.recall, t.ar, "AR")]
            {
                let label = format!("{agg_name}@{}", t.iou);
                header(&mut s, &format!("{name}@{}", t.iou), &label);
                let mut row: Vec<String> = values.iter().map(|&v| fmt(v)).collect();
                row.push(format!("{agg:.4}"));
                let _ = writeln!(s, "{}", row.join("\t"));
            }
        }
        for (title, counts) in [("ground truth", &self.num_gt), ("predictions", &self.num_pred)] {
            header(&mut s, title, "total");
            let mut row: Vec<String> = counts.iter().map(|n| n.to_string()).collect();
            row.push(counts.iter().sum::<usize>().to_string());
            let _ = writeln!(s, "{}", row.join("\t"));
        }
        s
    }
}

/// Pools detections of every scene per class and reports AP and recall at
/// each IoU threshold. `mAP`/`AR` average over classes with GT.
pub fn evaluate(
    detections: &[Vec<Detection>],
    ground_truth: &[Vec<LabeledBox>],
    thresholds: &[f64],
    class_names: &[String],
) -> Result<EvalReport> {
    if detections.len() != ground_truth.len() {
        return Err(Error::Invalid(format!(
            "{} detection lists for {} scenes",
            detections.len(),
            ground_truth.len()
        )));
    }
    let k = class_names.len();
    let bad_class = detections.iter().flatten().map(|d| d.class).chain(ground_truth.iter().flatten().map(|b| b.class)).find(|&c| c >= k);
    if let Some(c) = bad_class {
        return Err(Error::Invalid(format!("class id {c} outside {k} classes")));
    }
    if let Some(t) = thresholds.iter().find(|t| !(**t > 0.0 && **t <= 1.0)) {
        return Err(Error::Invalid(format!("IoU threshold {t} outside (0, 1]")));
    }
    let mut num_gt = vec![0; k];
    let mut num_pred = vec![0; k];
    for b in ground_truth.iter().flatten() {
        num_gt[b.class] += 1;
    }
    for d in detections.iter().flatten() {
        num_pred[d.class] += 1;
    }
    let mut out = Vec::with_capacity(thresholds.len());
    for &iou in thresholds {
        // (score, scene, index, tp) per class
        let mut pooled: Vec<Vec<(f64, usize, usize, bool)>> = vec![Vec::new(); k];
        for (s, (dets, gts)) in detections.iter().zip(ground_truth).enumerate() {
            for (i, (d, tp)) in dets.iter().zip(match_detections(dets, gts, iou)).enumerate() {
                pooled[d.class].push((d.score, s, i, tp));
            }
        }
        let mut ap = Vec::with_capacity(k);
        let mut rec = Vec::with_capacity(k);
        for (c, mut list) in pooled.into_iter().enumerate() {
            list.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            let flags: Vec<bool> = list.iter().map(|x| x.3).collect();
            ap.push(average_precision(&flags, num_gt[c]));
            rec.push(recall(&flags, num_gt[c]));
        }
        let mean = |v: &[Option<f64>]| {
            let vals: Vec<f64> = v.iter().flatten().copied().collect();
            if vals.is_empty() {
                0.0
            } else {
                vals.iter().sum::<f64>() / vals.len() as f64
            }
        };
        out.push(ThresholdMetrics { iou, map: mean(&ap), ar: mean(&rec), ap, recall: rec });
    }
    Ok(EvalReport { class_names: class_names.to_vec(), num_gt, num_pred, thresholds: out })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Box3D;
    use proptest::prelude::*;

    fn bx(c: [f64; 3]) -> Box3D {
        Box3D::new(c, [1.0; 3]).unwrap()
    }

    fn gt(c: [f64; 3], class: usize) -> LabeledBox {
        LabeledBox { bbox: bx(c), class }
    }

    fn det(c: [f64; 3], class: usize, score: f64) -> Detection {
        Detection { bbox: bx(c), class, score }
    }

    fn names(k: usize) -> Vec<String> {
        (0..k).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn matching_rules() {
        let g = [gt([0.0; 3], 0)];
        assert_eq!(match_detections(&[det([0.0; 3], 0, 0.5)], &g, 0.25), vec![true]);
        let two = [det([0.1, 0.0, 0.0], 0, 0.4), det([0.0; 3], 0, 0.9)];
        assert_eq!(match_detections(&two, &g, 0.25), vec![false, true]);
        assert_eq!(match_detections(&[det([0.0; 3], 1, 0.5)], &g, 0.25), vec![false]);
    }

    #[test]
    fn ap_and_recall_closed_forms() {
        assert_eq!(average_precision(&[true, true], 2), Some(1.0));
        assert_eq!(average_precision(&[false, false], 2), Some(0.0));
        assert!((average_precision(&[true, false, true], 2).unwrap() - 0.8333333333).abs() < 1e-6);
        assert_eq!(average_precision(&[], 3), Some(0.0));
        assert_eq!(average_precision(&[true], 0), None);
        assert_eq!(recall(&[true, false, true, false], 4), Some(0.5));
        assert_eq!(recall(&[false], 2), Some(0.0));
    }

    #[test]
    fn perfect_predictions_and_scene_pooling() {
        let gts = vec![vec![gt([0.0; 3], 0), gt([3.0, 0.0, 0.0], 1)], vec![gt([1.0; 3], 2)], vec![gt([5.0; 3], 0)]];
        let dets: Vec<Vec<Detection>> = gts.iter().map(|s| s.iter().map(|b| Detection { bbox: b.bbox, class: b.class, score: 0.9 }).collect()).collect();
        let r = evaluate(&dets, &gts, &DEFAULT_THRESHOLDS, &names(4)).unwrap();
        assert_eq!((r.at(0.25).unwrap().map, r.at(0.5).unwrap().map), (1.0, 1.0));
        assert_eq!(r.at(0.25).unwrap().ap[3], None);
        assert_eq!(r.evaluated_classes(), 3);
        let empty = evaluate(&[], &[], &DEFAULT_THRESHOLDS, &names(4)).unwrap();
        assert_eq!(empty.evaluated_classes(), 0);
    }

    #[test]
    fn tsv_rows_have_one_column_per_class_plus_aggregate() {
        let gts = vec![vec![gt([0.0; 3], 0)]];
        let dets = vec![vec![det([0.2, 0.0, 0.0], 0, 0.7)]];
        let r = evaluate(&dets, &gts, &DEFAULT_THRESHOLDS, &names(10)).unwrap();
        let tsv = r.to_tsv();
        for line in tsv.lines().filter(|l| !l.starts_with('#')) {
            assert_eq!(line.split('\t').count(), 11, "{line}");
        }
        assert!(tsv.contains("mAP@0.25") && tsv.contains("AR@0.5"));
    }

    fn scene_strategy() -> impl Strategy<Value = (Vec<LabeledBox>, Vec<Detection>)> {
        let b = (prop::array::uniform3(0.0..3.0f64), 0usize..3);
        (
            prop::collection::vec(b.clone().prop_map(|(c, k)| gt(c, k)), 0..5),
            prop::collection::vec((b, 0.0..1.0f64).prop_map(|((c, k), s)| det(c, k, s)), 0..8),
        )
    }

    proptest! {
        #[test]
        fn metric_invariants(scenes in prop::collection::vec(scene_strategy(), 1..4)) {
            let gts: Vec<_> = scenes.iter().map(|s| s.0.clone()).collect();
            let dets: Vec<_> = scenes.iter().map(|s| s.1.clone()).collect();
            let r = evaluate(&dets, &gts, &DEFAULT_THRESHOLDS, &names(3)).unwrap();
            let (lo, hi) = (r.at(0.25).unwrap(), r.at(0.5).unwrap());
            prop_assert!(hi.map <= lo.map + 1e-12 && hi.ar <= lo.ar + 1e-12);
            for t in &r.thresholds {
                let vals: Vec<f64> = t.ap.iter().flatten().copied().collect();
                if !vals.is_empty() {
                    prop_assert!((t.map - vals.iter().sum::<f64>() / vals.len() as f64).abs() < 1e-12);
                }
                prop_assert!(t.ap.iter().chain(&t.recall).flatten().all(|v| (0.0..=1.0).contains(v)));
            }

            // strictly monotone score transform leaves the report unchanged
            let squashed: Vec<Vec<Detection>> = dets.iter().map(|s| s.iter().map(|d| Detection { score: d.score.powi(3) * 0.5, ..*d }).collect()).collect();
            let r2 = evaluate(&squashed, &gts, &DEFAULT_THRESHOLDS, &names(3)).unwrap();
            prop_assert_eq!(&r.thresholds, &r2.thresholds);

            // reversing scene order changes nothing
            let (mut gr, mut dr) = (gts.clone(), dets.clone());
            gr.reverse();
            dr.reverse();
            let r3 = evaluate(&dr, &gr, &DEFAULT_THRESHOLDS, &names(3)).unwrap();
            for (a, b) in r.thresholds.iter().zip(&r3.thresholds) {
                prop_assert!((a.map - b.map).abs() < 1e-12 && (a.ar - b.ar).abs() < 1e-12);
            }
        }

        #[test]
        fn duplicating_a_false_positive_never_raises_ap(scene in scene_strategy()) {
            let (gts, dets) = scene;
            let flags = match_detections(&dets, &gts, 0.25);
            if let Some(i) = flags.iter().position(|f| !f) {
                let mut more = dets.clone();
                more.push(dets[i]);
                let a = evaluate(&[dets], std::slice::from_ref(&gts), &[0.25], &names(3)).unwrap();
                let b = evaluate(&[more], &[gts], &[0.25], &names(3)).unwrap();
                prop_assert!(b.thresholds[0].map <= a.thresholds[0].map + 1e-12);
            }
        }
    }
}
