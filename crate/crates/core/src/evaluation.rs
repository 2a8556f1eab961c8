//! Detection metrics: AP at IoU 0.5 with all-point interpolation,
//! bidirectional best-match IoU between box sets, and a simplified
//! error-source breakdown.

use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::datamodel::{Annotation, ClassId, Dataset, Detection, ImageRecord};
use crate::error::{Error, Result};
use crate::geometry::{iou, score_order};
use crate::scalar::Scalar;

pub const AP50_IOU: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassEval {
    pub class_id: ClassId,
    pub name: String,
    /// `None` for classes without ground truth.
    pub ap: Option<f64>,
    pub num_gt: usize,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub iou_threshold: f64,
    /// Mean AP over classes with at least one ground-truth box.
    pub map: f64,
    pub per_class: Vec<ClassEval>,
}

impl EvalResult {
    pub fn ap(&self, class: ClassId) -> Option<f64> {
        self.per_class.iter().find(|c| c.class_id == class).and_then(|c| c.ap)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("class_id,name,ap,num_gt,tp,fp,fn\n");
        for c in &self.per_class {
            let ap = c.ap.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                c.class_id,
                csv_field(&c.name),
                ap,
                c.num_gt,
                c.tp,
                c.fp,
                c.fn_
            );
        }
        s
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Predictions of an image: its detections, or its annotations scored 1.0
/// when the record carries no detection list.
pub fn predictions_of<T: Scalar>(im: &ImageRecord<T>) -> Vec<Detection<T>> {
    match &im.detections {
        Some(d) => d.clone(),
        None => im
            .annotations
            .iter()
            .map(|a| Detection::from_prob(a.bbox, a.label, T::one()))
            .collect(),
    }
}

/// Aligns predictions to ground-truth images by id. Prediction images
/// missing from the ground truth are an error.
fn align<T: Scalar>(gt: &Dataset<T>, preds: &Dataset<T>) -> Result<Vec<Vec<Detection<T>>>> {
    let stray = preds.ids_missing_from(gt);
    if !stray.is_empty() {
        return Err(Error::UnknownImages(stray));
    }
    let by_id = preds.index_by_id();
    Ok(gt
        .images
        .iter()
        .map(|im| {
            by_id
                .get(im.id.as_str())
                .map(|&i| predictions_of(&preds.images[i]))
                .unwrap_or_default()
        })
        .collect())
}

/// AP50 of `preds` against the annotations of `gt`.
pub fn evaluate_ap50<T: Scalar>(gt: &Dataset<T>, preds: &Dataset<T>) -> Result<EvalResult> {
    let aligned = align(gt, preds)?;
    let gt_lists: Vec<&[Annotation<T>]> = gt.images.iter().map(|im| im.annotations.as_slice()).collect();
    let pred_lists: Vec<&[Detection<T>]> = aligned.iter().map(Vec::as_slice).collect();
    let mut res = average_precision(&gt_lists, &pred_lists, T::lit(AP50_IOU));
    for c in &mut res.per_class {
        if let Some(name) = gt.class_names.get(c.class_id.0 as usize - 1) {
            c.name = name.clone();
        }
    }
    Ok(res)
}

/// Per-class AP over images given as parallel lists of ground truth and
/// predictions.
///
/// Predictions of a class are visited by descending probability across all
/// images (ties keep image order, then list order). Each one matches the
/// unmatched ground-truth box of its image and class with the highest IoU,
/// if that IoU is `>= iou_threshold` (ties to the lower index). The
/// precision envelope is integrated over every recall step.
pub fn average_precision<T: Scalar>(
    gt: &[&[Annotation<T>]],
    preds: &[&[Detection<T>]],
    iou_threshold: T,
) -> EvalResult {
    assert_eq!(gt.len(), preds.len(), "ground truth and predictions must align");
    let max_label = gt
        .iter()
        .flat_map(|g| g.iter().map(|a| a.label.0))
        .chain(preds.iter().flat_map(|p| p.iter().map(|d| d.label.0)))
        .max()
        .unwrap_or(0);

    let mut per_class = Vec::new();
    for label in (1..=max_label).map(ClassId) {
        let num_gt: usize = gt.iter().map(|g| g.iter().filter(|a| a.label == label).count()).sum();
        let flat: Vec<(usize, &Detection<T>)> = preds
            .iter()
            .enumerate()
            .flat_map(|(i, p)| p.iter().filter(|d| d.label == label).map(move |d| (i, d)))
            .collect();
        let order = score_order(flat.iter().map(|(_, d)| d.prob));

        let mut matched: Vec<Vec<bool>> = gt.iter().map(|g| vec![false; g.len()]).collect();
        let mut hits = Vec::with_capacity(order.len());
        for k in order {
            let (img, d) = flat[k];
            let mut best: Option<(usize, T)> = None;
            for (j, g) in gt[img].iter().enumerate() {
                if g.label != label || matched[img][j] {
                    continue;
                }
                let v = iou(&g.bbox, &d.bbox);
                if v >= iou_threshold && best.is_none_or(|(_, b)| v > b) {
                    best = Some((j, v));
                }
            }
            if let Some((j, _)) = best {
                matched[img][j] = true;
            }
            hits.push(best.is_some());
        }
        let tp = hits.iter().filter(|h| **h).count();
        let ap = (num_gt > 0).then(|| interpolated_ap(&hits, num_gt));
        per_class.push(ClassEval {
            class_id: label,
            name: format!("class_{}", label.0),
            ap,
            num_gt,
            tp,
            fp: hits.len() - tp,
            fn_: num_gt - tp,
        });
    }
    let aps: Vec<f64> = per_class.iter().filter_map(|c| c.ap).collect();
    let map = if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    };
    EvalResult {
        iou_threshold: iou_threshold.as_f64(),
        map,
        per_class,
    }
}

/// All-point interpolated AP from a ranked hit list.
fn interpolated_ap(hits: &[bool], num_gt: usize) -> f64 {
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(hits.len());
    let mut precision = Vec::with_capacity(hits.len());
    for (i, &h) in hits.iter().enumerate() {
        tp += h as usize;
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    ap
}

/// Mean best-match IoU in both directions between two box sets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityStats {
    /// Mean over ground-truth boxes of their best IoU with an annotation.
    pub gt_to_annotations: f64,
    /// Mean over annotation boxes of their best IoU with a ground-truth box.
    pub annotations_to_gt: f64,
    pub num_gt: usize,
    pub num_annotations: usize,
    /// False when there are no ground-truth boxes; the mean is then reported as 0.
    pub gt_to_annotations_defined: bool,
    /// False when there are no annotation boxes; the mean is then reported as 0.
    pub annotations_to_gt_defined: bool,
}

fn mean_best_iou<T: Scalar>(from: &[&[Annotation<T>]], to: &[&[Annotation<T>]]) -> (f64, usize) {
    let mut sum = 0.0;
    let mut n = 0;
    for (f, t) in from.iter().zip(to) {
        for a in f.iter() {
            sum += t
                .iter()
                .map(|b| iou(&a.bbox, &b.bbox).as_f64())
                .fold(0.0, f64::max);
            n += 1;
        }
    }
    if n == 0 {
        (0.0, 0)
    } else {
        (sum / n as f64, n)
    }
}

/// Class labels are ignored. Images are matched by id; an image present in
/// only one dataset contributes boxes with best IoU 0.
pub fn quality_stats<T: Scalar>(ground_truth: &Dataset<T>, annotations: &Dataset<T>) -> QualityStats {
    let mut ids: Vec<&str> = ground_truth.images.iter().map(|im| im.id.as_str()).collect();
    for im in &annotations.images {
        if ground_truth.image(&im.id).is_none() {
            ids.push(im.id.as_str());
        }
    }
    let boxes = |ds: &'_ Dataset<T>, id: &str| -> Vec<Annotation<T>> {
        ds.image(id).map(|im| im.annotations.clone()).unwrap_or_default()
    };
    let gt: Vec<Vec<Annotation<T>>> = ids.iter().map(|id| boxes(ground_truth, id)).collect();
    let an: Vec<Vec<Annotation<T>>> = ids.iter().map(|id| boxes(annotations, id)).collect();
    let gt_refs: Vec<&[Annotation<T>]> = gt.iter().map(Vec::as_slice).collect();
    let an_refs: Vec<&[Annotation<T>]> = an.iter().map(Vec::as_slice).collect();
    quality_stats_lists(&gt_refs, &an_refs)
}

/// [`quality_stats`] over aligned per-image lists.
pub fn quality_stats_lists<T: Scalar>(gt: &[&[Annotation<T>]], annotations: &[&[Annotation<T>]]) -> QualityStats {
    let (g2a, num_gt) = mean_best_iou(gt, annotations);
    let (a2g, num_annotations) = mean_best_iou(annotations, gt);
    QualityStats {
        gt_to_annotations: g2a,
        annotations_to_gt: a2g,
        num_gt,
        num_annotations,
        gt_to_annotations_defined: num_gt > 0,
        annotations_to_gt_defined: num_annotations > 0,
    }
}

/// Exclusive per-prediction error categories plus missed ground truth.
///
/// Foreground threshold 0.5 and background threshold 0.1. A prediction is,
/// in order: a true positive (same class, IoU > 0.5 with an unmatched box);
/// a duplicate (same class, IoU > 0.5 only with matched boxes); a
/// classification error (other class, IoU > 0.5); a localization error
/// (same class, IoU in (0.1, 0.5]); background (IoU <= 0.1 with every box).
/// The remaining case, another class with IoU in (0.1, 0.5], is counted as a
/// classification error.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBreakdown {
    pub true_positives: usize,
    pub localization: usize,
    pub duplicate: usize,
    pub background: usize,
    pub classification: usize,
    pub missed: usize,
    pub total_gt: usize,
    pub total_predictions: usize,
}

const FG_IOU: f64 = 0.5;
const BG_IOU: f64 = 0.1;

pub fn error_breakdown<T: Scalar>(
    gt: &Dataset<T>,
    preds: &Dataset<T>,
    score_floor: f64,
) -> Result<ErrorBreakdown> {
    let aligned = align(gt, preds)?;
    let gt_lists: Vec<&[Annotation<T>]> = gt.images.iter().map(|im| im.annotations.as_slice()).collect();
    let pred_lists: Vec<&[Detection<T>]> = aligned.iter().map(Vec::as_slice).collect();
    Ok(error_breakdown_lists(&gt_lists, &pred_lists, T::lit(score_floor)))
}

pub fn error_breakdown_lists<T: Scalar>(
    gt: &[&[Annotation<T>]],
    preds: &[&[Detection<T>]],
    score_floor: T,
) -> ErrorBreakdown {
    let fg = T::lit(FG_IOU);
    let bg = T::lit(BG_IOU);
    let flat: Vec<(usize, &Detection<T>)> = preds
        .iter()
        .enumerate()
        .flat_map(|(i, p)| p.iter().filter(|d| d.prob >= score_floor).map(move |d| (i, d)))
        .collect();
    let order = score_order(flat.iter().map(|(_, d)| d.prob));
    let mut matched: Vec<Vec<bool>> = gt.iter().map(|g| vec![false; g.len()]).collect();
    let mut out = ErrorBreakdown {
        total_gt: gt.iter().map(|g| g.len()).sum(),
        total_predictions: flat.len(),
        ..Default::default()
    };
    for k in order {
        let (img, d) = flat[k];
        let mut best_free: Option<(usize, T)> = None;
        let mut best_same = T::zero();
        let mut best_other = T::zero();
        for (j, g) in gt[img].iter().enumerate() {
            let v = iou(&g.bbox, &d.bbox);
            if g.label == d.label {
                best_same = best_same.max(v);
                if !matched[img][j] && v > fg && best_free.is_none_or(|(_, b)| v > b) {
                    best_free = Some((j, v));
                }
            } else {
                best_other = best_other.max(v);
            }
        }
        if let Some((j, _)) = best_free {
            matched[img][j] = true;
            out.true_positives += 1;
        } else if best_same > fg {
            out.duplicate += 1;
        } else if best_other > fg {
            out.classification += 1;
        } else if best_same > bg {
            out.localization += 1;
        } else if best_other <= bg {
            out.background += 1;
        } else {
            out.classification += 1;
        }
    }
    out.missed = out.total_gt - out.true_positives;
    out
}
