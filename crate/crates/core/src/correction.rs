//! Target correction from teacher predictions.
//!
//! Two independent steps:
//!
//! * **Box correction.** Per class, corrected boxes start at the noisy
//!   targets. Each round assigns every prediction to the corrected box
//!   nearest to it, keeping the assignment only if the prediction is also
//!   within `distance_limit` of that target's *original* box. Each corrected
//!   box with at least one assigned prediction becomes the softmax-weighted
//!   (logits over temperature) per-coordinate average of those predictions.
//!   Rounds repeat until assignments repeat or no coordinate moves by
//!   `convergence_eps`, capped at `max_iterations`.
//! * **Label mining.** Predictions with probability `>= mining_threshold`
//!   survive class-wise NMS and are added as new targets unless they
//!   overlap a same-class target with IoU `> dedup_iou`.
//!
//! Box correction consumes the raw (pre-NMS) detections; NMS only runs
//! inside mining.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::{Annotation, ClassId, Dataset, Detection, Provenance};
use crate::error::{Error, Result};
use crate::geometry::{iou, nms, BBox, BoxDistance};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorrectionConfig {
    pub distance: BoxDistance,
    /// `None` disables box correction.
    pub distance_limit: Option<f64>,
    pub temperature: f64,
    /// `None` disables label mining.
    pub mining_threshold: Option<f64>,
    pub mining_nms_iou: f64,
    pub dedup_iou: f64,
    pub max_iterations: usize,
    pub convergence_eps: f64,
    /// Side of the fixed square boxes. Switches assignment to center
    /// distance normalized by the side and averages centers only.
    pub fixed_size: Option<f64>,
}

impl Default for CorrectionConfig {
    fn default() -> Self {
        CorrectionConfig {
            distance: BoxDistance::Iou,
            distance_limit: Some(0.6),
            temperature: 0.2,
            mining_threshold: None,
            mining_nms_iou: 0.5,
            dedup_iou: 0.5,
            max_iterations: 50,
            convergence_eps: 1e-6,
            fixed_size: None,
        }
    }
}

impl CorrectionConfig {
    /// Both submodules off.
    pub fn disabled() -> Self {
        CorrectionConfig {
            distance_limit: None,
            mining_threshold: None,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::config(format!(
                "softmax temperature must be positive, got {}",
                self.temperature
            )));
        }
        if let Some(d) = self.distance_limit {
            if !(d > 0.0) {
                return Err(Error::config(format!("distance limit must be positive, got {d}")));
            }
        }
        if let Some(t) = self.mining_threshold {
            if !unit(t) {
                return Err(Error::config(format!("mining threshold {t} outside [0, 1]")));
            }
        }
        if !unit(self.mining_nms_iou) || !unit(self.dedup_iou) {
            return Err(Error::config("mining IoU thresholds must lie in [0, 1]"));
        }
        if self.max_iterations == 0 {
            return Err(Error::config("max_iterations must be at least 1"));
        }
        if !(self.convergence_eps > 0.0) {
            return Err(Error::config("convergence_eps must be positive"));
        }
        if let Some(s) = self.fixed_size {
            if !(s > 0.0) || !s.is_finite() {
                return Err(Error::config(format!("fixed box size must be positive, got {s}")));
            }
        }
        self.distance.validate()
    }

    /// Distance used for assignment; the fixed-size variant overrides it.
    pub fn effective_distance(&self) -> BoxDistance {
        match self.fixed_size {
            Some(norm) => BoxDistance::CenterNormalized { norm },
            None => self.distance,
        }
    }
}

/// Per-image correction diagnostics.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ImageReport {
    /// Largest number of assignment/update rounds over the classes.
    pub iterations: usize,
    pub converged: bool,
    /// Number of predictions assigned to each target, in target order.
    pub assignment_sizes: Vec<usize>,
    pub mined: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ImageReportEntry {
    pub image_id: String,
    #[serde(flatten)]
    pub report: ImageReport,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorrectionReport {
    pub images: Vec<ImageReportEntry>,
}

impl CorrectionReport {
    pub fn total_mined(&self) -> usize {
        self.images.iter().map(|e| e.report.mined).sum()
    }

    pub fn all_converged(&self) -> bool {
        self.images.iter().all(|e| e.report.converged)
    }
}

struct ClassOutcome<T> {
    boxes: Vec<BBox<T>>,
    sizes: Vec<usize>,
    iterations: usize,
    converged: bool,
}

/// Nearest corrected box for each prediction (ties to the lowest index),
/// kept only when the prediction lies within `limit` of that target's
/// original box.
fn assign<T: Scalar>(
    current: &[BBox<T>],
    original: &[BBox<T>],
    preds: &[&Detection<T>],
    dist: BoxDistance,
    limit: T,
) -> Vec<Option<usize>> {
    preds
        .iter()
        .map(|p| {
            let mut best = 0;
            let mut best_d = dist.eval(&current[0], &p.bbox);
            for (t, c) in current.iter().enumerate().skip(1) {
                let d = dist.eval(c, &p.bbox);
                if d < best_d {
                    best = t;
                    best_d = d;
                }
            }
            (dist.eval(&original[best], &p.bbox) <= limit).then_some(best)
        })
        .collect()
}

fn weighted_update<T: Scalar>(
    members: &[&Detection<T>],
    temperature: T,
    fixed_size: Option<T>,
) -> BBox<T> {
    let scaled: Vec<T> = members.iter().map(|p| p.logit / temperature).collect();
    let top = scaled.iter().copied().fold(T::neg_infinity(), T::max);
    let weights: Vec<T> = scaled.iter().map(|s| (*s - top).exp()).collect();
    let total: T = weights.iter().copied().sum();
    match fixed_size {
        Some(side) => {
            let (mut cx, mut cy) = (T::zero(), T::zero());
            for (w, p) in weights.iter().zip(members) {
                let (x, y) = p.bbox.center();
                cx = cx + *w * x;
                cy = cy + *w * y;
            }
            BBox::from_center(cx / total, cy / total, side, side)
        }
        None => {
            let mut acc = [T::zero(); 4];
            for (w, p) in weights.iter().zip(members) {
                for (a, v) in acc.iter_mut().zip(p.bbox.coords()) {
                    *a = *a + *w * v;
                }
            }
            BBox::from_coords(acc.map(|a| a / total))
        }
    }
}

fn correct_class<T: Scalar>(
    original: &[BBox<T>],
    preds: &[&Detection<T>],
    cfg: &CorrectionConfig,
    limit: T,
) -> ClassOutcome<T> {
    let n = original.len();
    let mut current = original.to_vec();
    if preds.is_empty() {
        return ClassOutcome {
            boxes: current,
            sizes: vec![0; n],
            iterations: 0,
            converged: true,
        };
    }
    let dist = cfg.effective_distance();
    let temperature = T::lit(cfg.temperature);
    let fixed = cfg.fixed_size.map(T::lit);
    let eps = T::lit(cfg.convergence_eps);

    let mut applied: Option<Vec<Option<usize>>> = None;
    let mut iterations = 0;
    let converged = loop {
        let assignment = assign(&current, original, preds, dist, limit);
        // The update depends only on the assignment, so a repeat is a fixed point.
        if applied.as_ref() == Some(&assignment) || assignment.iter().all(Option::is_none) {
            if applied.is_none() {
                applied = Some(assignment);
            }
            break true;
        }
        if iterations == cfg.max_iterations {
            break false;
        }
        let mut moved = T::zero();
        for (t, c) in current.iter_mut().enumerate() {
            let members: Vec<&Detection<T>> = preds
                .iter()
                .zip(&assignment)
                .filter(|(_, a)| **a == Some(t))
                .map(|(p, _)| *p)
                .collect();
            if members.is_empty() {
                continue;
            }
            let next = weighted_update(&members, temperature, fixed);
            moved = moved.max(next.max_abs_diff(c));
            *c = next;
        }
        iterations += 1;
        applied = Some(assignment);
        if moved < eps {
            break true;
        }
    };

    let mut sizes = vec![0; n];
    for t in applied.iter().flatten().flatten() {
        sizes[*t] += 1;
    }
    ClassOutcome {
        boxes: current,
        sizes,
        iterations,
        converged,
    }
}

fn class_ids<T>(targets: &[Annotation<T>]) -> Vec<ClassId> {
    let mut labels: Vec<ClassId> = targets.iter().map(|t| t.label).collect();
    labels.sort_unstable();
    labels.dedup();
    labels
}

/// Box correction. Output has the same length, order and labels as
/// `targets`; changed boxes are marked [`Provenance::Corrected`].
pub fn correct_boxes<T: Scalar>(
    targets: &[Annotation<T>],
    preds: &[Detection<T>],
    cfg: &CorrectionConfig,
) -> Result<(Vec<Annotation<T>>, ImageReport)> {
    cfg.validate()?;
    let limit = cfg
        .distance_limit
        .ok_or_else(|| Error::config("box correction needs a distance limit"))?;
    let limit = T::lit(limit);

    let mut out = targets.to_vec();
    let mut report = ImageReport {
        iterations: 0,
        converged: true,
        assignment_sizes: vec![0; targets.len()],
        mined: 0,
    };
    for label in class_ids(targets) {
        let idx: Vec<usize> = (0..targets.len()).filter(|&i| targets[i].label == label).collect();
        let original: Vec<BBox<T>> = idx.iter().map(|&i| targets[i].bbox).collect();
        let class_preds: Vec<&Detection<T>> = preds.iter().filter(|p| p.label == label).collect();
        let outcome = correct_class(&original, &class_preds, cfg, limit);
        report.iterations = report.iterations.max(outcome.iterations);
        report.converged &= outcome.converged;
        for (k, &i) in idx.iter().enumerate() {
            report.assignment_sizes[i] = outcome.sizes[k];
            if outcome.boxes[k] != targets[i].bbox {
                out[i].bbox = outcome.boxes[k];
                out[i].provenance = Provenance::Corrected;
            }
        }
    }
    Ok((out, report))
}

/// Label mining: threshold, class-wise NMS, then same-class overlap
/// filtering against `targets`. Targets are always kept, mined boxes follow.
pub fn mine_labels<T: Scalar>(
    targets: &[Annotation<T>],
    preds: &[Detection<T>],
    cfg: &CorrectionConfig,
) -> Result<Vec<Annotation<T>>> {
    let tau = cfg
        .mining_threshold
        .ok_or_else(|| Error::config("label mining needs a mining threshold"))?;
    let tau = T::lit(tau);
    let dedup = T::lit(cfg.dedup_iou);
    let confident: Vec<Detection<T>> = preds.iter().filter(|p| p.prob >= tau).cloned().collect();
    let survivors = nms(&confident, T::lit(cfg.mining_nms_iou));
    let mut out = targets.to_vec();
    out.extend(
        survivors
            .iter()
            .filter(|d| {
                !targets
                    .iter()
                    .any(|t| t.label == d.label && iou(&t.bbox, &d.bbox) > dedup)
            })
            .map(|d| d.to_annotation(Provenance::Mined)),
    );
    Ok(out)
}

/// Box correction (if enabled) followed by mining against the corrected
/// boxes (if enabled).
pub fn correct_targets<T: Scalar>(
    targets: &[Annotation<T>],
    preds: &[Detection<T>],
    cfg: &CorrectionConfig,
) -> Result<(Vec<Annotation<T>>, ImageReport)> {
    cfg.validate()?;
    let (corrected, mut report) = if cfg.distance_limit.is_some() {
        correct_boxes(targets, preds, cfg)?
    } else {
        let report = ImageReport {
            iterations: 0,
            converged: true,
            assignment_sizes: vec![0; targets.len()],
            mined: 0,
        };
        (targets.to_vec(), report)
    };
    if cfg.mining_threshold.is_none() {
        return Ok((corrected, report));
    }
    let n = corrected.len();
    let mined = mine_labels(&corrected, preds, cfg)?;
    report.mined = mined.len() - n;
    Ok((mined, report))
}

/// Corrects every image of `targets` with the detections of the same image
/// id in `detections`. Images run in parallel on the current rayon pool.
pub fn correct_dataset<T: Scalar>(
    targets: &Dataset<T>,
    detections: &Dataset<T>,
    cfg: &CorrectionConfig,
) -> Result<(Dataset<T>, CorrectionReport)> {
    cfg.validate()?;
    let stray = detections.ids_missing_from(targets);
    if !stray.is_empty() {
        return Err(Error::UnknownImages(stray));
    }
    let by_id = detections.index_by_id();
    let results: Result<Vec<_>> = targets
        .images
        .par_iter()
        .map(|im| {
            let preds = by_id
                .get(im.id.as_str())
                .map(|&i| detections.images[i].detections())
                .unwrap_or(&[]);
            correct_targets(&im.annotations, preds, cfg)
        })
        .collect();
    let mut out = targets.clone();
    let mut report = CorrectionReport::default();
    for (im, (anns, r)) in out.images.iter_mut().zip(results?) {
        im.annotations = anns;
        im.detections = None;
        report.images.push(ImageReportEntry {
            image_id: im.id.clone(),
            report: r,
        });
    }
    Ok((out, report))
}
