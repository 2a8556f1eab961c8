//! Desk-scale surrogate of teacher-student training with target correction.
//!
//! No network is trained. The teacher is a [`SimDetectorParams`] vector; each
//! iteration it predicts on a weak view of every image, the predictions are
//! mapped back to the annotation frame and used to correct the noisy
//! targets, and the corrected targets are aligned to a strong view. The
//! student's parameters are interpolated between a noisy-init and an oracle
//! setting by the quality of the corrected targets, and the teacher follows
//! the student by EMA.

mod detector;
mod ema;
mod scenario;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use detector::{simulate_predictions, SimDetectorParams, SpuriousShape};
pub use ema::{ema_update, EmaState};
pub use scenario::{generate, generate_truth, SceneConfig, Scenario};

use crate::correction::{correct_targets, CorrectionConfig};
use crate::datamodel::{Annotation, Detection, ImageRecord};
use crate::error::{Error, Result};
use crate::evaluation::{average_precision, quality_stats_lists, AP50_IOU};
use crate::geometry::GeoTransform;
use crate::noise::{stream_rng, NoiseConfig, Sparsity};

/// How the student's detector parameters follow target quality.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImprovementSchedule {
    pub noisy_init: SimDetectorParams,
    pub oracle: SimDetectorParams,
}

impl Default for ImprovementSchedule {
    fn default() -> Self {
        ImprovementSchedule {
            noisy_init: SimDetectorParams {
                localization_sigma: 10.0,
                recall: 0.4,
                fp_rate: 2.0,
                score_sharpness: 4.0,
            },
            oracle: SimDetectorParams {
                localization_sigma: 1.0,
                recall: 0.95,
                fp_rate: 0.1,
                score_sharpness: 8.0,
            },
        }
    }
}

impl ImprovementSchedule {
    /// Student parameters for a given target quality in `[0, 1]`.
    pub fn student(&self, target_quality: f64) -> SimDetectorParams {
        self.noisy_init.lerp(&self.oracle, target_quality)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoopConfig {
    pub iterations: usize,
    pub keep_rate: f64,
    pub correction: CorrectionConfig,
    pub noise: NoiseConfig,
    pub scene: SceneConfig,
    pub schedule: ImprovementSchedule,
    /// Seeds teacher predictions and view sampling.
    pub seed: u64,
}

impl Default for LoopConfig {
    fn default() -> Self {
        LoopConfig {
            iterations: 20,
            keep_rate: 0.95,
            correction: CorrectionConfig {
                distance_limit: Some(0.6),
                mining_threshold: Some(0.8),
                ..Default::default()
            },
            noise: NoiseConfig {
                box_noise: 0.4,
                sparsity: Sparsity::Extreme,
                superfluous: None,
                seed: 0,
            },
            scene: SceneConfig::default(),
            schedule: ImprovementSchedule::default(),
            seed: 0,
        }
    }
}

impl LoopConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::config("loop needs at least one iteration"));
        }
        if !(0.0..=1.0).contains(&self.keep_rate) {
            return Err(Error::config(format!("keep rate {} outside [0, 1]", self.keep_rate)));
        }
        self.correction.validate()?;
        self.noise.validate()?;
        self.scene.validate()?;
        self.schedule.noisy_init.validate()?;
        self.schedule.oracle.validate()
    }
}

/// One line of the loop trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: usize,
    /// Mean best IoU of each true box against the corrected targets.
    pub target_quality: f64,
    /// Mean best IoU of each corrected target against the true boxes.
    pub target_precision: f64,
    pub teacher_ap50: f64,
    pub targets: usize,
    pub corrected: usize,
    pub mined: usize,
    pub converged: bool,
    /// Largest round-trip error of the strong-view alignment.
    pub alignment_error: f64,
    pub teacher: SimDetectorParams,
    pub student: SimDetectorParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopTrace {
    /// Target quality of the uncorrected noisy annotations.
    pub noisy_quality: f64,
    pub records: Vec<TraceRecord>,
}

impl LoopTrace {
    /// One JSON object per iteration, newline-terminated.
    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("trace record serializes") + "\n")
            .collect()
    }

    pub fn final_quality(&self) -> f64 {
        self.records.last().map(|r| r.target_quality).unwrap_or(self.noisy_quality)
    }
}

/// State handed to the per-iteration hook: corrected targets as
/// annotations and teacher predictions as detections, in the original frame.
pub struct IterationSnapshot<'a> {
    pub iteration: usize,
    pub images: &'a [ImageRecord<f64>],
    pub truth: &'a [ImageRecord<f64>],
    pub class_names: &'a [String],
}

struct ImageStep {
    preds: Vec<Detection<f64>>,
    targets: Vec<Annotation<f64>>,
    mined: usize,
    converged: bool,
    alignment_error: f64,
}

fn flip_or_identity<R: Rng + ?Sized>(width: f64, rng: &mut R) -> GeoTransform<f64> {
    if rng.random_bool(0.5) {
        GeoTransform::horizontal_flip(width)
    } else {
        GeoTransform::identity()
    }
}

fn step_image(
    truth: &ImageRecord<f64>,
    noisy: &ImageRecord<f64>,
    teacher: &SimDetectorParams,
    cfg: &LoopConfig,
    iteration: usize,
) -> Result<ImageStep> {
    let size = truth
        .size
        .ok_or_else(|| Error::config(format!("image '{}' has no size", truth.id)))?;
    let width = size.width as f64;
    let mut view_rng = stream_rng(cfg.seed, &format!("view/{iteration}"), &truth.id);
    let weak = flip_or_identity(width, &mut view_rng);
    let strong = flip_or_identity(width, &mut view_rng);

    // Teacher sees the weak view; its output is mapped back to the annotation frame.
    let truth_weak: Vec<Annotation<f64>> = truth
        .annotations
        .iter()
        .map(|a| Annotation { bbox: weak.apply(&a.bbox), ..a.clone() })
        .collect();
    let mut det_rng = stream_rng(cfg.seed, &format!("teacher/{iteration}"), &truth.id);
    let spurious = SpuriousShape {
        min_side: cfg.scene.min_side,
        max_side: cfg.scene.max_side,
        num_classes: cfg.scene.num_classes,
    };
    let unweak = weak.inverse();
    let preds: Vec<Detection<f64>> = simulate_predictions(&truth_weak, size, teacher, &spurious, &mut det_rng)?
        .into_iter()
        .map(|d| Detection { bbox: unweak.apply(&d.bbox), ..d })
        .collect();

    let (targets, report) = correct_targets(&noisy.annotations, &preds, &cfg.correction)?;

    let to_student = weak.then(&strong);
    let from_student = to_student.inverse();
    let alignment_error = targets
        .iter()
        .map(|a| from_student.apply(&to_student.apply(&a.bbox)).max_abs_diff(&a.bbox))
        .fold(0.0, f64::max);

    Ok(ImageStep {
        preds,
        targets,
        mined: report.mined,
        converged: report.converged,
        alignment_error,
    })
}

pub fn run_loop(scenario: &Scenario, cfg: &LoopConfig) -> Result<LoopTrace> {
    run_loop_with(scenario, cfg, |_| Ok(()))
}

/// Runs the loop, calling `on_iteration` after every iteration. Images of an
/// iteration run on the current rayon pool; the result does not depend on
/// the pool size.
pub fn run_loop_with<F>(scenario: &Scenario, cfg: &LoopConfig, mut on_iteration: F) -> Result<LoopTrace>
where
    F: FnMut(&IterationSnapshot<'_>) -> Result<()>,
{
    cfg.validate()?;
    let truth = &scenario.truth;
    let noisy = &scenario.noisy;
    let noisy_by_id = noisy.index_by_id();
    let missing: Vec<String> = truth
        .images
        .iter()
        .filter(|im| !noisy_by_id.contains_key(im.id.as_str()))
        .map(|im| im.id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::UnknownImages(missing));
    }
    let pairs: Vec<(&ImageRecord<f64>, &ImageRecord<f64>)> = truth
        .images
        .iter()
        .map(|im| (im, &noisy.images[noisy_by_id[im.id.as_str()]]))
        .collect();
    let truth_lists: Vec<&[Annotation<f64>]> = truth.images.iter().map(|im| im.annotations.as_slice()).collect();
    let noisy_lists: Vec<&[Annotation<f64>]> = pairs.iter().map(|(_, n)| n.annotations.as_slice()).collect();
    let noisy_quality = quality_stats_lists(&truth_lists, &noisy_lists).gt_to_annotations;

    let schedule = cfg.schedule;
    let init = schedule.noisy_init.to_vec();
    let mut ema = EmaState::new(init.clone(), init, cfg.keep_rate)?;
    let mut records = Vec::with_capacity(cfg.iterations);

    for iteration in 0..cfg.iterations {
        let teacher = SimDetectorParams::from_slice(&ema.teacher)?;
        let steps: Result<Vec<ImageStep>> = pairs
            .par_iter()
            .map(|(t, n)| step_image(t, n, &teacher, cfg, iteration))
            .collect();
        let steps = steps?;

        let target_lists: Vec<&[Annotation<f64>]> = steps.iter().map(|s| s.targets.as_slice()).collect();
        let pred_lists: Vec<&[Detection<f64>]> = steps.iter().map(|s| s.preds.as_slice()).collect();
        let quality = quality_stats_lists(&truth_lists, &target_lists);
        let ap = average_precision(&truth_lists, &pred_lists, AP50_IOU);

        let student = schedule.student(quality.gt_to_annotations);
        ema.student = student.to_vec();
        ema.update()?;

        let images: Vec<ImageRecord<f64>> = pairs
            .iter()
            .zip(&steps)
            .map(|((_, n), s)| ImageRecord {
                annotations: s.targets.clone(),
                detections: Some(s.preds.clone()),
                ..(*n).clone()
            })
            .collect();
        on_iteration(&IterationSnapshot {
            iteration,
            images: &images,
            truth: &truth.images,
            class_names: &truth.class_names,
        })?;

        let corrected = steps
            .iter()
            .flat_map(|s| &s.targets)
            .filter(|a| a.provenance == crate::datamodel::Provenance::Corrected)
            .count();
        records.push(TraceRecord {
            iteration,
            target_quality: quality.gt_to_annotations,
            target_precision: quality.annotations_to_gt,
            teacher_ap50: ap.map,
            targets: steps.iter().map(|s| s.targets.len()).sum(),
            corrected,
            mined: steps.iter().map(|s| s.mined).sum(),
            converged: steps.iter().all(|s| s.converged),
            alignment_error: steps.iter().map(|s| s.alignment_error).fold(0.0, f64::max),
            teacher,
            student,
        });
    }
    Ok(LoopTrace { noisy_quality, records })
}
