//! Synthetic scenes: hidden ground truth plus its noisy annotation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{Annotation, ClassId, Dataset, ImageRecord};
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::noise::{apply_noise, stream_rng, NoiseConfig, NoiseSummary};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub images: usize,
    pub width: u32,
    pub height: u32,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_side: f64,
    pub max_side: f64,
    pub num_classes: u32,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            images: 16,
            width: 512,
            height: 512,
            min_objects: 3,
            max_objects: 8,
            min_side: 32.0,
            max_side: 128.0,
            num_classes: 3,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.images == 0 || self.width == 0 || self.height == 0 {
            return Err(Error::config("scene needs at least one non-empty image"));
        }
        if self.min_objects > self.max_objects || self.num_classes == 0 {
            return Err(Error::config("scene object count range or class count invalid"));
        }
        let fits = self.max_side < self.width.min(self.height) as f64;
        if !(self.min_side > 0.0 && self.min_side <= self.max_side && fits) {
            return Err(Error::config("scene object sides must satisfy 0 < min <= max < image side"));
        }
        Ok(())
    }
}

/// Hidden truth and the noisy annotations derived from it. Only `noisy`
/// (and detections) may be shown to correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub truth: Dataset<f64>,
    pub noisy: Dataset<f64>,
    pub noise: NoiseSummary,
}

impl Scenario {
    pub fn from_truth(truth: Dataset<f64>, noise: &NoiseConfig) -> Result<Self> {
        truth.validate()?;
        if truth.images.iter().any(|im| im.size.is_none()) {
            return Err(Error::config("scenario truth images need sizes"));
        }
        let (noisy, summary) = apply_noise(&truth, noise)?;
        Ok(Scenario {
            truth,
            noisy,
            noise: summary,
        })
    }
}

/// Draws non-overlapping objects per image (rejection sampling; an image
/// may end up with fewer objects than drawn if space runs out).
pub fn generate_truth(cfg: &SceneConfig, seed: u64) -> Result<Dataset<f64>> {
    cfg.validate()?;
    let names = (1..=cfg.num_classes).map(|k| format!("class_{k}")).collect();
    let mut ds = Dataset::new(names);
    for i in 0..cfg.images {
        let id = format!("scene_{i:04}");
        let mut rng = stream_rng(seed, "scene", &id);
        let mut im = ImageRecord::new(id, cfg.width, cfg.height);
        let want = rng.random_range(cfg.min_objects..=cfg.max_objects);
        let mut attempts = 0;
        while im.annotations.len() < want && attempts < 200 * want.max(1) {
            attempts += 1;
            let w = rng.random_range(cfg.min_side..=cfg.max_side);
            let h = rng.random_range(cfg.min_side..=cfg.max_side);
            let x = rng.random_range(0.0..=cfg.width as f64 - w);
            let y = rng.random_range(0.0..=cfg.height as f64 - h);
            let label = ClassId(rng.random_range(1..=cfg.num_classes));
            let bbox = BBox::from_xywh(x, y, w, h);
            if im.annotations.iter().all(|a| iou(&a.bbox, &bbox) == 0.0) {
                im.annotations.push(Annotation::new(bbox, label));
            }
        }
        ds.images.push(im);
    }
    Ok(ds)
}

pub fn generate(scene: &SceneConfig, noise: &NoiseConfig) -> Result<Scenario> {
    Scenario::from_truth(generate_truth(scene, noise.seed)?, noise)
}
