//! Parametric stand-in for a trained detector's raw output.

use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::datamodel::{Annotation, Detection, ImageSize};
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::noise::{random_box, SuperfluousConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimDetectorParams {
    /// Std-dev in pixels of the Gaussian jitter on each coordinate.
    pub localization_sigma: f64,
    /// Probability that a true object is predicted.
    pub recall: f64,
    /// Expected number of spurious predictions per image.
    pub fp_rate: f64,
    /// Quality `q` (best IoU to truth) maps to logit `sharpness * (2q - 1)`.
    pub score_sharpness: f64,
}

impl SimDetectorParams {
    pub const LEN: usize = 4;

    pub fn validate(&self) -> Result<()> {
        let ok = self.localization_sigma >= 0.0
            && self.localization_sigma.is_finite()
            && (0.0..=1.0).contains(&self.recall)
            && self.fp_rate >= 0.0
            && self.fp_rate.is_finite()
            && self.score_sharpness > 0.0
            && self.score_sharpness.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid simulated detector parameters {self:?}")))
        }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        vec![self.localization_sigma, self.recall, self.fp_rate, self.score_sharpness]
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        let [localization_sigma, recall, fp_rate, score_sharpness] = v else {
            return Err(Error::config(format!(
                "expected {} detector parameters, got {}",
                Self::LEN,
                v.len()
            )));
        };
        let p = SimDetectorParams {
            localization_sigma: *localization_sigma,
            recall: *recall,
            fp_rate: *fp_rate,
            score_sharpness: *score_sharpness,
        };
        p.validate()?;
        Ok(p)
    }

    /// Linear interpolation; `weight` is clamped to `[0, 1]`.
    pub fn lerp(&self, other: &Self, weight: f64) -> Self {
        let w = weight.clamp(0.0, 1.0);
        let mix = |a: f64, b: f64| a + (b - a) * w;
        SimDetectorParams {
            localization_sigma: mix(self.localization_sigma, other.localization_sigma),
            recall: mix(self.recall, other.recall),
            fp_rate: mix(self.fp_rate, other.fp_rate),
            score_sharpness: mix(self.score_sharpness, other.score_sharpness),
        }
    }
}

/// Spurious prediction geometry: side range and class count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpuriousShape {
    pub min_side: f64,
    pub max_side: f64,
    pub num_classes: u32,
}

/// Emits each true box with probability `recall`, jittered per coordinate,
/// then `Poisson(fp_rate)` random boxes. Every box is clipped to the image
/// and kept at least 1 px wide; its logit follows from its best IoU to truth.
pub fn simulate_predictions<R: Rng + ?Sized>(
    truth: &[Annotation<f64>],
    size: ImageSize,
    params: &SimDetectorParams,
    spurious: &SpuriousShape,
    rng: &mut R,
) -> Result<Vec<Detection<f64>>> {
    params.validate()?;
    let (w, h) = size.dims::<f64>();
    let jitter = (params.localization_sigma > 0.0)
        .then(|| Normal::new(0.0, params.localization_sigma).expect("validated sigma"));
    let mut boxes = Vec::new();
    for t in truth {
        if !rng.random_bool(params.recall) {
            continue;
        }
        let c = match &jitter {
            Some(n) => t.bbox.coords().map(|v| v + n.sample(rng)),
            None => t.bbox.coords(),
        };
        boxes.push((BBox::from_coords(c), t.label));
    }
    if params.fp_rate > 0.0 && spurious.num_classes > 0 {
        let k = Poisson::new(params.fp_rate).expect("validated rate").sample(rng) as usize;
        let shape = SuperfluousConfig {
            trials: 1,
            success: 1.0,
            min_side: spurious.min_side,
            max_side: spurious.max_side,
        };
        for _ in 0..k {
            boxes.push(random_box(size, &shape, spurious.num_classes, rng));
        }
    }
    Ok(boxes
        .into_iter()
        .map(|(b, label)| {
            let b = b.clip(w, h).with_min_side(1.0, w, h);
            let q = truth.iter().map(|t| iou(&t.bbox, &b)).fold(0.0, f64::max);
            Detection::from_logit(b, label, params.score_sharpness * (2.0 * q - 1.0))
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::ClassId;
    use crate::noise::NoiseRng;
    use rand::SeedableRng;

    fn truth() -> Vec<Annotation<f64>> {
        vec![
            Annotation::new(BBox::new(10.0, 10.0, 60.0, 80.0), ClassId(1)),
            Annotation::new(BBox::new(200.0, 100.0, 260.0, 150.0), ClassId(2)),
        ]
    }

    const SHAPE: SpuriousShape = SpuriousShape { min_side: 16.0, max_side: 64.0, num_classes: 2 };

    #[test]
    fn oracle_detector_reproduces_truth() {
        let p = SimDetectorParams { localization_sigma: 0.0, recall: 1.0, fp_rate: 0.0, score_sharpness: 3.0 };
        let mut rng = NoiseRng::seed_from_u64(0);
        let dets = simulate_predictions(&truth(), ImageSize::new(300, 300), &p, &SHAPE, &mut rng).unwrap();
        assert_eq!(dets.len(), 2);
        for (d, t) in dets.iter().zip(truth()) {
            assert_eq!(d.bbox, t.bbox);
            assert_eq!(d.label, t.label);
            assert!(d.prob > 0.5);
        }
    }

    #[test]
    fn zero_recall_only_spurious() {
        let p = SimDetectorParams { localization_sigma: 2.0, recall: 0.0, fp_rate: 3.0, score_sharpness: 3.0 };
        let mut rng = NoiseRng::seed_from_u64(1);
        let mut total = 0;
        for _ in 0..50 {
            let dets = simulate_predictions(&truth(), ImageSize::new(300, 300), &p, &SHAPE, &mut rng).unwrap();
            for d in &dets {
                assert!(d.bbox.width() >= 16.0 - 1e-9 || d.bbox.x1() == 0.0 || d.bbox.x2() == 300.0);
            }
            total += dets.len();
        }
        assert!(total > 0);
        let none = SimDetectorParams { fp_rate: 0.0, ..p };
        assert!(simulate_predictions(&truth(), ImageSize::new(300, 300), &none, &SHAPE, &mut rng).unwrap().is_empty());
    }

    #[test]
    fn params_vector_roundtrip_and_lerp() {
        let a = SimDetectorParams { localization_sigma: 10.0, recall: 0.4, fp_rate: 2.0, score_sharpness: 4.0 };
        let b = SimDetectorParams { localization_sigma: 0.0, recall: 1.0, fp_rate: 0.0, score_sharpness: 8.0 };
        assert_eq!(SimDetectorParams::from_slice(&a.to_vec()).unwrap(), a);
        assert!(SimDetectorParams::from_slice(&[1.0, 2.0]).is_err());
        assert_eq!(a.lerp(&b, 0.0), a);
        assert_eq!(a.lerp(&b, 1.0), b);
        assert_eq!(a.lerp(&b, 7.0), b);
        assert_eq!(a.lerp(&b, 0.5).recall, 0.7);
    }

    #[test]
    fn invalid_params_rejected() {
        let p = SimDetectorParams { localization_sigma: 1.0, recall: 1.5, fp_rate: 0.0, score_sharpness: 1.0 };
        let mut rng = NoiseRng::seed_from_u64(1);
        assert!(simulate_predictions(&truth(), ImageSize::new(300, 300), &p, &SHAPE, &mut rng).is_err());
    }
}
