//! Annotation, detection and image records, plus point-to-box materialization.
//!
//! Pixel content is never loaded; every record is a set of boxes on a
//! `width x height` grid.

mod coco;
mod points;
mod svg;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::scalar::{self, Scalar};

pub use coco::{load_annotations, load_coco, save_coco, to_coco_string, AnnotationFormat};
pub use points::{load_points_csv, save_points_csv};
pub use svg::{render_svg, Layer};

/// One-based class label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(pub u32);

impl std::fmt::Display for ClassId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A predicted box with both its probability and raw logit score.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection<T> {
    pub bbox: BBox<T>,
    pub label: ClassId,
    pub prob: T,
    pub logit: T,
}

impl<T: Scalar> Detection<T> {
    pub fn from_logit(bbox: BBox<T>, label: ClassId, logit: T) -> Self {
        Detection {
            bbox,
            label,
            prob: scalar::sigmoid(logit),
            logit,
        }
    }

    /// The logit is recovered from a probability clamped to `[1e-6, 1 - 1e-6]`.
    pub fn from_prob(bbox: BBox<T>, label: ClassId, prob: T) -> Self {
        Detection {
            bbox,
            label,
            prob,
            logit: scalar::logit(prob),
        }
    }

    pub fn to_annotation(&self, provenance: Provenance) -> Annotation<T> {
        Annotation {
            bbox: self.bbox,
            label: self.label,
            provenance,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    #[default]
    Original,
    Corrected,
    Mined,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Annotation<T> {
    pub bbox: BBox<T>,
    pub label: ClassId,
    pub provenance: Provenance,
}

impl<T: Scalar> Annotation<T> {
    pub fn new(bbox: BBox<T>, label: ClassId) -> Self {
        Annotation {
            bbox,
            label,
            provenance: Provenance::Original,
        }
    }
}

/// A point annotation, materialized into a fixed-size box later.
#[derive(Debug, Clone, PartialEq)]
pub struct PointRecord<T> {
    pub image_id: String,
    pub x: T,
    pub y: T,
    pub label: ClassId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageSize {
    pub width: u32,
    pub height: u32,
}

impl ImageSize {
    pub fn new(width: u32, height: u32) -> Self {
        ImageSize { width, height }
    }

    pub fn dims<T: Scalar>(&self) -> (T, T) {
        (T::lit(self.width as f64), T::lit(self.height as f64))
    }
}

/// Boxes for a single image. `size` is `None` only for records built from
/// point lists, which carry no image dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord<T> {
    pub id: String,
    pub size: Option<ImageSize>,
    pub annotations: Vec<Annotation<T>>,
    pub detections: Option<Vec<Detection<T>>>,
    pub points: Vec<PointRecord<T>>,
}

impl<T: Scalar> ImageRecord<T> {
    pub fn new(id: impl Into<String>, width: u32, height: u32) -> Self {
        ImageRecord {
            id: id.into(),
            size: Some(ImageSize::new(width, height)),
            annotations: Vec::new(),
            detections: None,
            points: Vec::new(),
        }
    }

    pub fn detections(&self) -> &[Detection<T>] {
        self.detections.as_deref().unwrap_or(&[])
    }

    /// Clips every annotation and detection box to the image bounds.
    pub fn clip_to_bounds(&mut self) {
        let Some(size) = self.size else { return };
        let (w, h) = size.dims::<T>();
        for a in &mut self.annotations {
            a.bbox = a.bbox.clip(w, h);
        }
        for d in self.detections.iter_mut().flatten() {
            d.bbox = d.bbox.clip(w, h);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub class_names: Vec<String>,
    pub images: Vec<ImageRecord<T>>,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(class_names: Vec<String>) -> Self {
        Dataset {
            class_names,
            images: Vec::new(),
        }
    }

    pub fn num_classes(&self) -> u32 {
        self.class_names.len() as u32
    }

    pub fn image(&self, id: &str) -> Option<&ImageRecord<T>> {
        self.images.iter().find(|im| im.id == id)
    }

    pub fn annotation_count(&self) -> usize {
        self.images.iter().map(|im| im.annotations.len()).sum()
    }

    pub fn index_by_id(&self) -> BTreeMap<&str, usize> {
        self.images
            .iter()
            .enumerate()
            .map(|(i, im)| (im.id.as_str(), i))
            .collect()
    }

    /// Checks unique image ids, label ranges, finite coordinates and
    /// probabilities in `[0, 1]`.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        let dup: Vec<String> = self
            .images
            .iter()
            .filter(|im| !seen.insert(im.id.as_str()))
            .map(|im| im.id.clone())
            .collect();
        if !dup.is_empty() {
            return Err(Error::Validation {
                message: "duplicate image ids".into(),
                ids: dup,
            });
        }
        let l = self.num_classes();
        let in_range = |c: ClassId| c.0 >= 1 && c.0 <= l;
        let mut bad = Vec::new();
        for im in &self.images {
            for (i, a) in im.annotations.iter().enumerate() {
                if !in_range(a.label) || !a.bbox.is_finite() {
                    bad.push(format!("{}#ann{}", im.id, i));
                }
            }
            for (i, d) in im.detections().iter().enumerate() {
                let prob_ok = d.prob >= T::zero() && d.prob <= T::one();
                if !in_range(d.label) || !d.bbox.is_finite() || !prob_ok || !d.logit.is_finite() {
                    bad.push(format!("{}#det{}", im.id, i));
                }
            }
            for (i, p) in im.points.iter().enumerate() {
                if !in_range(p.label) || !p.x.is_finite() || !p.y.is_finite() {
                    bad.push(format!("{}#pt{}", im.id, i));
                }
            }
        }
        if !bad.is_empty() {
            return Err(Error::Validation {
                message: format!("labels outside 1..={l}, non-finite values or bad probabilities"),
                ids: bad,
            });
        }
        Ok(())
    }

    /// Fills missing image sizes from `other`, matching by image id.
    pub fn fill_sizes_from(&mut self, other: &Dataset<T>) {
        for im in &mut self.images {
            if im.size.is_none() {
                im.size = other.image(&im.id).and_then(|o| o.size);
            }
        }
    }

    /// Converts every image's points into `side x side` boxes appended to
    /// its annotations.
    pub fn materialize_points(&mut self, side: T) -> Result<()> {
        check_side(side)?;
        for im in &mut self.images {
            let points = std::mem::take(&mut im.points);
            let size = im.size;
            im.annotations
                .extend(points.iter().map(|p| point_box(p, side, size)));
        }
        Ok(())
    }

    /// Ids present in `self` but not in `other`.
    pub fn ids_missing_from(&self, other: &Dataset<T>) -> Vec<String> {
        let idx = other.index_by_id();
        self.images
            .iter()
            .filter(|im| !idx.contains_key(im.id.as_str()))
            .map(|im| im.id.clone())
            .collect()
    }
}

fn check_side<T: Scalar>(side: T) -> Result<()> {
    if !(side > T::zero()) || !side.is_finite() {
        return Err(Error::config(format!("box side must be positive, got {side}")));
    }
    Ok(())
}

fn point_box<T: Scalar>(p: &PointRecord<T>, side: T, size: Option<ImageSize>) -> Annotation<T> {
    let mut bbox = BBox::from_center(p.x, p.y, side, side);
    if let Some(size) = size {
        let (w, h) = size.dims();
        bbox = bbox.clip(w, h);
    }
    Annotation::new(bbox, p.label)
}

/// Turns points into centered `side x side` boxes, clipped to the bounds
/// of their image when its size is known. Output order follows `points`.
pub fn points_to_boxes<T: Scalar>(
    points: &[PointRecord<T>],
    side: T,
    images: &[ImageRecord<T>],
) -> Result<Vec<Annotation<T>>> {
    check_side(side)?;
    let sizes: BTreeMap<&str, Option<ImageSize>> =
        images.iter().map(|im| (im.id.as_str(), im.size)).collect();
    let unknown: BTreeSet<String> = points
        .iter()
        .filter(|p| !sizes.contains_key(p.image_id.as_str()))
        .map(|p| p.image_id.clone())
        .collect();
    if !unknown.is_empty() {
        return Err(Error::UnknownImages(unknown.into_iter().collect()));
    }
    Ok(points
        .iter()
        .map(|p| point_box(p, side, sizes[p.image_id.as_str()]))
        .collect())
}
