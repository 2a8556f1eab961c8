//! Refinement of noisy and sparse bounding-box annotations from detector
//! predictions: iterative box correction, missing-label mining, synthetic
//! label noise, detection metrics and a simulated teacher-student loop.
//!
//! Box math is generic over [`Scalar`] (`f32` or `f64`); the aliases below
//! fix the scalar for the common cases.

// Negated float comparisons are used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod correction;
pub mod datamodel;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod noise;
pub mod scalar;
pub mod simloop;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type BBoxF64 = geometry::BBox<f64>;
pub type BBoxF32 = geometry::BBox<f32>;
pub type DetectionF64 = datamodel::Detection<f64>;
pub type DetectionF32 = datamodel::Detection<f32>;
pub type AnnotationF64 = datamodel::Annotation<f64>;
pub type AnnotationF32 = datamodel::Annotation<f32>;
pub type ImageRecordF64 = datamodel::ImageRecord<f64>;
pub type DatasetF64 = datamodel::Dataset<f64>;
pub type DatasetF32 = datamodel::Dataset<f32>;
