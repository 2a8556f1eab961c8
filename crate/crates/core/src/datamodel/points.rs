//! `image_id,x,y,label` point lists.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ClassId, Dataset, ImageRecord, PointRecord};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    image_id: String,
    x: f64,
    y: f64,
    label: u32,
}

fn parse_err(path: &Path, e: csv::Error) -> Error {
    let location = match e.position() {
        Some(pos) => format!("line {}", pos.line()),
        None => "unknown position".to_string(),
    };
    Error::Parse {
        path: path.to_path_buf(),
        location,
        message: e.to_string(),
    }
}

pub fn load_points_csv<T: Scalar>(path: impl AsRef<Path>) -> Result<Vec<PointRecord<T>>> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| parse_err(path, e))?;
    let headers = reader.headers().map_err(|e| parse_err(path, e))?.clone();
    let expected = ["image_id", "x", "y", "label"];
    if headers.iter().ne(expected.iter().copied()) {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            location: "line 1".into(),
            message: format!("expected header `image_id,x,y,label`, found `{}`", headers.iter().collect::<Vec<_>>().join(",")),
        });
    }
    let mut out = Vec::new();
    for row in reader.deserialize::<Row>() {
        let row = row.map_err(|e| parse_err(path, e))?;
        if !row.x.is_finite() || !row.y.is_finite() || row.label == 0 {
            return Err(Error::Validation {
                message: "points need finite coordinates and labels >= 1".into(),
                ids: vec![row.image_id],
            });
        }
        out.push(PointRecord {
            image_id: row.image_id,
            x: T::lit(row.x),
            y: T::lit(row.y),
            label: ClassId(row.label),
        });
    }
    Ok(out)
}

pub fn save_points_csv<T: Scalar>(points: &[PointRecord<T>], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| parse_err(path, e))?;
    for p in points {
        w.serialize(Row {
            image_id: p.image_id.clone(),
            x: p.x.as_f64(),
            y: p.y.as_f64(),
            label: p.label.0,
        })
        .map_err(|e| parse_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Groups points by image (first-seen order); images have no size.
pub(super) fn load_points_dataset<T: Scalar>(path: impl AsRef<Path>) -> Result<Dataset<T>> {
    let points = load_points_csv::<T>(path)?;
    let max_label = points.iter().map(|p| p.label.0).max().unwrap_or(0);
    let mut ds = Dataset::new((1..=max_label).map(|k| format!("class_{k}")).collect());
    let mut slots: BTreeMap<String, usize> = BTreeMap::new();
    for p in points {
        let slot = *slots.entry(p.image_id.clone()).or_insert_with(|| {
            ds.images.push(ImageRecord {
                id: p.image_id.clone(),
                size: None,
                annotations: Vec::new(),
                detections: None,
                points: Vec::new(),
            });
            ds.images.len() - 1
        });
        ds.images[slot].points.push(p);
    }
    Ok(ds)
}
