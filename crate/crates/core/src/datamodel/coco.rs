//! COCO-subset JSON reading and writing.
//!
//! Read: `images[{id,width,height}]`, `annotations[{image_id,bbox,category_id,score?}]`
//! and `categories[{id,name}]`; entries carrying `score` become detections.
//! Unknown fields are ignored. The writer adds a few fields of its own so a
//! save/load cycle is lossless: `logit`, `provenance`, `xyxy` (exact corners,
//! preferred over `bbox` on read), an image-level `detections` flag and a
//! top-level `points` list.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    Annotation, ClassId, Dataset, Detection, ImageRecord, ImageSize, PointRecord, Provenance,
};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnnotationFormat {
    CocoJson,
    PointCsv,
}

impl std::str::FromStr for AnnotationFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "coco" | "coco-json" => Ok(AnnotationFormat::CocoJson),
            "points" | "point-csv" => Ok(AnnotationFormat::PointCsv),
            _ => Err(Error::config(format!("unknown annotation format '{s}'"))),
        }
    }
}

/// Loads a dataset. Point CSVs yield images without sizes whose `points`
/// are populated; see [`Dataset::materialize_points`].
pub fn load_annotations<T: Scalar>(
    path: impl AsRef<Path>,
    format: AnnotationFormat,
) -> Result<Dataset<T>> {
    match format {
        AnnotationFormat::CocoJson => load_coco(path),
        AnnotationFormat::PointCsv => super::points::load_points_dataset(path),
    }
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum CocoId {
    Int(u64),
    Str(String),
}

impl CocoId {
    fn into_string(self) -> String {
        match self {
            CocoId::Int(v) => v.to_string(),
            CocoId::Str(s) => s,
        }
    }
}

#[derive(Debug, Deserialize)]
struct InFile {
    images: Vec<InImage>,
    #[serde(default)]
    annotations: Vec<InAnnotation>,
    #[serde(default)]
    categories: Vec<InCategory>,
    #[serde(default)]
    points: Vec<InPoint>,
}

#[derive(Debug, Deserialize)]
struct InImage {
    id: CocoId,
    width: Option<u32>,
    height: Option<u32>,
    #[serde(default)]
    detections: bool,
}

#[derive(Debug, Deserialize)]
struct InAnnotation {
    id: Option<CocoId>,
    image_id: CocoId,
    bbox: [f64; 4],
    category_id: u32,
    score: Option<f64>,
    logit: Option<f64>,
    provenance: Option<Provenance>,
    xyxy: Option<[f64; 4]>,
}

#[derive(Debug, Deserialize)]
struct InCategory {
    id: u32,
    name: String,
}

#[derive(Debug, Deserialize)]
struct InPoint {
    image_id: CocoId,
    x: f64,
    y: f64,
    category_id: u32,
}

pub fn load_coco<T: Scalar>(path: impl AsRef<Path>) -> Result<Dataset<T>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_coco(&text, path)
}

fn parse_coco<T: Scalar>(text: &str, path: &Path) -> Result<Dataset<T>> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let file: InFile = serde_path_to_error::deserialize(de).map_err(|e| {
        let inner = e.inner();
        Error::Parse {
            path: path.to_path_buf(),
            location: format!(
                "line {} column {} (field `{}`)",
                inner.line(),
                inner.column(),
                e.path()
            ),
            message: inner.to_string(),
        }
    })?;
    build_dataset(file)
}

fn build_dataset<T: Scalar>(file: InFile) -> Result<Dataset<T>> {
    let mut cats: Vec<InCategory> = file.categories;
    cats.sort_by_key(|c| c.id);
    let bad_cats: Vec<String> = cats
        .iter()
        .enumerate()
        .filter(|(i, c)| c.id as usize != i + 1)
        .map(|(_, c)| c.id.to_string())
        .collect();
    if !bad_cats.is_empty() {
        return Err(Error::Validation {
            message: "category ids must be contiguous starting at 1".into(),
            ids: bad_cats,
        });
    }
    let mut class_names: Vec<String> = cats.into_iter().map(|c| c.name).collect();
    let max_label = file
        .annotations
        .iter()
        .map(|a| a.category_id)
        .chain(file.points.iter().map(|p| p.category_id))
        .max()
        .unwrap_or(0);
    if class_names.is_empty() {
        class_names = (1..=max_label).map(|k| format!("class_{k}")).collect();
    }

    let mut ds = Dataset::new(class_names);
    for im in file.images {
        let size = match (im.width, im.height) {
            (Some(w), Some(h)) if w > 0 && h > 0 => Some(ImageSize::new(w, h)),
            _ => None,
        };
        ds.images.push(ImageRecord {
            id: im.id.into_string(),
            size,
            annotations: Vec::new(),
            detections: im.detections.then(Vec::new),
            points: Vec::new(),
        });
    }
    let index: BTreeMap<String, usize> = ds
        .images
        .iter()
        .enumerate()
        .map(|(i, im)| (im.id.clone(), i))
        .collect();

    let mut bad_boxes = Vec::new();
    let mut unknown = Vec::new();
    for (k, a) in file.annotations.into_iter().enumerate() {
        let ann_id = a.id.map(CocoId::into_string).unwrap_or_else(|| format!("#{k}"));
        let image_id = a.image_id.into_string();
        let [x, y, w, h] = a.bbox;
        let finite = a.bbox.iter().all(|v| v.is_finite());
        if !finite || !(w > 0.0) || !(h > 0.0) {
            bad_boxes.push(ann_id);
            continue;
        }
        let Some(&slot) = index.get(&image_id) else {
            unknown.push(image_id);
            continue;
        };
        let bbox = match a.xyxy {
            Some(c) => BBox::from_coords(c.map(T::lit)),
            None => BBox::from_xywh(T::lit(x), T::lit(y), T::lit(w), T::lit(h)),
        };
        let label = ClassId(a.category_id);
        let rec = &mut ds.images[slot];
        match a.score {
            Some(score) => {
                let det = match a.logit {
                    Some(logit) => Detection {
                        bbox,
                        label,
                        prob: T::lit(score),
                        logit: T::lit(logit),
                    },
                    None => Detection::from_prob(bbox, label, T::lit(score)),
                };
                rec.detections.get_or_insert_with(Vec::new).push(det);
            }
            None => rec.annotations.push(Annotation {
                bbox,
                label,
                provenance: a.provenance.unwrap_or_default(),
            }),
        }
    }
    if !bad_boxes.is_empty() {
        return Err(Error::Validation {
            message: "bbox width and height must be positive and finite".into(),
            ids: bad_boxes,
        });
    }
    for p in file.points {
        let image_id = p.image_id.into_string();
        let Some(&slot) = index.get(&image_id) else {
            unknown.push(image_id);
            continue;
        };
        ds.images[slot].points.push(PointRecord {
            image_id,
            x: T::lit(p.x),
            y: T::lit(p.y),
            label: ClassId(p.category_id),
        });
    }
    if !unknown.is_empty() {
        unknown.sort();
        unknown.dedup();
        return Err(Error::UnknownImages(unknown));
    }
    ds.validate()?;
    Ok(ds)
}

#[derive(Serialize)]
struct OutFile<'a> {
    images: Vec<OutImage<'a>>,
    annotations: Vec<OutAnnotation>,
    categories: Vec<OutCategory<'a>>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    points: Vec<OutPoint>,
}

#[derive(Serialize)]
#[serde(untagged)]
enum OutId<'a> {
    Int(u64),
    Str(&'a str),
}

fn out_id(id: &str) -> OutId<'_> {
    let canonical_int = !id.is_empty()
        && id.bytes().all(|b| b.is_ascii_digit())
        && (id == "0" || !id.starts_with('0'));
    match id.parse::<u64>() {
        Ok(v) if canonical_int => OutId::Int(v),
        _ => OutId::Str(id),
    }
}

#[derive(Serialize)]
struct OutImage<'a> {
    id: OutId<'a>,
    #[serde(skip_serializing_if = "Option::is_none")]
    width: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    height: Option<u32>,
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    detections: bool,
}

#[derive(Serialize)]
struct OutAnnotation {
    id: u64,
    image_id: serde_json::Value,
    bbox: [f64; 4],
    area: f64,
    category_id: u32,
    iscrowd: u8,
    #[serde(skip_serializing_if = "Option::is_none")]
    score: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    logit: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    provenance: Option<Provenance>,
    xyxy: [f64; 4],
}

#[derive(Serialize)]
struct OutCategory<'a> {
    id: u32,
    name: &'a str,
}

#[derive(Serialize)]
struct OutPoint {
    image_id: serde_json::Value,
    x: f64,
    y: f64,
    category_id: u32,
}

fn id_value(id: &str) -> serde_json::Value {
    serde_json::to_value(out_id(id)).expect("id serializes")
}

fn out_bbox<T: Scalar>(b: &BBox<T>) -> ([f64; 4], [f64; 4]) {
    let c = b.coords().map(Scalar::as_f64);
    ([c[0], c[1], c[2] - c[0], c[3] - c[1]], c)
}

/// Serializes to pretty-printed COCO-subset JSON.
pub fn to_coco_string<T: Scalar>(ds: &Dataset<T>) -> String {
    let mut annotations = Vec::new();
    let mut points = Vec::new();
    let mut next_id = 1u64;
    for im in &ds.images {
        for a in &im.annotations {
            let (bbox, xyxy) = out_bbox(&a.bbox);
            annotations.push(OutAnnotation {
                id: next_id,
                image_id: id_value(&im.id),
                bbox,
                area: a.bbox.area().as_f64(),
                category_id: a.label.0,
                iscrowd: 0,
                score: None,
                logit: None,
                provenance: Some(a.provenance),
                xyxy,
            });
            next_id += 1;
        }
        for d in im.detections() {
            let (bbox, xyxy) = out_bbox(&d.bbox);
            annotations.push(OutAnnotation {
                id: next_id,
                image_id: id_value(&im.id),
                bbox,
                area: d.bbox.area().as_f64(),
                category_id: d.label.0,
                iscrowd: 0,
                score: Some(d.prob.as_f64()),
                logit: Some(d.logit.as_f64()),
                provenance: None,
                xyxy,
            });
            next_id += 1;
        }
        for p in &im.points {
            points.push(OutPoint {
                image_id: id_value(&im.id),
                x: p.x.as_f64(),
                y: p.y.as_f64(),
                category_id: p.label.0,
            });
        }
    }
    let file = OutFile {
        images: ds
            .images
            .iter()
            .map(|im| OutImage {
                id: out_id(&im.id),
                width: im.size.map(|s| s.width),
                height: im.size.map(|s| s.height),
                detections: im.detections.is_some(),
            })
            .collect(),
        annotations,
        categories: ds
            .class_names
            .iter()
            .enumerate()
            .map(|(i, n)| OutCategory {
                id: i as u32 + 1,
                name: n,
            })
            .collect(),
        points,
    };
    let mut s = serde_json::to_string_pretty(&file).expect("dataset serializes");
    s.push('\n');
    s
}

pub fn save_coco<T: Scalar>(ds: &Dataset<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_coco_string(ds)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn parse(text: &str) -> Result<Dataset<f64>> {
        parse_coco(text, Path::new("test.json"))
    }

    #[test]
    fn bbox_converted_to_corners() {
        let ds = parse(
            r#"{"images":[{"id":1,"width":100,"height":100,"file_name":"x.jpg"}],
                "annotations":[{"id":7,"image_id":1,"bbox":[10,20,30,40],"category_id":1,"extra":true}],
                "categories":[{"id":1,"name":"tree","supercategory":"plant"}]}"#,
        )
        .unwrap();
        assert_eq!(ds.images[0].id, "1");
        assert_eq!(ds.images[0].annotations[0].bbox, BBox::new(10.0, 20.0, 40.0, 60.0));
        assert!(ds.images[0].detections.is_none());
        assert_eq!(ds.class_names, vec!["tree"]);
    }

    #[test]
    fn scored_entries_become_detections() {
        let ds = parse(
            r#"{"images":[{"id":"a","width":100,"height":100}],
                "annotations":[{"image_id":"a","bbox":[0,0,5,5],"category_id":1,"score":0.75}],
                "categories":[{"id":1,"name":"t"}]}"#,
        )
        .unwrap();
        let d = &ds.images[0].detections()[0];
        assert_eq!(d.prob, 0.75);
        assert!((d.logit - (0.75f64 / 0.25).ln()).abs() < 1e-12);
        assert!(ds.images[0].annotations.is_empty());
    }

    #[test]
    fn empty_annotations_ok() {
        let ds = parse(r#"{"images":[{"id":1,"width":4,"height":4}],"annotations":[],"categories":[]}"#)
            .unwrap();
        assert_eq!(ds.images.len(), 1);
        assert_eq!(ds.annotation_count(), 0);
    }

    #[test]
    fn non_positive_extent_lists_ids() {
        let err = parse(
            r#"{"images":[{"id":1,"width":9,"height":9}],
                "annotations":[{"id":3,"image_id":1,"bbox":[0,0,0,5],"category_id":1},
                               {"id":4,"image_id":1,"bbox":[0,0,2,-1],"category_id":1},
                               {"id":5,"image_id":1,"bbox":[0,0,2,2],"category_id":1}],
                "categories":[{"id":1,"name":"t"}]}"#,
        )
        .unwrap_err();
        match err {
            Error::Validation { ids, .. } => assert_eq!(ids, vec!["3", "4"]),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn malformed_json_names_location() {
        let err = parse("{\"images\":[{\"id\":1}],\n \"annotations\":[{\"image_id\":1,\"bbox\":\"x\",\"category_id\":1}]}")
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 2"), "{msg}");
        assert!(msg.contains("bbox"), "{msg}");
    }

    #[test]
    fn string_and_numeric_ids_survive() {
        let mut ds = Dataset::<f64>::new(vec!["t".into()]);
        for id in ["12", "007", "tile_3", "0"] {
            ds.images.push(ImageRecord::new(id, 10, 10));
        }
        let back = parse(&to_coco_string(&ds)).unwrap();
        assert_eq!(back, ds);
    }

    fn arb_dataset() -> impl Strategy<Value = Dataset<f64>> {
        let ann = (0.0..400.0f64, 0.0..400.0f64, 0.01..100.0f64, 0.01..100.0f64, 1u32..4, 0u8..3);
        let det = (0.0..400.0f64, 0.0..400.0f64, 0.01..100.0f64, 0.01..100.0f64, 1u32..4, 0.0..=1.0f64, -8.0..8.0f64);
        let pt = (0.0..400.0f64, 0.0..400.0f64, 1u32..4);
        let image = (
            1u32..1000,
            1u32..1000,
            prop::collection::vec(ann, 0..5),
            prop::option::of(prop::collection::vec(det, 0..4)),
            prop::collection::vec(pt, 0..3),
        );
        prop::collection::vec(image, 0..5).prop_map(|imgs| {
            let mut ds = Dataset::new(vec!["a".into(), "b".into(), "c".into()]);
            for (i, (w, h, anns, dets, pts)) in imgs.into_iter().enumerate() {
                let id = format!("img{i}");
                let mut rec = ImageRecord::new(id.clone(), w, h);
                rec.annotations = anns
                    .into_iter()
                    .map(|(x, y, bw, bh, l, p)| Annotation {
                        bbox: BBox::from_xywh(x, y, bw, bh),
                        label: ClassId(l),
                        provenance: [Provenance::Original, Provenance::Corrected, Provenance::Mined][p as usize],
                    })
                    .collect();
                rec.detections = dets.map(|v| {
                    v.into_iter()
                        .map(|(x, y, bw, bh, l, p, lg)| Detection {
                            bbox: BBox::from_xywh(x, y, bw, bh),
                            label: ClassId(l),
                            prob: p,
                            logit: lg,
                        })
                        .collect()
                });
                rec.points = pts
                    .into_iter()
                    .map(|(x, y, l)| PointRecord { image_id: id.clone(), x, y, label: ClassId(l) })
                    .collect();
                ds.images.push(rec);
            }
            ds
        })
    }

    proptest! {
        #[test]
        fn save_load_roundtrip(ds in arb_dataset()) {
            let text = to_coco_string(&ds);
            let back = parse(&text).unwrap();
            prop_assert_eq!(&back, &ds);
            prop_assert_eq!(to_coco_string(&back), text);
        }
    }
}
