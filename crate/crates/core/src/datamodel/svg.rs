//! SVG 1.1 rendering of box layers for visual inspection.

use std::collections::BTreeSet;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::{Annotation, ImageRecord, Provenance};
use crate::error::Error;
use crate::geometry::BBox;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Layer {
    Original,
    Corrected,
    Mined,
    Detections,
    GroundTruth,
}

impl Layer {
    pub const ALL: [Layer; 5] = [
        Layer::Original,
        Layer::Corrected,
        Layer::Mined,
        Layer::Detections,
        Layer::GroundTruth,
    ];

    fn color(self) -> &'static str {
        match self {
            Layer::Original => "red",
            Layer::Corrected => "green",
            Layer::Mined => "blue",
            Layer::Detections => "white",
            Layer::GroundTruth => "black",
        }
    }

    fn name(self) -> &'static str {
        match self {
            Layer::Original => "original",
            Layer::Corrected => "corrected",
            Layer::Mined => "mined",
            Layer::Detections => "detections",
            Layer::GroundTruth => "ground-truth",
        }
    }

    fn of(p: Provenance) -> Layer {
        match p {
            Provenance::Original => Layer::Original,
            Provenance::Corrected => Layer::Corrected,
            Provenance::Mined => Layer::Mined,
        }
    }
}

impl std::str::FromStr for Layer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        Layer::ALL
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| Error::config(format!("unknown layer '{s}'")))
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn rect<T: Scalar>(out: &mut String, b: &BBox<T>, layer: Layer, caption: &str) {
    let [x1, y1, ..] = b.coords().map(Scalar::as_f64);
    let _ = writeln!(
        out,
        r#"  <rect class="{}" x="{}" y="{}" width="{}" height="{}" fill="none" stroke="{}" stroke-width="1.5"/>"#,
        layer.name(),
        x1,
        y1,
        b.width().as_f64(),
        b.height().as_f64(),
        layer.color()
    );
    let _ = writeln!(
        out,
        r#"  <text x="{}" y="{}" font-size="10" fill="{}">{}</text>"#,
        x1,
        (y1 - 2.0).max(8.0),
        layer.color(),
        escape(caption)
    );
}

/// Renders the requested layers of `record`. The frame is drawn as a path,
/// so the output holds exactly one `<rect>` per rendered box.
pub fn render_svg<T: Scalar>(
    record: &ImageRecord<T>,
    ground_truth: Option<&[Annotation<T>]>,
    class_names: &[String],
    layers: &BTreeSet<Layer>,
) -> String {
    let class = |l: u32| {
        class_names
            .get(l as usize - 1)
            .cloned()
            .unwrap_or_else(|| l.to_string())
    };
    let (w, h) = match record.size {
        Some(s) => (s.width as f64, s.height as f64),
        None => {
            let all = record
                .annotations
                .iter()
                .map(|a| a.bbox)
                .chain(record.detections().iter().map(|d| d.bbox))
                .chain(ground_truth.into_iter().flatten().map(|a| a.bbox));
            all.fold((1.0f64, 1.0f64), |(w, h), b| {
                (w.max(b.x2().as_f64()), h.max(b.y2().as_f64()))
            })
        }
    };
    let mut out = String::new();
    out.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(out, "  <title>{}</title>", escape(&record.id));
    let _ = writeln!(
        out,
        r##"  <path class="frame" d="M0 0H{w}V{h}H0Z" fill="#808080" stroke="none"/>"##
    );

    if layers.contains(&Layer::GroundTruth) {
        for a in ground_truth.into_iter().flatten() {
            rect(&mut out, &a.bbox, Layer::GroundTruth, &class(a.label.0));
        }
    }
    for a in &record.annotations {
        let layer = Layer::of(a.provenance);
        if layers.contains(&layer) {
            rect(&mut out, &a.bbox, layer, &class(a.label.0));
        }
    }
    if layers.contains(&Layer::Detections) {
        for d in record.detections() {
            let caption = format!("{} {:.2}", class(d.label.0), d.prob.as_f64());
            rect(&mut out, &d.bbox, Layer::Detections, &caption);
        }
    }
    out.push_str("</svg>\n");
    out
}
