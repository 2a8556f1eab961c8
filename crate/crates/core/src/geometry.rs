//! Axis-aligned box arithmetic, box distances, class-wise NMS and the
//! invertible geometric transforms used to align targets between views.
//!
//! Coordinates are continuous: a box `(x1, y1, x2, y2)` covers the closed
//! rectangle between its corners and its area is `(x2 - x1) * (y2 - y1)`
//! with no `+1` pixel convention.

use serde::{Deserialize, Serialize};

use crate::datamodel::Detection;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Axis-aligned rectangle in canonical form (`x1 <= x2`, `y1 <= y2`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox<T> {
    x1: T,
    y1: T,
    x2: T,
    y2: T,
}

impl<T: Scalar> BBox<T> {
    /// Builds a box from two corners, swapping crossed coordinates.
    pub fn new(x1: T, y1: T, x2: T, y2: T) -> Self {
        debug_assert!(
            x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite(),
            "non-finite box coordinate"
        );
        BBox {
            x1: x1.min(x2),
            y1: y1.min(y2),
            x2: x1.max(x2),
            y2: y1.max(y2),
        }
    }

    pub fn from_coords(c: [T; 4]) -> Self {
        Self::new(c[0], c[1], c[2], c[3])
    }

    /// COCO-style `[x, y, w, h]`.
    pub fn from_xywh(x: T, y: T, w: T, h: T) -> Self {
        Self::new(x, y, x + w, y + h)
    }

    pub fn from_center(cx: T, cy: T, w: T, h: T) -> Self {
        let hw = w * T::half();
        let hh = h * T::half();
        Self::new(cx - hw, cy - hh, cx + hw, cy + hh)
    }

    pub fn x1(&self) -> T {
        self.x1
    }
    pub fn y1(&self) -> T {
        self.y1
    }
    pub fn x2(&self) -> T {
        self.x2
    }
    pub fn y2(&self) -> T {
        self.y2
    }

    pub fn coords(&self) -> [T; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn width(&self) -> T {
        self.x2 - self.x1
    }

    pub fn height(&self) -> T {
        self.y2 - self.y1
    }

    pub fn area(&self) -> T {
        self.width() * self.height()
    }

    pub fn center(&self) -> (T, T) {
        (
            (self.x1 + self.x2) * T::half(),
            (self.y1 + self.y2) * T::half(),
        )
    }

    pub fn intersection_area(&self, other: &Self) -> T {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= T::zero() || h <= T::zero() {
            T::zero()
        } else {
            w * h
        }
    }

    pub fn union_area(&self, other: &Self) -> T {
        self.area() + other.area() - self.intersection_area(other)
    }

    /// Smallest box enclosing both.
    pub fn hull(&self, other: &Self) -> Self {
        BBox {
            x1: self.x1.min(other.x1),
            y1: self.y1.min(other.y1),
            x2: self.x2.max(other.x2),
            y2: self.y2.max(other.y2),
        }
    }

    pub fn contains(&self, other: &Self) -> bool {
        self.x1 <= other.x1 && self.y1 <= other.y1 && self.x2 >= other.x2 && self.y2 >= other.y2
    }

    /// Clips to `[0, width] x [0, height]`.
    pub fn clip(&self, width: T, height: T) -> Self {
        let cx = |v: T| v.max(T::zero()).min(width);
        let cy = |v: T| v.max(T::zero()).min(height);
        BBox {
            x1: cx(self.x1),
            y1: cy(self.y1),
            x2: cx(self.x2),
            y2: cy(self.y2),
        }
    }

    /// Grows sides shorter than `min_side` around their midpoint, shifting
    /// back inside `[0, limit]` where possible.
    pub fn with_min_side(&self, min_side: T, width: T, height: T) -> Self {
        let grow = |lo: T, hi: T, limit: T| -> (T, T) {
            if hi - lo >= min_side {
                return (lo, hi);
            }
            if limit <= min_side {
                return (T::zero(), limit);
            }
            let mid = (lo + hi) * T::half();
            let mut a = mid - min_side * T::half();
            if a < T::zero() {
                a = T::zero();
            }
            if a + min_side > limit {
                a = limit - min_side;
            }
            (a, a + min_side)
        };
        let (x1, x2) = grow(self.x1, self.x2, width);
        let (y1, y2) = grow(self.y1, self.y2, height);
        BBox { x1, y1, x2, y2 }
    }

    pub fn is_finite(&self) -> bool {
        self.coords().iter().all(|v| v.is_finite())
    }

    /// Largest absolute per-coordinate difference.
    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.coords()
            .iter()
            .zip(other.coords().iter())
            .map(|(a, b)| (*a - *b).abs())
            .fold(T::zero(), T::max)
    }
}

/// Intersection over union; 0 when the union has zero area.
pub fn iou<T: Scalar>(a: &BBox<T>, b: &BBox<T>) -> T {
    let union = a.union_area(b);
    if union <= T::zero() {
        return T::zero();
    }
    (a.intersection_area(b) / union).min(T::one())
}

pub fn iou_distance<T: Scalar>(a: &BBox<T>, b: &BBox<T>) -> T {
    T::one() - iou(a, b)
}

/// Generalized IoU. Falls back to plain IoU when the enclosing hull is empty.
pub fn giou<T: Scalar>(a: &BBox<T>, b: &BBox<T>) -> T {
    let hull = a.hull(b).area();
    let iou = iou(a, b);
    if hull <= T::zero() {
        return iou;
    }
    iou - (hull - a.union_area(b)) / hull
}

/// `1 - GIoU`, in `[0, 2]`.
pub fn giou_distance<T: Scalar>(a: &BBox<T>, b: &BBox<T>) -> T {
    T::one() - giou(a, b)
}

/// Euclidean distance of box centers divided by `norm`.
pub fn center_distance_normalized<T: Scalar>(a: &BBox<T>, b: &BBox<T>, norm: T) -> Result<T> {
    if !(norm > T::zero()) {
        return Err(Error::Geometry(format!(
            "center distance normalizer must be positive, got {norm}"
        )));
    }
    Ok(center_distance(a, b) / norm)
}

fn center_distance<T: Scalar>(a: &BBox<T>, b: &BBox<T>) -> T {
    let (ax, ay) = a.center();
    let (bx, by) = b.center();
    (ax - bx).hypot(ay - by)
}

/// Box distance measure used for assignment in box correction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BoxDistance {
    Iou,
    Giou,
    CenterNormalized { norm: f64 },
}

impl BoxDistance {
    pub fn validate(&self) -> Result<()> {
        match *self {
            BoxDistance::CenterNormalized { norm } if !(norm > 0.0) => Err(Error::config(format!(
                "center-normalized distance needs a positive norm, got {norm}"
            ))),
            _ => Ok(()),
        }
    }

    /// Evaluates the distance. Call [`BoxDistance::validate`] first; an
    /// invalid norm yields NaN here.
    pub fn eval<T: Scalar>(&self, a: &BBox<T>, b: &BBox<T>) -> T {
        match *self {
            BoxDistance::Iou => iou_distance(a, b),
            BoxDistance::Giou => giou_distance(a, b),
            BoxDistance::CenterNormalized { norm } => center_distance(a, b) / T::lit(norm),
        }
    }
}

/// Class-wise greedy non-maximum suppression.
///
/// Detections are visited by descending probability (earlier input wins
/// ties); a detection is kept iff its IoU with every kept detection of the
/// same class is `<= iou_threshold`. Output is in visiting order.
pub fn nms<T: Scalar>(dets: &[Detection<T>], iou_threshold: T) -> Vec<Detection<T>> {
    nms_indices(dets, iou_threshold)
        .into_iter()
        .map(|i| dets[i].clone())
        .collect()
}

/// Indices of the detections kept by [`nms`], in output order.
pub fn nms_indices<T: Scalar>(dets: &[Detection<T>], iou_threshold: T) -> Vec<usize> {
    let order = score_order(dets.iter().map(|d| d.prob));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let d = &dets[i];
        let suppressed = kept.iter().any(|&k| {
            dets[k].label == d.label && iou(&dets[k].bbox, &d.bbox) > iou_threshold
        });
        if !suppressed {
            kept.push(i);
        }
    }
    kept
}

/// Indices sorted by descending score; stable, so equal scores keep input order.
pub(crate) fn score_order<T: Scalar>(scores: impl Iterator<Item = T>) -> Vec<usize> {
    let scores: Vec<T> = scores.collect();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    order
}

/// One step of a geometric transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TransformStep<T> {
    HorizontalFlip { width: T },
    VerticalFlip { height: T },
    Scale { fx: T, fy: T },
}

impl<T: Scalar> TransformStep<T> {
    fn apply(&self, b: &BBox<T>) -> BBox<T> {
        match *self {
            TransformStep::HorizontalFlip { width } => {
                BBox::new(width - b.x2, b.y1, width - b.x1, b.y2)
            }
            TransformStep::VerticalFlip { height } => {
                BBox::new(b.x1, height - b.y2, b.x2, height - b.y1)
            }
            TransformStep::Scale { fx, fy } => {
                BBox::new(b.x1 * fx, b.y1 * fy, b.x2 * fx, b.y2 * fy)
            }
        }
    }

    fn inverse(&self) -> Self {
        match *self {
            TransformStep::Scale { fx, fy } => TransformStep::Scale {
                fx: T::one() / fx,
                fy: T::one() / fy,
            },
            flip => flip,
        }
    }
}

/// An ordered composition of flips and scalings; steps apply first to last.
#[derive(Debug, Clone, PartialEq)]
pub struct GeoTransform<T> {
    steps: Vec<TransformStep<T>>,
}

impl<T: Scalar> Default for GeoTransform<T> {
    fn default() -> Self {
        Self::identity()
    }
}

impl<T: Scalar> GeoTransform<T> {
    pub fn identity() -> Self {
        GeoTransform { steps: Vec::new() }
    }

    pub fn horizontal_flip(width: T) -> Self {
        Self::identity().then_horizontal_flip(width)
    }

    pub fn vertical_flip(height: T) -> Self {
        Self::identity().then_vertical_flip(height)
    }

    pub fn scale(fx: T, fy: T) -> Result<Self> {
        Self::identity().then_scale(fx, fy)
    }

    pub fn then_horizontal_flip(mut self, width: T) -> Self {
        self.steps.push(TransformStep::HorizontalFlip { width });
        self
    }

    pub fn then_vertical_flip(mut self, height: T) -> Self {
        self.steps.push(TransformStep::VerticalFlip { height });
        self
    }

    /// Scale factors must be positive and finite so the step stays invertible.
    pub fn then_scale(mut self, fx: T, fy: T) -> Result<Self> {
        let ok = |f: T| f > T::zero() && f.is_finite();
        if !ok(fx) || !ok(fy) {
            return Err(Error::Geometry(format!(
                "scale factors must be positive and finite, got ({fx}, {fy})"
            )));
        }
        self.steps.push(TransformStep::Scale { fx, fy });
        Ok(self)
    }

    /// Appends all steps of `other` after this transform's steps.
    pub fn then(mut self, other: &Self) -> Self {
        self.steps.extend_from_slice(&other.steps);
        self
    }

    pub fn steps(&self) -> &[TransformStep<T>] {
        &self.steps
    }

    pub fn is_identity(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn inverse(&self) -> Self {
        GeoTransform {
            steps: self.steps.iter().rev().map(TransformStep::inverse).collect(),
        }
    }

    pub fn apply(&self, b: &BBox<T>) -> BBox<T> {
        self.steps.iter().fold(*b, |acc, s| s.apply(&acc))
    }
}

/// Applies `t` to one box.
pub fn apply_transform<T: Scalar>(t: &GeoTransform<T>, b: &BBox<T>) -> BBox<T> {
    t.apply(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{ClassId, Detection};
    use proptest::prelude::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox<f64> {
        BBox::new(x1, y1, x2, y2)
    }

    fn det(bx: BBox<f64>, label: u32, prob: f64) -> Detection<f64> {
        Detection::from_prob(bx, ClassId(label), prob)
    }

    #[test]
    fn constructor_canonicalizes() {
        let bx = b(10.0, 8.0, 2.0, 4.0);
        assert_eq!(bx.coords(), [2.0, 4.0, 10.0, 8.0]);
        assert_eq!(bx.area(), 32.0);
        assert_eq!(BBox::from_xywh(10.0, 20.0, 30.0, 40.0), b(10.0, 20.0, 40.0, 60.0));
    }

    #[test]
    fn iou_examples() {
        let a = b(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &b(20.0, 20.0, 30.0, 30.0)), 0.0);
        assert!((iou(&a, &b(5.0, 0.0, 15.0, 10.0)) - 1.0 / 3.0).abs() < 1e-15);
        // zero-area input
        let p = b(3.0, 3.0, 3.0, 3.0);
        assert_eq!(iou(&p, &p), 0.0);
    }

    #[test]
    fn iou_distance_examples() {
        let a = b(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou_distance(&a, &a), 0.0);
        assert_eq!(iou_distance(&a, &b(20.0, 20.0, 30.0, 30.0)), 1.0);
        assert!((iou_distance(&a, &b(5.0, 0.0, 15.0, 10.0)) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn giou_distance_examples() {
        let a = b(0.0, 0.0, 10.0, 10.0);
        assert_eq!(giou_distance(&a, &a), 0.0);
        assert!((giou_distance(&a, &b(10.0, 0.0, 20.0, 10.0)) - 1.0).abs() < 1e-15);
        let far = b(1000.0, 1000.0, 1010.0, 1010.0);
        assert!(giou_distance(&a, &far) > 1.9);
        assert!(giou_distance(&a, &far) <= 2.0);
    }

    #[test]
    fn center_distance_examples() {
        let a = b(0.0, 0.0, 10.0, 10.0);
        assert_eq!(center_distance_normalized(&a, &a, 60.0).unwrap(), 0.0);
        let c0 = BBox::from_center(0.0f64, 0.0, 4.0, 4.0);
        let c60 = BBox::from_center(60.0, 0.0, 4.0, 4.0);
        assert!((center_distance_normalized(&c0, &c60, 60.0).unwrap() - 1.0).abs() < 1e-15);
        let c34 = BBox::from_center(30.0, 40.0, 4.0, 4.0);
        assert!((center_distance_normalized(&c34, &c0, 60.0).unwrap() - 5.0 / 6.0).abs() < 1e-15);
        assert!(center_distance_normalized(&a, &a, 0.0).is_err());
        assert!(center_distance_normalized(&a, &a, -1.0).is_err());
    }

    #[test]
    fn nms_examples() {
        assert!(nms::<f64>(&[], 0.5).is_empty());

        let one = vec![det(b(0.0, 0.0, 5.0, 5.0), 1, 0.3)];
        assert_eq!(nms(&one, 0.5), one);

        let bx = b(0.0, 0.0, 10.0, 10.0);
        let same = vec![det(bx, 1, 0.8), det(bx, 1, 0.9)];
        let out = nms(&same, 0.5);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].prob, 0.9);

        let diff = vec![det(bx, 1, 0.8), det(bx, 2, 0.9)];
        let out = nms(&diff, 0.5);
        assert_eq!(out.len(), 2);
        // brute-force pairwise check: no same-class pair overlaps
        for i in 0..out.len() {
            for j in i + 1..out.len() {
                assert!(out[i].label != out[j].label || iou(&out[i].bbox, &out[j].bbox) <= 0.5);
            }
        }
    }

    #[test]
    fn nms_ties_prefer_earlier_input() {
        let bx = b(0.0, 0.0, 10.0, 10.0);
        let dets = vec![det(bx, 1, 0.5), det(b(0.0, 0.0, 10.0, 9.0), 1, 0.5)];
        assert_eq!(nms_indices(&dets, 0.5), vec![0]);
    }

    #[test]
    fn transform_examples() {
        let bx = b(1.0, 2.0, 3.0, 4.0);
        assert_eq!(GeoTransform::scale(1.0, 1.0).unwrap().apply(&bx), bx);
        assert_eq!(
            GeoTransform::horizontal_flip(100.0).apply(&b(10.0, 0.0, 30.0, 10.0)),
            b(70.0, 0.0, 90.0, 10.0)
        );
        assert_eq!(
            GeoTransform::scale(2.0, 2.0).unwrap().apply(&bx),
            b(2.0, 4.0, 6.0, 8.0)
        );
        assert!(GeoTransform::scale(0.0, 1.0).is_err());
        assert!(GeoTransform::scale(1.0, -2.0).is_err());
    }

    #[test]
    fn composed_transform_inverse() {
        let t = GeoTransform::horizontal_flip(640.0)
            .then_scale(1.5, 0.75)
            .unwrap()
            .then_vertical_flip(300.0);
        let bx = b(12.5, 40.0, 99.0, 120.25);
        let back = t.inverse().apply(&t.apply(&bx));
        assert!(back.max_abs_diff(&bx) < 1e-9);
    }

    #[test]
    fn works_in_f32() {
        let a = BBox::new(0.0f32, 0.0, 10.0, 10.0);
        let c = BBox::new(5.0f32, 0.0, 15.0, 10.0);
        assert!((iou(&a, &c) - 1.0 / 3.0).abs() < 1e-6);
    }

    fn arb_box() -> impl Strategy<Value = BBox<f64>> {
        (0.0..500.0f64, 0.0..500.0f64, 0.0..200.0f64, 0.0..200.0f64)
            .prop_map(|(x, y, w, h)| BBox::from_xywh(x, y, w, h))
    }

    fn arb_pos_box() -> impl Strategy<Value = BBox<f64>> {
        (0.0..500.0f64, 0.0..500.0f64, 0.5..200.0f64, 0.5..200.0f64)
            .prop_map(|(x, y, w, h)| BBox::from_xywh(x, y, w, h))
    }

    fn arb_transform() -> impl Strategy<Value = GeoTransform<f64>> {
        prop::collection::vec((0u8..3, 1.0..1000.0f64, 0.05..20.0f64, 0.05..20.0f64), 0..5)
            .prop_map(|steps| {
                steps
                    .into_iter()
                    .fold(GeoTransform::identity(), |t, (k, w, fx, fy)| match k {
                        0 => t.then_horizontal_flip(w),
                        1 => t.then_vertical_flip(w),
                        _ => t.then_scale(fx, fy).unwrap(),
                    })
            })
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), c in arb_box()) {
            let v = iou(&a, &c);
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert_eq!(v, iou(&c, &a));
            let d = iou_distance(&a, &c);
            prop_assert!((0.0..=1.0).contains(&d));
        }

        #[test]
        fn iou_one_iff_equal(a in arb_pos_box(), c in arb_pos_box()) {
            prop_assert_eq!(iou(&a, &a), 1.0);
            prop_assert_eq!(iou_distance(&a, &a), 0.0);
            if a != c {
                prop_assert!(iou(&a, &c) < 1.0);
            }
        }

        #[test]
        fn giou_matches_iou_when_nested(outer in arb_pos_box(), fx in 0.0..1.0f64, fy in 0.0..1.0f64, fw in 0.0..1.0f64, fh in 0.0..1.0f64) {
            let w = outer.width() * fw * (1.0 - fx);
            let h = outer.height() * fh * (1.0 - fy);
            let inner = BBox::from_xywh(outer.x1() + outer.width() * fx, outer.y1() + outer.height() * fy, w, h);
            prop_assume!(outer.contains(&inner));
            prop_assert!((giou_distance(&outer, &inner) - iou_distance(&outer, &inner)).abs() < 1e-12);
            let g = giou_distance(&outer, &inner);
            prop_assert!((0.0..=2.0).contains(&g));
        }

        #[test]
        fn transform_roundtrip(t in arb_transform(), bx in arb_box()) {
            let back = t.inverse().apply(&t.apply(&bx));
            prop_assert!(back.max_abs_diff(&bx) < 1e-9);
        }

        #[test]
        fn nms_properties(raw in prop::collection::vec((arb_pos_box(), 1u32..4, 0.0..=1.0f64), 0..25), thr in 0.0..=1.0f64) {
            let dets: Vec<_> = raw.into_iter().map(|(bx, l, p)| det(bx, l, p)).collect();
            let out = nms(&dets, thr);
            for d in &out {
                prop_assert!(dets.contains(d));
            }
            for w in out.windows(2) {
                prop_assert!(w[0].prob >= w[1].prob);
            }
            for i in 0..out.len() {
                for j in i + 1..out.len() {
                    prop_assert!(out[i].label != out[j].label || iou(&out[i].bbox, &out[j].bbox) <= thr);
                }
            }
        }
    }
}
