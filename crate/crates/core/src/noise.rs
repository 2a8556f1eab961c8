//! Synthetic corruption of clean annotations.
//!
//! All randomness comes from [`NoiseRng`] (ChaCha8 from `rand_chacha`,
//! seeded with `seed_from_u64`). Per-image generators are seeded from
//! `SHA-256(seed, stream, image id)`, so results do not depend on the order
//! or the thread on which images are processed.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::datamodel::{Annotation, ClassId, Dataset, ImageRecord, ImageSize};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::scalar::{round_half_away, Scalar};

pub type NoiseRng = ChaCha8Rng;

/// Derives an independent 64-bit seed for `(stream, key)` under `seed`.
pub fn derive_seed(seed: u64, stream: &str, key: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((stream.len() as u64).to_le_bytes());
    h.update(stream.as_bytes());
    h.update(key.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 8 bytes"))
}

pub fn stream_rng(seed: u64, stream: &str, key: &str) -> NoiseRng {
    NoiseRng::seed_from_u64(derive_seed(seed, stream, key))
}

/// Fraction of annotations to drop, or one survivor per image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Sparsity {
    Fraction(f64),
    Extreme,
}

impl Default for Sparsity {
    fn default() -> Self {
        Sparsity::Fraction(0.0)
    }
}

impl std::str::FromStr for Sparsity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "ex" | "ex." | "extreme" => Ok(Sparsity::Extreme),
            other => {
                let (num, scale) = match other.strip_suffix('%') {
                    Some(n) => (n, 100.0),
                    None => (other, 1.0),
                };
                num.parse::<f64>()
                    .map(|v| Sparsity::Fraction(v / scale))
                    .map_err(|_| Error::config(format!("invalid sparsity '{s}'")))
            }
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum SparsityRepr {
    Fraction(f64),
    Named(String),
}

impl Serialize for Sparsity {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match *self {
            Sparsity::Fraction(f) => SparsityRepr::Fraction(f),
            Sparsity::Extreme => SparsityRepr::Named("extreme".into()),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Sparsity {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match SparsityRepr::deserialize(d)? {
            SparsityRepr::Fraction(f) => Ok(Sparsity::Fraction(f)),
            SparsityRepr::Named(n) => n.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Binomial count of random boxes added per image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuperfluousConfig {
    pub trials: u64,
    pub success: f64,
    pub min_side: f64,
    pub max_side: f64,
}

impl Default for SuperfluousConfig {
    fn default() -> Self {
        SuperfluousConfig {
            trials: 10,
            success: 0.5,
            min_side: 16.0,
            max_side: 196.0,
        }
    }
}

impl SuperfluousConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::config("superfluous trials must be positive"));
        }
        if !(0.0..=1.0).contains(&self.success) {
            return Err(Error::config("superfluous success probability outside [0, 1]"));
        }
        if !(self.min_side > 0.0) || !(self.min_side <= self.max_side) || !self.max_side.is_finite() {
            return Err(Error::config("superfluous sides need 0 < min_side <= max_side"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    /// Box noise level: coordinates move by up to this fraction of the box extent.
    pub box_noise: f64,
    pub sparsity: Sparsity,
    pub superfluous: Option<SuperfluousConfig>,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            box_noise: 0.0,
            sparsity: Sparsity::Fraction(0.0),
            superfluous: None,
            seed: 0,
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.box_noise >= 0.0) || !self.box_noise.is_finite() {
            return Err(Error::config(format!(
                "box noise level must be non-negative, got {}",
                self.box_noise
            )));
        }
        if let Sparsity::Fraction(f) = self.sparsity {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::config(format!("sparsity fraction {f} outside [0, 1]")));
            }
        }
        if let Some(s) = &self.superfluous {
            s.validate()?;
        }
        Ok(())
    }
}

/// Raw displaced corners `[x1, y1, x2, y2]` before reordering and clipping.
/// Draw order is x1, y1, x2, y2, each from its own uniform interval.
pub fn displace_coords<T: Scalar, R: Rng + ?Sized>(b: &BBox<T>, box_noise: f64, rng: &mut R) -> [T; 4] {
    let rx = b.width().as_f64() * box_noise;
    let ry = b.height().as_f64() * box_noise;
    let mut shift = |v: T, r: f64| {
        if r > 0.0 {
            v + T::lit(rng.random_range(-r..=r))
        } else {
            v
        }
    };
    let x1 = shift(b.x1(), rx);
    let y1 = shift(b.y1(), ry);
    let x2 = shift(b.x2(), rx);
    let y2 = shift(b.y2(), ry);
    [x1, y1, x2, y2]
}

/// Shifts every coordinate independently by up to `box_noise` times the
/// box's own width (x) or height (y). Crossed coordinates are swapped; the
/// result is clipped to the image and kept at least 1 px per side.
pub fn displace_boxes<T: Scalar, R: Rng + ?Sized>(
    anns: &[Annotation<T>],
    box_noise: f64,
    size: Option<ImageSize>,
    rng: &mut R,
) -> Vec<Annotation<T>> {
    if box_noise == 0.0 {
        return anns.to_vec();
    }
    anns.iter()
        .map(|a| {
            let mut bbox = BBox::from_coords(displace_coords(&a.bbox, box_noise, rng));
            if let Some(size) = size {
                let (w, h) = size.dims();
                bbox = bbox.clip(w, h).with_min_side(T::one(), w, h);
            }
            Annotation { bbox, ..a.clone() }
        })
        .collect()
}

/// Drops annotations. Fraction mode removes exactly `round(f * n)` chosen
/// uniformly without replacement; extreme mode keeps exactly one. Survivor
/// order is preserved.
pub fn sparsify<T: Scalar, R: Rng + ?Sized>(
    anns: &[Annotation<T>],
    sparsity: Sparsity,
    rng: &mut R,
) -> Vec<Annotation<T>> {
    let n = anns.len();
    let keep = match sparsity {
        Sparsity::Extreme => n.min(1),
        Sparsity::Fraction(f) => n - drop_count(f, n),
    };
    keep_subset(anns, keep, rng)
}

fn drop_count(fraction: f64, n: usize) -> usize {
    (round_half_away(fraction * n as f64) as usize).min(n)
}

fn keep_subset<A: Clone, R: Rng + ?Sized>(items: &[A], keep: usize, rng: &mut R) -> Vec<A> {
    if keep >= items.len() {
        return items.to_vec();
    }
    let mut idx = index::sample(rng, items.len(), keep).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| items[i].clone()).collect()
}

/// Appends `Binomial(trials, success)` random boxes with uniform sides,
/// centers and labels, clipped to the image.
pub fn inject_superfluous<T: Scalar, R: Rng + ?Sized>(
    record: &ImageRecord<T>,
    cfg: &SuperfluousConfig,
    num_classes: u32,
    rng: &mut R,
) -> Result<Vec<Annotation<T>>> {
    cfg.validate()?;
    let size = record.size.ok_or_else(|| {
        Error::config(format!("image '{}' has no size; cannot inject boxes", record.id))
    })?;
    if num_classes == 0 {
        return Err(Error::config("cannot inject boxes without classes"));
    }
    let mut out = record.annotations.clone();
    out.extend(random_boxes(size, cfg, num_classes, rng).into_iter().map(|(b, l)| Annotation::new(b, l)));
    Ok(out)
}

/// Boxes drawn like superfluous annotations; also used by the simulated
/// detector for its spurious predictions.
pub(crate) fn random_boxes<T: Scalar, R: Rng + ?Sized>(
    size: ImageSize,
    cfg: &SuperfluousConfig,
    num_classes: u32,
    rng: &mut R,
) -> Vec<(BBox<T>, ClassId)> {
    let k = Binomial::new(cfg.trials, cfg.success)
        .expect("validated binomial parameters")
        .sample(rng);
    (0..k).map(|_| random_box(size, cfg, num_classes, rng)).collect()
}

pub(crate) fn random_box<T: Scalar, R: Rng + ?Sized>(
    size: ImageSize,
    cfg: &SuperfluousConfig,
    num_classes: u32,
    rng: &mut R,
) -> (BBox<T>, ClassId) {
    let (w, h) = (size.width as f64, size.height as f64);
    let bw = rng.random_range(cfg.min_side..=cfg.max_side);
    let bh = rng.random_range(cfg.min_side..=cfg.max_side);
    let cx = rng.random_range(0.0..=w);
    let cy = rng.random_range(0.0..=h);
    let label = ClassId(rng.random_range(1..=num_classes));
    let bbox = BBox::from_center(T::lit(cx), T::lit(cy), T::lit(bw), T::lit(bh)).clip(T::lit(w), T::lit(h));
    (bbox, label)
}

/// Counts recorded next to a corrupted dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSummary {
    pub seed: u64,
    pub box_noise: f64,
    pub sparsity: Sparsity,
    pub superfluous: Option<SuperfluousConfig>,
    pub images: usize,
    pub annotations_before: usize,
    pub annotations_after_sparsify: usize,
    pub superfluous_added: usize,
    pub annotations_after: usize,
}

/// Sparsifies a whole dataset. Fraction mode drops `round(f * N)` of all N
/// annotations (one draw over the flattened list); extreme mode keeps one
/// annotation in every non-empty image.
pub fn sparsify_dataset<T: Scalar>(ds: &Dataset<T>, sparsity: Sparsity, seed: u64) -> Dataset<T> {
    let mut out = ds.clone();
    match sparsity {
        Sparsity::Extreme => {
            out.images.par_iter_mut().for_each(|im| {
                let mut rng = stream_rng(seed, "sparsify", &im.id);
                im.annotations = sparsify(&im.annotations, sparsity, &mut rng);
            });
        }
        Sparsity::Fraction(f) => {
            let flat: Vec<(usize, usize)> = ds
                .images
                .iter()
                .enumerate()
                .flat_map(|(i, im)| (0..im.annotations.len()).map(move |j| (i, j)))
                .collect();
            let keep = flat.len() - drop_count(f, flat.len());
            let mut rng = stream_rng(seed, "sparsify", "");
            let kept = keep_subset(&flat, keep, &mut rng);
            for im in &mut out.images {
                im.annotations.clear();
            }
            for (i, j) in kept {
                out.images[i].annotations.push(ds.images[i].annotations[j].clone());
            }
        }
    }
    out
}

/// Displacement, then sparsification, then superfluous boxes.
pub fn apply_noise<T: Scalar>(ds: &Dataset<T>, cfg: &NoiseConfig) -> Result<(Dataset<T>, NoiseSummary)> {
    cfg.validate()?;
    let before = ds.annotation_count();
    let mut out = ds.clone();
    out.images.par_iter_mut().for_each(|im| {
        let mut rng = stream_rng(cfg.seed, "displace", &im.id);
        im.annotations = displace_boxes(&im.annotations, cfg.box_noise, im.size, &mut rng);
    });
    let mut out = sparsify_dataset(&out, cfg.sparsity, cfg.seed);
    let after_sparsify = out.annotation_count();
    if let Some(sup) = &cfg.superfluous {
        let l = out.num_classes();
        let seed = cfg.seed;
        let injected: Result<Vec<Vec<Annotation<T>>>> = out
            .images
            .par_iter()
            .map(|im| {
                let mut rng = stream_rng(seed, "superfluous", &im.id);
                inject_superfluous(im, sup, l, &mut rng)
            })
            .collect();
        for (im, anns) in out.images.iter_mut().zip(injected?) {
            im.annotations = anns;
        }
    }
    let after = out.annotation_count();
    let summary = NoiseSummary {
        seed: cfg.seed,
        box_noise: cfg.box_noise,
        sparsity: cfg.sparsity,
        superfluous: cfg.superfluous,
        images: ds.images.len(),
        annotations_before: before,
        annotations_after_sparsify: after_sparsify,
        superfluous_added: after - after_sparsify,
        annotations_after: after,
    };
    Ok((out, summary))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ann(x1: f64, y1: f64, x2: f64, y2: f64) -> Annotation<f64> {
        Annotation::new(BBox::new(x1, y1, x2, y2), ClassId(1))
    }

    fn anns(n: usize) -> Vec<Annotation<f64>> {
        (0..n).map(|i| ann(i as f64 * 10.0, 5.0, i as f64 * 10.0 + 8.0, 20.0)).collect()
    }

    #[test]
    fn zero_noise_is_identity() {
        let input = anns(6);
        let mut rng = NoiseRng::seed_from_u64(1);
        assert_eq!(displace_boxes(&input, 0.0, Some(ImageSize::new(100, 100)), &mut rng), input);
    }

    #[test]
    fn displacement_deterministic() {
        let input = anns(20);
        let run = || {
            let mut rng = NoiseRng::seed_from_u64(42);
            displace_boxes(&input, 0.4, Some(ImageSize::new(300, 300)), &mut rng)
        };
        let (a, b) = (run(), run());
        assert_eq!(format!("{a:?}"), format!("{b:?}"));
        assert_eq!(a.len(), input.len());
        assert!(a.iter().zip(&input).all(|(x, y)| x.label == y.label));
    }

    #[test]
    fn displaced_boxes_clipped_with_min_side() {
        let input = vec![ann(0.0, 0.0, 2.0, 2.0); 200];
        let mut rng = NoiseRng::seed_from_u64(3);
        for a in displace_boxes(&input, 5.0, Some(ImageSize::new(50, 40)), &mut rng) {
            assert!(a.bbox.x1() >= 0.0 && a.bbox.x2() <= 50.0);
            assert!(a.bbox.y1() >= 0.0 && a.bbox.y2() <= 40.0);
            assert!(a.bbox.width() >= 1.0 - 1e-12 && a.bbox.height() >= 1.0 - 1e-12);
        }
    }

    #[test]
    fn sparsify_counts() {
        let mut rng = NoiseRng::seed_from_u64(9);
        assert_eq!(sparsify(&anns(10), Sparsity::Fraction(0.0), &mut rng), anns(10));
        assert_eq!(sparsify(&anns(10), Sparsity::Fraction(0.5), &mut rng).len(), 5);
        assert_eq!(sparsify(&anns(7), Sparsity::Extreme, &mut rng).len(), 1);
        assert!(sparsify(&anns(0), Sparsity::Extreme, &mut rng).is_empty());
        // 0.25 * 10 = 2.5 rounds away from zero
        assert_eq!(sparsify(&anns(10), Sparsity::Fraction(0.25), &mut rng).len(), 7);
        assert!(sparsify(&anns(10), Sparsity::Fraction(1.0), &mut rng).is_empty());
    }

    #[test]
    fn superfluous_degenerate_and_bounds() {
        let rec = ImageRecord::<f64>::new("a", 640, 480);
        let mut rng = NoiseRng::seed_from_u64(5);
        let cfg = SuperfluousConfig { success: 0.0, ..Default::default() };
        assert!(inject_superfluous(&rec, &cfg, 3, &mut rng).unwrap().is_empty());

        let cfg = SuperfluousConfig::default();
        let mut rec = rec;
        rec.annotations = anns(3);
        for _ in 0..200 {
            let out = inject_superfluous(&rec, &cfg, 3, &mut rng).unwrap();
            assert_eq!(&out[..3], &rec.annotations[..]);
            assert!(out.len() - 3 <= 10);
            for a in &out[3..] {
                assert!((1..=3).contains(&a.label.0));
                assert!(a.bbox.x2() <= 640.0 && a.bbox.y2() <= 480.0);
                assert!(a.bbox.width() <= 196.0 && a.bbox.height() <= 196.0);
            }
        }
        let unsized_rec = ImageRecord::<f64> { size: None, ..rec };
        assert!(inject_superfluous(&unsized_rec, &cfg, 3, &mut rng).is_err());
    }

    #[test]
    fn sparsity_parsing_and_serde() {
        assert_eq!("ex".parse::<Sparsity>().unwrap(), Sparsity::Extreme);
        assert_eq!("50%".parse::<Sparsity>().unwrap(), Sparsity::Fraction(0.5));
        assert_eq!("0.2".parse::<Sparsity>().unwrap(), Sparsity::Fraction(0.2));
        assert!("half".parse::<Sparsity>().is_err());
        let cfg = NoiseConfig { sparsity: Sparsity::Extreme, ..Default::default() };
        let text = serde_json::to_string(&cfg).unwrap();
        assert!(text.contains("\"extreme\""));
        assert_eq!(serde_json::from_str::<NoiseConfig>(&text).unwrap(), cfg);
    }

    #[test]
    fn config_validation() {
        assert!(NoiseConfig { box_noise: -0.1, ..Default::default() }.validate().is_err());
        assert!(NoiseConfig { sparsity: Sparsity::Fraction(1.5), ..Default::default() }.validate().is_err());
        let sup = SuperfluousConfig { min_side: 50.0, max_side: 10.0, ..Default::default() };
        assert!(NoiseConfig { superfluous: Some(sup), ..Default::default() }.validate().is_err());
    }

    #[test]
    fn derived_seeds_differ_by_key_and_stream() {
        assert_ne!(derive_seed(1, "a", "x"), derive_seed(1, "a", "y"));
        assert_ne!(derive_seed(1, "a", "x"), derive_seed(1, "b", "x"));
        assert_ne!(derive_seed(1, "ab", ""), derive_seed(1, "a", "b"));
        assert_eq!(derive_seed(7, "s", "k"), derive_seed(7, "s", "k"));
    }

    fn dataset(per_image: &[usize]) -> Dataset<f64> {
        let mut ds = Dataset::new(vec!["a".into(), "b".into()]);
        for (i, &n) in per_image.iter().enumerate() {
            let mut im = ImageRecord::new(format!("im{i}"), 400, 300);
            im.annotations = anns(n);
            ds.images.push(im);
        }
        ds
    }

    #[test]
    fn dataset_level_sparsity() {
        let ds = dataset(&[3, 0, 5, 1, 2]);
        let half = sparsify_dataset(&ds, Sparsity::Fraction(0.5), 11);
        assert_eq!(half.annotation_count(), 11 - 6);
        let ex = sparsify_dataset(&ds, Sparsity::Extreme, 11);
        let counts: Vec<usize> = ex.images.iter().map(|im| im.annotations.len()).collect();
        assert_eq!(counts, vec![1, 0, 1, 1, 1]);
    }

    #[test]
    fn apply_noise_deterministic_and_independent_of_threads() {
        let ds = dataset(&[3, 4, 5, 1, 2, 8]);
        let cfg = NoiseConfig {
            box_noise: 0.4,
            sparsity: Sparsity::Fraction(0.3),
            superfluous: Some(SuperfluousConfig::default()),
            seed: 99,
        };
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| apply_noise(&ds, &cfg).unwrap())
        };
        let (a, sa) = run(1);
        let (b, sb) = run(4);
        assert_eq!(a, b);
        assert_eq!(sa, sb);
        assert_eq!(sa.annotations_after_sparsify, 23 - 7);
        assert_eq!(sa.annotations_after, sa.annotations_after_sparsify + sa.superfluous_added);
    }

    proptest! {
        #[test]
        fn displacement_bound_holds(x in 0.0..500.0f64, y in 0.0..500.0f64, w in 0.0..200.0f64, h in 0.0..200.0f64, nb in 0.0..1.0f64, seed in any::<u64>()) {
            let b = BBox::from_xywh(x, y, w, h);
            let mut rng = NoiseRng::seed_from_u64(seed);
            let c = displace_coords(&b, nb, &mut rng);
            let tol = 1e-9;
            prop_assert!((c[0] - b.x1()).abs() <= w * nb + tol);
            prop_assert!((c[2] - b.x2()).abs() <= w * nb + tol);
            prop_assert!((c[1] - b.y1()).abs() <= h * nb + tol);
            prop_assert!((c[3] - b.y2()).abs() <= h * nb + tol);
        }

        #[test]
        fn sparsify_subset_with_exact_count(n in 0usize..40, f in 0.0..=1.0f64, seed in any::<u64>()) {
            let input = anns(n);
            let mut rng = NoiseRng::seed_from_u64(seed);
            let out = sparsify(&input, Sparsity::Fraction(f), &mut rng);
            prop_assert_eq!(out.len(), n - (f * n as f64).round() as usize);
            // order-preserving subset
            let mut it = input.iter();
            for a in &out {
                prop_assert!(it.any(|b| b == a));
            }
        }
    }
}
