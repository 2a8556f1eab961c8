use boxrefine::correction::{correct_dataset, correct_targets, CorrectionConfig};
use boxrefine::datamodel::{Annotation, ClassId, Dataset, Detection, ImageRecord, Provenance};
use boxrefine::evaluation::{evaluate_ap50, quality_stats};
use boxrefine::geometry::{iou, BBox};
use boxrefine::noise::{apply_noise, NoiseConfig, Sparsity};
use boxrefine::simloop::{generate_truth, SceneConfig};
use boxrefine::DatasetF64;

fn truth_boxes() -> [BBox<f64>; 3] {
    [
        BBox::new(20.0, 20.0, 120.0, 100.0),
        BBox::new(200.0, 40.0, 280.0, 160.0),
        BBox::new(60.0, 250.0, 180.0, 330.0),
    ]
}

/// Three true boxes; two targets displaced by 40% of their extent, one missing.
#[test]
fn corrects_two_and_mines_the_missing_box() {
    let truth = truth_boxes();
    let shift = |b: &BBox<f64>| {
        BBox::new(
            b.x1() + 0.4 * b.width() * 0.5,
            b.y1() - 0.4 * b.height() * 0.3,
            b.x2() + 0.4 * b.width() * 0.4,
            b.y2() - 0.4 * b.height() * 0.2,
        )
    };
    let targets = vec![
        Annotation::new(shift(&truth[0]), ClassId(1)),
        Annotation::new(shift(&truth[1]), ClassId(1)),
    ];
    let preds: Vec<Detection<f64>> = truth.iter().map(|&b| Detection::from_logit(b, ClassId(1), 5.0)).collect();
    let cfg = CorrectionConfig {
        distance_limit: Some(0.6),
        mining_threshold: Some(0.8),
        ..Default::default()
    };
    let (out, report) = correct_targets(&targets, &preds, &cfg).unwrap();
    assert_eq!(out.len(), 3);
    assert_eq!(report.mined, 1);
    for k in 0..2 {
        assert_eq!(out[k].provenance, Provenance::Corrected);
        assert!(iou(&out[k].bbox, &truth[k]) >= 0.99);
    }
    assert_eq!(out[2].provenance, Provenance::Mined);
    assert_eq!(out[2].bbox, truth[2]);
}

#[test]
fn noise_then_correction_improves_quality() {
    let scene = SceneConfig { images: 30, ..Default::default() };
    let truth = generate_truth(&scene, 21).unwrap();
    let noise = NoiseConfig { box_noise: 0.4, seed: 21, ..Default::default() };
    let (noisy, summary) = apply_noise(&truth, &noise).unwrap();
    assert_eq!(summary.annotations_before, summary.annotations_after);

    let mut dets: DatasetF64 = truth.clone();
    for im in &mut dets.images {
        im.detections = Some(im.annotations.iter().map(|a| Detection::from_logit(a.bbox, a.label, 3.0)).collect());
        im.annotations.clear();
    }
    let (corrected, report) = correct_dataset(&noisy, &dets, &CorrectionConfig::default()).unwrap();
    assert!(report.all_converged());
    let before = quality_stats(&truth, &noisy).gt_to_annotations;
    let after = quality_stats(&truth, &corrected).gt_to_annotations;
    assert!(after > before, "{after} <= {before}");
    assert!(evaluate_ap50(&truth, &corrected).unwrap().map > evaluate_ap50(&truth, &noisy).unwrap().map);
}

#[test]
fn sparsified_dataset_is_recovered_by_mining() {
    let scene = SceneConfig { images: 10, ..Default::default() };
    let truth = generate_truth(&scene, 5).unwrap();
    let noise = NoiseConfig { sparsity: Sparsity::Extreme, seed: 5, ..Default::default() };
    let (sparse, _) = apply_noise(&truth, &noise).unwrap();
    assert!(sparse.images.iter().all(|im| im.annotations.len() == 1));

    let mut dets = truth.clone();
    for im in &mut dets.images {
        im.detections = Some(im.annotations.iter().map(|a| Detection::from_prob(a.bbox, a.label, 0.95)).collect());
        im.annotations.clear();
    }
    let cfg = CorrectionConfig { distance_limit: None, mining_threshold: Some(0.8), ..Default::default() };
    let (mined, report) = correct_dataset(&sparse, &dets, &cfg).unwrap();
    assert_eq!(mined.annotation_count(), truth.annotation_count());
    assert_eq!(report.total_mined(), truth.annotation_count() - truth.images.len());
    assert_eq!(quality_stats(&truth, &mined).gt_to_annotations, 1.0);
}

#[test]
fn f32_pipeline_matches_f64_closely() {
    let mk = |t: &[BBox<f64>; 3]| {
        let mut ds: Dataset<f32> = Dataset::new(vec!["obj".into()]);
        let mut im = ImageRecord::new("0", 400, 400);
        im.annotations = t
            .iter()
            .map(|b| {
                let c = b.coords().map(|v| v as f32 + 7.0);
                Annotation::new(BBox::from_coords(c), ClassId(1))
            })
            .collect();
        ds.images.push(im);
        ds
    };
    let targets = mk(&truth_boxes());
    let mut dets: Dataset<f32> = Dataset::new(vec!["obj".into()]);
    let mut im = ImageRecord::new("0", 400, 400);
    im.detections = Some(
        truth_boxes()
            .iter()
            .map(|b| Detection::from_logit(BBox::from_coords(b.coords().map(|v| v as f32)), ClassId(1), 2.0f32))
            .collect(),
    );
    dets.images.push(im);
    let (out, _) = correct_dataset(&targets, &dets, &CorrectionConfig::default()).unwrap();
    for (a, t) in out.images[0].annotations.iter().zip(truth_boxes()) {
        for (x, y) in a.bbox.coords().iter().zip(t.coords()) {
            assert!((*x as f64 - y).abs() < 1e-4);
        }
    }
}
