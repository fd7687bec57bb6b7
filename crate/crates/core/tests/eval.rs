mod common;

use cavg::data::{split_dataset, Dataset, GenParams, Split, SplitFractions, SubsetTag};
use cavg::encoders::{RuleClassifier, Vocabulary};
use cavg::error::Error;
use cavg::eval::inspect::{GROUP_DISJOINT, GROUP_OVERLAP};
use cavg::eval::metrics::{ap50, iou, is_hit};
use cavg::eval::{build_report, dump_layer_attention, evaluate, score_samples, MetricsReport};
use cavg::rng::SeedTree;
use cavg::{BBox, Model};
use common::{random_box, raster_iou, small_config};
use proptest::prelude::*;

#[test]
fn iou_matches_raster_oracle() {
    let mut rng = SeedTree::new(17).rng();
    let mut overlapping = 0;
    for _ in 0..300 {
        let a = random_box(&mut rng);
        let b = random_box(&mut rng);
        let got = iou(&a, &b).unwrap();
        let want = raster_iou(&a, &b, 100_000);
        assert!((got - want).abs() < 2e-3, "{a:?} {b:?}: {got} vs {want}");
        overlapping += (got > 0.0) as usize;
    }
    assert!(overlapping > 50);
}

#[test]
fn iou_edge_cases() {
    let a = BBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
    assert_eq!(iou(&a, &a).unwrap(), 1.0);
    // touching edges share no area
    let b = BBox::new(10.0, 0.0, 20.0, 10.0).unwrap();
    assert_eq!(iou(&a, &b).unwrap(), 0.0);
    let inner = BBox::new(0.0, 0.0, 5.0, 10.0).unwrap();
    assert_eq!(iou(&a, &inner).unwrap(), 0.5);
    assert!(!is_hit(0.5));
    let bad = BBox { x1: 3.0, y1: 0.0, x2: 3.0, y2: 1.0 };
    assert!(matches!(iou(&a, &bad), Err(Error::Validation(_))));
    assert!(ap50(&[]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn iou_symmetric_bounded_and_scale_invariant(seed in any::<u64>(), s in 0.01f64..100.0) {
        let mut rng = SeedTree::new(seed).rng();
        let a = random_box(&mut rng);
        let b = random_box(&mut rng);
        let v = iou(&a, &b).unwrap();
        prop_assert_eq!(v, iou(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(iou(&a, &a).unwrap(), 1.0);
        let scale = |x: &BBox| BBox::new(x.x1 * s, x.y1 * s, x.x2 * s, x.y2 * s).unwrap();
        prop_assert!((iou(&scale(&a), &scale(&b)).unwrap() - v).abs() < 1e-9);
    }

    #[test]
    fn ap50_counts_strict_hits(seed in any::<u64>(), n in 1usize..40) {
        let mut rng = SeedTree::new(seed).rng();
        let pairs: Vec<(BBox, BBox)> = (0..n).map(|_| (random_box(&mut rng), random_box(&mut rng))).collect();
        let mut hits = 0;
        for (p, g) in &pairs {
            if raster_iou(p, g, 4_000) > 0.5 + 1e-3 {
                hits += 1;
            }
        }
        let got = ap50(&pairs).unwrap();
        prop_assert!((got * n as f64 - hits as f64).abs() < 1.0 + 1e-9);
    }
}

fn fixture() -> (Model, Dataset) {
    let params = GenParams { long_text_rate: 0.3, ..GenParams::default() };
    let mut ds = Dataset::synthetic(12, 40, &params).unwrap();
    split_dataset(&mut ds, SplitFractions::new(0.5, 0.2, 0.3).unwrap(), 3).unwrap();
    (Model::new(small_config(), Vocabulary::builtin(), 5).unwrap(), ds)
}

#[test]
fn evaluation_is_deterministic_and_consistent() {
    let (model, ds) = fixture();
    let test = ds.samples_in(Split::Test);
    let a = evaluate(&model, &test, None, &RuleClassifier, "ckpt").unwrap();
    let b = evaluate(&model, &test, None, &RuleClassifier, "ckpt").unwrap();
    assert_eq!(a.canonical_json(), b.canonical_json());
    assert!(a.run_meta.wall_clock_secs.is_some());
    assert!(!a.canonical_json().contains("wall_clock"));
    assert_eq!(a.count, test.len());
    assert_eq!(a.run_meta.dataset_digest, Dataset::subset_digest(&test));

    // overall ap50 agrees with a direct loop over predictions
    let pairs: Vec<(BBox, BBox)> = test
        .iter()
        .map(|s| {
            let input = model.prepare(s, &RuleClassifier).unwrap();
            let p = model.predict_prepared(&input, 1).unwrap();
            (p.selected_box, s.scene.ground_truth_box)
        })
        .collect();
    assert_eq!(a.overall_ap50, Some(ap50(&pairs).unwrap()));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("report.json");
    a.save(&path).unwrap();
    let mut back = MetricsReport::load(&path).unwrap();
    back.run_meta.wall_clock_secs = a.run_meta.wall_clock_secs;
    assert_eq!(back, a);
}

#[test]
fn subset_cells_partition_and_absent_cells() {
    let (model, ds) = fixture();
    let all: Vec<_> = ds.samples.iter().collect();
    let outcomes = score_samples(&model, &all, &RuleClassifier).unwrap();
    let report = build_report(&outcomes, None, "c", "d");
    for cell in &report.per_subset {
        let tagged: Vec<_> = outcomes.iter().filter(|o| o.tags.contains(&cell.subset)).collect();
        assert_eq!(cell.count, tagged.len());
        if !tagged.is_empty() {
            let rate = tagged.iter().filter(|o| o.hit).count() as f64 / tagged.len() as f64;
            assert_eq!(cell.ap50, Some(rate));
        }
    }
    // filtering on a tag nobody has yields absent cells
    let none: Vec<_> = outcomes
        .iter()
        .cloned()
        .map(|mut o| {
            o.tags.retain(|&t| t != SubsetTag::LongText);
            o
        })
        .collect();
    let r = build_report(&none, Some(SubsetTag::LongText), "c", "d");
    assert_eq!(r.count, 0);
    assert_eq!(r.overall_ap50, None);
    assert!(r.per_subset.iter().all(|c| c.ap50.is_none()));
    assert!(r.table().lines().nth(1).unwrap().starts_with('-'));
}

#[test]
fn attention_dump_has_two_groups_and_normalized_rows() {
    let (model, ds) = fixture();
    let s = &ds.samples[0];
    let input = model.prepare(s, &RuleClassifier).unwrap();
    let dump = dump_layer_attention(&model, &input, &s.scene.ground_truth_box).unwrap();
    let m = small_config().decoder_layers;
    assert_eq!(dump.rsd.len(), 8);
    assert!(dump.rsd.iter().all(|r| r.len() == m + 1));
    assert_eq!(dump.plot_table.len(), 2 * (m + 1));
    let groups: Vec<&str> = dump.groups.iter().map(|g| g.group.as_str()).collect();
    assert_eq!(groups, vec![GROUP_OVERLAP, GROUP_DISJOINT]);
    // the target overlaps itself
    assert!(dump.groups[0].regions.contains(&s.target_index));
    for (i, v) in dump.region_iou.iter().enumerate() {
        assert_eq!(*v > 0.0, dump.groups[0].regions.contains(&i));
    }
    for row in dump.probability_rows() {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    assert_eq!(dump.plot_tsv().lines().count(), 1 + 2 * (m + 1));
    let v: serde_json::Value = serde_json::from_str(&dump.to_json()).unwrap();
    assert!(v["cross_modal"].as_array().unwrap().len() == small_config().cross_heads);
}
