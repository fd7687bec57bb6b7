use std::collections::{BTreeSet, HashSet};

use cavg::data::split::training_subset;
use cavg::data::synthetic::decode_attributes;
use cavg::data::{split_dataset, tag_sample, Dataset, GenParams, Split, SplitFractions, SubsetTag};
use cavg::encoders::{classify_rule, EmotionCategory};
use cavg::error::Error;
use proptest::prelude::*;
use serde_json::{json, Value};

fn small(seed: u64, n: usize) -> Dataset {
    Dataset::synthetic(seed, n, &GenParams::default()).unwrap()
}

#[test]
fn file_round_trip_is_exact() {
    let mut ds = small(5, 12);
    split_dataset(&mut ds, SplitFractions::new(0.5, 0.25, 0.25).unwrap(), 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ds.json");
    ds.save(&path).unwrap();
    let back = Dataset::load(&path).unwrap();
    assert_eq!(back, ds);
    assert_eq!(back.digest(), ds.digest());
    assert_eq!(back.to_json().unwrap(), ds.to_json().unwrap());
}

#[test]
fn document_layout() {
    let ds = small(1, 2);
    let v: Value = serde_json::from_str(&ds.to_json().unwrap()).unwrap();
    let s = &v["scenes"][0];
    for key in ["id", "patch_grid", "regions", "gt_box", "meta", "command", "target_index"] {
        assert!(s.get(key).is_some(), "missing {key}");
    }
    assert!(s["command"]["text"].is_string());
    assert_eq!(s["regions"][0]["box"].as_array().unwrap().len(), 4);
    assert_eq!(s["patch_grid"]["P"], json!(4));
}

type Mutation = (&'static str, fn(&mut Value), &'static str);

/// Each corruption is applied to scene 3 of a valid document; the error must name its location.
fn corruptions() -> Vec<Mutation> {
    vec![
        ("x1 >= x2", |s| s["regions"][2]["box"][0] = json!(500.0), "scenes[3].regions[2].box"),
        ("y1 >= y2", |s| s["regions"][1]["box"][3] = json!(-1.0), "scenes[3].regions[1].box"),
        ("box arity", |s| s["regions"][0]["box"] = json!([1.0, 2.0, 3.0]), "scenes[3]"),
        ("gt x1 >= x2", |s| s["gt_box"] = json!([9.0, 0.0, 1.0, 5.0]), "scenes[3].gt_box"),
        ("box outside image", |s| s["regions"][4]["box"][2] = json!(1e4), "scenes[3].regions[4].box"),
        ("missing features", |s| {
            s["regions"][0].as_object_mut().unwrap().remove("features");
        }, "scenes[3]"),
        ("empty features", |s| s["regions"][6]["features"] = json!([]), "scenes[3].regions[6].features"),
        ("ragged features", |s| {
            s["regions"][5]["features"].as_array_mut().unwrap().pop();
        }, "scenes[3].regions[5].features"),
        ("non-numeric feature", |s| s["regions"][0]["features"][3] = json!("x"), "scenes[3]"),
        ("no regions", |s| s["regions"] = json!([]), "scenes[3].regions"),
        ("missing command", |s| {
            s.as_object_mut().unwrap().remove("command");
        }, "scenes[3]"),
        ("blank command", |s| s["command"]["text"] = json!("   "), "scenes[3].command.text"),
        ("target out of range", |s| s["target_index"] = json!(8), "scenes[3].target_index"),
        ("negative target", |s| s["target_index"] = json!(-1), "scenes[3]"),
        ("gt differs from target", |s| {
            let t = s["target_index"].as_u64().unwrap() as usize;
            let other = (t + 1) % 8;
            s["gt_box"] = s["regions"][other]["box"].clone();
        }, "scenes[3].gt_box"),
        ("patch row count", |s| {
            s["patch_grid"]["rows"].as_array_mut().unwrap().pop();
        }, "scenes[3].patch_grid.rows"),
        ("patch row width", |s| {
            s["patch_grid"]["rows"][7].as_array_mut().unwrap().push(json!(0.0));
        }, "scenes[3].patch_grid.rows[7]"),
        ("grid differs", |s| {
            s["patch_grid"]["P"] = json!(2);
            let rows: Vec<Value> = s["patch_grid"]["rows"].as_array().unwrap()[..4].to_vec();
            s["patch_grid"]["rows"] = Value::Array(rows);
        }, "scenes[3].patch_grid"),
        ("bad split label", |s| s["split"] = json!("holdout"), "scenes[3]"),
        ("missing meta", |s| {
            s.as_object_mut().unwrap().remove("meta");
        }, "scenes[3]"),
    ]
}

#[test]
fn corruption_fuzzer_names_the_location() {
    let ds = small(7, 6);
    let base: Value = serde_json::from_str(&ds.to_json().unwrap()).unwrap();
    let cases = corruptions();
    assert_eq!(cases.len(), 20);
    for (name, mutate, want) in cases {
        let mut doc = base.clone();
        mutate(&mut doc["scenes"][3]);
        match Dataset::from_json(&doc.to_string()) {
            Err(Error::Schema { path, message }) => {
                assert!(path.starts_with(want), "{name}: path {path} ({message}), expected {want}");
            }
            other => panic!("{name}: expected schema error, got {other:?}"),
        }
    }
}

#[test]
fn document_level_corruptions() {
    let ds = small(7, 3);
    let base: Value = serde_json::from_str(&ds.to_json().unwrap()).unwrap();
    let check = |doc: Value, want: &str| match Dataset::from_json(&doc.to_string()) {
        Err(Error::Schema { path, .. }) => assert_eq!(path, want),
        other => panic!("expected schema error at {want}, got {other:?}"),
    };
    let mut d = base.clone();
    d["version"] = json!(99);
    check(d, "version");
    let mut d = base.clone();
    d["scenes"] = json!([]);
    check(d, "scenes");
    let mut d = base.clone();
    d["scenes"][2]["id"] = d["scenes"][0]["id"].clone();
    check(d, "scenes[2].id");
    let mut d = base.clone();
    d.as_object_mut().unwrap().remove("provenance");
    check(d, "provenance");
    assert!(matches!(Dataset::from_json("[1,2"), Err(Error::Schema { .. })));
}

#[test]
fn feature_dimension_must_agree_across_scenes() {
    let ds = small(7, 3);
    let mut doc: Value = serde_json::from_str(&ds.to_json().unwrap()).unwrap();
    for r in doc["scenes"][1]["regions"].as_array_mut().unwrap() {
        r["features"].as_array_mut().unwrap().push(json!(0.0));
    }
    match Dataset::from_json(&doc.to_string()) {
        Err(Error::Schema { path, .. }) => assert_eq!(path, "scenes[1].regions[0].features"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn benchmark_split_sizes_and_disjointness() {
    let params = GenParams { d_vision: 24, n_regions: 2, grid: 1, ..GenParams::default() };
    let mut ds = Dataset::synthetic(3, 11_959, &params).unwrap();
    split_dataset(&mut ds, SplitFractions::talk2car(), 9).unwrap();
    let sizes: Vec<usize> = [Split::Train, Split::Val, Split::Test]
        .iter()
        .map(|&s| ds.samples_in(s).len())
        .collect();
    assert_eq!(sizes, vec![8_349, 1_163, 2_447]);
    let ids: HashSet<_> = ds.samples.iter().map(|s| s.scene.id.clone()).collect();
    assert_eq!(ids.len(), 11_959);
}

#[test]
fn split_is_seeded() {
    let f = SplitFractions::new(0.6, 0.2, 0.2).unwrap();
    let labels = |seed| {
        let mut ds = small(1, 40);
        split_dataset(&mut ds, f, seed).unwrap();
        ds.samples.iter().map(|s| s.split.unwrap()).collect::<Vec<_>>()
    };
    assert_eq!(labels(4), labels(4));
    assert_ne!(labels(4), labels(5));
}

#[test]
fn generation_is_deterministic_and_seed_sensitive() {
    let a = small(42, 20);
    assert_eq!(a.digest(), small(42, 20).digest());
    assert_ne!(a.digest(), small(43, 20).digest());
    // scene i does not depend on how many scenes are generated
    assert_eq!(small(42, 5).samples[..], a.samples[..5]);
}

#[test]
fn generated_scenes_are_unambiguous_by_attributes() {
    let params = GenParams::default();
    let ds = small(8, 50);
    for s in &ds.samples {
        let attrs: Vec<_> = s.scene.regions.iter().map(|r| decode_attributes(&r.features, &params)).collect();
        let distinct: BTreeSet<_> = attrs.iter().map(|a| (a.color, a.kind, a.zone)).collect();
        assert_eq!(distinct.len(), attrs.len(), "{}", s.scene.id);
        assert_eq!(s.scene.ground_truth_box, s.scene.regions[s.target_index].bbox);
    }
}

#[test]
fn emotion_templates_cover_every_category() {
    let params = GenParams { emotion_templates: true, ..GenParams::default() };
    let ds = Dataset::synthetic(2, 120, &params).unwrap();
    let seen: HashSet<EmotionCategory> = ds.samples.iter().map(|s| classify_rule(&s.command)).collect();
    assert_eq!(seen.len(), 3, "{seen:?}");
    let plain = small(2, 60);
    assert!(plain.samples.iter().all(|s| classify_rule(&s.command) == EmotionCategory::Commanding));
}

#[test]
fn tags_follow_metadata() {
    let params = GenParams { long_text_rate: 0.5, ..GenParams::default() };
    let ds = Dataset::synthetic(6, 200, &params).unwrap();
    let mut seen = HashSet::new();
    for s in &ds.samples {
        let tags = tag_sample(s);
        assert_eq!(tags.contains(&SubsetTag::Restricted), s.scene.meta.low_light);
        assert_eq!(tags.contains(&SubsetTag::AmbiguousCommand), s.scene.meta.ambiguous);
        assert_eq!(tags.contains(&SubsetTag::LongText), s.word_count() > 23);
        assert_eq!(tags == vec![SubsetTag::Normal], !tags.iter().any(|&t| t != SubsetTag::Normal));
        seen.extend(tags);
    }
    assert_eq!(seen.len(), 5, "{seen:?}");
}

#[test]
fn unlabelled_samples_are_training_data() {
    let ds = small(1, 7);
    assert_eq!(ds.samples_in(Split::Train).len(), 7);
    assert!(ds.samples_in(Split::Test).is_empty());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn reduced_subsets_are_nested(seed in any::<u64>(), a in 0.05f64..1.0, b in 0.05f64..1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let mut ds = small(3, 60);
        split_dataset(&mut ds, SplitFractions::new(0.7, 0.1, 0.2).unwrap(), seed).unwrap();
        let n_train = ds.samples_in(Split::Train).len();
        let small_set = training_subset(&ds, lo, seed).unwrap();
        let big_set = training_subset(&ds, hi, seed).unwrap();
        prop_assert_eq!(small_set.len(), (lo * n_train as f64 + 1e-9).floor() as usize);
        prop_assert_eq!(&big_set[..small_set.len()], &small_set[..]);
        prop_assert!(big_set.iter().all(|s| s.split == Some(Split::Train)));
    }

    #[test]
    fn split_sizes_partition(n in 1usize..5000, t in 0.05f64..0.8, v in 0.01f64..0.15) {
        let f = SplitFractions::new(t, v, 1.0 - t - v).unwrap();
        let (a, b, c) = f.sizes(n);
        prop_assert_eq!(a + b + c, n);
        prop_assert!(a as f64 <= t * n as f64 + 1e-6);
    }
}
