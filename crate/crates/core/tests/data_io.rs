use std::fs;

use flowdet::data::{
    load_dataset, pad_gt_boxes, save_dataset, Dataset, DatasetSplits, Image, SceneConfig, ANNOTATIONS_FILE,
};
use flowdet::geometry::NormalizedBox;
use proptest::prelude::*;

fn scenes(count: usize) -> Dataset<f64> {
    let cfg = SceneConfig {
        image_size: 64,
        seed: 21,
        ..SceneConfig::default()
    };
    Dataset::generate(&cfg, 0, count).unwrap()
}

#[test]
fn empty_dataset_roundtrips() {
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&Dataset::<f64> { images: Vec::new() }, dir.path()).unwrap();
    assert!(load_dataset::<f64>(dir.path()).unwrap().is_empty());
}

#[test]
fn boxes_and_pixels_survive_a_roundtrip() {
    let ds = scenes(10);
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&ds, dir.path()).unwrap();
    let back = load_dataset::<f64>(dir.path()).unwrap();
    assert_eq!(back.len(), 10);
    for (a, b) in ds.images.iter().zip(&back.images) {
        assert_eq!(a.image_id, b.image_id);
        assert_eq!(a.gt_boxes.len(), b.gt_boxes.len());
        for (p, q) in a.gt_boxes.iter().zip(&b.gt_boxes) {
            for (x, y) in [(p.cx, q.cx), (p.cy, q.cy), (p.w, q.w), (p.h, q.h)] {
                assert!((x - y).abs() < 1e-9);
            }
        }
        // 16-bit quantisation
        for (x, y) in a.image.pixels.iter().zip(&b.image.pixels) {
            assert!((x - y).abs() <= 0.5 / 65535.0 + 1e-12);
        }
    }
}

#[test]
fn serialized_boxes_lie_inside_their_images() {
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&scenes(30), dir.path()).unwrap();
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join(ANNOTATIONS_FILE)).unwrap()).unwrap();
    let sizes: std::collections::HashMap<u64, (f64, f64)> = json["images"]
        .as_array()
        .unwrap()
        .iter()
        .map(|i| {
            (
                i["id"].as_u64().unwrap(),
                (i["width"].as_f64().unwrap(), i["height"].as_f64().unwrap()),
            )
        })
        .collect();
    for a in json["annotations"].as_array().unwrap() {
        let b: Vec<f64> = a["bbox"]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v.as_f64().unwrap())
            .collect();
        let (w, h) = sizes[&a["image_id"].as_u64().unwrap()];
        assert!(b[0] >= 0.0 && b[1] >= 0.0);
        assert!(b[0] + b[2] <= w + 1e-9 && b[1] + b[3] <= h + 1e-9);
    }
}

#[test]
fn hand_written_annotations_parse_to_their_values() {
    let dir = tempfile::tempdir().unwrap();
    let img = Image::new(64, 64, vec![0.25f64; 64 * 64]).unwrap();
    let one = Dataset {
        images: vec![flowdet::data::AnnotatedImage {
            image: img,
            gt_boxes: Vec::new(),
            image_id: "fixture".into(),
        }],
    };
    save_dataset(&one, dir.path()).unwrap();
    let fixture = r#"{
  "images": [{"id": 7, "file_name": "images/fixture.png", "width": 64, "height": 64}],
  "annotations": [
    {"id": 1, "image_id": 7, "bbox": [8, 16, 32, 16], "category_id": 1},
    {"id": 2, "image_id": 7, "bbox": [0, 0, 64, 64], "category_id": 1, "area": 4096, "iscrowd": 0},
    {"id": 3, "image_id": 99, "bbox": [1, 1, 2, 2], "category_id": 1}
  ],
  "categories": [{"id": 1, "name": "lesion"}]
}"#;
    fs::write(dir.path().join(ANNOTATIONS_FILE), fixture).unwrap();
    let ds = load_dataset::<f64>(dir.path()).unwrap();
    assert_eq!(ds.len(), 1);
    let a = &ds.images[0];
    assert_eq!(a.image_id, "fixture");
    assert_eq!(
        a.gt_boxes,
        vec![
            NormalizedBox::new(0.375, 0.375, 0.5, 0.25),
            NormalizedBox::new(0.5, 0.5, 1.0, 1.0)
        ]
    );
    assert!(a.image.pixels.iter().all(|&p| (p - 0.25).abs() < 1e-4));
}

#[test]
fn malformed_annotations_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join(ANNOTATIONS_FILE), "{\"images\": [").unwrap();
    let err = load_dataset::<f64>(dir.path()).unwrap_err();
    assert!(matches!(err, flowdet::FlowDetError::Parse { .. }), "{err:?}");

    let missing = r#"{"images": [{"id": 1, "file_name": "images/nope.png", "width": 8, "height": 8}],
                      "annotations": [], "categories": []}"#;
    fs::write(dir.path().join(ANNOTATIONS_FILE), missing).unwrap();
    let err = load_dataset::<f64>(dir.path()).unwrap_err();
    assert!(matches!(err, flowdet::FlowDetError::MissingImage { .. }), "{err:?}");
}

#[test]
fn generation_is_byte_reproducible() {
    let cfg = SceneConfig {
        image_size: 64,
        seed: 5,
        ..SceneConfig::default()
    };
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    DatasetSplits::<f32>::generate(&cfg, 6, 3, 3)
        .unwrap()
        .save(d1.path())
        .unwrap();
    DatasetSplits::<f32>::generate(&cfg, 6, 3, 3)
        .unwrap()
        .save(d2.path())
        .unwrap();
    for entry in walk(d1.path()) {
        let rel = entry.strip_prefix(d1.path()).unwrap();
        assert_eq!(
            fs::read(&entry).unwrap(),
            fs::read(d2.path().join(rel)).unwrap(),
            "{}",
            rel.display()
        );
    }
}

fn walk(dir: &std::path::Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn splits_are_disjoint_by_scene() {
    let cfg = SceneConfig {
        image_size: 64,
        ..SceneConfig::default()
    };
    let s = DatasetSplits::<f32>::generate(&cfg, 20, 5, 5).unwrap();
    assert!(s.disjoint());
    let mut ids: Vec<&str> = [&s.train, &s.val, &s.test]
        .iter()
        .flat_map(|d| d.images.iter().map(|a| a.image_id.as_str()))
        .collect();
    ids.sort_unstable();
    ids.dedup();
    assert_eq!(ids.len(), 30);
}

proptest! {
    #[test]
    fn padding_has_exact_length_and_cyclic_counts(g in 0usize..20, n_prop in 1usize..40) {
        let boxes: Vec<NormalizedBox<f64>> =
            (0..g).map(|i| NormalizedBox::new(0.1 + 0.04 * i as f64, 0.5, 0.1, 0.1)).collect();
        let p = pad_gt_boxes(&boxes, n_prop);
        prop_assert_eq!(p.boxes.len(), n_prop);
        let fg = p.foreground.iter().filter(|&&f| f).count();
        prop_assert_eq!(fg == 0, g == 0);
        if g > 0 {
            for k in 0..g.min(n_prop) {
                let c = p.source.iter().filter(|s| **s == Some(k)).count();
                let expect = n_prop / g + usize::from(k < n_prop % g);
                prop_assert_eq!(c, expect);
            }
        }
    }
}
