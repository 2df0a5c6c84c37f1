//! COCO JSON ingestion and emission.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::{Annotation, AnnotationId, BBox, Category, CategoryId, DatasetSplit, Detection, ImageId, ImageInfo};
use crate::error::{Error, Result};
use crate::scalar::{desc, Scalar};

#[derive(Deserialize, Serialize)]
struct RawImage {
    id: u64,
    #[serde(default)]
    width: u32,
    #[serde(default)]
    height: u32,
    #[serde(default)]
    file_name: String,
}

#[derive(Deserialize, Serialize)]
struct RawAnnotation {
    id: u64,
    image_id: u64,
    category_id: u64,
    bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    area: Option<f64>,
    #[serde(default = "default_true")]
    is_ground_truth: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    score: Option<f64>,
}

fn default_true() -> bool {
    true
}

#[derive(Deserialize, Serialize)]
struct RawCategory {
    id: u64,
    name: String,
}

#[derive(Deserialize, Serialize)]
struct RawDataset {
    images: Vec<RawImage>,
    annotations: Vec<RawAnnotation>,
    categories: Vec<RawCategory>,
}

#[derive(Serialize)]
struct RawResultOut {
    #[serde(skip_serializing_if = "Option::is_none")]
    id: Option<u64>,
    image_id: u64,
    category_id: u64,
    bbox: [f64; 4],
    score: f64,
}

#[derive(Deserialize)]
struct RawResultIn {
    #[serde(default)]
    id: Option<u64>,
    image_id: u64,
    #[serde(default)]
    category_id: u64,
    bbox: [f64; 4],
    score: f64,
    #[serde(default)]
    phrase: Option<String>,
}

fn to_box<T: Scalar>(raw: [f64; 4]) -> Result<BBox<T>> {
    BBox::new(T::lit(raw[0]), T::lit(raw[1]), T::lit(raw[2]), T::lit(raw[3]))
}

fn from_box<T: Scalar>(b: &BBox<T>) -> [f64; 4] {
    b.as_array().map(|v| v.to_f64_lossy())
}

/// Parse a COCO dataset file into a linked, validated split.
pub fn load_coco<T: Scalar>(bytes: &[u8]) -> Result<DatasetSplit<T>> {
    let raw: RawDataset = serde_json::from_slice(bytes)?;
    let images = raw
        .images
        .into_iter()
        .map(|i| ImageInfo {
            id: ImageId(i.id),
            width: i.width,
            height: i.height,
            file_name: i.file_name,
        })
        .collect();
    let categories = raw
        .categories
        .into_iter()
        .map(|c| Category {
            id: CategoryId(c.id),
            name: c.name,
        })
        .collect();
    let annotations = raw
        .annotations
        .into_iter()
        .map(|a| {
            Ok(Annotation {
                id: AnnotationId(a.id),
                image_id: ImageId(a.image_id),
                bbox: to_box(a.bbox)?,
                category_id: CategoryId(a.category_id),
                is_ground_truth: a.is_ground_truth,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    DatasetSplit::new(images, annotations, categories)
}

/// Serialize a split (support set, merged pseudo-label set) as COCO JSON.
pub fn emit_split<T: Scalar>(split: &DatasetSplit<T>) -> Result<Vec<u8>> {
    let raw = RawDataset {
        images: split
            .images
            .iter()
            .map(|i| RawImage {
                id: i.id.0,
                width: i.width,
                height: i.height,
                file_name: i.file_name.clone(),
            })
            .collect(),
        annotations: split
            .annotations
            .iter()
            .map(|a| RawAnnotation {
                id: a.id.0,
                image_id: a.image_id.0,
                category_id: a.category_id.0,
                bbox: from_box(&a.bbox),
                area: Some(a.bbox.area().to_f64_lossy()),
                is_ground_truth: a.is_ground_truth,
                score: None,
            })
            .collect(),
        categories: split
            .categories
            .iter()
            .map(|c| RawCategory {
                id: c.id.0,
                name: c.name.clone(),
            })
            .collect(),
    };
    Ok(serde_json::to_vec_pretty(&raw)?)
}

/// COCO results array ordered by image id, then descending score.
///
/// Equal scores keep their input order, so output is byte-stable for a given
/// input. Every image id must exist in `split`.
pub fn emit_results<T: Scalar>(dets: &[Detection<T>], split: &DatasetSplit<T>) -> Result<Vec<u8>> {
    let known: HashSet<ImageId> = split.images.iter().map(|i| i.id).collect();
    if let Some(d) = dets.iter().find(|d| !known.contains(&d.image_id)) {
        return Err(Error::UnknownImageId(d.image_id));
    }
    let mut order: Vec<&Detection<T>> = dets.iter().collect();
    order.sort_by(|a, b| a.image_id.cmp(&b.image_id).then(desc(a.score, b.score)));
    let raw: Vec<RawResultOut> = order
        .into_iter()
        .map(|d| RawResultOut {
            id: None,
            image_id: d.image_id.0,
            category_id: d.category_id.0,
            bbox: from_box(&d.bbox),
            score: d.score.to_f64_lossy(),
        })
        .collect();
    Ok(serde_json::to_vec(&raw)?)
}

/// Records as a COCO results array in input order, keeping `id` when set.
/// Used for proposal files, where `id` links to the embedding store and the
/// score carries objectness.
pub fn emit_records<T: Scalar>(records: &[ResultRecord<T>]) -> Result<Vec<u8>> {
    let raw: Vec<RawResultOut> = records
        .iter()
        .map(|r| RawResultOut {
            id: r.id,
            image_id: r.detection.image_id.0,
            category_id: r.detection.category_id.0,
            bbox: from_box(&r.detection.bbox),
            score: r.detection.score.to_f64_lossy(),
        })
        .collect();
    Ok(serde_json::to_vec(&raw)?)
}

/// One entry of a COCO results array, plus the optional fields proposal and
/// grounding-model outputs carry (`id`, `phrase`).
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRecord<T> {
    pub id: Option<u64>,
    pub detection: Detection<T>,
    pub phrase: Option<String>,
}

pub fn load_results<T: Scalar>(bytes: &[u8]) -> Result<Vec<ResultRecord<T>>> {
    let raw: Vec<RawResultIn> = serde_json::from_slice(bytes)?;
    raw.into_iter()
        .map(|r| {
            Ok(ResultRecord {
                id: r.id,
                detection: Detection::new(
                    ImageId(r.image_id),
                    to_box(r.bbox)?,
                    CategoryId(r.category_id),
                    T::lit(r.score),
                ),
                phrase: r.phrase,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "images": [{"id": 1, "width": 100, "height": 80, "file_name": "a.jpg"}],
        "annotations": [{"id": 7, "image_id": 1, "category_id": 3, "bbox": [1, 2, 3, 4], "iscrowd": 0}],
        "categories": [{"id": 3, "name": "fish", "supercategory": "animal"}],
        "info": {"year": 2026}
    }"#;

    #[test]
    fn loads_minimal_file() {
        let s: DatasetSplit<f64> = load_coco(MINIMAL.as_bytes()).unwrap();
        assert_eq!(s.images.len(), 1);
        assert_eq!(s.annotations.len(), 1);
        assert_eq!(s.annotations[0].bbox, BBox::new(1., 2., 3., 4.).unwrap());
        assert!(s.annotations[0].is_ground_truth);
        assert_eq!(s.shot, Some(1));
    }

    #[test]
    fn dangling_image_reference() {
        let bad = MINIMAL.replace("\"image_id\": 1", "\"image_id\": 9");
        assert!(matches!(
            load_coco::<f64>(bad.as_bytes()),
            Err(Error::DanglingReference(_))
        ));
        let bad = MINIMAL.replace("\"category_id\": 3", "\"category_id\": 4");
        assert!(matches!(
            load_coco::<f64>(bad.as_bytes()),
            Err(Error::DanglingReference(_))
        ));
    }

    #[test]
    fn malformed_and_degenerate() {
        assert!(matches!(load_coco::<f64>(b"{"), Err(Error::MalformedJson(_))));
        assert!(matches!(
            load_coco::<f64>(br#"{"images": []}"#),
            Err(Error::MalformedJson(_))
        ));
        let bad = MINIMAL.replace("[1, 2, 3, 4]", "[1, 2, 0, 4]");
        assert!(matches!(
            load_coco::<f64>(bad.as_bytes()),
            Err(Error::NonPositiveBox { .. })
        ));
    }

    #[test]
    fn ten_shot_six_categories_infers_shot() {
        let mut images = Vec::new();
        let mut anns = Vec::new();
        for i in 0..60u64 {
            images.push(format!(
                r#"{{"id": {i}, "width": 64, "height": 64, "file_name": "{i}.jpg"}}"#
            ));
            anns.push(format!(
                r#"{{"id": {}, "image_id": {i}, "category_id": {}, "bbox": [1, 1, 10, 10]}}"#,
                i + 100,
                i % 6 + 1
            ));
        }
        let cats: Vec<String> = (1..=6)
            .map(|c| format!(r#"{{"id": {c}, "name": "c{c}"}}"#))
            .collect();
        let json = format!(
            r#"{{"images": [{}], "annotations": [{}], "categories": [{}]}}"#,
            images.join(","),
            anns.join(","),
            cats.join(",")
        );
        let s: DatasetSplit<f64> = load_coco(json.as_bytes()).unwrap();
        assert_eq!(s.annotations.len(), 60);
        assert_eq!(s.shot, Some(10));
        assert!(s.annotations_per_category().values().all(|&n| n == 10));
    }

    #[test]
    fn emit_results_examples() {
        let s: DatasetSplit<f64> = load_coco(MINIMAL.as_bytes()).unwrap();
        assert_eq!(emit_results::<f64>(&[], &s).unwrap(), b"[]");

        let bx = BBox::new(1.5, 2.0, 3.0, 4.25).unwrap();
        let one = [Detection::new(ImageId(1), bx, CategoryId(3), 0.5)];
        let out = String::from_utf8(emit_results(&one, &s).unwrap()).unwrap();
        assert_eq!(
            out,
            r#"[{"image_id":1,"category_id":3,"bbox":[1.5,2.0,3.0,4.25],"score":0.5}]"#
        );

        let two = [
            Detection::new(ImageId(1), bx, CategoryId(3), 0.3),
            Detection::new(ImageId(1), bx, CategoryId(3), 0.9),
        ];
        let v: serde_json::Value = serde_json::from_slice(&emit_results(&two, &s).unwrap()).unwrap();
        assert_eq!(v[0]["score"], 0.9);
        assert_eq!(v[1]["score"], 0.3);
        assert_eq!(emit_results(&two, &s).unwrap(), emit_results(&two, &s).unwrap());
    }

    #[test]
    fn emit_results_rejects_unknown_image() {
        let s: DatasetSplit<f64> = load_coco(MINIMAL.as_bytes()).unwrap();
        let d = Detection::new(ImageId(2), BBox::new(0., 0., 1., 1.).unwrap(), CategoryId(3), 0.5);
        assert!(matches!(emit_results(&[d], &s), Err(Error::UnknownImageId(ImageId(2)))));
    }

    #[test]
    fn results_roundtrip_through_loader() {
        let s: DatasetSplit<f64> = load_coco(MINIMAL.as_bytes()).unwrap();
        let dets = s.as_detections();
        let back: Vec<ResultRecord<f64>> = load_results(&emit_results(&dets, &s).unwrap()).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].detection, dets[0]);
    }

    #[test]
    fn records_keep_ids_and_order() {
        let b = BBox::new(1.0, 2.0, 3.0, 4.0).unwrap();
        let recs = vec![
            ResultRecord { id: Some(9), detection: Detection::new(ImageId(2), b, CategoryId(0), 0.1), phrase: None },
            ResultRecord { id: Some(4), detection: Detection::new(ImageId(1), b, CategoryId(0), 0.7), phrase: None },
        ];
        let bytes = emit_records(&recs).unwrap();
        assert_eq!(load_results::<f64>(&bytes).unwrap(), recs);
        assert!(!String::from_utf8(emit_results(&[], &load_coco::<f64>(MINIMAL.as_bytes()).unwrap()).unwrap()).unwrap().contains("id"));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn support_roundtrip_preserves_boxes(
                raw in proptest::collection::vec((0u64..4, 1u64..4, 0.0..100.0f64, 0.0..100.0f64, 0.5..50.0f64, 0.5..50.0f64), 0..20)
            ) {
                let images = (0..4).map(|i| ImageInfo { id: ImageId(i), width: 200, height: 200, file_name: format!("{i}.png") }).collect();
                let categories = (1..4).map(|c| Category { id: CategoryId(c), name: format!("c{c}") }).collect();
                let annotations = raw.iter().enumerate().map(|(k, &(img, cat, x, y, w, h))| Annotation {
                    id: AnnotationId(k as u64 + 1),
                    image_id: ImageId(img),
                    bbox: BBox::new(x, y, w, h).unwrap(),
                    category_id: CategoryId(cat),
                    is_ground_truth: true,
                }).collect();
                let split = DatasetSplit::new(images, annotations, categories).unwrap();
                let back: DatasetSplit<f64> = load_coco(&emit_split(&split).unwrap()).unwrap();
                let key = |s: &DatasetSplit<f64>| {
                    let mut v: Vec<_> = s.annotations.iter().map(|a| (a.image_id, a.category_id, a.bbox.as_array().map(f64::to_bits))).collect();
                    v.sort();
                    v
                };
                prop_assert_eq!(key(&split), key(&back));
            }
        }
    }
}
