//! COCO keypoint annotation files.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{GroundTruthPerson, GtKeypoint, KeypointCandidate, Scene, Skeleton};
use crate::error::{Error, Result};

#[derive(Debug, Deserialize, Serialize)]
struct CocoFile {
    images: Vec<CocoImage>,
    #[serde(default)]
    annotations: Vec<CocoAnnotation>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    categories: Vec<CocoCategory>,
}

#[derive(Debug, Deserialize, Serialize)]
struct CocoImage {
    id: u64,
    width: u32,
    height: u32,
}

#[derive(Debug, Deserialize, Serialize)]
struct CocoAnnotation {
    id: u64,
    image_id: u64,
    #[serde(default = "person_category")]
    category_id: u64,
    keypoints: Vec<f64>,
    area: Option<f64>,
    #[serde(default)]
    iscrowd: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    num_keypoints: Option<usize>,
}

#[derive(Debug, Deserialize, Serialize)]
struct CocoCategory {
    id: u64,
    name: String,
    #[serde(default)]
    keypoints: Vec<String>,
    #[serde(default)]
    skeleton: Vec<[usize; 2]>,
}

fn person_category() -> u64 {
    1
}

/// Reads a COCO keypoint annotation file into one scene per image.
///
/// Every labeled keypoint (v > 0) becomes a candidate with confidence 1 and a
/// zero embedding of width `embedding_dim`; such scenes are flagged with
/// `embeddings_missing`. Crowd annotations and annotations without labeled
/// keypoints are skipped.
pub fn load_coco(
    path: impl AsRef<Path>,
    skeleton: &Skeleton,
    embedding_dim: usize,
) -> Result<Vec<Scene>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_coco(&text, skeleton, embedding_dim)
}

pub fn parse_coco(text: &str, skeleton: &Skeleton, embedding_dim: usize) -> Result<Vec<Scene>> {
    let file: CocoFile = serde_json::from_str(text).map_err(|e| Error::json(e, text))?;
    let num_types = skeleton.len();

    let mut scenes: BTreeMap<u64, Scene> = BTreeMap::new();
    for img in &file.images {
        let mut scene = Scene::empty(img.id, img.width, img.height, embedding_dim);
        scene.gt_persons = Some(Vec::new());
        scene.embeddings_missing = true;
        scenes.insert(img.id, scene);
    }

    for ann in &file.annotations {
        if ann.keypoints.len() != 3 * num_types {
            return Err(Error::Schema {
                annotation_id: ann.id,
                message: format!(
                    "expected {} keypoint values, found {}",
                    3 * num_types,
                    ann.keypoints.len()
                ),
            });
        }
        let scene = scenes.get_mut(&ann.image_id).ok_or_else(|| Error::Schema {
            annotation_id: ann.id,
            message: format!("unknown image_id {}", ann.image_id),
        })?;
        if ann.iscrowd != 0 {
            continue;
        }
        let keypoints: Vec<Option<GtKeypoint>> = ann
            .keypoints
            .chunks_exact(3)
            .map(|t| {
                (t[2] > 0.0).then_some(GtKeypoint {
                    x: t[0],
                    y: t[1],
                    visibility: t[2] as u8,
                })
            })
            .collect();
        if keypoints.iter().all(Option::is_none) {
            continue;
        }
        let area = ann.area.unwrap_or(0.0);
        if !(area > 0.0) {
            return Err(Error::Schema {
                annotation_id: ann.id,
                message: "area must be positive".into(),
            });
        }
        let (w, h) = (f64::from(scene.width), f64::from(scene.height));
        for (kind, kp) in keypoints.iter().enumerate() {
            if let Some(kp) = kp {
                let id = scene.candidates.len() as u64;
                scene.candidates.push(KeypointCandidate {
                    id,
                    kind,
                    x: (kp.x / w).clamp(0.0, 1.0),
                    y: (kp.y / h).clamp(0.0, 1.0),
                    confidence: 1.0,
                    embedding: vec![0.0; embedding_dim],
                    gt_person: Some(ann.id),
                });
            }
        }
        scene
            .gt_persons
            .get_or_insert_with(Vec::new)
            .push(GroundTruthPerson {
                person_id: ann.id,
                keypoints,
                area,
            });
    }
    Ok(scenes.into_values().collect())
}

/// Writes the ground truth of `scenes` as a COCO keypoint annotation file.
/// Annotation ids are the scenes' person ids.
pub fn save_coco_gt(scenes: &[Scene], skeleton: &Skeleton, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = write_coco_gt(scenes, skeleton);
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_coco_gt(scenes: &[Scene], skeleton: &Skeleton) -> String {
    let images = scenes
        .iter()
        .map(|s| CocoImage {
            id: s.image_id,
            width: s.width,
            height: s.height,
        })
        .collect();
    let mut annotations = Vec::new();
    for s in scenes {
        for p in s.gt_persons.iter().flatten() {
            let mut keypoints = Vec::with_capacity(3 * skeleton.len());
            for kp in &p.keypoints {
                match kp {
                    Some(k) => keypoints.extend([k.x, k.y, f64::from(k.visibility)]),
                    None => keypoints.extend([0.0, 0.0, 0.0]),
                }
            }
            annotations.push(CocoAnnotation {
                id: p.person_id,
                image_id: s.image_id,
                category_id: 1,
                keypoints,
                area: Some(p.area),
                iscrowd: 0,
                num_keypoints: Some(p.labeled_count()),
            });
        }
    }
    let categories = vec![CocoCategory {
        id: 1,
        name: "person".into(),
        keypoints: skeleton.types.iter().map(|t| t.name.clone()).collect(),
        skeleton: skeleton
            .tree_edges
            .iter()
            .map(|&(a, b)| [a + 1, b + 1])
            .collect(),
    }];
    serde_json::to_string(&CocoFile {
        images,
        annotations,
        categories,
    })
    .expect("coco file serializes")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn triplets(visible: &[usize]) -> String {
        let vals: Vec<String> = (0..17)
            .map(|k| {
                if visible.contains(&k) {
                    format!("{}, {}, 2", 10 + k * 5, 20 + k * 3)
                } else {
                    "0, 0, 0".to_string()
                }
            })
            .collect();
        vals.join(", ")
    }

    fn fixture(visible: &[usize]) -> String {
        format!(
            r#"{{"images": [{{"id": 7, "width": 200, "height": 100}}],
                "annotations": [{{"id": 11, "image_id": 7, "category_id": 1, "area": 500.0,
                                  "keypoints": [{}]}}]}}"#,
            triplets(visible)
        )
    }

    #[test]
    fn all_visible_person() {
        let all: Vec<usize> = (0..17).collect();
        let scenes = parse_coco(&fixture(&all), &Skeleton::coco(), 4).unwrap();
        assert_eq!(scenes.len(), 1);
        let s = &scenes[0];
        assert_eq!(s.candidates.len(), 17);
        assert_eq!(s.gt_persons.as_ref().unwrap().len(), 1);
        assert!(s.embeddings_missing);
        let c = &s.candidates[3];
        assert_eq!(c.kind, 3);
        assert!((c.x - 25.0 / 200.0).abs() < 1e-12);
        assert!((c.y - 29.0 / 100.0).abs() < 1e-12);
        assert_eq!(c.gt_person, Some(11));
        assert_eq!(c.confidence, 1.0);
        assert_eq!(c.embedding, vec![0.0; 4]);
        s.validate(17).unwrap();
    }

    #[test]
    fn image_without_annotations() {
        let text = r#"{"images": [{"id": 1, "width": 10, "height": 10}], "annotations": []}"#;
        let scenes = parse_coco(text, &Skeleton::coco(), 4).unwrap();
        assert_eq!(scenes.len(), 1);
        assert!(scenes[0].candidates.is_empty());
    }

    #[test]
    fn partially_visible_person() {
        let visible = [0, 4, 9, 12, 16];
        let text = fixture(&visible);
        // independent count straight from the fixture text
        let raw: serde_json::Value = serde_json::from_str(&text).unwrap();
        let expected = raw["annotations"][0]["keypoints"]
            .as_array()
            .unwrap()
            .chunks(3)
            .filter(|t| t[2].as_f64().unwrap() > 0.0)
            .count();
        assert_eq!(expected, 5);
        let scenes = parse_coco(&text, &Skeleton::coco(), 4).unwrap();
        assert_eq!(scenes[0].candidates.len(), expected);
        let kinds: Vec<usize> = scenes[0].candidates.iter().map(|c| c.kind).collect();
        assert_eq!(kinds, visible);
    }

    #[test]
    fn malformed_json_reports_offset() {
        let text = r#"{"images": [}"#;
        match parse_coco(text, &Skeleton::coco(), 4) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 12),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn wrong_keypoint_length_names_annotation() {
        let text = r#"{"images": [{"id": 1, "width": 10, "height": 10}],
            "annotations": [{"id": 99, "image_id": 1, "area": 1.0, "keypoints": [1, 2, 2]}]}"#;
        match parse_coco(text, &Skeleton::coco(), 4) {
            Err(Error::Schema { annotation_id, .. }) => assert_eq!(annotation_id, 99),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn gt_file_round_trips() {
        let all: Vec<usize> = (0..17).collect();
        let sk = Skeleton::coco();
        let scenes = parse_coco(&fixture(&all), &sk, 4).unwrap();
        let again = parse_coco(&write_coco_gt(&scenes, &sk), &sk, 4).unwrap();
        assert_eq!(scenes, again);
    }
}
