//! Scenes, keypoint candidates and their file formats.

mod coco;
mod results;
mod skeleton;
mod synth;

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use coco::{load_coco, parse_coco, save_coco_gt, write_coco_gt};
pub use results::{load_results, parse_results, save_results, write_results, ResultRecord};
pub use skeleton::{
    KeypointType, Skeleton, COCO_BYPASS_EXTRA, COCO_EXTENDED_EXTRA, COCO_NAMES, COCO_SIGMAS,
    COCO_TREE,
};
pub use synth::{SceneGenerator, SynthConfig};

/// Embedding width used when nothing else is configured.
pub const DEFAULT_EMBEDDING_DIM: usize = 4;

/// One detected keypoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeypointCandidate {
    pub id: u64,
    /// Keypoint type index into the skeleton.
    pub kind: usize,
    /// Position normalized by image width/height.
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
    pub embedding: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_person: Option<u64>,
}

/// A labeled ground-truth keypoint in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtKeypoint {
    pub x: f64,
    pub y: f64,
    pub visibility: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthPerson {
    pub person_id: u64,
    /// One entry per keypoint type; `None` where the type is unlabeled.
    pub keypoints: Vec<Option<GtKeypoint>>,
    /// Instance area in pixels², the OKS scale.
    pub area: f64,
}

impl GroundTruthPerson {
    pub fn labeled_count(&self) -> usize {
        self.keypoints.iter().flatten().count()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub image_id: u64,
    pub width: u32,
    pub height: u32,
    pub embedding_dim: usize,
    pub candidates: Vec<KeypointCandidate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_persons: Option<Vec<GroundTruthPerson>>,
    /// Set when the embeddings are placeholders (e.g. ingested from COCO).
    #[serde(default)]
    pub embeddings_missing: bool,
}

impl Scene {
    pub fn empty(image_id: u64, width: u32, height: u32, embedding_dim: usize) -> Self {
        Scene {
            image_id,
            width,
            height,
            embedding_dim,
            candidates: Vec::new(),
            gt_persons: None,
            embeddings_missing: false,
        }
    }

    /// True when every candidate carries a person label and the persons exist.
    pub fn has_ground_truth(&self) -> bool {
        self.gt_persons.is_some() && self.candidates.iter().all(|c| c.gt_person.is_some())
    }

    /// Checks the structural invariants of the scene against a keypoint count.
    pub fn validate(&self, num_types: usize) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::contract(format!(
                "image {} has zero extent",
                self.image_id
            )));
        }
        let mut ids = BTreeSet::new();
        for c in &self.candidates {
            if !ids.insert(c.id) {
                return Err(Error::contract(format!(
                    "image {}: duplicate candidate id {}",
                    self.image_id, c.id
                )));
            }
            if c.kind >= num_types {
                return Err(Error::contract(format!(
                    "candidate {} has type {} outside [0, {num_types})",
                    c.id, c.kind
                )));
            }
            if !(0.0..=1.0).contains(&c.x) || !(0.0..=1.0).contains(&c.y) {
                return Err(Error::contract(format!(
                    "candidate {} lies outside the unit square",
                    c.id
                )));
            }
            if c.embedding.len() != self.embedding_dim {
                return Err(Error::contract(format!(
                    "candidate {} has embedding length {} (scene declares {})",
                    c.id,
                    c.embedding.len(),
                    self.embedding_dim
                )));
            }
        }
        let persons: BTreeSet<u64> = self
            .gt_persons
            .iter()
            .flatten()
            .map(|p| p.person_id)
            .collect();
        for c in &self.candidates {
            if let Some(p) = c.gt_person {
                if !persons.contains(&p) {
                    return Err(Error::contract(format!(
                        "candidate {} references unknown person {p}",
                        c.id
                    )));
                }
            }
        }
        for p in self.gt_persons.iter().flatten() {
            if p.labeled_count() == 0 || p.area <= 0.0 {
                return Err(Error::contract(format!(
                    "image {}: person {} needs a labeled keypoint and positive area",
                    self.image_id, p.person_id
                )));
            }
        }
        Ok(())
    }
}

/// The scene JSON container written by `synth` and read by the other commands.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneDataset {
    pub version: u32,
    pub scenes: Vec<Scene>,
}

impl SceneDataset {
    pub const VERSION: u32 = 1;

    pub fn new(scenes: Vec<Scene>) -> Self {
        SceneDataset {
            version: Self::VERSION,
            scenes,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let data: SceneDataset = serde_json::from_str(&text).map_err(|e| Error::json(e, &text))?;
        if data.version != Self::VERSION {
            return Err(Error::Config(format!(
                "unsupported scene dataset version {}",
                data.version
            )));
        }
        Ok(data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self).expect("scene dataset serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}
