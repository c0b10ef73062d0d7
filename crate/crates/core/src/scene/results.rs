//! COCO results files: one record per predicted person.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ohgc::GroupingResult;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub image_id: u64,
    pub category_id: u32,
    /// Flat `[x, y, v]` triplets in pixels, `(0, 0, 0)` for missing types.
    pub keypoints: Vec<f64>,
    pub score: f64,
}

impl ResultRecord {
    /// Per-type positions; a triplet with `v == 0` is a missing type.
    pub fn positions(&self) -> Vec<Option<[f64; 2]>> {
        self.keypoints
            .chunks_exact(3)
            .map(|t| (t[2] > 0.0).then_some([t[0], t[1]]))
            .collect()
    }
}

pub fn write_results(results: &[GroupingResult]) -> String {
    let records: Vec<ResultRecord> = results
        .iter()
        .flat_map(|r| {
            r.persons.iter().map(move |p| ResultRecord {
                image_id: r.image_id,
                category_id: 1,
                keypoints: p
                    .keypoints
                    .iter()
                    .flat_map(|kp| match kp {
                        Some([x, y]) => [*x, *y, 1.0],
                        None => [0.0, 0.0, 0.0],
                    })
                    .collect(),
                score: p.score,
            })
        })
        .collect();
    serde_json::to_string(&records).expect("results serialize")
}

pub fn save_results(results: &[GroupingResult], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, write_results(results)).map_err(|e| Error::io(path, e))
}

pub fn parse_results(text: &str) -> Result<Vec<ResultRecord>> {
    serde_json::from_str(text).map_err(|e| Error::json(e, text))
}

pub fn load_results(path: impl AsRef<Path>) -> Result<Vec<ResultRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_results(&text)
}
