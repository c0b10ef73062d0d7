//! Associative-embedding style greedy decoding, the comparison baseline.

use crate::graph::canonical_order;
use crate::ohgc::{GroupingResult, PersonInstance};
use crate::scene::{Scene, Skeleton};

/// Default tag distance within which a keypoint may join a person.
pub const DEFAULT_TAG_THRESHOLD: f64 = 1.0;

struct Partial {
    members: Vec<usize>,
    tag_sum: Vec<f64>,
    taken: Vec<bool>,
}

impl Partial {
    fn mean_distance(&self, tag: &[f64]) -> f64 {
        let n = self.members.len() as f64;
        self.tag_sum
            .iter()
            .zip(tag)
            .map(|(s, t)| (s / n - t).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    fn push(&mut self, index: usize, kind: usize, tag: &[f64]) {
        self.members.push(index);
        self.taken[kind] = true;
        for (s, t) in self.tag_sum.iter_mut().zip(tag) {
            *s += t;
        }
    }
}

/// Groups candidates type by type (breadth-first over the skeleton tree from
/// the root type). Within a type, candidates are visited by descending
/// confidence and join the free person with the nearest mean tag when that
/// distance is below `tag_threshold`; otherwise they start a new person.
pub fn greedy_decode(scene: &Scene, skeleton: &Skeleton, tag_threshold: f64) -> GroupingResult {
    let num_types = skeleton.len();
    let mut by_type: Vec<Vec<usize>> = vec![Vec::new(); num_types];
    for i in canonical_order(scene) {
        let kind = scene.candidates[i].kind;
        if kind < num_types {
            by_type[kind].push(i);
        }
    }

    let mut persons: Vec<Partial> = Vec::new();
    for kind in skeleton.breadth_first_order() {
        let mut group = std::mem::take(&mut by_type[kind]);
        // stable: canonical order breaks confidence ties
        group.sort_by(|&a, &b| {
            scene.candidates[b]
                .confidence
                .total_cmp(&scene.candidates[a].confidence)
        });
        for i in group {
            let tag = &scene.candidates[i].embedding;
            let mut best: Option<(usize, f64)> = None;
            for (p, person) in persons.iter().enumerate() {
                if person.taken[kind] {
                    continue;
                }
                let d = person.mean_distance(tag);
                if d < tag_threshold && best.is_none_or(|(_, bd)| d < bd) {
                    best = Some((p, d));
                }
            }
            match best {
                Some((p, _)) => persons[p].push(i, kind, tag),
                None => {
                    let mut person = Partial {
                        members: Vec::new(),
                        tag_sum: vec![0.0; tag.len()],
                        taken: vec![false; num_types],
                    };
                    person.push(i, kind, tag);
                    persons.push(person);
                }
            }
        }
    }

    let (w, h) = (f64::from(scene.width), f64::from(scene.height));
    let persons = persons
        .into_iter()
        .map(|p| {
            let mut keypoints = vec![None; num_types];
            let mut conf = 0.0;
            let mut members = Vec::with_capacity(p.members.len());
            for &i in &p.members {
                let c = &scene.candidates[i];
                keypoints[c.kind] = Some([c.x * w, c.y * h]);
                conf += c.confidence;
                members.push(c.id);
            }
            members.sort_unstable();
            PersonInstance {
                score: conf / p.members.len() as f64,
                members,
                keypoints,
                macro_score: 1.0,
                suppressed: false,
            }
        })
        .collect();
    GroupingResult {
        image_id: scene.image_id,
        persons,
        iterations_used: 0,
    }
}
