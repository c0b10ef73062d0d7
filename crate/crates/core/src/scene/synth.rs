//! Seeded synthetic multi-person scenes with ground truth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{GroundTruthPerson, GtKeypoint, KeypointCandidate, Scene, DEFAULT_EMBEDDING_DIM};
use crate::error::{Error, Result};

/// Stick figure in COCO keypoint order; offsets in units of person height,
/// relative to the body center, y pointing down.
const TEMPLATE: [(f64, f64); 17] = [
    (0.00, -0.42),
    (0.03, -0.45),
    (-0.03, -0.45),
    (0.07, -0.43),
    (-0.07, -0.43),
    (0.13, -0.30),
    (-0.13, -0.30),
    (0.18, -0.12),
    (-0.18, -0.12),
    (0.20, 0.04),
    (-0.20, 0.04),
    (0.08, 0.05),
    (-0.08, 0.05),
    (0.09, 0.28),
    (-0.09, 0.28),
    (0.09, 0.50),
    (-0.09, 0.50),
];

fn template_offset(kind: usize) -> (f64, f64) {
    TEMPLATE.get(kind).copied().unwrap_or_else(|| {
        // types beyond the COCO layout sit on a ring around the torso
        let angle = kind as f64 * 2.399_963;
        (0.15 * angle.cos(), 0.15 * angle.sin())
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Inclusive range the person count is drawn from.
    pub person_count_range: (usize, usize),
    pub num_types: usize,
    pub embedding_dim: usize,
    /// Minimum distance between person embedding centers, in units of the
    /// within-person noise std.
    pub embedding_separation: f64,
    pub embedding_noise_std: f64,
    pub keypoint_drop_prob: f64,
    /// Per-keypoint position noise, normalized image units.
    pub position_jitter_std: f64,
    /// Range of person heights as a fraction of the image height.
    pub person_height_range: (f64, f64),
    /// Minimum distance between body centers (normalized units); 0 disables.
    pub min_center_distance: f64,
    pub image_width: u32,
    pub image_height: u32,
    pub rng_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            person_count_range: (2, 6),
            num_types: 17,
            embedding_dim: DEFAULT_EMBEDDING_DIM,
            embedding_separation: 6.0,
            embedding_noise_std: 1.0,
            keypoint_drop_prob: 0.0,
            position_jitter_std: 0.005,
            person_height_range: (0.25, 0.4),
            min_center_distance: 0.0,
            image_width: 512,
            image_height: 512,
            rng_seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.person_count_range;
        let bad = |msg: &str| Err(Error::Config(format!("synth: {msg}")));
        if hi < lo {
            return bad("person_count_range max is below min");
        }
        if hi >= 1000 {
            return bad("at most 999 persons per scene");
        }
        if self.num_types == 0 || self.num_types > 128 {
            return bad("num_types must lie in [1, 128]");
        }
        if !(0.0..=1.0).contains(&self.keypoint_drop_prob) {
            return bad("keypoint_drop_prob must lie in [0, 1]");
        }
        let nonneg = |v: f64| v >= 0.0 && v.is_finite();
        if !nonneg(self.embedding_separation)
            || !nonneg(self.embedding_noise_std)
            || !nonneg(self.position_jitter_std)
            || !nonneg(self.min_center_distance)
        {
            return bad("separation, noise, jitter and spacing must be finite and nonnegative");
        }
        let (h0, h1) = self.person_height_range;
        if !(h0 > 0.0 && h1 >= h0 && h1 < 1.0) {
            return bad("person_height_range must satisfy 0 < min <= max < 1");
        }
        if self.image_width == 0 || self.image_height == 0 {
            return bad("image size must be positive");
        }
        Ok(())
    }
}

/// Generator bound to a validated [`SynthConfig`].
#[derive(Clone, Debug)]
pub struct SceneGenerator {
    cfg: SynthConfig,
}

fn mix_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl SceneGenerator {
    pub fn new(cfg: SynthConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(SceneGenerator { cfg })
    }

    pub fn config(&self) -> &SynthConfig {
        &self.cfg
    }

    /// The scene seeded directly by `rng_seed`, with image id 0.
    pub fn generate(&self) -> Scene {
        self.scene_with_rng(0, &mut ChaCha8Rng::seed_from_u64(self.cfg.rng_seed))
    }

    /// Scene `index` of the dataset stream defined by `rng_seed`.
    pub fn scene(&self, index: u64) -> Scene {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.cfg.rng_seed, index));
        self.scene_with_rng(index, &mut rng)
    }

    pub fn scenes(&self, count: usize) -> Vec<Scene> {
        (0..count as u64).map(|i| self.scene(i)).collect()
    }

    fn scene_with_rng(&self, image_id: u64, rng: &mut ChaCha8Rng) -> Scene {
        let cfg = &self.cfg;
        let (lo, hi) = cfg.person_count_range;
        let persons = rng.random_range(lo..=hi);
        let centers = self.embedding_centers(persons, rng);
        let (w, h) = (f64::from(cfg.image_width), f64::from(cfg.image_height));

        let mut scene = Scene::empty(image_id, cfg.image_width, cfg.image_height, cfg.embedding_dim);
        let mut gt = Vec::with_capacity(persons);
        let mut body_centers: Vec<(f64, f64)> = Vec::with_capacity(persons);

        for (p, center) in centers.iter().enumerate() {
            let height = rng.random_range(cfg.person_height_range.0..=cfg.person_height_range.1);
            let (cx, cy) = self.place(height, &body_centers, rng);
            body_centers.push((cx, cy));
            let person_id = image_id * 1000 + p as u64;

            let mut keypoints = Vec::with_capacity(cfg.num_types);
            let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
            for kind in 0..cfg.num_types {
                let (ox, oy) = template_offset(kind);
                let jx: f64 = rng.sample(StandardNormal);
                let jy: f64 = rng.sample(StandardNormal);
                let x = (cx + ox * height + jx * cfg.position_jitter_std).clamp(0.0, 1.0);
                let y = (cy + oy * height + jy * cfg.position_jitter_std).clamp(0.0, 1.0);
                let dropped = rng.random::<f64>() < cfg.keypoint_drop_prob;
                let confidence = rng.random_range(0.5..=1.0);
                let embedding: Vec<f64> = center
                    .iter()
                    .map(|c| c + cfg.embedding_noise_std * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                x0 = x0.min(x * w);
                x1 = x1.max(x * w);
                y0 = y0.min(y * h);
                y1 = y1.max(y * h);
                if dropped {
                    keypoints.push(None);
                    continue;
                }
                keypoints.push(Some(GtKeypoint {
                    x: x * w,
                    y: y * h,
                    visibility: 2,
                }));
                scene.candidates.push(KeypointCandidate {
                    id: scene.candidates.len() as u64,
                    kind,
                    x,
                    y,
                    confidence,
                    embedding,
                    gt_person: Some(person_id),
                });
            }
            if keypoints.iter().any(Option::is_some) {
                gt.push(GroundTruthPerson {
                    person_id,
                    keypoints,
                    area: ((x1 - x0) * (y1 - y0)).max(1.0),
                });
            }
        }
        scene.gt_persons = Some(gt);
        scene
    }

    fn place(&self, height: f64, taken: &[(f64, f64)], rng: &mut ChaCha8Rng) -> (f64, f64) {
        let mx = 0.22 * height + 0.02;
        let my = 0.52 * height + 0.02;
        let mut best = (0.5, 0.5);
        let mut best_gap = f64::MIN;
        for _ in 0..200 {
            let c = (rng.random_range(mx..=1.0 - mx), rng.random_range(my..=1.0 - my));
            let gap = taken
                .iter()
                .map(|t| ((t.0 - c.0).powi(2) + (t.1 - c.1).powi(2)).sqrt())
                .fold(f64::MAX, f64::min);
            if gap >= self.cfg.min_center_distance {
                return c;
            }
            if gap > best_gap {
                best_gap = gap;
                best = c;
            }
        }
        best
    }

    /// Dart-throwing in a cube: centers are at least `separation ×
    /// noise_std` apart; the cube grows when it gets crowded.
    fn embedding_centers(&self, persons: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
        let d = self.cfg.embedding_dim;
        let min_dist = self.cfg.embedding_separation * self.cfg.embedding_noise_std;
        let mut side = min_dist * 1.5 * (persons.max(1) as f64).powf(1.0 / d.max(1) as f64);
        let mut centers: Vec<Vec<f64>> = Vec::with_capacity(persons);
        while centers.len() < persons {
            let mut placed = false;
            for _ in 0..200 {
                let c: Vec<f64> = (0..d)
                    .map(|_| (rng.random::<f64>() - 0.5) * side)
                    .collect();
                let ok = centers.iter().all(|o| {
                    o.iter().zip(&c).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() >= min_dist
                });
                if ok {
                    centers.push(c);
                    placed = true;
                    break;
                }
            }
            if !placed {
                side *= 1.25;
            }
        }
        centers
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(lo: usize, hi: usize) -> SynthConfig {
        SynthConfig {
            person_count_range: (lo, hi),
            rng_seed: 42,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn zero_persons_zero_candidates() {
        let s = SceneGenerator::new(cfg(0, 0)).unwrap().generate();
        assert!(s.candidates.is_empty());
        assert!(s.gt_persons.unwrap().is_empty());
    }

    #[test]
    fn two_complete_persons() {
        let s = SceneGenerator::new(cfg(2, 2)).unwrap().generate();
        assert_eq!(s.candidates.len(), 34);
        let gt = s.gt_persons.as_ref().unwrap();
        assert_eq!(gt.len(), 2);
        for p in gt {
            let n = s.candidates.iter().filter(|c| c.gt_person == Some(p.person_id)).count();
            assert_eq!(n, 17);
        }
        s.validate(17).unwrap();
    }

    #[test]
    fn same_seed_same_bytes() {
        let g = SceneGenerator::new(cfg(2, 6)).unwrap();
        let a = serde_json::to_string(&g.generate()).unwrap();
        let b = serde_json::to_string(&SceneGenerator::new(cfg(2, 6)).unwrap().generate()).unwrap();
        assert_eq!(a, b);
        assert_ne!(
            serde_json::to_string(&g.scene(1)).unwrap(),
            serde_json::to_string(&g.scene(2)).unwrap()
        );
    }

    #[test]
    fn full_drop_yields_nothing() {
        let c = SynthConfig {
            keypoint_drop_prob: 1.0,
            ..cfg(3, 3)
        };
        let s = SceneGenerator::new(c).unwrap().generate();
        assert!(s.candidates.is_empty());
        assert!(s.gt_persons.unwrap().is_empty());
    }

    #[test]
    fn centers_respect_separation() {
        let g = SceneGenerator::new(cfg(8, 8)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cs = g.embedding_centers(8, &mut rng);
        for i in 0..cs.len() {
            for j in i + 1..cs.len() {
                let d: f64 = cs[i].iter().zip(&cs[j]).map(|(a, b)| (a - b).powi(2)).sum();
                assert!(d.sqrt() >= 6.0);
            }
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(SceneGenerator::new(cfg(3, 2)).is_err());
        let c = SynthConfig {
            keypoint_drop_prob: 1.5,
            ..cfg(1, 2)
        };
        assert!(SceneGenerator::new(c).is_err());
    }

    #[test]
    fn candidates_reference_existing_persons() {
        let c = SynthConfig {
            keypoint_drop_prob: 0.6,
            ..cfg(1, 8)
        };
        let g = SceneGenerator::new(c).unwrap();
        for i in 0..50 {
            g.scene(i).validate(17).unwrap();
        }
    }
}
