use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// COCO per-keypoint OKS falloff constants, in COCO keypoint order.
pub const COCO_SIGMAS: [f64; 17] = [
    0.026, 0.025, 0.025, 0.035, 0.035, 0.079, 0.079, 0.072, 0.072, 0.062, 0.062, 0.107, 0.107,
    0.087, 0.087, 0.089, 0.089,
];

pub const COCO_NAMES: [&str; 17] = [
    "nose",
    "left_eye",
    "right_eye",
    "left_ear",
    "right_ear",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
];

/// Spanning tree over the 17 COCO keypoint types, rooted at the nose.
pub const COCO_TREE: [(usize, usize); 16] = [
    (0, 1),
    (0, 2),
    (1, 3),
    (2, 4),
    (0, 5),
    (0, 6),
    (5, 7),
    (7, 9),
    (6, 8),
    (8, 10),
    (5, 11),
    (6, 12),
    (11, 13),
    (13, 15),
    (12, 14),
    (14, 16),
];

/// Skip connections added on top of the tree: head to hips and across the torso.
pub const COCO_BYPASS_EXTRA: [(usize, usize); 6] =
    [(0, 11), (0, 12), (5, 6), (11, 12), (5, 12), (6, 11)];

/// Limb-to-torso links added on top of the bypass set.
pub const COCO_EXTENDED_EXTRA: [(usize, usize); 6] =
    [(9, 11), (10, 12), (7, 6), (8, 5), (15, 11), (16, 12)];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeypointType {
    pub index: usize,
    pub name: String,
    pub oks_sigma: f64,
}

/// The keypoint vocabulary of a dataset plus its skeleton tree.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Skeleton {
    pub types: Vec<KeypointType>,
    pub tree_edges: Vec<(usize, usize)>,
}

impl Skeleton {
    pub fn coco() -> Self {
        let types = COCO_NAMES
            .iter()
            .zip(COCO_SIGMAS)
            .enumerate()
            .map(|(index, (name, oks_sigma))| KeypointType {
                index,
                name: (*name).to_string(),
                oks_sigma,
            })
            .collect();
        Skeleton {
            types,
            tree_edges: COCO_TREE.to_vec(),
        }
    }

    /// A skeleton with `num_types` types. The first 17 reuse the COCO names
    /// and sigmas; the tree is the COCO tree restricted to those types, with
    /// extra types chained onto the previous one.
    pub fn with_types(num_types: usize) -> Self {
        if num_types == COCO_NAMES.len() {
            return Self::coco();
        }
        let types = (0..num_types)
            .map(|index| KeypointType {
                index,
                name: COCO_NAMES
                    .get(index)
                    .map_or_else(|| format!("kp{index}"), |n| (*n).to_string()),
                oks_sigma: COCO_SIGMAS.get(index).copied().unwrap_or(0.05),
            })
            .collect();
        let mut tree_edges: Vec<(usize, usize)> = COCO_TREE
            .iter()
            .copied()
            .filter(|&(a, b)| a < num_types && b < num_types)
            .collect();
        for t in COCO_NAMES.len()..num_types {
            tree_edges.push((t - 1, t));
        }
        Skeleton { types, tree_edges }
    }

    pub fn len(&self) -> usize {
        self.types.len()
    }

    pub fn is_empty(&self) -> bool {
        self.types.is_empty()
    }

    pub fn sigmas(&self) -> Vec<f64> {
        self.types.iter().map(|t| t.oks_sigma).collect()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, t) in self.types.iter().enumerate() {
            if t.index != i {
                return Err(Error::Config(format!(
                    "keypoint type `{}` has index {} at position {i}",
                    t.name, t.index
                )));
            }
            if !(t.oks_sigma > 0.0 && t.oks_sigma.is_finite()) {
                return Err(Error::Config(format!(
                    "keypoint type `{}` needs a positive oks_sigma",
                    t.name
                )));
            }
        }
        for &(a, b) in &self.tree_edges {
            if a >= self.len() || b >= self.len() || a == b {
                return Err(Error::Config(format!("invalid tree edge ({a}, {b})")));
            }
        }
        Ok(())
    }

    /// Breadth-first order of the types over the tree, starting at type 0.
    /// Types unreachable from the root follow in index order.
    pub fn breadth_first_order(&self) -> Vec<usize> {
        let n = self.len();
        let mut adj = vec![Vec::new(); n];
        for &(a, b) in &self.tree_edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        for list in &mut adj {
            list.sort_unstable();
        }
        let mut seen = vec![false; n];
        let mut order = Vec::with_capacity(n);
        for root in 0..n {
            if seen[root] {
                continue;
            }
            seen[root] = true;
            let mut queue = std::collections::VecDeque::from([root]);
            while let Some(t) = queue.pop_front() {
                order.push(t);
                for &next in &adj[t] {
                    if !seen[next] {
                        seen[next] = true;
                        queue.push_back(next);
                    }
                }
            }
        }
        order
    }
}

impl Default for Skeleton {
    fn default() -> Self {
        Self::coco()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coco_tree_spans_all_types() {
        let sk = Skeleton::coco();
        sk.validate().unwrap();
        assert_eq!(sk.tree_edges.len(), sk.len() - 1);
        let order = sk.breadth_first_order();
        assert_eq!(order.len(), 17);
        assert_eq!(order[0], 0);
        assert_eq!(&order[1..5], &[1, 2, 5, 6]);
    }

    #[test]
    fn rejects_nonpositive_sigma() {
        let mut sk = Skeleton::with_types(3);
        sk.types[1].oks_sigma = 0.0;
        assert!(sk.validate().is_err());
    }

    #[test]
    fn small_skeleton_keeps_tree_prefix() {
        let sk = Skeleton::with_types(2);
        assert_eq!(sk.tree_edges, vec![(0, 1)]);
        let sk = Skeleton::with_types(19);
        assert!(sk.tree_edges.contains(&(17, 18)));
        sk.validate().unwrap();
    }
}
