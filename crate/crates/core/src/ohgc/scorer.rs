use crate::graph::{ClusterState, PoseGraph};
use crate::neural::{DiscriminatorBundle, Tensor};
use crate::scalar::Scalar;
use crate::scene::Scene;

use super::aggregate_features;

/// Source of edge proximities and macro-node scores for the clustering loop.
pub trait Scorer<T: Scalar> {
    /// One weight per active edge, in the state's edge order.
    fn edge_weights(&self, state: &ClusterState<T>) -> Vec<T>;

    /// One score per macro-node, in the state's node order.
    fn macro_scores(&self, state: &ClusterState<T>) -> Vec<T>;
}

/// Scores from the trained discriminators over fixed node features.
pub struct LearnedScorer<'a, T> {
    pub bundle: &'a DiscriminatorBundle<T>,
    pub node_features: Tensor<T>,
}

impl<T: Scalar> Scorer<T> for LearnedScorer<'_, T> {
    fn edge_weights(&self, state: &ClusterState<T>) -> Vec<T> {
        let feats = aggregate_features(state, &self.node_features);
        self.bundle.edge_scores(&feats, &state.edge_indices())
    }

    fn macro_scores(&self, state: &ClusterState<T>) -> Vec<T> {
        let feats = aggregate_features(state, &self.node_features);
        self.bundle.macro_scores(&feats)
    }
}

/// Ground-truth scorer: an edge weighs 1 exactly when merging its endpoints
/// keeps a single person, a macro-node scores 1 exactly when it is pure.
pub struct OracleScorer {
    labels: Vec<Option<u64>>,
}

impl OracleScorer {
    /// Labels come from the candidates behind each graph node.
    pub fn new<T: Scalar>(scene: &Scene, graph: &PoseGraph<T>) -> Self {
        OracleScorer {
            labels: node_labels(scene, graph),
        }
    }

    pub fn is_pure<'a>(&self, nodes: impl IntoIterator<Item = &'a usize>) -> bool {
        is_pure(&self.labels, nodes)
    }
}

pub(crate) fn node_labels<T: Scalar>(scene: &Scene, graph: &PoseGraph<T>) -> Vec<Option<u64>> {
    let by_id: std::collections::HashMap<u64, Option<u64>> = scene
        .candidates
        .iter()
        .map(|c| (c.id, c.gt_person))
        .collect();
    graph
        .nodes
        .iter()
        .map(|n| by_id.get(&n.candidate_id).copied().flatten())
        .collect()
}

/// All nodes carry the same, present, person label.
pub(crate) fn is_pure<'a>(
    labels: &[Option<u64>],
    nodes: impl IntoIterator<Item = &'a usize>,
) -> bool {
    let mut person = None;
    for &n in nodes {
        match (labels[n], person) {
            (None, _) => return false,
            (Some(p), None) => person = Some(p),
            (Some(p), Some(q)) if p != q => return false,
            _ => {}
        }
    }
    true
}

impl<T: Scalar> Scorer<T> for OracleScorer {
    fn edge_weights(&self, state: &ClusterState<T>) -> Vec<T> {
        state
            .edge_indices()
            .into_iter()
            .map(|(a, b)| {
                let (ma, mb) = (&state.macro_nodes[a], &state.macro_nodes[b]);
                if self.is_pure(ma.nodes.iter().chain(&mb.nodes)) {
                    T::one()
                } else {
                    T::zero()
                }
            })
            .collect()
    }

    fn macro_scores(&self, state: &ClusterState<T>) -> Vec<T> {
        state
            .macro_nodes
            .iter()
            .map(|m| if self.is_pure(&m.nodes) { T::one() } else { T::zero() })
            .collect()
    }
}
