//! Typed pose graphs over keypoint candidates.

mod cluster;

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::Tensor;
use crate::scalar::Scalar;
use crate::scene::{Scene, Skeleton, COCO_BYPASS_EXTRA, COCO_EXTENDED_EXTRA};

pub use cluster::{init_cluster_state, merge_pairs, prune, ClusterState, MacroNode, TypeSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TopologyKind {
    Tree,
    Bypass,
    Extended,
    Full,
}

impl std::str::FromStr for TopologyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tree" => Ok(TopologyKind::Tree),
            "bypass" => Ok(TopologyKind::Bypass),
            "extended" => Ok(TopologyKind::Extended),
            "full" => Ok(TopologyKind::Full),
            other => Err(Error::Config(format!("unknown topology `{other}`"))),
        }
    }
}

/// Which keypoint-type pairs may be linked by an edge.
///
/// `Bypass` adds `bypass_extra` to the tree, `Extended` further adds
/// `extended_extra`, and `Full` links every pair of distinct types.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphTopology {
    pub kind: TopologyKind,
    pub tree_edges: Vec<(usize, usize)>,
    #[serde(default)]
    pub bypass_extra: Vec<(usize, usize)>,
    #[serde(default)]
    pub extended_extra: Vec<(usize, usize)>,
}

impl GraphTopology {
    /// The topology over `skeleton`'s tree. The bypass and extended link sets
    /// are the COCO ones, restricted to types the skeleton has.
    pub fn new(kind: TopologyKind, skeleton: &Skeleton) -> Self {
        let j = skeleton.len();
        let keep = |e: &&(usize, usize)| e.0 < j && e.1 < j;
        GraphTopology {
            kind,
            tree_edges: skeleton.tree_edges.clone(),
            bypass_extra: COCO_BYPASS_EXTRA.iter().filter(keep).copied().collect(),
            extended_extra: COCO_EXTENDED_EXTRA.iter().filter(keep).copied().collect(),
        }
    }

    pub fn full() -> Self {
        GraphTopology {
            kind: TopologyKind::Full,
            tree_edges: Vec::new(),
            bypass_extra: Vec::new(),
            extended_extra: Vec::new(),
        }
    }

    /// Allowed unordered type pairs `(a, b)` with `a < b`; `None` means all.
    pub fn type_pairs(&self) -> Option<BTreeSet<(usize, usize)>> {
        let lists: &[&[(usize, usize)]] = match self.kind {
            TopologyKind::Full => return None,
            TopologyKind::Tree => &[&self.tree_edges],
            TopologyKind::Bypass => &[&self.tree_edges, &self.bypass_extra],
            TopologyKind::Extended => &[&self.tree_edges, &self.bypass_extra, &self.extended_extra],
        };
        Some(
            lists
                .iter()
                .flat_map(|l| l.iter())
                .map(|&(a, b)| (a.min(b), a.max(b)))
                .collect(),
        )
    }

    pub fn validate(&self, num_types: usize) -> Result<()> {
        if self.kind == TopologyKind::Full {
            return Ok(());
        }
        let all = [&self.tree_edges, &self.bypass_extra, &self.extended_extra];
        for &(a, b) in all.iter().flat_map(|l| l.iter()) {
            if a >= num_types || b >= num_types || a == b {
                return Err(Error::Config(format!("invalid topology edge ({a}, {b})")));
            }
        }
        // the tree must span every type
        let mut parent: Vec<usize> = (0..num_types).collect();
        fn find(p: &mut [usize], x: usize) -> usize {
            let mut r = x;
            while p[r] != r {
                r = p[r];
            }
            p[x] = r;
            r
        }
        let mut joined = 0;
        for &(a, b) in &self.tree_edges {
            let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
            if ra != rb {
                parent[ra] = rb;
                joined += 1;
            }
        }
        if joined + 1 != num_types || self.tree_edges.len() + 1 != num_types {
            return Err(Error::Config(
                "tree_edges must form a spanning tree over the keypoint types".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphNode<T> {
    pub candidate_id: u64,
    pub kind: usize,
    /// `embedding ‖ one_hot(kind) ‖ (x, y)`.
    pub init_feature: Vec<T>,
}

/// Candidates as nodes plus weighted edges between compatible types.
///
/// Nodes are stored in canonical order (type, y, x, id), so the graph does
/// not depend on the order candidates were listed in.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseGraph<T> {
    pub nodes: Vec<GraphNode<T>>,
    /// `(u, v, weight)` with `u < v`, sorted.
    pub edges: Vec<(usize, usize, T)>,
    pub topology: GraphTopology,
    pub num_types: usize,
    pub embedding_dim: usize,
}

impl<T: Scalar> PoseGraph<T> {
    pub fn feature_dim(&self) -> usize {
        self.embedding_dim + self.num_types + 2
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Initial node features as an `N × (D_e + J + 2)` matrix.
    pub fn feature_matrix(&self) -> Tensor<T> {
        let f = self.feature_dim();
        let data = self
            .nodes
            .iter()
            .flat_map(|n| n.init_feature.iter().copied())
            .collect();
        Tensor::from_vec(vec![self.nodes.len(), f], data)
    }

    /// One `"u v w"` line per edge, `u`/`v` being candidate ids.
    pub fn edge_list(&self) -> String {
        let mut out = String::new();
        for &(u, v, w) in &self.edges {
            let _ = writeln!(
                out,
                "{} {} {}",
                self.nodes[u].candidate_id, self.nodes[v].candidate_id, w
            );
        }
        out
    }
}

/// Canonical candidate order: by type, then y, then x, then id.
pub fn canonical_order(scene: &Scene) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scene.candidates.len()).collect();
    order.sort_by(|&a, &b| {
        let (ca, cb) = (&scene.candidates[a], &scene.candidates[b]);
        ca.kind
            .cmp(&cb.kind)
            .then(ca.y.total_cmp(&cb.y))
            .then(ca.x.total_cmp(&cb.x))
            .then(ca.id.cmp(&cb.id))
    });
    order
}

pub fn build_graph<T: Scalar>(
    scene: &Scene,
    num_types: usize,
    topology: &GraphTopology,
) -> PoseGraph<T> {
    let order = canonical_order(scene);
    let d = scene.embedding_dim;
    let nodes: Vec<GraphNode<T>> = order
        .iter()
        .map(|&i| {
            let c = &scene.candidates[i];
            let mut f = Vec::with_capacity(d + num_types + 2);
            f.extend(c.embedding.iter().map(|&e| T::lit(e)));
            f.extend((0..num_types).map(|t| if t == c.kind { T::one() } else { T::zero() }));
            f.push(T::lit(c.x));
            f.push(T::lit(c.y));
            GraphNode {
                candidate_id: c.id,
                kind: c.kind,
                init_feature: f,
            }
        })
        .collect();

    let allowed = topology.type_pairs();
    let mut edges = Vec::new();
    for u in 0..nodes.len() {
        for v in u + 1..nodes.len() {
            let (a, b) = (nodes[u].kind, nodes[v].kind);
            if a == b {
                continue;
            }
            let linked = allowed
                .as_ref()
                .is_none_or(|set| set.contains(&(a.min(b), a.max(b))));
            if linked {
                edges.push((u, v, T::one()));
            }
        }
    }
    PoseGraph {
        nodes,
        edges,
        topology: topology.clone(),
        num_types,
        embedding_dim: d,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{KeypointCandidate, SceneGenerator, SynthConfig};

    fn cand(id: u64, kind: usize, x: f64, y: f64) -> KeypointCandidate {
        KeypointCandidate {
            id,
            kind,
            x,
            y,
            confidence: 1.0,
            embedding: vec![0.0; 4],
            gt_person: None,
        }
    }

    fn scene(cands: Vec<KeypointCandidate>) -> Scene {
        let mut s = Scene::empty(0, 100, 100, 4);
        s.candidates = cands;
        s
    }

    #[test]
    fn two_by_two_full() {
        let s = scene(vec![
            cand(0, 0, 0.1, 0.1),
            cand(1, 1, 0.2, 0.2),
            cand(2, 0, 0.7, 0.1),
            cand(3, 1, 0.8, 0.2),
        ]);
        let g: PoseGraph<f64> = build_graph(&s, 2, &GraphTopology::full());
        assert_eq!(g.len(), 4);
        assert_eq!(g.edges.len(), 4);
        for &(u, v, w) in &g.edges {
            assert_ne!(g.nodes[u].kind, g.nodes[v].kind);
            assert_eq!(w, 1.0);
        }
    }

    #[test]
    fn one_full_person_has_136_edges() {
        let s = SceneGenerator::new(SynthConfig {
            person_count_range: (1, 1),
            ..SynthConfig::default()
        })
        .unwrap()
        .generate();
        let g: PoseGraph<f64> = build_graph(&s, 17, &GraphTopology::full());
        assert_eq!(g.len(), 17);
        assert_eq!(g.edges.len(), 136);
        assert_eq!(g.feature_dim(), 23);
    }

    #[test]
    fn same_type_nodes_are_disconnected() {
        let s = scene(vec![cand(0, 3, 0.1, 0.1), cand(1, 3, 0.5, 0.5)]);
        let g: PoseGraph<f64> = build_graph(&s, 17, &GraphTopology::full());
        assert_eq!(g.len(), 2);
        assert!(g.edges.is_empty());
    }

    #[test]
    fn init_feature_layout() {
        let mut c = cand(5, 2, 0.25, 0.75);
        c.embedding = vec![1.0, 2.0, 3.0, 4.0];
        let g: PoseGraph<f64> = build_graph(&scene(vec![c]), 3, &GraphTopology::full());
        assert_eq!(
            g.nodes[0].init_feature,
            vec![1.0, 2.0, 3.0, 4.0, 0.0, 0.0, 1.0, 0.25, 0.75]
        );
    }

    #[test]
    fn topologies_validate_for_coco() {
        let sk = Skeleton::coco();
        for kind in [
            TopologyKind::Tree,
            TopologyKind::Bypass,
            TopologyKind::Extended,
            TopologyKind::Full,
        ] {
            GraphTopology::new(kind, &sk).validate(17).unwrap();
        }
        let mut broken = GraphTopology::new(TopologyKind::Tree, &sk);
        broken.tree_edges.pop();
        assert!(broken.validate(17).is_err());
    }

    #[test]
    fn edge_list_dump() {
        let s = scene(vec![cand(7, 0, 0.1, 0.1), cand(9, 1, 0.2, 0.2)]);
        let g: PoseGraph<f64> = build_graph(&s, 2, &GraphTopology::full());
        assert_eq!(g.edge_list(), "7 9 1\n");
    }
}
