//! Macro-node bookkeeping for the clustering loop.

use std::collections::{BTreeMap, BTreeSet};

use super::PoseGraph;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Set of keypoint type indices (< 128).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct TypeSet(u128);

impl TypeSet {
    pub fn single(kind: usize) -> Self {
        assert!(kind < 128, "keypoint type {kind} exceeds the type-set width");
        TypeSet(1u128 << kind)
    }

    pub fn intersects(self, other: TypeSet) -> bool {
        self.0 & other.0 != 0
    }

    pub fn union(self, other: TypeSet) -> TypeSet {
        TypeSet(self.0 | other.0)
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn contains(self, kind: usize) -> bool {
        kind < 128 && self.0 >> kind & 1 == 1
    }

    pub fn iter(self) -> impl Iterator<Item = usize> {
        (0..128).filter(move |&k| self.contains(k))
    }
}

/// A cluster of candidates.
#[derive(Clone, Debug, PartialEq)]
pub struct MacroNode {
    /// Smallest member candidate id.
    pub id: u64,
    /// Member candidate ids, ascending.
    pub members: Vec<u64>,
    /// Graph node indices of the members, ascending.
    pub nodes: Vec<usize>,
    pub type_set: TypeSet,
    pub score: Option<f64>,
}

impl MacroNode {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Partition of the candidates into macro-nodes plus the surviving edges.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterState<T> {
    /// Sorted by id.
    pub macro_nodes: Vec<MacroNode>,
    /// Keyed by `(smaller id, larger id)`.
    pub active_edges: BTreeMap<(u64, u64), T>,
    pub iteration: usize,
}

impl<T: Scalar> ClusterState<T> {
    pub fn index_of(&self, id: u64) -> Option<usize> {
        self.macro_nodes.binary_search_by_key(&id, |m| m.id).ok()
    }

    /// Active edges as macro-node index pairs, in key order.
    pub fn edge_indices(&self) -> Vec<(usize, usize)> {
        self.active_edges
            .keys()
            .map(|&(a, b)| {
                (
                    self.index_of(a).expect("edge endpoint exists"),
                    self.index_of(b).expect("edge endpoint exists"),
                )
            })
            .collect()
    }

    /// Member node indices per macro-node.
    pub fn groups(&self) -> Vec<Vec<usize>> {
        self.macro_nodes.iter().map(|m| m.nodes.clone()).collect()
    }

    /// True when the member sets are disjoint, cover `0..n` graph nodes and
    /// no macro-node repeats a type.
    pub fn is_valid_partition(&self, graph: &PoseGraph<T>) -> bool {
        let mut seen = vec![false; graph.len()];
        for m in &self.macro_nodes {
            let mut types = TypeSet::default();
            for &n in &m.nodes {
                if n >= seen.len() || seen[n] {
                    return false;
                }
                seen[n] = true;
                let t = TypeSet::single(graph.nodes[n].kind);
                if types.intersects(t) {
                    return false;
                }
                types = types.union(t);
            }
            if types != m.type_set {
                return false;
            }
        }
        seen.into_iter().all(|s| s)
    }
}

/// One singleton macro-node per graph node; edges copied from the graph.
pub fn init_cluster_state<T: Scalar>(graph: &PoseGraph<T>) -> ClusterState<T> {
    let mut macro_nodes: Vec<MacroNode> = graph
        .nodes
        .iter()
        .enumerate()
        .map(|(i, n)| MacroNode {
            id: n.candidate_id,
            members: vec![n.candidate_id],
            nodes: vec![i],
            type_set: TypeSet::single(n.kind),
            score: None,
        })
        .collect();
    macro_nodes.sort_by_key(|m| m.id);
    let active_edges = graph
        .edges
        .iter()
        .map(|&(u, v, w)| {
            let (a, b) = (graph.nodes[u].candidate_id, graph.nodes[v].candidate_id);
            ((a.min(b), a.max(b)), w)
        })
        .collect();
    ClusterState {
        macro_nodes,
        active_edges,
        iteration: 0,
    }
}

/// Drops every active edge whose endpoints share a keypoint type.
pub fn prune<T: Scalar>(state: &ClusterState<T>) -> ClusterState<T> {
    let mut next = state.clone();
    next.active_edges.retain(|&(a, b), _| {
        let ta = state.macro_nodes[state.index_of(a).expect("endpoint")].type_set;
        let tb = state.macro_nodes[state.index_of(b).expect("endpoint")].type_set;
        !ta.intersects(tb)
    });
    next
}

/// Merges every matched pair into one macro-node.
///
/// Edges between the new macro-nodes are re-derived from the active edges
/// (keeping the larger weight when several collapse onto one pair); they are
/// not pruned here.
pub fn merge_pairs<T: Scalar>(
    state: &ClusterState<T>,
    matching: &[(u64, u64)],
) -> Result<ClusterState<T>> {
    let mut partner: BTreeMap<u64, u64> = BTreeMap::new();
    for &(a, b) in matching {
        let (ia, ib) = match (state.index_of(a), state.index_of(b)) {
            (Some(ia), Some(ib)) if a != b => (ia, ib),
            _ => {
                return Err(Error::contract(format!(
                    "matched pair ({a}, {b}) does not name two macro-nodes"
                )))
            }
        };
        for id in [a, b] {
            if partner.contains_key(&id) {
                return Err(Error::contract(format!(
                    "macro-node {id} appears twice in the matching"
                )));
            }
        }
        if state.macro_nodes[ia]
            .type_set
            .intersects(state.macro_nodes[ib].type_set)
        {
            return Err(Error::contract(format!(
                "matched pair ({a}, {b}) shares a keypoint type"
            )));
        }
        partner.insert(a, b);
        partner.insert(b, a);
    }

    let mut remap: BTreeMap<u64, u64> = BTreeMap::new();
    let mut macro_nodes = Vec::with_capacity(state.macro_nodes.len() - matching.len());
    let mut done: BTreeSet<u64> = BTreeSet::new();
    for m in &state.macro_nodes {
        if done.contains(&m.id) {
            continue;
        }
        match partner.get(&m.id) {
            None => {
                remap.insert(m.id, m.id);
                macro_nodes.push(MacroNode {
                    score: None,
                    ..m.clone()
                });
            }
            Some(&other) => {
                let o = &state.macro_nodes[state.index_of(other).expect("checked above")];
                let mut members: Vec<u64> = m.members.iter().chain(&o.members).copied().collect();
                members.sort_unstable();
                let mut nodes: Vec<usize> = m.nodes.iter().chain(&o.nodes).copied().collect();
                nodes.sort_unstable();
                let id = members[0];
                remap.insert(m.id, id);
                remap.insert(o.id, id);
                done.insert(other);
                macro_nodes.push(MacroNode {
                    id,
                    members,
                    nodes,
                    type_set: m.type_set.union(o.type_set),
                    score: None,
                });
            }
        }
    }
    macro_nodes.sort_by_key(|m| m.id);

    let mut active_edges: BTreeMap<(u64, u64), T> = BTreeMap::new();
    for (&(a, b), &w) in &state.active_edges {
        let (ra, rb) = (remap[&a], remap[&b]);
        if ra == rb {
            continue;
        }
        let key = (ra.min(rb), ra.max(rb));
        active_edges
            .entry(key)
            .and_modify(|old| *old = old.max(w))
            .or_insert(w);
    }

    Ok(ClusterState {
        macro_nodes,
        active_edges,
        iteration: state.iteration + 1,
    })
}
