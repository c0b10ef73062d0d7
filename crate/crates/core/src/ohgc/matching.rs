use std::cmp::Ordering;
use std::collections::BTreeSet;

use crate::graph::ClusterState;
use crate::scalar::Scalar;

/// One greedy matching pass over the active edges.
///
/// Edges with weight `≥ threshold` are visited by descending weight (ties by
/// ascending id pair); an edge is taken when both endpoints are still free.
/// The result is a valid matching whose weight is at least half of the best
/// matching over the same edges.
pub fn graclus_match<T: Scalar>(state: &ClusterState<T>, threshold: T) -> Vec<(u64, u64)> {
    greedy_matching(
        state
            .active_edges
            .iter()
            .map(|(&(a, b), &w)| (a, b, w)),
        threshold,
    )
}

/// [`graclus_match`] over a plain weighted edge list.
pub fn greedy_matching<T: Scalar>(
    edges: impl IntoIterator<Item = (u64, u64, T)>,
    threshold: T,
) -> Vec<(u64, u64)> {
    let mut candidates: Vec<(u64, u64, T)> = edges
        .into_iter()
        .filter(|e| e.2 >= threshold)
        .map(|(a, b, w)| (a.min(b), a.max(b), w))
        .collect();
    candidates.sort_by(|x, y| {
        y.2.partial_cmp(&x.2)
            .unwrap_or(Ordering::Equal)
            .then((x.0, x.1).cmp(&(y.0, y.1)))
    });
    let mut used = BTreeSet::new();
    let mut matching = Vec::new();
    for (a, b, _) in candidates {
        if a != b && !used.contains(&a) && !used.contains(&b) {
            used.insert(a);
            used.insert(b);
            matching.push((a, b));
        }
    }
    matching
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn disjoint_top_edges() {
        let m = greedy_matching([(0, 1, 0.9), (2, 3, 0.8), (0, 2, 0.1)], 0.5);
        assert_eq!(m, vec![(0, 1), (2, 3)]);
    }

    #[test]
    fn threshold_gate() {
        let m = greedy_matching([(0, 1, 0.4), (2, 3, 0.3)], 0.5);
        assert!(m.is_empty());
    }

    #[test]
    fn ties_break_by_id_pair() {
        let m = greedy_matching([(5, 2, 1.0), (1, 2, 1.0), (3, 4, 1.0)], 0.5);
        assert_eq!(m, vec![(1, 2), (3, 4)]);
    }

    #[test]
    fn heaviest_edge_wins_conflicts() {
        let m = greedy_matching([(0, 1, 0.6), (1, 2, 0.9), (2, 3, 0.6)], 0.5);
        assert_eq!(m, vec![(1, 2)]);
    }
}
