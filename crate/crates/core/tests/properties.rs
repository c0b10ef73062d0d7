use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ohgc_core::eval::{evaluate_predictions, Prediction};
use ohgc_core::graph::{init_cluster_state, merge_pairs, prune, TopologyKind};
use ohgc_core::neural::{DiscriminatorBundle, NetworkShape};
use ohgc_core::ohgc::{graclus_match, greedy_matching, group_with, Scorer};
use ohgc_core::{
    build_graph, greedy_decode, group, group_oracle, ClusterState, GraphTopology, OhgcConfig, PoseGraph, Scene,
    SceneGenerator, Skeleton, SynthConfig,
};

fn scene(seed: u64, persons: usize, num_types: usize, drop: f64) -> Scene {
    SceneGenerator::new(SynthConfig {
        person_count_range: (persons, persons),
        num_types,
        keypoint_drop_prob: drop,
        rng_seed: seed,
        ..SynthConfig::default()
    })
    .unwrap()
    .generate()
}

fn with_id(mut scene: Scene, image_id: u64) -> Scene {
    scene.image_id = image_id;
    scene
}

fn topology(kind: TopologyKind, num_types: usize) -> GraphTopology {
    GraphTopology::new(kind, &Skeleton::with_types(num_types))
}

fn gt_partition(scene: &Scene) -> Vec<Vec<u64>> {
    let mut by_person: BTreeMap<u64, Vec<u64>> = BTreeMap::new();
    for c in &scene.candidates {
        by_person.entry(c.gt_person.unwrap()).or_default().push(c.id);
    }
    let mut out: Vec<Vec<u64>> = by_person.into_values().collect();
    for p in &mut out {
        p.sort_unstable();
    }
    out.sort();
    out
}

fn check_state(state: &ClusterState, graph: &PoseGraph) {
    assert!(state.is_valid_partition(graph));
    let kinds: BTreeMap<u64, usize> = graph.nodes.iter().map(|n| (n.candidate_id, n.kind)).collect();
    for m in &state.macro_nodes {
        let types: BTreeSet<usize> = m.members.iter().map(|id| kinds[id]).collect();
        assert_eq!(types.len(), m.members.len(), "macro-node {} repeats a type", m.id);
    }
}

/// Pseudo-random but reproducible scores keyed by macro-node ids.
struct HashScorer(u64);

impl HashScorer {
    fn unit(&self, a: u64, b: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(self.0 ^ a.wrapping_mul(0x9E37_79B9) ^ b.rotate_left(32));
        rng.random()
    }
}

impl Scorer<f64> for HashScorer {
    fn edge_weights(&self, state: &ClusterState) -> Vec<f64> {
        state.active_edges.keys().map(|&(a, b)| self.unit(a, b)).collect()
    }

    fn macro_scores(&self, state: &ClusterState) -> Vec<f64> {
        state.macro_nodes.iter().map(|m| self.unit(m.id, m.id)).collect()
    }
}

/// Exact maximum-weight matching by dynamic programming over node subsets.
fn brute_force_matching(n: usize, edges: &[(u64, u64, f64)]) -> f64 {
    let mut w = vec![vec![None::<f64>; n]; n];
    for &(a, b, x) in edges {
        let (a, b) = (a as usize, b as usize);
        let best = w[a][b].map_or(x, |y: f64| y.max(x));
        w[a][b] = Some(best);
        w[b][a] = Some(best);
    }
    let full = (1usize << n) - 1;
    let mut memo = vec![f64::NAN; 1 << n];
    fn solve(mask: usize, full: usize, n: usize, w: &[Vec<Option<f64>>], memo: &mut [f64]) -> f64 {
        if mask == full {
            return 0.0;
        }
        if !memo[mask].is_nan() {
            return memo[mask];
        }
        let i = (0..n).find(|i| mask & (1 << i) == 0).unwrap();
        let mut best = solve(mask | (1 << i), full, n, w, memo);
        for j in i + 1..n {
            if mask & (1 << j) == 0 {
                if let Some(x) = w[i][j] {
                    best = best.max(x + solve(mask | (1 << i) | (1 << j), full, n, w, memo));
                }
            }
        }
        memo[mask] = best;
        best
    }
    solve(0, full, n, &w, &mut memo)
}

fn random_graph() -> impl Strategy<Value = (usize, Vec<(u64, u64, f64)>)> {
    (2usize..=12).prop_flat_map(|n| {
        let pairs: Vec<(u64, u64)> = (0..n as u64)
            .flat_map(|a| (a + 1..n as u64).map(move |b| (a, b)))
            .collect();
        let m = pairs.len();
        (
            Just(n),
            proptest::collection::vec((any::<bool>(), 0.0f64..1.0), m).prop_map(move |picks| {
                pairs
                    .iter()
                    .zip(picks)
                    .filter(|(_, (keep, _))| *keep)
                    .map(|(&(a, b), (_, w))| (a, b, w))
                    .collect()
            }),
        )
    })
}

fn topology_kind() -> impl Strategy<Value = TopologyKind> {
    prop_oneof![
        Just(TopologyKind::Tree),
        Just(TopologyKind::Bypass),
        Just(TopologyKind::Extended),
        Just(TopologyKind::Full),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn merge_and_prune_keep_a_typed_partition(
        seed in any::<u64>(),
        persons in 0usize..=6,
        num_types in prop_oneof![Just(3usize), Just(5), Just(17)],
        drop in 0.0f64..=0.5,
        kind in topology_kind(),
        tau in 0.0f64..0.9,
    ) {
        let scene = scene(seed, persons, num_types, drop);
        let graph: PoseGraph = build_graph(&scene, num_types, &topology(kind, num_types));
        let mut state = init_cluster_state(&graph);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        check_state(&state, &graph);
        for _ in 0..12 {
            for w in state.active_edges.values_mut() {
                *w = rng.random();
            }
            let matching = graclus_match(&state, tau);
            let before = state.macro_nodes.len();
            let merged = merge_pairs(&state, &matching).unwrap();
            prop_assert_eq!(merged.macro_nodes.len(), before - matching.len());
            check_state(&merged, &graph);
            let pruned = prune(&merged);
            let keys = |s: &ClusterState| s.active_edges.keys().copied().collect::<BTreeSet<_>>();
            prop_assert!(keys(&pruned).is_subset(&keys(&merged)));
            prop_assert_eq!(keys(&prune(&pruned)), keys(&pruned));
            check_state(&pruned, &graph);
            state = pruned;
        }
    }

    #[test]
    fn topologies_nest(seed in any::<u64>(), persons in 1usize..=4, drop in 0.0f64..=0.5) {
        let scene = scene(seed, persons, 17, drop);
        let edges = |kind| {
            let g: PoseGraph = build_graph(&scene, 17, &topology(kind, 17));
            g.edges
                .iter()
                .map(|&(u, v, _)| (g.nodes[u].candidate_id, g.nodes[v].candidate_id))
                .map(|(a, b)| (a.min(b), a.max(b)))
                .collect::<BTreeSet<_>>()
        };
        let order = [TopologyKind::Tree, TopologyKind::Bypass, TopologyKind::Extended, TopologyKind::Full];
        for w in order.windows(2) {
            prop_assert!(edges(w[0]).is_subset(&edges(w[1])), "{:?} ⊄ {:?}", w[0], w[1]);
        }
    }

    #[test]
    fn graph_is_permutation_equivariant(seed in any::<u64>(), persons in 0usize..=4, kind in topology_kind()) {
        let scene = scene(seed, persons, 17, 0.2);
        let mut shuffled = scene.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..shuffled.candidates.len()).rev() {
            let j = rng.random_range(0..=i);
            shuffled.candidates.swap(i, j);
        }
        let topo = topology(kind, 17);
        let a: PoseGraph = build_graph(&scene, 17, &topo);
        let b: PoseGraph = build_graph(&shuffled, 17, &topo);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn loop_progresses_strictly_and_terminates(
        seed in any::<u64>(),
        persons in 1usize..=5,
        drop in 0.0f64..=0.5,
        tau in 0.0f64..0.8,
    ) {
        let scene = scene(seed, persons, 17, drop);
        let graph: PoseGraph = build_graph(&scene, 17, &GraphTopology::full());
        let cfg = OhgcConfig { merge_threshold: tau, max_iterations: 1000, ..OhgcConfig::default() };
        let mut trace = Vec::new();
        let res = group_with(&scene, &graph, &HashScorer(seed), &cfg, Some(&mut trace)).unwrap();
        prop_assert!(res.satisfies_constraints());
        prop_assert!(res.iterations_used < graph.len().max(1));
        let mut count = graph.len();
        for rec in &trace {
            prop_assert!(!rec.merged.is_empty());
            prop_assert!(rec.macro_nodes.len() < count);
            prop_assert!(rec.macro_nodes.len() >= count.div_ceil(2));
            count = rec.macro_nodes.len();
        }
        prop_assert_eq!(trace.len(), res.iterations_used);
    }

    #[test]
    fn oracle_recovers_ground_truth(seed in any::<u64>(), persons in 0usize..=10, drop in 0.0f64..=0.5) {
        let scene = scene(seed, persons, 17, drop);
        let res = group_oracle::<f64>(&scene, &GraphTopology::full(), 17, &OhgcConfig::default()).unwrap();
        prop_assert!(res.satisfies_constraints());
        prop_assert_eq!(res.partition(), gt_partition(&scene));
    }

    #[test]
    fn learned_grouping_respects_constraints(seed in any::<u64>(), persons in 0usize..=5, kind in topology_kind()) {
        let scene = scene(seed, persons, 17, 0.3);
        let bundle = DiscriminatorBundle::<f64>::new(NetworkShape::for_input(23), seed).unwrap();
        let topo = topology(kind, 17);
        let res = group(&scene, &bundle, &topo, 17, &OhgcConfig::default()).unwrap();
        prop_assert!(res.satisfies_constraints());
        let again = group(&scene, &bundle, &topo, 17, &OhgcConfig::default()).unwrap();
        prop_assert_eq!(res, again);
    }

    #[test]
    fn greedy_decoder_respects_constraints(seed in any::<u64>(), persons in 0usize..=6, sep in 0.0f64..8.0) {
        let scene = SceneGenerator::new(SynthConfig {
            person_count_range: (persons, persons),
            embedding_separation: sep,
            keypoint_drop_prob: 0.2,
            rng_seed: seed,
            ..SynthConfig::default()
        })
        .unwrap()
        .generate();
        let res = greedy_decode(&scene, &Skeleton::coco(), 1.0);
        prop_assert!(res.satisfies_constraints());
        let covered: usize = res.persons.iter().map(|p| p.members.len()).sum();
        prop_assert_eq!(covered, scene.candidates.len());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn greedy_matching_is_half_optimal((n, edges) in random_graph()) {
        let matching = greedy_matching(edges.iter().copied(), 0.0);
        let weight: BTreeMap<(u64, u64), f64> = edges.iter().map(|&(a, b, w)| ((a, b), w)).collect();
        let mut used = BTreeSet::new();
        let mut total = 0.0;
        for &(a, b) in &matching {
            prop_assert!(used.insert(a) && used.insert(b));
            total += weight[&(a, b)];
        }
        let best = brute_force_matching(n, &edges);
        prop_assert!(total >= 0.5 * best - 1e-12, "{total} < ½·{best}");
    }
}

fn noisy_predictions(scenes: &[Scene], seed: u64, noise: f64) -> Vec<Prediction> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for s in scenes {
        for p in s.gt_persons.as_ref().unwrap() {
            let keypoints = p
                .keypoints
                .iter()
                .map(|k| {
                    k.as_ref().map(|k| {
                        [
                            k.x + noise * (rng.random::<f64>() - 0.5),
                            k.y + noise * (rng.random::<f64>() - 0.5),
                        ]
                    })
                })
                .collect();
            out.push(Prediction { image_id: s.image_id, keypoints, score: rng.random_range(0.05..1.0) });
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn evaluation_properties(seed in any::<u64>(), noise in 0.0f64..40.0, scale in 0.01f64..100.0, dup in 0usize..50) {
        let scenes: Vec<Scene> = (0..3).map(|i| with_id(scene(seed.wrapping_add(i), 3, 17, 0.2), i)).collect();
        let sigmas = Skeleton::coco().sigmas();
        let preds = noisy_predictions(&scenes, seed, noise);
        let base = evaluate_predictions(&preds, &scenes, &sigmas).unwrap();
        for w in base.curves.windows(2) {
            prop_assert!(w[1].ap <= w[0].ap + 1e-12);
        }

        let scaled: Vec<Prediction> = preds.iter().cloned().map(|mut p| { p.score *= scale; p }).collect();
        let scaled = evaluate_predictions(&scaled, &scenes, &sigmas).unwrap();
        prop_assert_eq!((base.ap, base.ap50, base.ap75, base.ar), (scaled.ap, scaled.ap50, scaled.ap75, scaled.ar));

        if !preds.is_empty() {
            let mut with_dup = preds.clone();
            let mut copy = preds[dup % preds.len()].clone();
            copy.score *= 0.5;
            with_dup.push(copy);
            let d = evaluate_predictions(&with_dup, &scenes, &sigmas).unwrap();
            for (a, b) in base.curves.iter().zip(&d.curves) {
                prop_assert!(b.ap <= a.ap + 1e-12, "threshold {}: {} > {}", a.threshold, b.ap, a.ap);
            }
        }
    }

    #[test]
    fn oracle_output_scores_perfectly(seed in any::<u64>(), persons in 1usize..=6) {
        let scenes: Vec<Scene> = (0..2).map(|i| with_id(scene(seed.wrapping_add(i), persons, 17, 0.0), i)).collect();
        let results: Vec<_> = scenes
            .iter()
            .map(|s| group_oracle::<f64>(s, &GraphTopology::full(), 17, &OhgcConfig::default()).unwrap())
            .collect();
        let report = ohgc_core::evaluate(&results, &scenes, &Skeleton::coco().sigmas()).unwrap();
        prop_assert_eq!(report.ap, 1.0);
        prop_assert_eq!(report.ar, 1.0);
    }
}

#[test]
fn grouping_is_identical_across_thread_counts() {
    use rayon::prelude::*;
    let scenes: Vec<Scene> = (0..12).map(|i| scene(i, 4, 17, 0.2)).collect();
    let bundle = DiscriminatorBundle::<f64>::new(NetworkShape::for_input(23), 3).unwrap();
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| {
                scenes
                    .par_iter()
                    .map(|s| group(s, &bundle, &GraphTopology::full(), 17, &OhgcConfig::default()).unwrap())
                    .collect::<Vec<_>>()
            })
    };
    assert_eq!(run(1), run(4));
}
