//! The online hierarchical clustering loop.
//!
//! Starting from one macro-node per candidate, every iteration averages the
//! member features of each macro-node, rescores the surviving edges, merges
//! a greedy matching of the confident edges and prunes edges whose
//! endpoints now share a keypoint type.

mod matching;
mod rollout;
mod scorer;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::graph::{
    build_graph, init_cluster_state, merge_pairs, prune, ClusterState, GraphTopology, PoseGraph,
};
use crate::neural::{DiscriminatorBundle, Tensor};
use crate::scalar::Scalar;
use crate::scene::Scene;

pub use matching::{graclus_match, greedy_matching};
pub use rollout::{
    plan_rollout, teacher_rollout, EdgeExample, EdgeStep, MacroExample, MacroStep, RolloutExamples,
    RolloutPlan,
};
pub use scorer::{LearnedScorer, OracleScorer, Scorer};
pub(crate) use scorer::node_labels;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OhgcConfig {
    /// Edges below this weight are never merged.
    pub merge_threshold: f64,
    /// Instances whose macro score falls below this are flagged.
    pub suppress_threshold: f64,
    pub max_iterations: usize,
}

impl OhgcConfig {
    /// Defaults with the iteration cap set to `2·⌈log₂ J⌉`.
    pub fn for_types(num_types: usize) -> Self {
        let log = (num_types.max(2) as f64).log2().ceil() as usize;
        OhgcConfig {
            merge_threshold: 0.5,
            suppress_threshold: 0.5,
            max_iterations: 2 * log,
        }
    }

    pub fn validate(&self) -> Result<()> {
        use crate::error::Error;
        if !(0.0..=1.0).contains(&self.merge_threshold)
            || !(0.0..=1.0).contains(&self.suppress_threshold)
        {
            return Err(Error::Config("ohgc thresholds must lie in [0, 1]".into()));
        }
        if self.max_iterations == 0 {
            return Err(Error::Config("max_iterations must be at least 1".into()));
        }
        Ok(())
    }
}

impl Default for OhgcConfig {
    fn default() -> Self {
        Self::for_types(17)
    }
}

/// One grouped person.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PersonInstance {
    /// Candidate ids, ascending.
    pub members: Vec<u64>,
    /// Per-type positions in pixels.
    pub keypoints: Vec<Option<[f64; 2]>>,
    /// `macro_score × mean member confidence`.
    pub score: f64,
    pub macro_score: f64,
    #[serde(default)]
    pub suppressed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupingResult {
    pub image_id: u64,
    pub persons: Vec<PersonInstance>,
    /// Number of iterations that merged at least one pair.
    pub iterations_used: usize,
}

impl GroupingResult {
    pub fn empty(image_id: u64) -> Self {
        GroupingResult {
            image_id,
            persons: Vec::new(),
            iterations_used: 0,
        }
    }

    /// True when no candidate is used twice and no person repeats a type.
    pub fn satisfies_constraints(&self) -> bool {
        let mut seen = std::collections::HashSet::new();
        for p in &self.persons {
            if !p.members.iter().all(|m| seen.insert(*m)) {
                return false;
            }
            if p.keypoints.iter().flatten().count() != p.members.len() {
                return false;
            }
        }
        true
    }

    /// Member sets, sorted, for partition comparisons.
    pub fn partition(&self) -> Vec<Vec<u64>> {
        let mut parts: Vec<Vec<u64>> = self.persons.iter().map(|p| p.members.clone()).collect();
        parts.sort();
        parts
    }
}

/// Mean of the member node features of every macro-node (`K × F`).
pub fn aggregate_features<T: Scalar>(
    state: &ClusterState<T>,
    node_features: &Tensor<T>,
) -> Tensor<T> {
    mean_rows(state.macro_nodes.iter().map(|m| m.nodes.as_slice()), node_features)
}

pub(crate) fn mean_rows<'a, T: Scalar>(
    groups: impl ExactSizeIterator<Item = &'a [usize]>,
    rows: &Tensor<T>,
) -> Tensor<T> {
    let f = rows.cols();
    let k = groups.len();
    let mut out = Vec::with_capacity(k * f);
    for g in groups {
        let mut acc = vec![T::zero(); f];
        for &n in g {
            for (a, &v) in acc.iter_mut().zip(rows.row(n)) {
                *a += v;
            }
        }
        let inv = T::one() / T::lit(g.len().max(1) as f64);
        out.extend(acc.into_iter().map(|a| a * inv));
    }
    Tensor::matrix(k, f, out)
}

/// Rescores every active edge with the edge discriminator.
pub fn update_proximity<T: Scalar>(
    state: &ClusterState<T>,
    macro_features: &Tensor<T>,
    bundle: &DiscriminatorBundle<T>,
) -> ClusterState<T> {
    let weights = bundle.edge_scores(macro_features, &state.edge_indices());
    with_weights(state, weights)
}

fn with_weights<T: Scalar>(state: &ClusterState<T>, weights: Vec<T>) -> ClusterState<T> {
    let mut next = state.clone();
    for (w, new) in next.active_edges.values_mut().zip(weights) {
        *w = new;
    }
    next
}

/// One iteration as seen by the trace writer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub image_id: u64,
    pub iteration: usize,
    /// Member candidate ids of every macro-node after the merge.
    pub macro_nodes: Vec<Vec<u64>>,
    pub merged: Vec<(u64, u64)>,
    pub pruned_edges: usize,
}

/// Hooks into the clustering loop.
pub(crate) trait LoopObserver<T> {
    fn scored(&mut self, _state: &ClusterState<T>) {}
    fn merged(&mut self, _merged: &ClusterState<T>, _matching: &[(u64, u64)], _pruned: usize) {}
}

impl<T> LoopObserver<T> for () {}

struct TraceObserver<'a> {
    image_id: u64,
    out: &'a mut Vec<TraceRecord>,
}

impl<T: Scalar> LoopObserver<T> for TraceObserver<'_> {
    fn merged(&mut self, merged: &ClusterState<T>, matching: &[(u64, u64)], pruned: usize) {
        self.out.push(TraceRecord {
            image_id: self.image_id,
            iteration: merged.iteration,
            macro_nodes: merged.macro_nodes.iter().map(|m| m.members.clone()).collect(),
            merged: matching.to_vec(),
            pruned_edges: pruned,
        });
    }
}

/// Runs the loop to termination and returns the final state.
pub(crate) fn run_loop<T: Scalar, S: Scorer<T> + ?Sized>(
    graph: &PoseGraph<T>,
    scorer: &S,
    cfg: &OhgcConfig,
    observer: &mut dyn LoopObserver<T>,
) -> Result<ClusterState<T>> {
    let tau = T::lit(cfg.merge_threshold);
    let mut state = init_cluster_state(graph);
    while state.iteration < cfg.max_iterations && !state.active_edges.is_empty() {
        state = with_weights(&state, scorer.edge_weights(&state));
        observer.scored(&state);
        let matching = graclus_match(&state, tau);
        if matching.is_empty() {
            break;
        }
        let merged = merge_pairs(&state, &matching)?;
        let pruned = prune(&merged);
        observer.merged(
            &merged,
            &matching,
            merged.active_edges.len() - pruned.active_edges.len(),
        );
        state = pruned;
    }
    Ok(state)
}

/// Groups with any scorer over a prebuilt graph.
pub fn group_with<T: Scalar, S: Scorer<T> + ?Sized>(
    scene: &Scene,
    graph: &PoseGraph<T>,
    scorer: &S,
    cfg: &OhgcConfig,
    trace: Option<&mut Vec<TraceRecord>>,
) -> Result<GroupingResult> {
    let state = match trace {
        Some(out) => run_loop(
            graph,
            scorer,
            cfg,
            &mut TraceObserver {
                image_id: scene.image_id,
                out,
            },
        )?,
        None => run_loop(graph, scorer, cfg, &mut ())?,
    };
    let scores = scorer.macro_scores(&state);
    Ok(finish(scene, graph, &state, &scores, cfg))
}

fn finish<T: Scalar>(
    scene: &Scene,
    graph: &PoseGraph<T>,
    state: &ClusterState<T>,
    macro_scores: &[T],
    cfg: &OhgcConfig,
) -> GroupingResult {
    let by_id: std::collections::HashMap<u64, &crate::scene::KeypointCandidate> =
        scene.candidates.iter().map(|c| (c.id, c)).collect();
    let (w, h) = (f64::from(scene.width), f64::from(scene.height));
    let persons = state
        .macro_nodes
        .iter()
        .zip(macro_scores)
        .map(|(m, &s)| {
            let mut keypoints = vec![None; graph.num_types];
            let mut conf = 0.0;
            for id in &m.members {
                let c = by_id[id];
                keypoints[c.kind] = Some([c.x * w, c.y * h]);
                conf += c.confidence;
            }
            let macro_score = s.as_f64();
            PersonInstance {
                members: m.members.clone(),
                keypoints,
                score: macro_score * conf / m.members.len() as f64,
                macro_score,
                suppressed: macro_score < cfg.suppress_threshold,
            }
        })
        .collect();
    GroupingResult {
        image_id: scene.image_id,
        persons,
        iterations_used: state.iteration,
    }
}

/// Full pipeline: build the graph, run the interaction network once, then
/// cluster with the learned discriminators.
pub fn group<T: Scalar>(
    scene: &Scene,
    bundle: &DiscriminatorBundle<T>,
    topology: &GraphTopology,
    num_types: usize,
    cfg: &OhgcConfig,
) -> Result<GroupingResult> {
    if scene.candidates.is_empty() {
        return Ok(GroupingResult::empty(scene.image_id));
    }
    let graph = build_graph(scene, num_types, topology);
    let node_features = bundle.interaction_gnn(&graph, None)?;
    let scorer = LearnedScorer {
        bundle,
        node_features,
    };
    group_with(scene, &graph, &scorer, cfg, None)
}

/// Groups with the ground-truth oracle scorer.
pub fn group_oracle<T: Scalar>(
    scene: &Scene,
    topology: &GraphTopology,
    num_types: usize,
    cfg: &OhgcConfig,
) -> Result<GroupingResult> {
    let graph: PoseGraph<T> = build_graph(scene, num_types, topology);
    let scorer = OracleScorer::new(scene, &graph);
    group_with(scene, &graph, &scorer, cfg, None)
}
