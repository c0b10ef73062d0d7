//! Teacher-guided rollouts: the clustering loop driven by the model's own
//! scores, recording labeled edge and macro-node examples along the way.

use crate::error::{Error, Result};
use crate::graph::{build_graph, ClusterState, GraphTopology, PoseGraph};
use crate::neural::DiscriminatorBundle;
use crate::scalar::Scalar;
use crate::scene::Scene;

use super::scorer::{is_pure, node_labels};
use super::{mean_rows, run_loop, LearnedScorer, LoopObserver, OhgcConfig, Scorer};

/// Active edges of one iteration, before matching.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeStep {
    /// Member graph nodes of each macro-node.
    pub groups: Vec<Vec<usize>>,
    /// Index pairs into `groups`.
    pub pairs: Vec<(usize, usize)>,
    /// 1 when the union of both endpoints is pure.
    pub labels: Vec<bool>,
}

/// Macro-nodes right after a merge.
#[derive(Clone, Debug, PartialEq)]
pub struct MacroStep {
    pub groups: Vec<Vec<usize>>,
    pub labels: Vec<bool>,
    pub is_final: bool,
}

/// Everything a training step needs to rebuild the rollout on a tape.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RolloutPlan {
    pub edge_steps: Vec<EdgeStep>,
    pub macro_steps: Vec<MacroStep>,
}

impl RolloutPlan {
    pub fn edge_count(&self) -> usize {
        self.edge_steps.iter().map(|s| s.pairs.len()).sum()
    }

    pub fn macro_count(&self) -> usize {
        self.macro_steps.iter().map(|s| s.groups.len()).sum()
    }
}

struct Recorder<'a> {
    labels: &'a [Option<u64>],
    plan: RolloutPlan,
}

impl<T: Scalar> LoopObserver<T> for Recorder<'_> {
    fn scored(&mut self, state: &ClusterState<T>) {
        let groups = state.groups();
        let pairs = state.edge_indices();
        let labels = pairs
            .iter()
            .map(|&(a, b)| is_pure(self.labels, groups[a].iter().chain(&groups[b])))
            .collect();
        self.plan.edge_steps.push(EdgeStep {
            groups,
            pairs,
            labels,
        });
    }

    fn merged(&mut self, merged: &ClusterState<T>, _matching: &[(u64, u64)], _pruned: usize) {
        let groups = merged.groups();
        let labels = groups.iter().map(|g| is_pure(self.labels, g)).collect();
        self.plan.macro_steps.push(MacroStep {
            groups,
            labels,
            is_final: false,
        });
    }
}

/// Runs the loop with `scorer` and records the supervision targets.
///
/// The last post-merge state is flagged final; when nothing merges, the
/// singletons themselves are the final macro-nodes.
pub fn plan_rollout<T: Scalar, S: Scorer<T> + ?Sized>(
    scene: &Scene,
    graph: &PoseGraph<T>,
    scorer: &S,
    cfg: &OhgcConfig,
) -> Result<RolloutPlan> {
    if !scene.has_ground_truth() || scene.candidates.iter().any(|c| c.gt_person.is_none()) {
        return Err(Error::contract(format!(
            "scene {} has no ground-truth person labels",
            scene.image_id
        )));
    }
    let labels = node_labels(scene, graph);
    let mut recorder = Recorder {
        labels: &labels,
        plan: RolloutPlan::default(),
    };
    run_loop(graph, scorer, cfg, &mut recorder)?;
    let mut plan = recorder.plan;
    match plan.macro_steps.last_mut() {
        Some(last) => last.is_final = true,
        None if !graph.is_empty() => {
            let groups: Vec<Vec<usize>> = (0..graph.len()).map(|n| vec![n]).collect();
            let labels = groups.iter().map(|g| is_pure(&labels, g)).collect();
            plan.macro_steps.push(MacroStep {
                groups,
                labels,
                is_final: true,
            });
        }
        None => {}
    }
    Ok(plan)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EdgeExample<T> {
    pub u: Vec<T>,
    pub v: Vec<T>,
    pub label: bool,
    pub iteration: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MacroExample<T> {
    pub feature: Vec<T>,
    pub label: bool,
    pub is_final: bool,
    pub iteration: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RolloutExamples<T> {
    pub edges: Vec<EdgeExample<T>>,
    pub macros: Vec<MacroExample<T>>,
}

/// On-policy rollout with materialized 64-D features (inference mode).
pub fn teacher_rollout<T: Scalar>(
    scene: &Scene,
    bundle: &DiscriminatorBundle<T>,
    topology: &GraphTopology,
    num_types: usize,
    cfg: &OhgcConfig,
) -> Result<RolloutExamples<T>> {
    let graph: PoseGraph<T> = build_graph(scene, num_types, topology);
    let node_features = bundle.interaction_gnn(&graph, None)?;
    let scorer = LearnedScorer {
        bundle,
        node_features,
    };
    let plan = plan_rollout(scene, &graph, &scorer, cfg)?;
    let mean = |groups: &[Vec<usize>]| {
        mean_rows(groups.iter().map(|g| g.as_slice()), &scorer.node_features)
    };
    let mut out = RolloutExamples::default();
    for (i, step) in plan.edge_steps.iter().enumerate() {
        let f = mean(&step.groups);
        for (&(a, b), &label) in step.pairs.iter().zip(&step.labels) {
            out.edges.push(EdgeExample {
                u: f.row(a).to_vec(),
                v: f.row(b).to_vec(),
                label,
                iteration: i,
            });
        }
    }
    for (i, step) in plan.macro_steps.iter().enumerate() {
        let f = mean(&step.groups);
        for (r, &label) in step.labels.iter().enumerate() {
            out.macros.push(MacroExample {
                feature: f.row(r).to_vec(),
                label,
                is_final: step.is_final,
                iteration: i,
            });
        }
    }
    Ok(out)
}
