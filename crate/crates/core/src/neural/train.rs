//! Discriminator training on teacher-guided rollouts.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Adam, AdamConfig, DiscriminatorBundle, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graph::{build_graph, GraphTopology, PoseGraph};
use crate::ohgc::{plan_rollout, teacher_rollout, LearnedScorer, OhgcConfig, RolloutPlan};
use crate::scalar::Scalar;
use crate::scene::Scene;

/// Probability clamp inside every cross-entropy.
pub const BCE_EPS: f64 = 1e-7;

/// Coefficients of the three supervision terms; a zero disables a term.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub edge: f64,
    pub final_macro: f64,
    pub interm_macro: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            edge: 1.0,
            final_macro: 1.0,
            interm_macro: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.edge, self.final_macro, self.interm_macro];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("loss weights must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub optimizer: AdamConfig,
    pub weights: LossWeights,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: AdamConfig::default(),
            weights: LossWeights::default(),
            batch_size: 8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        let lr = self.optimizer.learning_rate;
        if !(lr.is_finite() && lr > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// Losses of one step, averaged over the scenes of the batch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub edge_bce: f64,
    pub macro_final_bce: f64,
    pub macro_intermediate_bce: f64,
    /// `Σ weight · term`.
    pub total: f64,
    /// Share of edge examples on the right side of 0.5.
    pub edge_accuracy: f64,
    pub edge_examples: usize,
    pub macro_examples: usize,
}

impl LossReport {
    fn is_finite(&self) -> bool {
        [
            self.edge_bce,
            self.macro_final_bce,
            self.macro_intermediate_bce,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

struct SceneTerms {
    edge: Option<Var>,
    final_macro: Option<Var>,
    interm_macro: Option<Var>,
    total: Var,
    edge_correct: usize,
    edge_examples: usize,
    macro_examples: usize,
}

/// Mean BCE over several prediction blocks as one scalar node.
fn pooled_bce<T: Scalar>(tape: &mut Tape<T>, blocks: Vec<(Var, Vec<T>)>) -> Result<Option<Var>> {
    let n: usize = blocks.iter().map(|b| b.1.len()).sum();
    if n == 0 {
        return Ok(None);
    }
    let mut terms = Vec::with_capacity(blocks.len());
    for (p, labels) in blocks {
        let share = T::lit(labels.len() as f64 / n as f64);
        if labels.is_empty() {
            continue;
        }
        terms.push((tape.bce(p, labels, T::lit(BCE_EPS))?, share));
    }
    Ok(Some(tape.lin_comb(terms)))
}

fn labels<T: Scalar>(flags: &[bool]) -> Vec<T> {
    flags.iter().map(|&l| if l { T::one() } else { T::zero() }).collect()
}

/// Records the weighted loss of one scene's rollout on `tape`.
fn record_scene<T: Scalar>(
    tape: &mut Tape<T>,
    bundle: &DiscriminatorBundle<T>,
    graph: &PoseGraph<T>,
    plan: &RolloutPlan,
    weights: &LossWeights,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<SceneTerms> {
    let vars = bundle.register(tape);
    let h = vars.node_features(tape, graph, rng.as_deref_mut());

    let mut edge_correct = 0;
    let mut edge = None;
    if weights.edge > 0.0 {
        let mut blocks = Vec::new();
        for step in &plan.edge_steps {
            if step.pairs.is_empty() {
                continue;
            }
            let f = tape.segment_mean(h, step.groups.clone());
            let z = vars.edge_logits(tape, f, &step.pairs, rng.as_deref_mut());
            let p = tape.sigmoid(z);
            edge_correct += tape
                .value(p)
                .data()
                .iter()
                .zip(&step.labels)
                .filter(|(&q, &l)| (q > T::lit(0.5)) == l)
                .count();
            blocks.push((p, labels(&step.labels)));
        }
        edge = pooled_bce(tape, blocks)?;
    }

    let mut macro_blocks = |tape: &mut Tape<T>, is_final: bool| -> Result<Option<Var>> {
        let mut blocks = Vec::new();
        for step in plan.macro_steps.iter().filter(|s| s.is_final == is_final) {
            let f = tape.segment_mean(h, step.groups.clone());
            let z = vars.macro_logits(tape, f, rng.as_deref_mut());
            let p = tape.sigmoid(z);
            blocks.push((p, labels(&step.labels)));
        }
        pooled_bce(tape, blocks)
    };
    let final_macro = if weights.final_macro > 0.0 {
        macro_blocks(tape, true)?
    } else {
        None
    };
    let interm_macro = if weights.interm_macro > 0.0 {
        macro_blocks(tape, false)?
    } else {
        None
    };

    let mut terms = Vec::new();
    for (v, w) in [
        (edge, weights.edge),
        (final_macro, weights.final_macro),
        (interm_macro, weights.interm_macro),
    ] {
        if let Some(v) = v {
            terms.push((v, T::lit(w)));
        }
    }
    let total = tape.lin_comb(terms);
    Ok(SceneTerms {
        edge,
        final_macro,
        interm_macro,
        total,
        edge_correct,
        edge_examples: plan.edge_count(),
        macro_examples: plan.macro_count(),
    })
}

/// Gradients and loss report of one scene.
///
/// The rollout is driven by the current model in inference mode; the loss
/// is then recomputed on a tape with dropout drawn from `rng`.
#[allow(clippy::too_many_arguments)]
pub fn scene_gradients<T: Scalar>(
    bundle: &DiscriminatorBundle<T>,
    scene: &Scene,
    topology: &GraphTopology,
    num_types: usize,
    ohgc: &OhgcConfig,
    weights: &LossWeights,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(Vec<Tensor<T>>, LossReport)> {
    if scene.embeddings_missing {
        return Err(Error::contract(format!(
            "scene {} has no embeddings to train on",
            scene.image_id
        )));
    }
    let graph: PoseGraph<T> = build_graph(scene, num_types, topology);
    let node_features = bundle.interaction_gnn(&graph, None)?;
    let scorer = LearnedScorer {
        bundle,
        node_features,
    };
    let plan = plan_rollout(scene, &graph, &scorer, ohgc)?;
    let out = rollout_loss(bundle, &graph, &plan, weights, rng)?;
    Ok((out.grads, out.report))
}

/// Loss and parameter gradients of a fixed rollout plan.
pub struct RolloutLoss<T> {
    pub loss: T,
    pub grads: Vec<Tensor<T>>,
    pub report: LossReport,
    /// See [`Tape::branch_signature`].
    pub branch_signature: u64,
}

/// Evaluates the weighted loss of `plan` and differentiates it.
pub fn rollout_loss<T: Scalar>(
    bundle: &DiscriminatorBundle<T>,
    graph: &PoseGraph<T>,
    plan: &RolloutPlan,
    weights: &LossWeights,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<RolloutLoss<T>> {
    let mut tape = Tape::new();
    let terms = record_scene(&mut tape, bundle, graph, plan, weights, rng)?;
    let grads = tape.backward(terms.total)?;
    let mut out = bundle.zeros_like();
    grads.accumulate_params(&tape, &mut out);
    let value = |v: Option<Var>| v.map_or(0.0, |v| tape.scalar(v).as_f64());
    let report = LossReport {
        edge_bce: value(terms.edge),
        macro_final_bce: value(terms.final_macro),
        macro_intermediate_bce: value(terms.interm_macro),
        total: tape.scalar(terms.total).as_f64(),
        edge_accuracy: if terms.edge_examples == 0 {
            0.0
        } else {
            terms.edge_correct as f64 / terms.edge_examples as f64
        },
        edge_examples: terms.edge_examples,
        macro_examples: terms.macro_examples,
    };
    Ok(RolloutLoss {
        loss: tape.scalar(terms.total),
        grads: out,
        report,
        branch_signature: tape.branch_signature(),
    })
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Owns the parameters and optimizer state between steps.
pub struct Trainer<T> {
    pub bundle: DiscriminatorBundle<T>,
    pub config: TrainConfig,
    pub ohgc: OhgcConfig,
    pub topology: GraphTopology,
    pub num_types: usize,
    optimizer: Adam<T>,
    step: u64,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(
        bundle: DiscriminatorBundle<T>,
        config: TrainConfig,
        ohgc: OhgcConfig,
        topology: GraphTopology,
        num_types: usize,
    ) -> Result<Self> {
        config.validate()?;
        ohgc.validate()?;
        let params: Vec<&Tensor<T>> = bundle.named_tensors().into_iter().map(|(_, t)| t).collect();
        let optimizer = Adam::new(config.optimizer.clone(), &params);
        Ok(Trainer {
            bundle,
            config,
            ohgc,
            topology,
            num_types,
            optimizer,
            step: 0,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One optimizer update on the mean loss of `batch`.
    ///
    /// Scenes are processed in parallel on the current rayon pool; their
    /// gradients are summed in batch order, so the result does not depend on
    /// the thread count.
    pub fn train_step(&mut self, batch: &[Scene]) -> Result<LossReport> {
        if batch.is_empty() {
            return Err(Error::contract("train_step needs at least one scene"));
        }
        let step = self.step;
        let seed = self.config.seed;
        let per_scene: Vec<Result<(Vec<Tensor<T>>, LossReport)>> = batch
            .par_iter()
            .enumerate()
            .map(|(i, scene)| {
                let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, step, i as u64));
                scene_gradients(
                    &self.bundle,
                    scene,
                    &self.topology,
                    self.num_types,
                    &self.ohgc,
                    &self.config.weights,
                    Some(&mut rng),
                )
            })
            .collect();

        let mut sum = self.bundle.zeros_like();
        let mut report = LossReport::default();
        let mut correct = 0.0;
        for r in per_scene {
            let (g, rep) = r?;
            for (s, g) in sum.iter_mut().zip(&g) {
                s.add_assign(g);
            }
            report.edge_bce += rep.edge_bce;
            report.macro_final_bce += rep.macro_final_bce;
            report.macro_intermediate_bce += rep.macro_intermediate_bce;
            report.total += rep.total;
            correct += rep.edge_accuracy * rep.edge_examples as f64;
            report.edge_examples += rep.edge_examples;
            report.macro_examples += rep.macro_examples;
        }
        let n = batch.len() as f64;
        report.edge_bce /= n;
        report.macro_final_bce /= n;
        report.macro_intermediate_bce /= n;
        report.total /= n;
        report.edge_accuracy = if report.edge_examples == 0 {
            0.0
        } else {
            correct / report.edge_examples as f64
        };
        if !report.is_finite() {
            return Err(Error::contract(format!("non-finite loss at step {}", step + 1)));
        }
        let inv = T::lit(1.0 / n);
        for g in &mut sum {
            g.scale(inv);
        }
        self.optimizer.update(self.bundle.tensors_mut(), &sum);
        self.step += 1;
        Ok(report)
    }
}

/// Share of candidate pairs (singleton edges of the initial graph) whose
/// score lands on the correct side of 0.5.
pub fn edge_accuracy<T: Scalar>(
    bundle: &DiscriminatorBundle<T>,
    scenes: &[Scene],
    topology: &GraphTopology,
    num_types: usize,
) -> Result<f64> {
    let counts: Vec<Result<(usize, usize)>> = scenes
        .par_iter()
        .map(|scene| {
            let graph: PoseGraph<T> = build_graph(scene, num_types, topology);
            if graph.edges.is_empty() {
                return Ok((0, 0));
            }
            let h = bundle.interaction_gnn(&graph, None)?;
            let pairs: Vec<(usize, usize)> = graph.edges.iter().map(|&(u, v, _)| (u, v)).collect();
            let scores = bundle.edge_scores(&h, &pairs);
            let person = crate::ohgc::node_labels(scene, &graph);
            let mut correct = 0;
            for (&(u, v), s) in pairs.iter().zip(scores) {
                let same = person[u].is_some() && person[u] == person[v];
                if (s > T::lit(0.5)) == same {
                    correct += 1;
                }
            }
            Ok((correct, pairs.len()))
        })
        .collect();
    let (mut c, mut n) = (0, 0);
    for r in counts {
        let (a, b) = r?;
        c += a;
        n += b;
    }
    Ok(if n == 0 { 1.0 } else { c as f64 / n as f64 })
}

/// Share of rollout macro-nodes whose purity the macro discriminator
/// predicts correctly at 0.5. Returns `(accuracy, pure count, mixed count)`.
pub fn macro_accuracy<T: Scalar>(
    bundle: &DiscriminatorBundle<T>,
    scenes: &[Scene],
    topology: &GraphTopology,
    num_types: usize,
    ohgc: &OhgcConfig,
) -> Result<(f64, usize, usize)> {
    let per: Vec<Result<(usize, usize, usize)>> = scenes
        .par_iter()
        .map(|scene| {
            let ex = teacher_rollout(scene, bundle, topology, num_types, ohgc)?;
            if ex.macros.is_empty() {
                return Ok((0, 0, 0));
            }
            let f: Vec<T> = ex.macros.iter().flat_map(|m| m.feature.iter().copied()).collect();
            let scores = bundle.macro_scores(&Tensor::matrix(ex.macros.len(), f.len() / ex.macros.len(), f));
            let mut out = (0, 0, 0);
            for (m, s) in ex.macros.iter().zip(scores) {
                if (s > T::lit(0.5)) == m.label {
                    out.0 += 1;
                }
                if m.label {
                    out.1 += 1;
                } else {
                    out.2 += 1;
                }
            }
            Ok(out)
        })
        .collect();
    let (mut c, mut pure, mut mixed) = (0, 0, 0);
    for r in per {
        let (a, b, d) = r?;
        c += a;
        pure += b;
        mixed += d;
    }
    let n = pure + mixed;
    Ok((if n == 0 { 1.0 } else { c as f64 / n as f64 }, pure, mixed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::NetworkShape;
    use crate::scene::{SceneGenerator, SynthConfig};

    fn scenes(n: usize, seed: u64) -> Vec<Scene> {
        SceneGenerator::new(SynthConfig {
            person_count_range: (2, 3),
            rng_seed: seed,
            ..SynthConfig::default()
        })
        .unwrap()
        .scenes(n)
    }

    fn trainer(weights: LossWeights) -> Trainer<f64> {
        let b = DiscriminatorBundle::new(NetworkShape::for_input(23), 1).unwrap();
        let cfg = TrainConfig {
            weights,
            batch_size: 2,
            ..TrainConfig::default()
        };
        Trainer::new(b, cfg, OhgcConfig::default(), GraphTopology::full(), 17).unwrap()
    }

    #[test]
    fn edge_only_zeroes_macro_terms() {
        let mut t = trainer(LossWeights {
            edge: 1.0,
            final_macro: 0.0,
            interm_macro: 0.0,
        });
        let r = t.train_step(&scenes(2, 1)).unwrap();
        assert_eq!(r.macro_final_bce, 0.0);
        assert_eq!(r.macro_intermediate_bce, 0.0);
        assert!(r.edge_bce > 0.0);
        assert!((r.total - r.edge_bce).abs() < 1e-12);
    }

    #[test]
    fn final_only_keeps_final_term() {
        let mut t = trainer(LossWeights {
            edge: 0.0,
            final_macro: 1.0,
            interm_macro: 0.0,
        });
        let r = t.train_step(&scenes(2, 2)).unwrap();
        assert_eq!(r.edge_bce, 0.0);
        assert_eq!(r.macro_intermediate_bce, 0.0);
        assert!(r.macro_final_bce > 0.0);
    }

    #[test]
    fn total_is_weighted_sum() {
        let w = LossWeights {
            edge: 0.5,
            final_macro: 2.0,
            interm_macro: 3.0,
        };
        let mut t = trainer(w);
        let r = t.train_step(&scenes(2, 3)).unwrap();
        let want = 0.5 * r.edge_bce + 2.0 * r.macro_final_bce + 3.0 * r.macro_intermediate_bce;
        assert!((r.total - want).abs() < 1e-9);
    }

    #[test]
    fn unlabeled_scene_is_rejected() {
        let mut t = trainer(LossWeights::default());
        let mut s = scenes(1, 4);
        s[0].gt_persons = None;
        for c in &mut s[0].candidates {
            c.gt_person = None;
        }
        assert!(matches!(t.train_step(&s), Err(Error::Contract(_))));
    }

    #[test]
    fn steps_are_reproducible() {
        let data = scenes(2, 5);
        let mut a = trainer(LossWeights::default());
        let mut b = trainer(LossWeights::default());
        for _ in 0..2 {
            assert_eq!(a.train_step(&data).unwrap(), b.train_step(&data).unwrap());
        }
        assert_eq!(a.bundle, b.bundle);
    }

    #[test]
    fn negative_weight_is_a_config_error() {
        let w = LossWeights {
            edge: -1.0,
            ..LossWeights::default()
        };
        assert!(matches!(w.validate(), Err(Error::Config(_))));
    }
}
