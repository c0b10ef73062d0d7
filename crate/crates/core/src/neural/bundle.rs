//! Interaction network plus the edge and macro-node discriminators.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mlp::{Mlp, MlpVars};
use super::tape::{Tape, Var};
use super::Tensor;
use crate::error::{Error, Result};
use crate::graph::PoseGraph;
use crate::scalar::Scalar;

/// Width of the node features the discriminators consume.
pub const FEATURE_DIM: usize = 64;

/// Layer widths of every network in a [`DiscriminatorBundle`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkShape {
    /// `D_e + J + 2`.
    pub input_dim: usize,
    /// Output width of each EdgeConv layer.
    pub edgeconv_widths: Vec<usize>,
    pub node_hidden: Vec<usize>,
    pub edge_hidden: Vec<usize>,
    pub macro_hidden: Vec<usize>,
    pub dropout_rate: f64,
}

impl NetworkShape {
    pub fn for_input(input_dim: usize) -> Self {
        NetworkShape {
            input_dim,
            edgeconv_widths: vec![64, 64],
            node_hidden: vec![128, 128],
            edge_hidden: vec![64, 32],
            macro_hidden: vec![32, 16],
            dropout_rate: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.edgeconv_widths.is_empty() {
            return Err(Error::Config(
                "network needs a positive input width and at least one EdgeConv layer".into(),
            ));
        }
        let widths = [
            &self.edgeconv_widths,
            &self.node_hidden,
            &self.edge_hidden,
            &self.macro_hidden,
        ];
        if widths.iter().flat_map(|w| w.iter()).any(|&w| w == 0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config("dropout_rate must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Every trainable parameter of the grouping stack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorBundle<T> {
    pub shape: NetworkShape,
    /// One single-layer edge function per EdgeConv layer.
    pub edgeconv_layers: Vec<Mlp<T>>,
    /// Maps aggregated features to [`FEATURE_DIM`].
    pub node_mlp: Mlp<T>,
    /// `2 × 64 → 1`.
    pub edge_disc: Mlp<T>,
    /// `64 → 1`.
    pub macro_disc: Mlp<T>,
}

impl<T: Scalar> DiscriminatorBundle<T> {
    pub fn new(shape: NetworkShape, seed: u64) -> Result<Self> {
        shape.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = shape.dropout_rate;
        let mut width = shape.input_dim;
        let mut edgeconv_layers = Vec::new();
        for &out in &shape.edgeconv_widths {
            edgeconv_layers.push(Mlp::init(&[2 * width, out], p, &mut rng));
            width = out;
        }
        let chain = |first: usize, hidden: &[usize], last: usize| {
            let mut w = vec![first];
            w.extend_from_slice(hidden);
            w.push(last);
            w
        };
        let node_mlp = Mlp::init(&chain(width, &shape.node_hidden, FEATURE_DIM), p, &mut rng);
        let edge_disc = Mlp::init(&chain(2 * FEATURE_DIM, &shape.edge_hidden, 1), p, &mut rng);
        let macro_disc = Mlp::init(&chain(FEATURE_DIM, &shape.macro_hidden, 1), p, &mut rng);
        Ok(DiscriminatorBundle {
            shape,
            edgeconv_layers,
            node_mlp,
            edge_disc,
            macro_disc,
        })
    }

    fn mlps(&self) -> Vec<(String, &Mlp<T>)> {
        let mut out: Vec<(String, &Mlp<T>)> = self
            .edgeconv_layers
            .iter()
            .enumerate()
            .map(|(i, m)| (format!("edgeconv.{i}"), m))
            .collect();
        out.push(("node_mlp".into(), &self.node_mlp));
        out.push(("edge_disc".into(), &self.edge_disc));
        out.push(("macro_disc".into(), &self.macro_disc));
        out
    }

    /// Parameters in registration order with stable names.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (prefix, mlp) in self.mlps() {
            for (i, l) in mlp.layers.iter().enumerate() {
                out.push((format!("{prefix}.{i}.weight"), &l.weight));
                out.push((format!("{prefix}.{i}.bias"), &l.bias));
            }
        }
        out
    }

    /// Mutable parameters, same order as [`Self::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        let mlps = self
            .edgeconv_layers
            .iter_mut()
            .chain([&mut self.node_mlp, &mut self.edge_disc, &mut self.macro_disc]);
        for mlp in mlps {
            for l in &mut mlp.layers {
                out.push(&mut l.weight);
                out.push(&mut l.bias);
            }
        }
        out
    }

    /// Zero tensors shaped like every parameter.
    pub fn zeros_like(&self) -> Vec<Tensor<T>> {
        self.named_tensors()
            .into_iter()
            .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Checks that the layer dimensions chain and the discriminators see
    /// exactly `2 × 64` and `64` inputs.
    pub fn validate(&self) -> Result<()> {
        let reference = DiscriminatorBundle::<T>::new(self.shape.clone(), 0)?;
        let want = reference.named_tensors();
        let got = self.named_tensors();
        if want.len() != got.len() {
            return Err(Error::Config(format!(
                "bundle has {} tensors, its shape implies {}",
                got.len(),
                want.len()
            )));
        }
        for ((name, w), (_, g)) in want.iter().zip(&got) {
            if w.shape() != g.shape() {
                return Err(Error::Shape {
                    name: name.clone(),
                    expected: w.shape().to_vec(),
                    found: g.shape().to_vec(),
                });
            }
            if !g.all_finite() {
                return Err(Error::contract(format!("parameter `{name}` is not finite")));
            }
        }
        debug_assert_eq!(self.edge_disc.inputs(), 2 * FEATURE_DIM);
        debug_assert_eq!(self.macro_disc.inputs(), FEATURE_DIM);
        Ok(())
    }

    pub(crate) fn register(&self, tape: &mut Tape<T>) -> BundleVars {
        let mut id = 0;
        let edgeconv = self
            .edgeconv_layers
            .iter()
            .map(|m| m.register(tape, &mut id))
            .collect();
        let node_mlp = self.node_mlp.register(tape, &mut id);
        let edge_disc = self.edge_disc.register(tape, &mut id);
        let macro_disc = self.macro_disc.register(tape, &mut id);
        BundleVars {
            edgeconv,
            node_mlp,
            edge_disc,
            macro_disc,
        }
    }

    /// Runs the interaction network: an `N × 64` feature matrix.
    ///
    /// Passing a generator turns on dropout (training mode).
    pub fn interaction_gnn(
        &self,
        graph: &PoseGraph<T>,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<Tensor<T>> {
        if graph.feature_dim() != self.shape.input_dim {
            return Err(Error::contract(format!(
                "graph features are {}-D but the network expects {}",
                graph.feature_dim(),
                self.shape.input_dim
            )));
        }
        let mut tape = Tape::new();
        let vars = self.register(&mut tape);
        let h = vars.node_features(&mut tape, graph, dropout);
        Ok(tape.value(h).clone())
    }

    /// Symmetrized edge score in (0, 1).
    pub fn edge_score(&self, u: &[T], v: &[T]) -> Result<T> {
        check_feature(u)?;
        check_feature(v)?;
        let mut data = u.to_vec();
        data.extend_from_slice(v);
        let feats = Tensor::matrix(2, FEATURE_DIM, data);
        Ok(self.edge_scores(&feats, &[(0, 1)])[0])
    }

    /// Scores of `pairs` of rows of `features` (each row 64-D).
    pub fn edge_scores(&self, features: &Tensor<T>, pairs: &[(usize, usize)]) -> Vec<T> {
        if pairs.is_empty() {
            return Vec::new();
        }
        let mut tape = Tape::new();
        let vars = self.register(&mut tape);
        let f = tape.constant(features.clone());
        let logits = vars.edge_logits(&mut tape, f, pairs, None);
        let p = tape.sigmoid(logits);
        tape.value(p).data().to_vec()
    }

    pub fn macro_score(&self, feature: &[T]) -> Result<T> {
        check_feature(feature)?;
        let feats = Tensor::matrix(1, FEATURE_DIM, feature.to_vec());
        Ok(self.macro_scores(&feats)[0])
    }

    /// Scores of every row of `features`.
    pub fn macro_scores(&self, features: &Tensor<T>) -> Vec<T> {
        if features.rows() == 0 || features.is_empty() {
            return Vec::new();
        }
        let mut tape = Tape::new();
        let vars = self.register(&mut tape);
        let f = tape.constant(features.clone());
        let logits = vars.macro_logits(&mut tape, f, None);
        let p = tape.sigmoid(logits);
        tape.value(p).data().to_vec()
    }

    pub fn cast<U: Scalar>(&self) -> DiscriminatorBundle<U> {
        let cast_mlp = |m: &Mlp<T>| Mlp {
            layers: m
                .layers
                .iter()
                .map(|l| super::Dense {
                    weight: l.weight.cast(),
                    bias: l.bias.cast(),
                })
                .collect(),
            dropout_rate: m.dropout_rate,
        };
        DiscriminatorBundle {
            shape: self.shape.clone(),
            edgeconv_layers: self.edgeconv_layers.iter().map(cast_mlp).collect(),
            node_mlp: cast_mlp(&self.node_mlp),
            edge_disc: cast_mlp(&self.edge_disc),
            macro_disc: cast_mlp(&self.macro_disc),
        }
    }
}

fn check_feature<T: Scalar>(f: &[T]) -> Result<()> {
    if f.len() != FEATURE_DIM {
        return Err(Error::contract(format!(
            "expected a {FEATURE_DIM}-D feature, found {}",
            f.len()
        )));
    }
    if f.iter().any(|v| !v.is_finite()) {
        return Err(Error::contract("feature contains non-finite values"));
    }
    Ok(())
}

/// A bundle registered on a tape.
pub(crate) struct BundleVars {
    edgeconv: Vec<MlpVars>,
    node_mlp: MlpVars,
    edge_disc: MlpVars,
    macro_disc: MlpVars,
}

impl BundleVars {
    /// EdgeConv stack then the node MLP. Each undirected edge sends one
    /// message each way; a node keeps the elementwise max of its incoming
    /// messages (zero when it has none).
    pub fn node_features<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        graph: &PoseGraph<T>,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Var {
        let n = graph.len();
        let mut pairs = Vec::with_capacity(2 * graph.edges.len());
        for &(u, v, _) in &graph.edges {
            pairs.extend([(u, v), (v, u)]);
        }
        let targets: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let mut x = tape.constant(graph.feature_matrix());
        for layer in &self.edgeconv {
            let msg = layer.forward_pairs(tape, x, pairs.clone(), None, true);
            x = tape.segment_max(msg, &targets, n);
        }
        self.node_mlp.forward(tape, x, rng.as_deref_mut(), false)
    }

    /// Logits for each `(u, v)` pair of rows of `features`, averaged over
    /// both concatenation orders.
    pub fn edge_logits<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        features: Var,
        pairs: &[(usize, usize)],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Var {
        let flipped = pairs.iter().map(|&(u, v)| (v, u)).collect();
        let a = self.edge_disc.forward_pairs(tape, features, pairs.to_vec(), rng.as_deref_mut(), false);
        let b = self.edge_disc.forward_pairs(tape, features, flipped, rng.as_deref_mut(), false);
        let sum = tape.add(a, b);
        tape.scale(sum, T::lit(0.5))
    }

    pub fn macro_logits<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        features: Var,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Var {
        self.macro_disc.forward(tape, features, rng, false)
    }
}
