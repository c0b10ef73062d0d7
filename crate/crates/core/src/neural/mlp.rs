use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use super::Tensor;
use crate::scalar::Scalar;

/// Fully connected layer, `weight` is `[out, in]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Dense<T> {
    /// He-uniform weights, zero bias.
    pub fn init(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (6.0 / inputs.max(1) as f64).sqrt();
        let weight = (0..inputs * outputs)
            .map(|_| T::lit(rng.random_range(-bound..bound)))
            .collect();
        Dense {
            weight: Tensor::from_vec(vec![outputs, inputs], weight),
            bias: Tensor::zeros(vec![outputs]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[0]
    }
}

/// A stack of dense layers with rectifiers and dropout between them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp<T> {
    pub layers: Vec<Dense<T>>,
    pub dropout_rate: f64,
}

impl<T: Scalar> Mlp<T> {
    /// `widths = [in, h1, ..., out]`.
    pub fn init(widths: &[usize], dropout_rate: f64, rng: &mut ChaCha8Rng) -> Self {
        let layers = widths
            .windows(2)
            .map(|w| Dense::init(w[0], w[1], rng))
            .collect();
        Mlp {
            layers,
            dropout_rate,
        }
    }

    pub fn inputs(&self) -> usize {
        self.layers.first().map_or(0, Dense::inputs)
    }

    pub fn outputs(&self) -> usize {
        self.layers.last().map_or(0, Dense::outputs)
    }

    /// Widths `[in, h1, ..., out]`.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.inputs()];
        w.extend(self.layers.iter().map(Dense::outputs));
        w
    }

    pub(crate) fn register(&self, tape: &mut Tape<T>, next_id: &mut usize) -> MlpVars {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let w = tape.param(*next_id, &l.weight);
                let b = tape.param(*next_id + 1, &l.bias);
                *next_id += 2;
                (w, b)
            })
            .collect();
        MlpVars {
            layers,
            dropout_rate: self.dropout_rate,
        }
    }
}

/// An [`Mlp`] whose parameters live on a tape.
#[derive(Clone, Debug)]
pub(crate) struct MlpVars {
    pub layers: Vec<(Var, Var)>,
    pub dropout_rate: f64,
}

impl MlpVars {
    /// [`Self::forward`] on `[x_u ‖ x_v]` for each pair of rows of `x`.
    pub fn forward_pairs<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        pairs: Vec<(usize, usize)>,
        mut rng: Option<&mut ChaCha8Rng>,
        rectify_output: bool,
    ) -> Var {
        let (w, b) = self.layers[0];
        let mut h = tape.pair_linear(x, w, b, pairs);
        let last = self.layers.len() - 1;
        if last > 0 || rectify_output {
            h = tape.relu(h);
        }
        if last == 0 {
            return h;
        }
        if let Some(rng) = rng.as_deref_mut() {
            h = dropout(tape, h, self.dropout_rate, rng);
        }
        let rest = MlpVars {
            layers: self.layers[1..].to_vec(),
            dropout_rate: self.dropout_rate,
        };
        rest.forward(tape, h, rng, rectify_output)
    }

    /// Hidden layers get a rectifier and, when `rng` is given, dropout. The
    /// last layer is affine unless `rectify_output` is set.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        mut x: Var,
        mut rng: Option<&mut ChaCha8Rng>,
        rectify_output: bool,
    ) -> Var {
        let last = self.layers.len() - 1;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            x = tape.linear(x, w, b);
            if i < last || rectify_output {
                x = tape.relu(x);
            }
            if i < last {
                if let Some(rng) = rng.as_deref_mut() {
                    x = dropout(tape, x, self.dropout_rate, rng);
                }
            }
        }
        x
    }
}

fn dropout<T: Scalar>(tape: &mut Tape<T>, x: Var, rate: f64, rng: &mut ChaCha8Rng) -> Var {
    if rate <= 0.0 {
        return x;
    }
    let keep = T::lit(1.0 / (1.0 - rate));
    let mask = (0..tape.value(x).len())
        .map(|_| {
            if rng.random::<f64>() < rate {
                T::zero()
            } else {
                keep
            }
        })
        .collect();
    tape.dropout(x, mask)
}
