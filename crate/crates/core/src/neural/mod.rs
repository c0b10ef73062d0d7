//! Dense tensors, reverse-mode differentiation, the interaction network and
//! the two discriminators, plus their training loop.

mod bundle;
mod checkpoint;
mod gradcheck;
mod mlp;
mod optim;
mod tape;
mod tensor;
mod train;

pub use bundle::{DiscriminatorBundle, NetworkShape, FEATURE_DIM};
pub use checkpoint::{load_checkpoint, parse_checkpoint, save_checkpoint, write_checkpoint};
pub use gradcheck::{check_gradients, GradCheckConfig, GradCheckReport, GradMismatch};
pub use mlp::{Dense, Mlp};
pub use optim::{Adam, AdamConfig};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
pub use train::{
    edge_accuracy, macro_accuracy, rollout_loss, scene_gradients, LossReport, LossWeights, RolloutLoss,
    TrainConfig, Trainer, BCE_EPS,
};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Mean binary cross-entropy with predictions clamped to `[1e-7, 1 - 1e-7]`.
pub fn bce_loss<T: Scalar>(predictions: &[T], labels: &[T]) -> Result<T> {
    if predictions.len() != labels.len() {
        return Err(Error::contract(format!(
            "bce: {} predictions vs {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    Ok(tape::bce_terms(predictions, labels, T::lit(BCE_EPS)).0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bce_analytic_values() {
        assert!((bce_loss(&[0.5], &[1.0]).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        let l: f64 = bce_loss(&[0.9, 0.1], &[1.0, 0.0]).unwrap();
        // both terms are -ln 0.9
        assert!((l - 0.105_360_515_657_826_3).abs() < 1e-12);
    }

    #[test]
    fn bce_at_labels_is_bounded_by_clamp() {
        let bound = -(1.0f64 - BCE_EPS).ln();
        assert!(bce_loss(&[1.0, 0.0], &[1.0, 0.0]).unwrap() <= bound + 1e-15);
    }

    #[test]
    fn bce_half_is_ln2_for_either_label() {
        assert!((bce_loss(&[0.5f32], &[0.0]).unwrap() - std::f32::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn bce_length_mismatch() {
        assert!(matches!(bce_loss(&[0.5], &[1.0, 0.0]), Err(Error::Contract(_))));
    }
}
