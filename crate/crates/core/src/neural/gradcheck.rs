//! Central finite-difference check of the analytic gradients.

use serde::{Deserialize, Serialize};

use super::{rollout_loss, DiscriminatorBundle, LossWeights};
use crate::error::Result;
use crate::graph::PoseGraph;
use crate::ohgc::RolloutPlan;

/// Tolerances and sampling for [`check_gradients`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub step: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// Entries probed per tensor; `None` probes all of them.
    pub entries_per_tensor: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-4,
            rel_tol: 1e-4,
            abs_tol: 1e-6,
            entries_per_tensor: Some(16),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradMismatch {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Outcome per tensor, in parameter order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub checked: Vec<(String, usize)>,
    /// Probes whose ±step crossed a rectifier, max or clamp boundary.
    pub skipped: usize,
    pub mismatches: Vec<GradMismatch>,
    pub max_abs_error: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty()
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        if self.checked.is_empty() {
            self.checked = other.checked;
        } else {
            for (a, b) in self.checked.iter_mut().zip(other.checked) {
                a.1 += b.1;
            }
        }
        self.skipped += other.skipped;
        self.mismatches.extend(other.mismatches);
        self.max_abs_error = self.max_abs_error.max(other.max_abs_error);
    }
}

/// Entries probed in a tensor of `len`: an even spread plus the endpoints.
fn probe_indices(len: usize, budget: Option<usize>) -> Vec<usize> {
    match budget {
        Some(k) if k < len => {
            let mut idx: Vec<usize> = (0..k).map(|i| i * (len - 1) / (k - 1).max(1)).collect();
            idx.dedup();
            idx
        }
        _ => (0..len).collect(),
    }
}

/// Compares the gradient of the dropout-free rollout loss with central
/// differences. Probes whose perturbation changes the branch signature are
/// skipped, since the loss is only piecewise smooth.
pub fn check_gradients(
    bundle: &DiscriminatorBundle<f64>,
    graph: &PoseGraph<f64>,
    plan: &RolloutPlan,
    weights: &LossWeights,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let base = rollout_loss(bundle, graph, plan, weights, None)?;
    let names: Vec<String> = bundle.named_tensors().into_iter().map(|(n, _)| n).collect();
    let mut probe = bundle.clone();
    let mut report = GradCheckReport::default();
    for (t, name) in names.iter().enumerate() {
        let len = base.grads[t].len();
        let mut count = 0;
        for i in probe_indices(len, cfg.entries_per_tensor) {
            let orig = probe.tensors_mut()[t].data()[i];
            let mut eval = |value: f64| -> Result<(f64, u64)> {
                probe.tensors_mut()[t].data_mut()[i] = value;
                let out = rollout_loss(&probe, graph, plan, weights, None)?;
                Ok((out.loss, out.branch_signature))
            };
            let (plus, sig_plus) = eval(orig + cfg.step)?;
            let (minus, sig_minus) = eval(orig - cfg.step)?;
            probe.tensors_mut()[t].data_mut()[i] = orig;
            if sig_plus != base.branch_signature || sig_minus != base.branch_signature {
                report.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let analytic = base.grads[t].data()[i];
            let err = (analytic - numeric).abs();
            report.max_abs_error = report.max_abs_error.max(err);
            if err > cfg.abs_tol.max(cfg.rel_tol * analytic.abs().max(numeric.abs())) {
                report.mismatches.push(GradMismatch {
                    tensor: name.clone(),
                    index: i,
                    analytic,
                    numeric,
                });
            }
            count += 1;
        }
        report.checked.push((name.clone(), count));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn probe_indices_cover_ends() {
        assert_eq!(probe_indices(10, Some(3)), vec![0, 4, 9]);
        assert_eq!(probe_indices(2, Some(5)), vec![0, 1]);
        assert_eq!(probe_indices(4, None), vec![0, 1, 2, 3]);
        assert_eq!(probe_indices(7, Some(1)), vec![0]);
    }
}
