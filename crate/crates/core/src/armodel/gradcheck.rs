//! Central finite-difference check of the analytic gradients.

use crate::error::Result;

use super::layout::TokenSequence;
use super::loss::{joint_loss_with_inputs, LossWeights};
use super::model::Model;

/// Denominator floor of the relative error `|a − n| / max(|a|, |n|, floor)`.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `max |a − n|` over the checked entries.
    pub max_abs_error: f64,
    /// `max |a|` over the checked entries.
    pub grad_scale: f64,
    pub worst_index: usize,
    pub checked: usize,
}

pub fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Compares analytic and central-difference gradients of the teacher-forced
/// joint loss at the parameter indices `indices`.
pub fn grad_check(
    model: &Model,
    batch: &[TokenSequence],
    w: LossWeights,
    indices: &[usize],
    eps: f64,
) -> Result<GradCheckReport> {
    let mut grads = vec![0.0; model.param_count()];
    joint_loss_with_inputs(model, batch, batch, w, Some(&mut grads))?;
    let mut probe = model.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        grad_scale: 0.0,
        worst_index: 0,
        checked: indices.len(),
    };
    for &i in indices {
        let orig = probe.params.data[i];
        probe.params.data[i] = orig + eps;
        let up = joint_loss_with_inputs(&probe, batch, batch, w, None)?.total;
        probe.params.data[i] = orig - eps;
        let down = joint_loss_with_inputs(&probe, batch, batch, w, None)?.total;
        probe.params.data[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let e = rel_error(grads[i], numeric);
        report.max_abs_error = report.max_abs_error.max((grads[i] - numeric).abs());
        report.grad_scale = report.grad_scale.max(grads[i].abs());
        if e > report.max_rel_error {
            report.max_rel_error = e;
            report.worst_index = i;
        }
    }
    Ok(report)
}

/// Up to `per_tensor` evenly spaced indices from every tensor.
pub fn sample_indices(model: &Model, per_tensor: usize) -> Vec<usize> {
    let mut out = Vec::new();
    for s in &model.params.specs {
        let n = s.len();
        let k = per_tensor.min(n);
        for j in 0..k {
            out.push(s.offset + j * n / k);
        }
    }
    out
}
