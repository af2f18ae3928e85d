//! Next-token cross entropy over the unified vocabulary, split into BEV and
//! trajectory heads, and scheduled-sampling input mixing.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DapError, Result};
use crate::tokenize::Modality;

use super::layout::TokenSequence;
use super::model::Model;
use super::ops::{argmax, log_sum_exp, softmax_in_place};

/// How replaced context tokens are drawn from the model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixSampling {
    #[default]
    Greedy,
    Sample,
}

/// Per-token mean losses of the two heads and their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct JointLoss {
    pub total: f64,
    pub l_traj: f64,
    pub l_bev: f64,
    pub aux: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_traj: f64,
    pub lambda_bev: f64,
    pub aux_coef: f64,
}

/// `(loss, softmax)` of one row against a global target id.
pub fn cross_entropy(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let lse = log_sum_exp(logits);
    let mut p = logits.to_vec();
    softmax_in_place(&mut p);
    (lse - logits[target], p)
}

/// Number of BEV and trajectory targets (positions `p` predicting token `p + 1`).
pub fn count_targets(seq: &TokenSequence) -> (usize, usize) {
    let mut n = (0, 0);
    for q in 1..seq.len() {
        match seq.modality(q) {
            Modality::Bev => n.0 += 1,
            Modality::Traj => n.1 += 1,
            Modality::Command => {}
        }
    }
    n
}

/// Replaces each non-command input token with the model's prediction
/// from the preceding position, independently with probability `p`.
/// `p = 0` returns the input untouched without consuming randomness.
pub fn mix_inputs<R: Rng>(
    model: &Model,
    seq: &TokenSequence,
    p: f64,
    how: MixSampling,
    rng: &mut R,
) -> Result<TokenSequence> {
    if !(0.0..=1.0).contains(&p) {
        return Err(DapError::Domain(format!(
            "sampling probability {p} outside [0, 1]"
        )));
    }
    if p == 0.0 {
        return Ok(seq.clone());
    }
    let cache = model.forward(seq)?;
    let v = model.vocab_size();
    let vocab = &model.config.vocab;
    let mut out = seq.clone();
    for q in 1..seq.len() {
        let replace = rng.gen::<f64>() < p;
        let r = vocab.range(seq.modality(q));
        let row = &cache.logits_at(q - 1, v)[r.clone()];
        let pick = match how {
            MixSampling::Greedy => argmax(row),
            MixSampling::Sample => {
                let mut probs = row.to_vec();
                softmax_in_place(&mut probs);
                sample_index(&probs, rng.gen::<f64>())
            }
        };
        if replace {
            out.tokens[q] = (r.start + pick) as u32;
        }
    }
    Ok(out)
}

/// Inverse-CDF draw from a normalized distribution.
pub fn sample_index(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(0)
}

/// Joint loss over a batch. With `grads`, also accumulates parameter gradients.
///
/// `inputs[i]` is what the model reads, `targets[i]` supplies the labels;
/// they differ only under scheduled sampling.
pub fn joint_loss_with_inputs(
    model: &Model,
    inputs: &[TokenSequence],
    targets: &[TokenSequence],
    w: LossWeights,
    mut grads: Option<&mut [f64]>,
) -> Result<JointLoss> {
    if targets.is_empty() {
        return Err(DapError::Size("empty batch".into()));
    }
    let (nb, nt) = targets
        .iter()
        .map(count_targets)
        .fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    let v = model.vocab_size();
    let b = targets.len() as f64;
    let mut out = JointLoss::default();
    for (inp, tgt) in inputs.iter().zip(targets) {
        if inp.len() != tgt.len() {
            return Err(DapError::Sequence("input and target lengths differ".into()));
        }
        let cache = model.forward(inp)?;
        let mut dlogits = grads.as_ref().map(|_| vec![0.0; inp.len() * v]);
        for q in 1..tgt.len() {
            let (scale, slot) = match tgt.modality(q) {
                Modality::Bev => (w.lambda_bev / nb as f64, &mut out.l_bev),
                Modality::Traj => (w.lambda_traj / nt as f64, &mut out.l_traj),
                Modality::Command => continue,
            };
            // A zero-weight head is disabled and reports zero loss.
            if scale == 0.0 {
                continue;
            }
            let target = tgt.tokens[q] as usize;
            let row = cache.logits_at(q - 1, v);
            let (loss, probs) = cross_entropy(row, target);
            let n = if tgt.modality(q) == Modality::Bev {
                nb
            } else {
                nt
            };
            *slot += loss / n as f64;
            if let Some(dl) = dlogits.as_mut() {
                let g = &mut dl[(q - 1) * v..q * v];
                for (gi, pi) in g.iter_mut().zip(&probs) {
                    *gi = scale * pi;
                }
                g[target] -= scale;
            }
        }
        out.aux += cache.aux_loss / b;
        if let (Some(g), Some(dl)) = (grads.as_deref_mut(), dlogits.as_ref()) {
            model.backward(&cache, dl, w.aux_coef / b, g);
        }
    }
    out.total = w.lambda_traj * out.l_traj + w.lambda_bev * out.l_bev + w.aux_coef * out.aux;
    Ok(out)
}

/// Joint loss with scheduled-sampling probability `p`.
pub fn joint_loss<R: Rng>(
    model: &Model,
    batch: &[TokenSequence],
    w: LossWeights,
    p: f64,
    how: MixSampling,
    rng: &mut R,
    grads: Option<&mut [f64]>,
) -> Result<JointLoss> {
    let inputs = batch
        .iter()
        .map(|s| mix_inputs(model, s, p, how, rng))
        .collect::<Result<Vec<_>>>()?;
    joint_loss_with_inputs(model, &inputs, batch, w, grads)
}
