//! Autoregressive decoding with per-position modality masking.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{DapError, Result};
use crate::tokenize::{Modality, TrajTokenId};

use super::layout::{modality_at, TokenSequence};
use super::loss::sample_index;
use super::model::{DecodeState, Model};
use super::ops::{argmax, softmax_in_place};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DecodeMode {
    Greedy,
    Sample { temperature: f64, seed: u64 },
}

/// Tokens emitted for one future frame (local modality indices).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GeneratedFrame {
    pub bev: Vec<u32>,
    pub traj: TrajTokenId,
}

fn prefill(model: &Model, seq: &TokenSequence) -> Result<DecodeState> {
    let mut st = model.new_state();
    for (&t, ty) in seq.tokens.iter().zip(seq.type_ids()) {
        model.step(&mut st, t, ty)?;
    }
    Ok(st)
}

/// Picks a local index from masked logits.
pub fn choose(logits: &[f64], mode: DecodeMode, rng: Option<&mut ChaCha8Rng>) -> usize {
    match (mode, rng) {
        (DecodeMode::Sample { temperature, .. }, Some(rng)) if temperature > 0.0 => {
            let mut p: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
            softmax_in_place(&mut p);
            sample_index(&p, rng.gen::<f64>())
        }
        _ => argmax(logits),
    }
}

/// Continues `context` until `horizon` trajectory tokens have been emitted.
///
/// Each position only ranges over its modality's ids. When the sequence
/// reaches the model's length limit, the oldest frame is dropped (the
/// command token stays) and decoding continues from the shortened window.
pub fn generate(
    model: &Model,
    context: &TokenSequence,
    horizon: usize,
    mode: DecodeMode,
) -> Result<Vec<GeneratedFrame>> {
    let c = &model.config;
    if context.bev_per_frame != c.bev_tokens_per_frame {
        return Err(DapError::Sequence(
            "context BEV width does not match model".into(),
        ));
    }
    context.validate(&c.vocab, c.max_seq_len)?;
    if horizon == 0 {
        return Ok(Vec::new());
    }
    if c.max_frames() < 2 {
        return Err(DapError::Sequence(
            "model length cannot hold a sliding window".into(),
        ));
    }
    let mut rng = match mode {
        DecodeMode::Sample { seed, .. } => Some(crate::seeding::indexed_rng(seed, 0)),
        DecodeMode::Greedy => None,
    };
    let m = c.bev_tokens_per_frame;
    let mut seq = context.clone();
    let mut state = prefill(model, &seq)?;
    let mut out = Vec::with_capacity(horizon);
    let mut bev = Vec::with_capacity(m);
    while out.len() < horizon {
        if seq.len() == c.max_seq_len {
            seq.drop_oldest_frame();
            state = prefill(model, &seq)?;
        }
        let pos = seq.len();
        let modality = modality_at(pos, m);
        let range = c.vocab.range(modality);
        let logits = model.logits_range(state.hidden(), range.clone());
        let local = choose(&logits, mode, rng.as_mut());
        let global = (range.start + local) as u32;
        seq.tokens.push(global);
        model.step(&mut state, global, modality.type_index())?;
        match modality {
            Modality::Bev => bev.push(local as u32),
            Modality::Traj => out.push(GeneratedFrame {
                bev: std::mem::take(&mut bev),
                traj: TrajTokenId(local as u32),
            }),
            Modality::Command => unreachable!("command appears only at position 0"),
        }
    }
    Ok(out)
}

/// Logits over the trajectory range for the token following `context`.
pub fn next_traj_logits(model: &Model, context: &TokenSequence) -> Result<Vec<f64>> {
    let c = &model.config;
    context.validate(&c.vocab, c.max_seq_len)?;
    if modality_at(context.len(), c.bev_tokens_per_frame) != Modality::Traj {
        return Err(DapError::Sequence(
            "context does not end before a trajectory token".into(),
        ));
    }
    let st = prefill(model, context)?;
    Ok(model.logits_range(st.hidden(), c.vocab.range(Modality::Traj)))
}
