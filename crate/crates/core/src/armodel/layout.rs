//! Interleaved sequence layout: `[C, V_0(M tokens), A_0, V_1, A_1, …]`.

use crate::error::{DapError, Result};
use crate::tokenize::{Modality, TrajTokenId, VocabLayout};

/// A (possibly partial) token sequence of global vocabulary ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub tokens: Vec<u32>,
    pub bev_per_frame: usize,
}

/// Modality of position `pos` for `m` BEV tokens per frame.
pub fn modality_at(pos: usize, m: usize) -> Modality {
    if pos == 0 {
        Modality::Command
    } else if (pos - 1) % (m + 1) < m {
        Modality::Bev
    } else {
        Modality::Traj
    }
}

/// Frame index of `pos`; `None` for the command token.
pub fn frame_at(pos: usize, m: usize) -> Option<usize> {
    (pos > 0).then(|| (pos - 1) / (m + 1))
}

pub fn seq_len_for_frames(frames: usize, m: usize) -> usize {
    1 + frames * (m + 1)
}

/// One frame of local ids: BEV codebook indices then an optional action.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameTokens {
    pub bev: Vec<u32>,
    pub traj: Option<TrajTokenId>,
}

impl TokenSequence {
    /// Builds `[C, V_0, A_0, …]`; only the final frame may omit its action.
    pub fn build(
        command: usize,
        frames: &[FrameTokens],
        vocab: &VocabLayout,
        m: usize,
    ) -> Result<Self> {
        let mut tokens = Vec::with_capacity(seq_len_for_frames(frames.len(), m));
        tokens.push(vocab.map(Modality::Command, command)? as u32);
        for (i, f) in frames.iter().enumerate() {
            if f.bev.len() != m {
                return Err(DapError::Sequence(format!(
                    "frame {i} has {} BEV tokens, expected {m}",
                    f.bev.len()
                )));
            }
            for b in &f.bev {
                tokens.push(vocab.map(Modality::Bev, *b as usize)? as u32);
            }
            match f.traj {
                Some(a) => tokens.push(vocab.map(Modality::Traj, a.index())? as u32),
                None if i + 1 == frames.len() => {}
                None => {
                    return Err(DapError::Sequence(format!(
                        "frame {i} is missing its trajectory token"
                    )))
                }
            }
        }
        Ok(TokenSequence {
            tokens,
            bev_per_frame: m,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn modality(&self, pos: usize) -> Modality {
        modality_at(pos, self.bev_per_frame)
    }

    pub fn frame(&self, pos: usize) -> Option<usize> {
        frame_at(pos, self.bev_per_frame)
    }

    pub fn type_ids(&self) -> Vec<usize> {
        (0..self.len())
            .map(|p| self.modality(p).type_index())
            .collect()
    }

    /// Every token lies in the range its position's modality reserves.
    pub fn validate(&self, vocab: &VocabLayout, max_len: usize) -> Result<()> {
        if self.tokens.is_empty() {
            return Err(DapError::Sequence("empty sequence".into()));
        }
        if self.tokens.len() > max_len {
            return Err(DapError::Sequence(format!(
                "sequence of {} tokens exceeds maximum {max_len}",
                self.tokens.len()
            )));
        }
        for (p, &t) in self.tokens.iter().enumerate() {
            let want = self.modality(p);
            let r = vocab.range(want);
            if !r.contains(&(t as usize)) {
                return Err(DapError::Sequence(format!(
                    "token {t} at position {p} is not a {want:?} token"
                )));
            }
        }
        Ok(())
    }

    /// Drops the oldest complete frame, keeping the command token.
    pub fn drop_oldest_frame(&mut self) {
        let f = self.bev_per_frame + 1;
        let end = (1 + f).min(self.tokens.len());
        self.tokens.drain(1..end);
    }
}
