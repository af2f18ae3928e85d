//! Unified vocabulary with disjoint command, BEV and trajectory ranges.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{DapError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Command,
    Bev,
    Traj,
}

impl Modality {
    pub fn type_index(self) -> usize {
        match self {
            Modality::Command => 0,
            Modality::Bev => 1,
            Modality::Traj => 2,
        }
    }
}

/// Command ids come first, then BEV codebook ids, then trajectory tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabLayout {
    pub n_command: usize,
    pub n_bev: usize,
    pub n_traj: usize,
}

impl VocabLayout {
    pub fn new(n_command: usize, n_bev: usize, n_traj: usize) -> Result<Self> {
        if n_command == 0 || n_traj == 0 {
            return Err(DapError::Config(
                "vocabulary needs at least one command and one trajectory token".into(),
            ));
        }
        Ok(VocabLayout {
            n_command,
            n_bev,
            n_traj,
        })
    }

    pub fn total(&self) -> usize {
        self.n_command + self.n_bev + self.n_traj
    }

    pub fn range(&self, m: Modality) -> Range<usize> {
        match m {
            Modality::Command => 0..self.n_command,
            Modality::Bev => self.n_command..self.n_command + self.n_bev,
            Modality::Traj => self.n_command + self.n_bev..self.total(),
        }
    }

    /// Local modality index → global id.
    pub fn map(&self, m: Modality, local: usize) -> Result<usize> {
        let r = self.range(m);
        if local >= r.len() {
            return Err(DapError::Domain(format!(
                "{m:?} index {local} outside range of {}",
                r.len()
            )));
        }
        Ok(r.start + local)
    }

    /// Global id → (modality, local index).
    pub fn unmap(&self, global: usize) -> Result<(Modality, usize)> {
        for m in [Modality::Command, Modality::Bev, Modality::Traj] {
            let r = self.range(m);
            if r.contains(&global) {
                return Ok((m, global - r.start));
            }
        }
        Err(DapError::Domain(format!(
            "token id {global} outside vocabulary of {}",
            self.total()
        )))
    }
}
