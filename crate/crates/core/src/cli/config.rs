//! Run configuration: one TOML document with a section per component.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::armodel::TrainConfig;
use crate::error::{DapError, Result};
use crate::pipeline::{DataConfig, ModelShape, PostTuneDriving};
use crate::rl::SacBcConfig;
use crate::simworld::SimConfig;
use crate::tokenize::{KaGridConfig, Scheme, ALL_SCHEMES};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub episodes: usize,
    /// Unperturbed episodes kept for open-loop evaluation.
    pub heldout: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            episodes: 200,
            heldout: 40,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerConfig {
    /// Curvature–acceleration grid used by the planner, e.g. `FB-ka-A`.
    pub ka_grid: String,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig {
            ka_grid: "FB-ka-A".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Closed-loop scenes.
    pub scenes: usize,
    pub warmup: usize,
    pub horizon: usize,
    pub horizons_s: Vec<f64>,
    /// Frame stride between open-loop anchors.
    pub open_loop_stride: usize,
    pub posttune: PostTuneDriving,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            scenes: 60,
            warmup: 3,
            horizon: 20,
            horizons_s: vec![1.0, 2.0, 3.0, 4.0],
            open_loop_stride: 4,
            posttune: PostTuneDriving::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokBenchConfig {
    pub schemes: Vec<String>,
    pub horizons_s: Vec<f64>,
    pub ci_levels: Vec<f64>,
    /// Frame stride between benchmark windows.
    pub window_stride: usize,
}

impl Default for TokBenchConfig {
    fn default() -> Self {
        let mut schemes: Vec<String> = vec!["identity".into()];
        schemes.extend(ALL_SCHEMES.iter().map(|s| s.to_string()));
        TokBenchConfig {
            schemes,
            horizons_s: vec![1.0, 2.0, 3.0, 4.0],
            ci_levels: vec![0.9, 0.95, 0.99],
            window_stride: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub sim: SimConfig,
    pub tokenizer: TokenizerConfig,
    pub data: DataConfig,
    pub model: ModelShape,
    pub train: TrainConfig,
    pub sacbc: SacBcConfig,
    pub eval: EvalConfig,
    pub tok_bench: TokBenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            out_dir: PathBuf::from("runs/default"),
            dataset: DatasetConfig::default(),
            sim: SimConfig::default(),
            tokenizer: TokenizerConfig::default(),
            data: DataConfig::default(),
            model: ModelShape::default(),
            train: TrainConfig::default(),
            sacbc: SacBcConfig::default(),
            eval: EvalConfig::default(),
            tok_bench: TokBenchConfig::default(),
        }
    }
}

/// Hex SHA-256 of the JSON encoding of `value`.
pub fn hash_json<T: Serialize>(value: &T) -> String {
    let s = serde_json::to_string(value).expect("config serializes");
    let d = Sha256::digest(s.as_bytes());
    d.iter().map(|b| format!("{b:02x}")).collect()
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| DapError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| DapError::io(p, e))?;
                Self::from_toml(&text).map_err(|e| match e {
                    DapError::Config(m) => DapError::Config(format!("{}: {m}", p.display())),
                    other => other,
                })
            }
            None => Ok(Self::default()),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        self.data.validate()?;
        self.train.validate()?;
        self.sacbc.validate()?;
        self.eval.posttune.validate()?;
        self.ka_grid()?;
        if self.eval.horizons_s.is_empty() || self.tok_bench.horizons_s.is_empty() {
            return Err(DapError::Config("horizon lists must be non-empty".into()));
        }
        if self.eval.open_loop_stride == 0 || self.tok_bench.window_stride == 0 {
            return Err(DapError::Config("strides must be positive".into()));
        }
        Ok(())
    }

    pub fn ka_grid(&self) -> Result<KaGridConfig> {
        match Scheme::from_name(&self.tokenizer.ka_grid) {
            Ok((Scheme::FbKa(g), _)) => Ok(g),
            _ => Err(DapError::Config(format!(
                "tokenizer.ka_grid must name a fixed-bin curvature-acceleration grid, got '{}'",
                self.tokenizer.ka_grid
            ))),
        }
    }

    /// Hash of every setting except the output directory.
    pub fn config_hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        hash_json(&c)
    }

    /// Hash of the settings that determine the generated episodes.
    pub fn dataset_hash(&self) -> String {
        hash_json(&(self.seed, &self.dataset, &self.sim))
    }

    /// Hash of the settings that fix the model's inputs and shape; shared by
    /// every checkpoint trained on the same data.
    pub fn lineage_hash(&self) -> String {
        hash_json(&(
            self.dataset_hash(),
            &self.tokenizer,
            &self.data,
            &self.model,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let c = RunConfig::default();
        let back = RunConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(RunConfig::from_toml("").unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(
            RunConfig::from_toml("sed = 3"),
            Err(DapError::Config(_))
        ));
        assert!(matches!(
            RunConfig::from_toml("[train]\nlr_typo = 0.1"),
            Err(DapError::Config(_))
        ));
    }

    #[test]
    fn hashes_track_their_sections() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.out_dir = "elsewhere".into();
        assert_eq!(a.config_hash(), b.config_hash());
        b.train.lr = 0.5;
        assert_ne!(a.config_hash(), b.config_hash());
        assert_eq!(a.lineage_hash(), b.lineage_hash());
        b.model.d_model = 48;
        assert_ne!(a.lineage_hash(), b.lineage_hash());
        assert_eq!(a.dataset_hash(), b.dataset_hash());
        b.seed = 8;
        assert_ne!(a.dataset_hash(), b.dataset_hash());
    }

    #[test]
    fn planner_grid_must_be_fixed_bin_ka() {
        let c = RunConfig::from_toml("[tokenizer]\nka_grid = \"FB-xy-A\"");
        assert!(matches!(c, Err(DapError::Config(_))));
        assert_eq!(
            RunConfig::default().ka_grid().unwrap(),
            KaGridConfig::fb_ka_a()
        );
    }
}
