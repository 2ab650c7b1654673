//! Run configuration, run directories, and the end-to-end pipeline.

mod identity;
mod pipeline;

pub use identity::{identity_check, IdentityCheck};
pub use pipeline::{loss_label, sweep, RunDir, SweepGrid};

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::codec::content_hash;
use crate::error::{Error, Result};
use crate::eval::{BenchOptions, LabelSource};
use crate::model::ModelConfig;
use crate::surrogate::{default_groups, multiplier_groups, Depths, LayerGroup, SurrogateFamily};
use crate::taskgen::TaskMix;
use crate::train::{LossWeights, TrainConfig};

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "KVSURROGATE_OUT";
pub const DEFAULT_OUTPUT_ROOT: &str = "runs";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub seed: u64,
    pub context_len: usize,
    pub facts: usize,
    pub pairs_per_fact: usize,
    pub mix: TaskMix,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            context_len: 1024,
            facts: 32,
            pairs_per_fact: 6,
            mix: TaskMix::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurrogateSpec {
    pub family: SurrogateFamily,
    /// Parameter budget as a fraction of the context's KV entries.
    pub rho: f64,
    /// Per-group budget multipliers over near-equal layer groups; unset
    /// means the default four groups `(1, 2, 5, 2)`.
    #[serde(default)]
    pub multipliers: Option<Vec<f64>>,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SurrogateSpec {
    fn default() -> Self {
        Self {
            family: SurrogateFamily::mlp(Depths::new(0, 2, 3)),
            rho: 0.02,
            multipliers: None,
            seed: 0,
        }
    }
}

impl SurrogateSpec {
    pub fn groups(&self, layers: usize) -> Vec<LayerGroup> {
        match &self.multipliers {
            Some(m) => multiplier_groups(layers, m),
            None => default_groups(layers),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSpec {
    pub labels: LabelSource,
    /// Context lengths for the decode benchmark.
    pub bench_sizes: Vec<usize>,
    pub bench: BenchOptions,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            labels: LabelSource::default(),
            bench_sizes: vec![512, 2048, 8192],
            bench: BenchOptions::default(),
        }
    }
}

/// Everything that determines a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    /// Run directory; unset means `$KVSURROGATE_OUT/<name>` (or `runs/<name>`).
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub corpus: CorpusSpec,
    #[serde(default)]
    pub surrogate: SurrogateSpec,
    #[serde(default = "default_train")]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalSpec,
}

fn default_train() -> TrainConfig {
    TrainConfig {
        budget_samples: 2000,
        peak_lr: 1e-3,
        ..TrainConfig::default()
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            name: "default".into(),
            output_dir: None,
            model: ModelConfig::default(),
            corpus: CorpusSpec::default(),
            surrogate: SurrogateSpec::default(),
            train: default_train(),
            eval: EvalSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(format!("cannot serialize run config: {e}")))
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Malformed {
            kind: crate::error::FileKind::RunConfig,
            msg: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.loss.validate()?;
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::InvalidConfig(format!("run name {:?} is not a plain directory name", self.name)));
        }
        if !(self.surrogate.rho.is_finite() && self.surrogate.rho > 0.0) {
            return Err(Error::InvalidConfig(format!("rho must be positive, got {}", self.surrogate.rho)));
        }
        Ok(())
    }

    /// Hash of the canonical TOML form.
    pub fn config_hash(&self) -> Result<u64> {
        Ok(content_hash(&[b"run-config", self.to_toml()?.as_bytes()]))
    }

    /// Run directory, honoring `output_dir`, then the environment variable.
    pub fn run_dir(&self) -> PathBuf {
        if let Some(d) = &self.output_dir {
            return d.clone();
        }
        let root = std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT));
        root.join(&self.name)
    }

    pub fn with_loss(mut self, loss: LossWeights) -> Self {
        self.train.loss = loss;
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_toml().unwrap(), text);
    }

    #[test]
    fn quadrature_family_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.surrogate.family = SurrogateFamily::Quadrature;
        cfg.surrogate.multipliers = Some(vec![1.0, 3.0]);
        cfg.train.batch_size = Some(3);
        let back = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_documents_take_defaults() {
        let cfg = RunConfig::from_toml("name = \"x\"\n[surrogate]\nrho = 0.005\nfamily = { kind = \"quadrature\" }\n").unwrap();
        assert_eq!(cfg.model, ModelConfig::default());
        assert_eq!(cfg.surrogate.rho, 0.005);
        assert_eq!(cfg.train, default_train());
    }

    #[test]
    fn unknown_fields_and_bad_values_are_rejected() {
        assert!(RunConfig::from_toml("name = \"x\"\nbogus = 1\n").is_err());
        assert!(RunConfig::from_toml("name = \"a/b\"\n").is_err());
        assert!(RunConfig::from_toml("name = \"x\"\n[surrogate]\nrho = -1.0\nfamily = { kind = \"quadrature\" }\n").is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.corpus.seed = 1;
        assert_ne!(a.config_hash().unwrap(), b.config_hash().unwrap());
        assert_eq!(a.config_hash().unwrap(), a.clone().config_hash().unwrap());
    }
}
