//! Experiment configuration: one TOML file per experiment.
//!
//! Unknown keys are rejected everywhere. The canonical serialization (and
//! therefore [`ExperimentConfig::hash`]) is the TOML emitted by
//! [`ExperimentConfig::to_toml`].

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::evaluation::{EvalOptions, SweepOptions};
use crate::problems::{InverseProblem, ProblemKind, QoiKind, RosenbrockParams};
use crate::samplers::MalaConfig;
use crate::training::{ModelConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub kind: ProblemKind,
    pub dim: usize,
    pub sigma: f64,
    /// Seeds the random prior covariance or forward matrix.
    pub seed: u64,
    /// Rosenbrock prior parameters; defaults apply when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rosenbrock: Option<RosenbrockParams>,
}

impl ProblemConfig {
    /// Shape checks that do not require building the problem.
    pub fn validate(&self) -> Result<()> {
        if self.rosenbrock.is_some() && self.kind != ProblemKind::Rosenbrock {
            return Err(Error::Config(format!("problem.rosenbrock is only valid for kind = \"rosenbrock\", not {}", self.kind)));
        }
        if self.kind == ProblemKind::Rosenbrock && self.dim != 2 {
            return Err(Error::Config(format!("the rosenbrock problem has dim = 2, got {}", self.dim)));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("problem.sigma must be positive, got {}", self.sigma)));
        }
        if self.dim == 0 {
            return Err(Error::Config("problem.dim must be positive".into()));
        }
        if let Some(r) = self.rosenbrock {
            if !(r.a > 0.0 && r.b > 0.0) {
                return Err(Error::Config("problem.rosenbrock.a and .b must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn build(&self) -> Result<InverseProblem> {
        self.validate()?;
        match self.kind {
            ProblemKind::Gaussian => InverseProblem::gaussian(self.dim, self.sigma, self.seed),
            ProblemKind::Rosenbrock => InverseProblem::rosenbrock(self.rosenbrock.unwrap_or_default(), self.sigma, self.seed),
            ProblemKind::Nonlinear => InverseProblem::nonlinear(self.dim, self.sigma, self.seed),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QoiConfig {
    pub kind: QoiKind,
}

fn default_n_obs() -> usize {
    100
}
fn default_samples() -> usize {
    5000
}
fn default_sizes() -> Vec<usize> {
    vec![10, 30, 100, 300, 1000, 5000]
}
fn default_sweep_obs() -> usize {
    10
}
fn default_repeats() -> usize {
    20
}
fn default_ensemble_sizes() -> Vec<usize> {
    vec![1, 2, 4, 8, 16]
}
fn default_ablation_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}
fn default_stein_obs() -> usize {
    250
}
fn default_pool_size() -> usize {
    10_000
}
fn default_reference_draws() -> usize {
    1_000_000
}
fn default_center_draws() -> usize {
    100_000
}

/// Settings of the evaluation studies. Every field has a default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Held-out observations for the VRF study.
    #[serde(default = "default_n_obs")]
    pub n_obs: usize,
    /// Posterior draws per observation (M).
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default)]
    pub seed: u64,
    /// Sample sizes of the sample-efficiency sweep.
    #[serde(default = "default_sizes")]
    pub sizes: Vec<usize>,
    #[serde(default = "default_sweep_obs")]
    pub sweep_obs: usize,
    /// Replications per (observation, size) in the sweep.
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default = "default_ensemble_sizes")]
    pub ensemble_sizes: Vec<usize>,
    #[serde(default = "default_ablation_seeds")]
    pub ablation_seeds: Vec<u64>,
    #[serde(default = "default_stein_obs")]
    pub stein_obs: usize,
    /// Prior-predictive pool used to pick the amortization observations.
    #[serde(default = "default_pool_size")]
    pub pool_size: usize,
    /// MALA chain length for sweep reference values (non-Gaussian problems).
    #[serde(default = "default_reference_draws")]
    pub reference_draws: usize,
    /// MALA draws behind the variance-quantity center (non-Gaussian problems).
    #[serde(default = "default_center_draws")]
    pub center_draws: usize,
    #[serde(default)]
    pub mala: MalaConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_obs: default_n_obs(),
            samples: default_samples(),
            seed: 0,
            sizes: default_sizes(),
            sweep_obs: default_sweep_obs(),
            repeats: default_repeats(),
            ensemble_sizes: default_ensemble_sizes(),
            ablation_seeds: default_ablation_seeds(),
            stein_obs: default_stein_obs(),
            pool_size: default_pool_size(),
            reference_draws: default_reference_draws(),
            center_draws: default_center_draws(),
            mala: MalaConfig::default(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("eval.{m}")));
        if self.n_obs == 0 || self.stein_obs == 0 || self.sweep_obs == 0 {
            return bad("n_obs, sweep_obs, and stein_obs must be positive");
        }
        if self.samples < 2 {
            return bad("samples must be at least 2");
        }
        if self.sizes.is_empty() || self.sizes.iter().any(|&n| n < 2) {
            return bad("sizes must be nonempty with every size at least 2");
        }
        if self.repeats == 0 || self.pool_size == 0 || self.reference_draws < 2 || self.center_draws < 2 {
            return bad("repeats, pool_size, reference_draws, and center_draws must be positive");
        }
        if self.ensemble_sizes.is_empty() || self.ensemble_sizes.contains(&0) || self.ablation_seeds.is_empty() {
            return bad("ensemble_sizes and ablation_seeds must be nonempty with positive sizes");
        }
        self.mala.validate()
    }

    /// Options for the per-observation studies with `n_obs` observations.
    pub fn options(&self, n_obs: usize, threads: usize) -> EvalOptions {
        EvalOptions {
            n_obs,
            samples: self.samples,
            seed: self.seed,
            threads,
            mala: self.mala.clone(),
            center_draws: self.center_draws,
        }
    }

    pub fn sweep_options(&self, threads: usize) -> SweepOptions {
        SweepOptions {
            sizes: self.sizes.clone(),
            n_obs: self.sweep_obs,
            repeats: self.repeats,
            seed: self.seed,
            threads,
            mala: self.mala.clone(),
            reference_draws: self.reference_draws,
            center_draws: self.center_draws,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    /// Directory for checkpoints, curves, and study outputs.
    pub dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    pub qoi: QoiConfig,
    pub output: OutputConfig,
}

impl ExperimentConfig {
    /// Parses and validates TOML. Errors carry the line, column, and field
    /// reported by the parser.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// SHA-256 of the canonical TOML, in hex.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_toml().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        self.problem.validate()?;
        Ok(())
    }
}
