//! Versioned JSON checkpoints.
//!
//! Floats are written with round-trip precision, so loading a saved
//! checkpoint reproduces every parameter bit and therefore every forward
//! output. Serialization is deterministic: identical ensembles produce
//! byte-identical files.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ad::ParamStore;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::model::{Architecture, CvEnsemble, HintTree, PermutedTree};
use crate::problems::InverseProblem;
use crate::training::TrainingMetadata;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedArray {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemberRecord {
    pub permutation: Vec<usize>,
    pub parameters: Vec<NamedArray>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub architecture: Architecture,
    pub members: Vec<MemberRecord>,
    pub metadata: TrainingMetadata,
    /// [`CvEnsemble::fingerprint`] of the stored ensemble.
    pub fingerprint: String,
}

impl Checkpoint {
    pub fn new(config: &ExperimentConfig, ensemble: &CvEnsemble, metadata: TrainingMetadata) -> Self {
        let members = ensemble
            .members()
            .iter()
            .map(|m| {
                let store = m.tree().params();
                let parameters = store
                    .slices()
                    .iter()
                    .enumerate()
                    .map(|(id, s)| NamedArray {
                        name: s.name.clone(),
                        rows: s.rows,
                        cols: s.cols,
                        values: store.slice_values(id).to_vec(),
                    })
                    .collect();
                MemberRecord { permutation: m.permutation().to_vec(), parameters }
            })
            .collect();
        Self {
            format_version: FORMAT_VERSION,
            config: config.clone(),
            config_hash: config.hash(),
            architecture: *ensemble.arch(),
            members,
            metadata,
            fingerprint: ensemble.fingerprint(),
        }
    }

    /// Rebuilds the ensemble, checking the layout of every member and the
    /// stored fingerprint.
    pub fn ensemble(&self) -> Result<CvEnsemble> {
        let arch = self.architecture;
        arch.validate()?;
        let members = self
            .members
            .iter()
            .map(|m| {
                let mut store = ParamStore::new();
                for p in &m.parameters {
                    if p.values.len() != p.rows * p.cols {
                        return Err(Error::Parse {
                            what: "checkpoint",
                            message: format!("parameter {} holds {} values, expected {}x{}", p.name, p.values.len(), p.rows, p.cols),
                        });
                    }
                    store.push(p.name.clone(), p.rows, p.cols, p.values.clone());
                }
                PermutedTree::new(HintTree::from_params(arch, store)?, m.permutation.clone())
            })
            .collect::<Result<Vec<_>>>()?;
        let ensemble = CvEnsemble::from_members(arch, members)?;
        if ensemble.fingerprint() != self.fingerprint {
            return Err(Error::Parse { what: "checkpoint", message: "parameters do not match the stored fingerprint".into() });
        }
        Ok(ensemble)
    }

    /// Refuses to evaluate on a problem of a different kind or shape.
    pub fn check_compatible(&self, problem: &InverseProblem) -> Result<()> {
        let p = &self.config.problem;
        if p.kind != problem.kind() || self.architecture.dim != problem.dim() || self.architecture.obs_dim != problem.obs_dim() {
            return Err(Error::Config(format!(
                "checkpoint was trained on {} with d = {}, m = {}; cannot evaluate on {} with d = {}, m = {}",
                p.kind,
                self.architecture.dim,
                self.architecture.obs_dim,
                problem.kind(),
                problem.dim(),
                problem.obs_dim()
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text).map_err(|e| Error::Parse { what: "checkpoint", message: e.to_string() })?;
        if c.format_version != FORMAT_VERSION {
            return Err(Error::Parse {
                what: "checkpoint",
                message: format!("format version {} is not supported (expected {FORMAT_VERSION})", c.format_version),
            });
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
