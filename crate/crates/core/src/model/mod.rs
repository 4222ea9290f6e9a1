//! The learnable control variate.
//!
//! A [`CvEnsemble`] holds `L` [`PermutedTree`]s. Each member maps a sample
//! `x` (conditioned on the observation `y`) to a vector field `Phi(x; y)` and
//! its exact Jacobian diagonal, and turns them into the Stein control variate
//! `g_j = dPhi_j/dx_j + Phi_j * score_j`, which has zero posterior mean for
//! any parameters. The ensemble averages the members' `g`.

mod backend;
mod ensemble;
mod mlp;
mod tree;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use backend::{Backend, EvalBackend, TapeBackend};
pub use ensemble::{leading_block, CvEnsemble};
pub use mlp::Mlp;
pub use tree::{HintTree, PermutedTree};

/// Shape of every member of an ensemble.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    /// Dimension of `x`.
    pub dim: usize,
    /// Dimension of the conditioning observation `y`.
    pub obs_dim: usize,
    /// Levels of recursive coupling below (and including) the root.
    pub depth: usize,
    pub hidden_units: usize,
    /// Number of linear layers in each scale/shift network.
    pub mlp_layers: usize,
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.dim >= 1, "dim must be at least 1"),
            (self.depth >= 1, "depth must be at least 1"),
            (self.hidden_units >= 1, "hidden_units must be at least 1"),
            (self.mlp_layers >= 1, "mlp_layers must be at least 1"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::Config(msg.into()));
            }
        }
        Ok(())
    }
}
