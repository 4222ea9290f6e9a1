use sha2::{Digest, Sha256};

use crate::error::{check_dim, Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

use super::tree::{HintTree, PermutedTree};
use super::Architecture;

/// Rows per chunk when evaluating large sample sets.
const EVAL_CHUNK: usize = 512;

const PARTITION_STREAM: u64 = u64::MAX;

/// Width of the identity leaf that holds the first permuted coordinates.
pub fn leading_block(arch: &Architecture) -> usize {
    let (mut dim, mut budget) = (arch.dim, arch.depth);
    while budget > 0 && dim > 1 {
        dim /= 2;
        budget -= 1;
    }
    dim
}

/// `L` independently initialized, independently permuted trees whose
/// control variates are averaged in member order.
#[derive(Clone, Debug, PartialEq)]
pub struct CvEnsemble {
    arch: Architecture,
    members: Vec<PermutedTree>,
}

impl CvEnsemble {
    /// Random permutations with stratified leading blocks, then independent
    /// weights per member (member `l` uses the stream `derive(seed, l)`).
    ///
    /// The first `leading_block(arch)` permuted coordinates of every tree sit
    /// in an identity leaf that no parameter can change. A shared random
    /// partition of the coordinates into blocks of that size is drawn once,
    /// and member `l` takes block `l mod (number of blocks)` as its leading
    /// block, in random order, followed by the remaining coordinates in
    /// random order. Each member's permutation is still uniformly
    /// distributed, but members whose leading blocks differ can correct each
    /// other's fixed coordinates.
    pub fn init(arch: Architecture, size: usize, seed: u64) -> Result<Self> {
        arch.validate()?;
        if size == 0 {
            return Err(Error::Config("ensemble size must be at least 1".into()));
        }
        let d = arch.dim;
        let block = leading_block(&arch);
        let partition = RngStream::derive(seed, PARTITION_STREAM).permutation(d);
        let n_blocks = d / block;
        let members = (0..size)
            .map(|l| {
                let mut rng = RngStream::derive(seed, l as u64);
                let b = l % n_blocks;
                let mut lead = partition[b * block..(b + 1) * block].to_vec();
                let mut rest: Vec<usize> = partition[..b * block].iter().chain(&partition[(b + 1) * block..]).copied().collect();
                rng.shuffle(&mut lead);
                rng.shuffle(&mut rest);
                lead.extend(rest);
                PermutedTree::new(HintTree::new(arch, &mut rng)?, lead)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { arch, members })
    }

    pub fn from_members(arch: Architecture, members: Vec<PermutedTree>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::Config("ensemble size must be at least 1".into()));
        }
        if let Some(m) = members.iter().find(|m| *m.tree().arch() != arch) {
            return Err(Error::Config(format!("member architecture {:?} differs from {:?}", m.tree().arch(), arch)));
        }
        Ok(Self { arch, members })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn members(&self) -> &[PermutedTree] {
        &self.members
    }

    pub fn members_mut(&mut self) -> &mut [PermutedTree] {
        &mut self.members
    }

    pub fn parameter_count(&self) -> usize {
        self.members.iter().map(|m| m.tree().params().len()).sum()
    }

    /// True when the trees contain no coupling (d = 1): `g = 1 + x * score`
    /// is fixed and training cannot change it.
    pub fn is_degenerate(&self) -> bool {
        self.members[0].tree().is_degenerate()
    }

    /// Adds `scale * N(0, 1)` to every parameter of every member.
    pub fn perturb(&mut self, scale: f64, seed: u64) {
        for (l, m) in self.members.iter_mut().enumerate() {
            m.tree_mut().perturb(scale, &mut RngStream::derive(seed, l as u64));
        }
    }

    /// Averaged control variate for a batch. `y` holds one row per sample
    /// or a single row shared by all samples.
    pub fn evaluate(&self, x: &Tensor, y: &Tensor, score: &Tensor) -> Result<Tensor> {
        check_dim("sample width", self.arch.dim, x.cols())?;
        check_dim("score rows", x.rows(), score.rows())?;
        let n = x.rows();
        let mut out = Tensor::zeros(n, self.arch.dim);
        let mut start = 0;
        while start < n {
            let len = EVAL_CHUNK.min(n - start);
            let xc = x.row_range(start, len);
            let sc = score.row_range(start, len);
            let yc = if y.rows() == 1 {
                Tensor::repeat_row(y.row(0), len)
            } else {
                check_dim("conditioning rows", n, y.rows())?;
                y.row_range(start, len)
            };
            let g = self.evaluate_chunk(&xc, &yc, &sc)?;
            out.data_mut()[start * self.arch.dim..(start + len) * self.arch.dim].copy_from_slice(g.data());
            start += len;
        }
        Ok(out)
    }

    fn evaluate_chunk(&self, x: &Tensor, y: &Tensor, score: &Tensor) -> Result<Tensor> {
        let mut acc = self.members[0].control_variate(x, y, score)?;
        for m in &self.members[1..] {
            acc.add_assign(&m.control_variate(x, y, score)?);
        }
        Ok(acc.scale(1.0 / self.members.len() as f64))
    }

    /// Control variate for a single sample.
    pub fn control_variate(&self, x: &[f64], y: &[f64], score: &[f64]) -> Result<Vec<f64>> {
        Ok(self.evaluate(&Tensor::row_vector(x), &Tensor::row_vector(y), &Tensor::row_vector(score))?.into_data())
    }

    /// SHA-256 over the architecture, permutations, and parameter bits.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        let a = &self.arch;
        for v in [a.dim, a.obs_dim, a.depth, a.hidden_units, a.mlp_layers, self.members.len()] {
            h.update((v as u64).to_le_bytes());
        }
        for m in &self.members {
            for &p in m.permutation() {
                h.update((p as u64).to_le_bytes());
            }
            for v in m.tree().params().values() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}
