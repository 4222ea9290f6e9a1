use crate::ad::ParamStore;
use crate::error::{check_dim, Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

use super::backend::{Backend, EvalBackend};
use super::mlp::Mlp;
use super::Architecture;

#[derive(Clone, Debug, PartialEq)]
enum Node {
    /// Identity on its block; contributes ones to the Jacobian diagonal.
    Leaf,
    Coupling(Box<Coupling>),
}

#[derive(Clone, Debug, PartialEq)]
struct Coupling {
    path: String,
    upper_dim: usize,
    lower_dim: usize,
    scale: Mlp,
    shift: Mlp,
    upper: Node,
    lower: Node,
}

/// Recursive affine-coupling tree with an exact Jacobian diagonal.
///
/// A node splits its input into an upper block of `floor(d/2)` coordinates
/// and a lower block of the rest. The upper block goes through its own
/// subtree; that subtree's output, concatenated with `y`, conditions the
/// scale `s` and shift `t` applied to the lower block, which then goes
/// through the lower subtree:
///
/// ```text
/// phi_u = T_u(x_u)
/// phi_l = T_l(s(phi_u, y) * x_l + t(phi_u, y))
/// diag  = [diag_u ; s * diag_l]
/// ```
///
/// Each output coordinate depends on its own input coordinate only through
/// the chain of scales above it, so `diag` is exactly `d phi_i / d x_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct HintTree {
    arch: Architecture,
    root: Node,
    params: ParamStore,
}

impl HintTree {
    pub fn new(arch: Architecture, rng: &mut RngStream) -> Result<Self> {
        arch.validate()?;
        let mut params = ParamStore::new();
        let root = build(arch.dim, arch.depth, "root".into(), &arch, &mut params, rng);
        Ok(Self { arch, root, params })
    }

    /// Rebuilds a tree around a stored parameter vector. The layout (names
    /// and shapes) must match what `arch` produces.
    pub fn from_params(arch: Architecture, params: ParamStore) -> Result<Self> {
        let mut tree = Self::new(arch, &mut RngStream::new(0))?;
        if tree.params.slices() != params.slices() || !params.layout_is_exact() {
            return Err(Error::Parse {
                what: "parameter layout",
                message: format!(
                    "expected {} blocks / {} values for this architecture, got {} blocks / {} values",
                    tree.params.slices().len(),
                    tree.params.len(),
                    params.slices().len(),
                    params.len()
                ),
            });
        }
        tree.params = params;
        Ok(tree)
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn coupling_count(&self) -> usize {
        fn count(n: &Node) -> usize {
            match n {
                Node::Leaf => 0,
                Node::Coupling(c) => 1 + count(&c.upper) + count(&c.lower),
            }
        }
        count(&self.root)
    }

    /// Dot-separated paths of the coupling nodes, in parameter order.
    pub fn coupling_paths(&self) -> Vec<String> {
        fn walk(n: &Node, out: &mut Vec<String>) {
            if let Node::Coupling(c) = n {
                out.push(c.path.clone());
                walk(&c.upper, out);
                walk(&c.lower, out);
            }
        }
        let mut out = Vec::new();
        walk(&self.root, &mut out);
        out
    }

    /// A tree with no coupling (d = 1) is the fixed identity map and has
    /// nothing to learn.
    pub fn is_degenerate(&self) -> bool {
        self.coupling_count() == 0
    }

    /// Adds `scale * N(0, 1)` noise to every parameter.
    pub fn perturb(&mut self, scale: f64, rng: &mut RngStream) {
        for v in self.params.values_mut() {
            *v += scale * rng.normal();
        }
    }

    /// Batched forward pass on any back end. Returns `(phi, diag)`, both
    /// `rows x d`.
    pub fn forward_with<B: Backend>(&self, be: &mut B, x: B::Value, y: &B::Value) -> Result<(B::Value, B::Value)> {
        let rows = {
            let xv = be.value(&x)?;
            check_dim("tree input width", self.arch.dim, xv.cols())?;
            xv.rows()
        };
        check_dim("conditioning width", self.arch.obs_dim, be.value(y)?.cols())?;
        let (phi, diag) = node_forward(&self.root, be, x, self.arch.dim, rows, y)?;
        let diag = match diag {
            Some(d) => d,
            None => be.constant(Tensor::ones(rows, self.arch.dim)),
        };
        Ok((phi, diag))
    }

    /// Forward pass on a batch; `y` has one row per sample or a single row
    /// shared by all samples.
    pub fn forward(&self, x: &Tensor, y: &Tensor) -> Result<(Tensor, Tensor)> {
        let y = broadcast_rows(y, x.rows())?;
        self.forward_with(&mut EvalBackend::new(&self.params), x.clone(), &y)
    }

    pub fn tree_forward(&self, x: &[f64], y: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let (phi, diag) = self.forward(&Tensor::row_vector(x), &Tensor::row_vector(y))?;
        Ok((phi.into_data(), diag.into_data()))
    }

    /// Exact trace of the Jacobian of `phi` in `x`.
    pub fn divergence(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        Ok(self.tree_forward(x, y)?.1.iter().sum())
    }
}

pub(crate) fn broadcast_rows(y: &Tensor, rows: usize) -> Result<Tensor> {
    if y.rows() == rows {
        Ok(y.clone())
    } else if y.rows() == 1 {
        Ok(Tensor::repeat_row(y.row(0), rows))
    } else {
        Err(Error::Dimension { what: "conditioning rows", expected: rows, got: y.rows() })
    }
}

fn build(dim: usize, budget: usize, path: String, arch: &Architecture, store: &mut ParamStore, rng: &mut RngStream) -> Node {
    if budget == 0 || dim <= 1 {
        return Node::Leaf;
    }
    let upper_dim = dim / 2;
    let lower_dim = dim - upper_dim;
    let cond = upper_dim + arch.obs_dim;
    let (h, l) = (arch.hidden_units, arch.mlp_layers);
    let scale = Mlp::new(store, &format!("{path}.s"), cond, h, l, lower_dim, 1.0, rng);
    let shift = Mlp::new(store, &format!("{path}.t"), cond, h, l, lower_dim, 0.0, rng);
    let upper = build(upper_dim, budget - 1, format!("{path}.u"), arch, store, rng);
    let lower = build(lower_dim, budget - 1, format!("{path}.l"), arch, store, rng);
    Node::Coupling(Box::new(Coupling { path, upper_dim, lower_dim, scale, shift, upper, lower }))
}

/// `diag == None` stands for an all-ones diagonal (a pure identity block),
/// which saves multiplying by ones at every leaf.
fn node_forward<B: Backend>(
    node: &Node,
    be: &mut B,
    x: B::Value,
    dim: usize,
    rows: usize,
    y: &B::Value,
) -> Result<(B::Value, Option<B::Value>)> {
    let c = match node {
        Node::Leaf => return Ok((x, None)),
        Node::Coupling(c) => c,
    };
    debug_assert_eq!(dim, c.upper_dim + c.lower_dim);
    let x_upper = be.columns(&x, 0, c.upper_dim)?;
    let x_lower = be.columns(&x, c.upper_dim, c.lower_dim)?;
    let (phi_upper, diag_upper) = node_forward(&c.upper, be, x_upper, c.upper_dim, rows, y)?;

    let cond = be.concat(&phi_upper, y)?;
    let s = c.scale.forward(be, &cond)?;
    let t = c.shift.forward(be, &cond)?;
    if !be.value(&s)?.is_finite() {
        return Err(Error::NonFinite { context: format!("scale net of coupling node {}", c.path) });
    }
    if !be.value(&t)?.is_finite() {
        return Err(Error::NonFinite { context: format!("shift net of coupling node {}", c.path) });
    }
    let scaled = be.mul(&s, &x_lower)?;
    let moved = be.add(&scaled, &t)?;
    let (phi_lower, diag_lower) = node_forward(&c.lower, be, moved, c.lower_dim, rows, y)?;

    let diag_lower = match diag_lower {
        Some(d) => be.mul(&s, &d)?,
        None => s,
    };
    let diag_upper = match diag_upper {
        Some(d) => d,
        None => be.constant(Tensor::ones(rows, c.upper_dim)),
    };
    let phi = be.concat(&phi_upper, &phi_lower)?;
    let diag = be.concat(&diag_upper, &diag_lower)?;
    Ok((phi, Some(diag)))
}

/// A tree applied in a permuted coordinate system: `Phi(x) = P^T phi(P x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PermutedTree {
    tree: HintTree,
    perm: Vec<usize>,
    inverse: Vec<usize>,
}

impl PermutedTree {
    /// `perm[k]` is the original coordinate fed to tree input `k`.
    pub fn new(tree: HintTree, perm: Vec<usize>) -> Result<Self> {
        let d = tree.arch().dim;
        check_dim("permutation length", d, perm.len())?;
        let mut inverse = vec![usize::MAX; d];
        for (k, &j) in perm.iter().enumerate() {
            if j >= d || inverse[j] != usize::MAX {
                return Err(Error::Parse { what: "permutation", message: format!("{perm:?} is not a bijection on 0..{d}") });
            }
            inverse[j] = k;
        }
        Ok(Self { tree, perm, inverse })
    }

    pub fn tree(&self) -> &HintTree {
        &self.tree
    }

    pub fn tree_mut(&mut self) -> &mut HintTree {
        &mut self.tree
    }

    pub fn permutation(&self) -> &[usize] {
        &self.perm
    }

    pub fn inverse(&self) -> &[usize] {
        &self.inverse
    }

    /// `(Phi, diag)` in original coordinates.
    pub fn forward(&self, x: &Tensor, y: &Tensor) -> Result<(Tensor, Tensor)> {
        let (phi, diag) = self.tree.forward(&x.gather_cols(&self.perm), y)?;
        Ok((phi.gather_cols(&self.inverse), diag.gather_cols(&self.inverse)))
    }

    /// Stein control variate `g_j = diag_j + Phi_j * score_j`, computed in
    /// the permuted frame and mapped back.
    pub fn control_variate_with<B: Backend>(&self, be: &mut B, x: &Tensor, y: &B::Value, score: &Tensor) -> Result<B::Value> {
        check_dim("score width", x.cols(), score.cols())?;
        check_dim("score rows", x.rows(), score.rows())?;
        let xp = be.constant(x.gather_cols(&self.perm));
        let sp = be.constant(score.gather_cols(&self.perm));
        let (phi, diag) = self.tree.forward_with(be, xp, y)?;
        let stein = be.mul(&phi, &sp)?;
        let g = be.add(&diag, &stein)?;
        be.gather(&g, &self.inverse)
    }

    pub fn control_variate(&self, x: &Tensor, y: &Tensor, score: &Tensor) -> Result<Tensor> {
        let y = broadcast_rows(y, x.rows())?;
        self.control_variate_with(&mut EvalBackend::new(self.tree.params()), x, &y, score)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arch(dim: usize, depth: usize) -> Architecture {
        Architecture { dim, obs_dim: dim, depth, hidden_units: 8, mlp_layers: 3 }
    }

    #[test]
    fn structure_counts() {
        let t = HintTree::new(arch(4, 2), &mut RngStream::new(0)).unwrap();
        assert_eq!(t.coupling_count(), 3);
        assert_eq!(t.coupling_paths(), ["root", "root.u", "root.l"]);
        assert_eq!(HintTree::new(arch(4, 1), &mut RngStream::new(0)).unwrap().coupling_count(), 1);
        assert_eq!(HintTree::new(arch(16, 2), &mut RngStream::new(0)).unwrap().coupling_count(), 3);
        assert_eq!(HintTree::new(arch(3, 3), &mut RngStream::new(0)).unwrap().coupling_count(), 2);
        assert!(HintTree::new(arch(1, 2), &mut RngStream::new(0)).unwrap().is_degenerate());
    }

    #[test]
    fn fresh_tree_is_identity() {
        let t = HintTree::new(arch(5, 3), &mut RngStream::new(2)).unwrap();
        let x = [0.1, -0.4, 2.0, 3.5, -1.0];
        let (phi, diag) = t.tree_forward(&x, &[1.0; 5]).unwrap();
        assert_eq!(phi, x);
        assert_eq!(diag, [1.0; 5]);
        assert_eq!(t.divergence(&x, &[0.0; 5]).unwrap(), 5.0);
    }

    #[test]
    fn single_node_constant_scale() {
        let a = Architecture { dim: 4, obs_dim: 1, depth: 1, hidden_units: 4, mlp_layers: 2 };
        let mut t = HintTree::new(a, &mut RngStream::new(0)).unwrap();
        let bias = t.params().find("root.s.1.b").unwrap();
        t.params_mut().slice_values_mut(bias).copy_from_slice(&[2.0, 3.0]);
        let (phi, diag) = t.tree_forward(&[1.0; 4], &[0.7]).unwrap();
        assert_eq!(phi, [1.0, 1.0, 2.0, 3.0]);
        assert_eq!(diag, [1.0, 1.0, 2.0, 3.0]);
        assert_eq!(t.divergence(&[1.0; 4], &[0.7]).unwrap(), 7.0);
    }

    #[test]
    fn non_finite_reports_node_path() {
        let mut t = HintTree::new(arch(4, 2), &mut RngStream::new(0)).unwrap();
        let id = t.params().find("root.l.t.2.b").unwrap();
        t.params_mut().slice_values_mut(id)[0] = f64::NAN;
        match t.tree_forward(&[0.0; 4], &[0.0; 4]) {
            Err(Error::NonFinite { context }) => assert!(context.contains("root.l"), "{context}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn permutation_validation() {
        let t = HintTree::new(arch(3, 1), &mut RngStream::new(0)).unwrap();
        assert!(PermutedTree::new(t.clone(), vec![0, 0, 1]).is_err());
        assert!(PermutedTree::new(t.clone(), vec![0, 1]).is_err());
        let p = PermutedTree::new(t, vec![2, 0, 1]).unwrap();
        for (k, &j) in p.permutation().iter().enumerate() {
            assert_eq!(p.inverse()[j], k);
        }
    }

    #[test]
    fn from_params_rejects_wrong_layout() {
        let t = HintTree::new(arch(4, 2), &mut RngStream::new(0)).unwrap();
        let ok = HintTree::from_params(*t.arch(), t.params().clone()).unwrap();
        assert_eq!(ok, t);
        let other = HintTree::new(arch(4, 1), &mut RngStream::new(0)).unwrap();
        assert!(HintTree::from_params(*t.arch(), other.params().clone()).is_err());
    }
}
