//! Oracles shared by the integration tests and the acceptance suite.

#![allow(dead_code)]

use cncv::ad::Tape;
use cncv::model::{Architecture, CvEnsemble, HintTree};
use cncv::problems::InverseProblem;
use cncv::rng::RngStream;
use cncv::tensor::Tensor;
use cncv::training::{loss_batch, loss_value};

/// A tree with every parameter perturbed away from the identity.
pub fn random_tree(dim: usize, depth: usize, rng: &mut RngStream) -> HintTree {
    let arch = Architecture { dim, obs_dim: dim, depth, hidden_units: 8, mlp_layers: 2 };
    let mut tree = HintTree::new(arch, rng).unwrap();
    tree.perturb(0.3, rng);
    tree
}

/// Compares the recursive Jacobian diagonal against central differences.
/// Returns `(max |diag_j - fd_j|, |sum(diag) - trace(J_fd)|)`, where the
/// trace comes from the full finite-difference Jacobian.
pub fn diagonal_errors(tree: &HintTree, x: &[f64], y: &[f64], step: f64) -> (f64, f64) {
    let d = x.len();
    let (_, diag) = tree.tree_forward(x, y).unwrap();
    let mut jac = vec![vec![0.0; d]; d];
    for k in 0..d {
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[k] += step;
        xm[k] -= step;
        let (fp, _) = tree.tree_forward(&xp, y).unwrap();
        let (fm, _) = tree.tree_forward(&xm, y).unwrap();
        for i in 0..d {
            jac[i][k] = (fp[i] - fm[i]) / (2.0 * step);
        }
    }
    let diag_err = (0..d).map(|j| (diag[j] - jac[j][j]).abs()).fold(0.0, f64::max);
    let trace: f64 = (0..d).map(|j| jac[j][j]).sum();
    (diag_err, (diag.iter().sum::<f64>() - trace).abs())
}

/// Tape gradient of the training loss against central differences at
/// `n_params` randomly chosen parameters of a small perturbed ensemble.
/// Returns the largest relative error.
pub fn loss_gradient_max_rel_err(problem: &InverseProblem, ensemble: &CvEnsemble, n_params: usize, rng: &mut RngStream) -> f64 {
    let d = problem.dim();
    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..16).map(|_| problem.simulate_pair(rng)).collect();
    let x = Tensor::from_rows(&rows.iter().map(|r| r.0.clone()).collect::<Vec<_>>());
    let y = Tensor::from_rows(&rows.iter().map(|r| r.1.clone()).collect::<Vec<_>>());
    let s = problem.posterior_scores(&x, &y).unwrap();
    assert_eq!(x.cols(), d);

    let mut tape = Tape::new();
    let loss = loss_batch(&mut tape, ensemble, &x, &y, &s, &x).unwrap();
    let grads = tape.backward(loss).unwrap().into_groups();

    let step = 1e-3;
    let mut worst: f64 = 0.0;
    let mut probe = ensemble.clone();
    for _ in 0..n_params {
        let l = rng.below(ensemble.len());
        let i = rng.below(grads[l].len());
        let base = probe.members()[l].tree().params().values()[i];
        let mut at = |v: f64| {
            probe.members_mut()[l].tree_mut().params_mut().values_mut()[i] = v;
            loss_value(&probe, &x, &y, &s, &x).unwrap()
        };
        // Five-point central stencil: O(h^4) truncation, and a step large
        // enough that rounding in a loss of order 10..100 stays far below
        // gradients of order 1e-4.
        let fd = (8.0 * (at(base + step) - at(base - step)) - (at(base + 2.0 * step) - at(base - 2.0 * step))) / (12.0 * step);
        at(base);
        let ad = grads[l][i];
        let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-12);
        worst = worst.max(rel);
    }
    worst
}
