//! Offline phase: simulate `(x, y)` pairs from the joint, precompute
//! posterior scores, and fit the ensemble by minibatch Adam on
//! `(1/B) sum_i |h(x_i) - g_ens(x_i, y_i)|^2`.
//!
//! Because every `g` has zero posterior mean, that objective equals the
//! variance of `h - g` plus a term that does not depend on the parameters,
//! so minimizing it minimizes the controlled estimator's variance.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::ad::{Tape, Var};
use crate::error::{check_dim, Error, Result};
use crate::model::{Architecture, CvEnsemble, TapeBackend};
use crate::problems::{InverseProblem, ProblemKind, Qoi, QoiKind};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Stream indices under the training seed.
const DATA_STREAM: u64 = 1;
const SPLIT_STREAM: u64 = 2;
const INIT_STREAM: u64 = 3;
const CENTER_STREAM: u64 = 4;
const SHUFFLE_STREAM_BASE: u64 = 1 << 32;

/// Prior draws used to self-normalize the variance-target center for
/// non-Gaussian problems.
pub const CENTER_BANK_SIZE: usize = 8192;

/// Rows per forward pass when computing validation loss.
const VALIDATION_CHUNK: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub ensemble_size: usize,
    pub depth: usize,
    pub hidden_units: usize,
    pub mlp_layers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { ensemble_size: 16, depth: 2, hidden_units: 64, mlp_layers: 3 }
    }
}

impl ModelConfig {
    pub fn architecture(&self, problem: &InverseProblem) -> Architecture {
        Architecture {
            dim: problem.dim(),
            obs_dim: problem.obs_dim(),
            depth: self.depth,
            hidden_units: self.hidden_units,
            mlp_layers: self.mlp_layers,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ensemble_size == 0 {
            return Err(Error::Config("model.ensemble_size must be at least 1".into()));
        }
        Architecture { dim: 1, obs_dim: 1, depth: self.depth, hidden_units: self.hidden_units, mlp_layers: self.mlp_layers }
            .validate()
    }
}

fn default_validation_fraction() -> f64 {
    0.1
}

fn default_clip_norm() -> f64 {
    10.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_init: f64,
    pub lr_final: f64,
    /// Pairs generated in total, including the validation split.
    pub n_train_samples: usize,
    pub seed: u64,
    #[serde(default = "default_validation_fraction")]
    pub validation_fraction: f64,
    /// Global gradient-norm clip.
    #[serde(default = "default_clip_norm")]
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 2048,
            epochs: 50,
            lr_init: 1e-3,
            lr_final: 1e-4,
            n_train_samples: 65_536,
            seed: 0,
            validation_fraction: default_validation_fraction(),
            clip_norm: default_clip_norm(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.batch_size == 0 {
            return bad("train.batch_size must be positive".into());
        }
        if !(self.lr_init > 0.0 && self.lr_final > 0.0 && self.lr_final <= self.lr_init) {
            return bad(format!("need 0 < lr_final <= lr_init, got {} and {}", self.lr_final, self.lr_init));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad(format!("validation_fraction must lie in [0, 1), got {}", self.validation_fraction));
        }
        if !(self.clip_norm > 0.0) {
            return bad(format!("clip_norm must be positive, got {}", self.clip_norm));
        }
        let n_val = validation_count(self.n_train_samples, self.validation_fraction);
        if self.n_train_samples <= n_val {
            return bad(format!("n_train_samples = {} leaves no training pairs", self.n_train_samples));
        }
        Ok(())
    }
}

fn validation_count(n: usize, fraction: f64) -> usize {
    (n as f64 * fraction).round() as usize
}

/// Simulated pairs with their posterior scores and a train/validation split.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Tensor,
    pub y: Tensor,
    pub score: Tensor,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }
}

/// `n` pairs `x ~ prior`, `y = F(x) + noise` with `score = grad_x log p(x | y)`,
/// all drawn from streams derived from `seed`.
pub fn generate_dataset(problem: &InverseProblem, n: usize, seed: u64, validation_fraction: f64) -> Result<Dataset> {
    let mut rng = RngStream::derive(seed, DATA_STREAM);
    let (d, m) = (problem.dim(), problem.obs_dim());
    let mut x = Tensor::zeros(n, d);
    let mut y = Tensor::zeros(n, m);
    for i in 0..n {
        let (xi, yi) = problem.simulate_pair(&mut rng);
        x.row_mut(i).copy_from_slice(&xi);
        y.row_mut(i).copy_from_slice(&yi);
    }
    let score = problem.posterior_scores(&x, &y)?;
    if !score.is_finite() {
        return Err(Error::NonFinite { context: "training-set posterior scores".into() });
    }
    let mut order: Vec<usize> = (0..n).collect();
    RngStream::derive(seed, SPLIT_STREAM).shuffle(&mut order);
    let n_val = validation_count(n, validation_fraction);
    let validation = order[..n_val].to_vec();
    let train = order[n_val..].to_vec();
    Ok(Dataset { x, y, score, train, validation })
}

/// Training targets `h(x_i)`. For the variance quantity the center is the
/// posterior mean given `y_i`: exact for the Gaussian problem, otherwise a
/// self-normalized importance-sampling estimate over a fixed bank of prior
/// draws.
pub fn qoi_targets(problem: &InverseProblem, data: &Dataset, kind: QoiKind, seed: u64) -> Result<Tensor> {
    match kind {
        QoiKind::Mean => Ok(data.x.clone()),
        QoiKind::Variance => {
            let bank = match problem.kind() {
                ProblemKind::Gaussian => None,
                _ => Some(problem.prior_draw_bank(CENTER_BANK_SIZE, crate::rng::derive_seed(seed, CENTER_STREAM))),
            };
            let mut h = Tensor::zeros(data.len(), problem.dim());
            for i in 0..data.len() {
                let y = data.y.row(i);
                let center = match &bank {
                    None => problem.gaussian_posterior_moments(y)?.mean,
                    Some(b) => problem.importance_mean(y, b)?,
                };
                h.row_mut(i).copy_from_slice(&Qoi::variance(center).eval(data.x.row(i))?);
            }
            Ok(h)
        }
    }
}

/// Records the batch loss `(1/B) sum_i |h_i - g_ens(x_i, y_i)|^2` on `tape`.
/// Samples, observations, scores, and targets enter as constants, so only
/// parameter gradients flow. Members are bound to the tape in order, so
/// gradient group `l` belongs to member `l`.
pub fn loss_batch(tape: &mut Tape, ensemble: &CvEnsemble, x: &Tensor, y: &Tensor, score: &Tensor, h: &Tensor) -> Result<Var> {
    let b = x.rows();
    if b == 0 {
        return Err(Error::Config("empty minibatch".into()));
    }
    check_dim("target rows", b, h.rows())?;
    check_dim("target width", ensemble.arch().dim, h.cols())?;
    check_dim("observation rows", b, y.rows())?;
    let bound: Vec<_> = ensemble.members().iter().map(|m| tape.bind(m.tree().params())).collect();
    let yv = tape.constant(y.clone());
    let mut sum: Option<Var> = None;
    for (member, params) in ensemble.members().iter().zip(&bound) {
        let g = member.control_variate_with(&mut TapeBackend::new(tape, params), x, &yv, score)?;
        sum = Some(match sum {
            None => g,
            Some(acc) => tape.add(acc, g)?,
        });
    }
    let sum = sum.expect("ensemble has at least one member");
    let g_ens = tape.scale(sum, 1.0 / ensemble.len() as f64)?;
    let hv = tape.constant(h.clone());
    let r = tape.sub(hv, g_ens)?;
    let sq = tape.dot(r, r)?;
    Ok(tape.scale(sq, 1.0 / b as f64)?)
}

/// The same loss without a tape.
pub fn loss_value(ensemble: &CvEnsemble, x: &Tensor, y: &Tensor, score: &Tensor, h: &Tensor) -> Result<f64> {
    let g = ensemble.evaluate(x, y, score)?;
    check_dim("target rows", g.rows(), h.rows())?;
    let sq: f64 = h.data().iter().zip(g.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sq / x.rows() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], step: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) {
    assert_eq!(params.len(), grads.len(), "parameter/gradient length mismatch");
    assert_eq!(params.len(), state.m.len(), "optimizer state length mismatch");
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + state.eps);
    }
}

/// Cosine decay from `lr_init` at epoch 0 to `lr_final` at `total`.
/// Fractional epochs are allowed.
pub fn cosine_lr(epoch: f64, total: f64, lr_init: f64, lr_final: f64) -> f64 {
    if total <= 0.0 {
        return lr_init;
    }
    lr_final + 0.5 * (lr_init - lr_final) * (1.0 + (PI * epoch / total).cos())
}

/// Scales all groups together so their joint Euclidean norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm(groups: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = groups.iter().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm {
        let c = max_norm / norm;
        for v in groups.iter_mut().flat_map(|g| g.iter_mut()) {
            *v *= c;
        }
    }
    norm
}

/// One row of the training curve. Validation loss is filled on the last
/// batch of each epoch (and on the initial row, which has no batch loss).
#[derive(Clone, Debug, PartialEq)]
pub struct CurveRow {
    pub samples_seen: u64,
    pub batch_loss: Option<f64>,
    pub epoch: usize,
    pub val_loss: Option<f64>,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingMetadata {
    pub qoi: QoiKind,
    pub seed: u64,
    pub epochs: usize,
    pub samples_seen: u64,
    pub initial_val_loss: f64,
    pub final_val_loss: f64,
    /// Last minibatch loss; absent if no step was taken.
    pub final_batch_loss: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub ensemble: CvEnsemble,
    pub curve: Vec<CurveRow>,
    pub metadata: TrainingMetadata,
}

/// Progress passed to the training hook after initialization (epoch 0)
/// and after every epoch.
#[derive(Clone, Debug)]
pub struct EpochReport {
    pub epoch: usize,
    pub samples_seen: u64,
    pub val_loss: f64,
}

pub type TrainHook<'a> = dyn FnMut(&EpochReport, &CvEnsemble) -> Result<()> + 'a;

/// Generates data, initializes an ensemble, and fits it.
pub fn train(problem: &InverseProblem, model: &ModelConfig, config: &TrainConfig, qoi: QoiKind) -> Result<TrainOutcome> {
    train_with_hook(problem, model, config, qoi, &mut |_, _| Ok(()))
}

pub fn train_with_hook(
    problem: &InverseProblem,
    model: &ModelConfig,
    config: &TrainConfig,
    qoi: QoiKind,
    hook: &mut TrainHook<'_>,
) -> Result<TrainOutcome> {
    model.validate()?;
    config.validate()?;
    let data = generate_dataset(problem, config.n_train_samples, config.seed, config.validation_fraction)?;
    let targets = qoi_targets(problem, &data, qoi, config.seed)?;
    let ensemble = CvEnsemble::init(
        model.architecture(problem),
        model.ensemble_size,
        crate::rng::derive_seed(config.seed, INIT_STREAM),
    )?;
    fit(ensemble, &data, &targets, config, qoi, hook)
}

/// Minibatch Adam on a prepared dataset. Deterministic: batch order comes
/// from `config.seed`, and all reductions run in a fixed order.
pub fn fit(
    mut ensemble: CvEnsemble,
    data: &Dataset,
    targets: &Tensor,
    config: &TrainConfig,
    qoi: QoiKind,
    hook: &mut TrainHook<'_>,
) -> Result<TrainOutcome> {
    config.validate()?;
    check_dim("target rows", data.len(), targets.rows())?;
    if data.train.is_empty() {
        return Err(Error::Config("no training pairs".into()));
    }
    let validation_loss = |e: &CvEnsemble| -> Result<f64> {
        let idx = if data.validation.is_empty() { &data.train } else { &data.validation };
        let mut total = 0.0;
        for chunk in idx.chunks(VALIDATION_CHUNK) {
            let l = loss_value(
                e,
                &data.x.gather_rows(chunk),
                &data.y.gather_rows(chunk),
                &data.score.gather_rows(chunk),
                &targets.gather_rows(chunk),
            )?;
            total += l * chunk.len() as f64;
        }
        Ok(total / idx.len() as f64)
    };

    let mut optimizers: Vec<AdamState> =
        ensemble.members().iter().map(|m| AdamState::new(m.tree().params().len())).collect();
    let initial_val_loss = validation_loss(&ensemble)?;
    let mut curve = vec![CurveRow {
        samples_seen: 0,
        batch_loss: None,
        epoch: 0,
        val_loss: Some(initial_val_loss),
        lr: config.lr_init,
    }];
    hook(&EpochReport { epoch: 0, samples_seen: 0, val_loss: initial_val_loss }, &ensemble)?;

    let batches_per_epoch = data.train.len().div_ceil(config.batch_size);
    let mut samples_seen = 0u64;
    let mut final_batch_loss = None;
    let mut val_loss = initial_val_loss;
    let mut order = data.train.clone();

    for epoch in 0..config.epochs {
        order.copy_from_slice(&data.train);
        RngStream::derive(config.seed, SHUFFLE_STREAM_BASE + epoch as u64).shuffle(&mut order);
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let progress = epoch as f64 + b as f64 / batches_per_epoch as f64;
            let lr = cosine_lr(progress, config.epochs as f64, config.lr_init, config.lr_final);
            let mut tape = Tape::new();
            let loss = loss_batch(
                &mut tape,
                &ensemble,
                &data.x.gather_rows(idx),
                &data.y.gather_rows(idx),
                &data.score.gather_rows(idx),
                &targets.gather_rows(idx),
            )?;
            let loss_value = tape.value(loss)?.item();
            if !loss_value.is_finite() {
                let metadata = TrainingMetadata {
                    qoi,
                    seed: config.seed,
                    epochs: epoch,
                    samples_seen,
                    initial_val_loss,
                    final_val_loss: val_loss,
                    final_batch_loss,
                };
                let last_good = Box::new(TrainOutcome { ensemble, curve, metadata });
                return Err(Error::NonFiniteLoss { epoch, batch: b, last_good });
            }
            let mut grads = tape.backward(loss)?.into_groups();
            drop(tape);
            clip_global_norm(&mut grads, config.clip_norm);
            for ((member, opt), g) in ensemble.members_mut().iter_mut().zip(&mut optimizers).zip(&grads) {
                adam_step(member.tree_mut().params_mut().values_mut(), g, opt, lr);
            }
            samples_seen += idx.len() as u64;
            final_batch_loss = Some(loss_value);
            curve.push(CurveRow { samples_seen, batch_loss: Some(loss_value), epoch: epoch + 1, val_loss: None, lr });
        }
        val_loss = validation_loss(&ensemble)?;
        if let Some(last) = curve.last_mut() {
            last.val_loss = Some(val_loss);
        }
        hook(&EpochReport { epoch: epoch + 1, samples_seen, val_loss }, &ensemble)?;
    }

    let metadata = TrainingMetadata {
        qoi,
        seed: config.seed,
        epochs: config.epochs,
        samples_seen,
        initial_val_loss,
        final_val_loss: val_loss,
        final_batch_loss,
    };
    Ok(TrainOutcome { ensemble, curve, metadata })
}
