//! Training and solution procedures: truncated-Gaussian initialization,
//! the random-feature fit (hidden weights frozen at random values, output
//! weights solved by least squares), SGD with Nesterov momentum, and the
//! escape-path constructor that walks any configuration down to loss `ε/2`
//! along a straight line in `V`.
//!
//! The escape path is the operational heart of the no-bad-valley claim:
//! whenever `Ψ` has full rank, the system `ΨV* = Y·t*` with
//! `t* = log((m−1)/(e^{ε/2}−1))` has a solution whose cross-entropy is
//! exactly `ε/2`, and convexity of the loss in `G` makes the chord
//! `λV + (1−λ)V*` non-increasing in the bound sense — so no strict local
//! minimum can sit above `ε/2`.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::engine::{EvalGraph, ParamState};
use crate::error::{Error, Result};
use crate::linalg::{default_rank_tol, numerical_rank, solve_least_squares, Matrix};
use crate::losses::{self, ErrorReport, LossKind};
use crate::netgraph::NetworkSpec;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

/// SGD schedule and reproducibility knobs. Omitted JSON fields fall back
/// to the [`Default`] values.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SgdConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Initial learning rate.
    #[serde(default = "default_lr0")]
    pub lr0: f64,
    /// Nesterov momentum coefficient in `[0, 1)`.
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    /// Epoch fractions in `(0,1)`, strictly increasing; the learning rate
    /// is divided by 10 at each.
    #[serde(default = "default_milestones")]
    pub milestones: Vec<f64>,
    #[serde(default)]
    pub seed: u64,
    /// Update only the output weights `V`, freezing hidden weights and
    /// biases — turns the problem into the convex surrogate in `V`.
    #[serde(default)]
    pub freeze_hidden: bool,
    /// Stop as soon as an epoch ends with zero training errors.
    #[serde(default)]
    pub stop_at_zero_error: bool,
    /// Single-partition gradient reductions (bit-reproducible across
    /// machines at the cost of parallelism).
    #[serde(default)]
    pub deterministic: bool,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            lr0: default_lr0(),
            momentum: default_momentum(),
            milestones: default_milestones(),
            seed: 0,
            freeze_hidden: false,
            stop_at_zero_error: false,
            deterministic: false,
        }
    }
}

fn default_epochs() -> usize {
    300
}

fn default_batch_size() -> usize {
    64
}

fn default_lr0() -> f64 {
    0.01
}

fn default_momentum() -> f64 {
    0.9
}

fn default_milestones() -> Vec<f64> {
    vec![0.5, 0.75]
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidInput("batch_size must be ≥ 1".into()));
        }
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "lr0 must be finite and ≥ 0, got {}",
                self.lr0
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidInput(format!(
                "momentum must lie in [0,1), got {}",
                self.momentum
            )));
        }
        for pair in self.milestones.windows(2) {
            if pair[1] <= pair[0] {
                return Err(Error::InvalidInput(
                    "milestones must be strictly increasing".into(),
                ));
            }
        }
        if self.milestones.iter().any(|&f| !(0.0 < f && f < 1.0)) {
            return Err(Error::InvalidInput(
                "milestones must be epoch fractions in (0,1)".into(),
            ));
        }
        Ok(())
    }

    /// Learning rate in force during (0-based) `epoch`.
    fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self
            .milestones
            .iter()
            .filter(|&&f| (f * self.epochs as f64).floor() as usize <= epoch)
            .count();
        self.lr0 / 10f64.powi(drops as i32)
    }
}

/// One epoch's summary in a training history.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 0-based epoch index.
    pub epoch: usize,
    /// Full-dataset loss after the epoch.
    pub loss: f64,
    /// Misclassified training samples after the epoch.
    pub train_errors: usize,
    /// Learning rate used during the epoch.
    pub learning_rate: f64,
}

/// Per-epoch training record, serializable as a JSON array.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

/// Outcome of [`random_feature_fit`].
#[derive(Debug, Clone)]
pub struct RandomFitOutcome {
    /// Random hidden weights plus the least-squares `V`.
    pub params: ParamState,
    /// Training-set report under cross-entropy.
    pub report: ErrorReport,
    /// `‖ΨV − Y‖_F` of the solve.
    pub residual_norm: f64,
    /// Numerical rank of `Ψ` at the drawn weights.
    pub effective_rank: usize,
    /// True when `Ψ` fell short of full rank — a measure-zero event that
    /// still deserves an explicit warning rather than a silent answer.
    pub rank_deficient: bool,
}

/// Loss profile along the straight escape segment `λV + (1−λ)V*`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PathReport {
    /// Sampled `λ`, ascending from 0 (the constructed endpoint) to 1 (the
    /// start configuration).
    pub lambdas: Vec<f64>,
    /// Cross-entropy at each `λ`.
    pub losses: Vec<f64>,
    /// Target `ε`: the path ends at loss `ε/2`.
    pub epsilon: f64,
    /// Logit scale `t* = log((m−1)/(e^{ε/2}−1))`.
    pub t_star: f64,
    pub start_loss: f64,
    pub end_loss: f64,
    /// Per-λ chord check: `loss(λ) ≤ λ·start_loss + (1−λ)·ε/2 + 1e-9`.
    pub bound_ok: Vec<bool>,
    /// `‖ΨV* − Y·t*‖_F` after refinement.
    pub residual_norm: f64,
    pub effective_rank: usize,
}

impl PathReport {
    /// True when the chord bound holds at every sampled `λ`.
    pub fn all_bounds_ok(&self) -> bool {
        self.bound_ok.iter().all(|&b| b)
    }
}

/// Draws hidden weights from `N(0, 2/fan_in)` truncated at `±2σ` by
/// rejection, in canonical schema order; biases and `V` start at zero.
pub fn init_truncated_gaussian(spec: &NetworkSpec, seed: u64) -> Result<ParamState> {
    let graph = EvalGraph::new(spec)?;
    let layout = graph.layout();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut flat = vec![0.0; layout.n_params()];
    for slot in layout.slots() {
        let sigma = (2.0 / slot.len as f64).sqrt();
        for k in 0..slot.len {
            let z = loop {
                let z: f64 = sigma * rng.sample::<f64, _>(StandardNormal);
                if z.abs() <= 2.0 * sigma {
                    break z;
                }
            };
            flat[slot.offset + k] = z;
        }
    }
    ParamState::unflatten(layout, &flat)
}

/// The "rand" protocol: hidden weights drawn once and frozen, output
/// weights solved from `ΨV = Y` by least squares against one-hot targets.
/// Whenever `Ψ` has full rank (almost surely, given the assumptions) the
/// fit reaches zero training error; a rank-deficient draw is reported, not
/// hidden.
pub fn random_feature_fit(
    spec: &NetworkSpec,
    data: &Dataset,
    seed: u64,
    rank_tol: Option<f64>,
) -> Result<RandomFitOutcome> {
    if spec.skip_count() < data.n() {
        return Err(Error::Infeasible(format!(
            "random-feature fit needs M ≥ N, but M = {} < N = {}",
            spec.skip_count(),
            data.n()
        )));
    }
    let graph = EvalGraph::new(spec)?;
    let mut params = init_truncated_gaussian(spec, seed)?;
    let psi = graph.psi(&params, data)?;
    let tol = rank_tol.unwrap_or_else(|| default_rank_tol(data.n(), spec.skip_count()));
    let solution = solve_least_squares(&psi.values, &data.one_hot(), tol)?;
    params.v = solution.solution;
    let g = psi.values.matmul(&params.v)?;
    let report = losses::error_report(&g, data.labels(), LossKind::CrossEntropy)?;
    Ok(RandomFitOutcome {
        params,
        report,
        residual_norm: solution.residual_norm,
        effective_rank: solution.effective_rank,
        rank_deficient: solution.effective_rank < data.n(),
    })
}

/// SGD with Nesterov momentum: `v ← μv − η∇Φ(θ + μv)`, `θ ← θ + v`, with
/// seeded epoch shuffles, the divide-by-10 milestone schedule, and a
/// per-epoch full-dataset record. Non-finite loss or parameters abort with
/// [`Error::Diverged`] carrying the history gathered so far.
pub fn sgd_train(
    spec: &NetworkSpec,
    data: &Dataset,
    params0: &ParamState,
    config: &SgdConfig,
    loss_kind: LossKind,
) -> Result<(ParamState, TrainHistory)> {
    config.validate()?;
    let mut graph = EvalGraph::new(spec)?;
    graph.set_deterministic(config.deterministic);
    let layout = graph.layout().clone();
    let mut flat = params0.flatten(&layout)?;
    let mut velocity = vec![0.0; flat.len()];
    let mut lookahead = vec![0.0; flat.len()];
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.n()).collect();
    let mut history = TrainHistory::default();

    // Pre-flight shape/label checks, so errors surface before epoch 1.
    graph.loss_flat(&flat, data, loss_kind, None)?;

    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            for ((la, &th), &ve) in lookahead.iter_mut().zip(&flat).zip(&velocity) {
                *la = th + config.momentum * ve;
            }
            let (_, grad) = graph.gradient_flat(&lookahead, data, loss_kind, Some(batch))?;
            let cutoff = if config.freeze_hidden {
                layout.v_offset()
            } else {
                0
            };
            for (c, (ve, &g)) in velocity.iter_mut().zip(&grad).enumerate() {
                if c < cutoff {
                    *ve = 0.0;
                } else {
                    *ve = config.momentum * *ve - lr * g;
                }
            }
            for (th, &ve) in flat.iter_mut().zip(&velocity) {
                *th += ve;
            }
        }
        let loss = graph.loss_flat(&flat, data, loss_kind, None)?;
        let diverged = !loss.is_finite() || flat.iter().any(|v| !v.is_finite());
        let train_errors = if diverged {
            data.n()
        } else {
            let psi = graph.psi_flat(&flat, data);
            let g = psi.values.matmul(&v_of(&layout, &flat))?;
            losses::error_report(&g, data.labels(), loss_kind)?.misclassified
        };
        history.epochs.push(EpochRecord {
            epoch,
            loss,
            train_errors,
            learning_rate: lr,
        });
        if diverged {
            return Err(Error::Diverged {
                at_epoch: epoch,
                history: Box::new(history),
            });
        }
        if config.stop_at_zero_error && train_errors == 0 {
            break;
        }
    }
    Ok((ParamState::unflatten(&layout, &flat)?, history))
}

/// `V` block of a flat parameter vector as a matrix.
fn v_of(layout: &crate::engine::ParamLayout, flat: &[f64]) -> Matrix {
    let mut v = Matrix::zeros(layout.skip_count(), layout.output_count());
    v.data_mut().copy_from_slice(&flat[layout.v_offset()..]);
    v
}

/// Builds the straight output-weight escape segment from `params` down to
/// cross-entropy `ε/2`, holding hidden weights fixed: solves `ΨV* = Y·t*`,
/// then samples the loss at `n_samples + 1` uniform `λ` along
/// `λV + (1−λ)V*`.
///
/// Requires full-rank `Ψ` — a rank-deficient draw is a measure-zero
/// configuration and is reported as such (jitter the data or reseed the
/// hidden weights). The `ε < 2·Φ(start)` premise is *not* enforced: the
/// path is well-defined regardless, and starting below `ε/2` simply yields
/// a chord between two sub-`ε/2` points.
pub fn escape_path(
    spec: &NetworkSpec,
    params: &ParamState,
    data: &Dataset,
    epsilon: f64,
    n_samples: usize,
) -> Result<PathReport> {
    if spec.m < 2 {
        return Err(Error::Unsupported(format!(
            "escape paths need m ≥ 2 output classes, got {}",
            spec.m
        )));
    }
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "epsilon must be finite and positive, got {epsilon}"
        )));
    }
    if n_samples == 0 {
        return Err(Error::InvalidInput("need at least one λ step".into()));
    }
    let graph = EvalGraph::new(spec)?;
    let psi = graph.psi(params, data)?;
    let n = data.n();
    let rank = numerical_rank(&psi.values, default_rank_tol(n, spec.skip_count()))?;
    if rank < n {
        return Err(Error::RankDeficient(format!(
            "feature matrix has rank {rank} < N = {n} at this configuration — a \
             measure-zero event; jitter the data or reseed the hidden weights"
        )));
    }

    let m = spec.m as f64;
    let t_star = ((m - 1.0) / ((epsilon / 2.0).exp_m1())).ln();
    let mut targets = data.one_hot();
    for v in targets.data_mut() {
        *v *= t_star;
    }
    let tol = default_rank_tol(n, spec.skip_count());
    let mut v_star = solve_least_squares(&psi.values, &targets, tol)?.solution;
    // One or two refinement passes squeeze the residual toward machine
    // precision, which is what pins end_loss to ε/2.
    let mut residual_norm = 0.0;
    for _ in 0..2 {
        let resid = psi.values.matmul(&v_star)?.sub(&targets)?;
        residual_norm = resid.frobenius_norm();
        if residual_norm <= 1e-13 * targets.frobenius_norm().max(1.0) {
            break;
        }
        let correction = solve_least_squares(&psi.values, &resid, tol)?.solution;
        v_star = v_star.sub(&correction)?;
    }
    let resid = psi.values.matmul(&v_star)?.sub(&targets)?;
    residual_norm = residual_norm.min(resid.frobenius_norm());

    let g_start = psi.values.matmul(&params.v)?;
    let g_end = psi.values.matmul(&v_star)?;
    let start_loss = losses::cross_entropy(&g_start, data.labels())?;
    let mut lambdas = Vec::with_capacity(n_samples + 1);
    let mut path_losses = Vec::with_capacity(n_samples + 1);
    for k in 0..=n_samples {
        let lambda = k as f64 / n_samples as f64;
        let g = Matrix::from_fn(g_start.rows(), g_start.cols(), |i, j| {
            lambda * g_start.get(i, j) + (1.0 - lambda) * g_end.get(i, j)
        })?;
        lambdas.push(lambda);
        path_losses.push(losses::cross_entropy(&g, data.labels())?);
    }
    let end_loss = path_losses[0];
    let bound_ok = lambdas
        .iter()
        .zip(&path_losses)
        .map(|(&l, &loss)| loss <= l * start_loss + (1.0 - l) * (epsilon / 2.0) + 1e-9)
        .collect();
    Ok(PathReport {
        lambdas,
        losses: path_losses,
        epsilon,
        t_star,
        start_loss,
        end_loss,
        bound_ok,
        residual_norm,
        effective_rank: rank,
    })
}
