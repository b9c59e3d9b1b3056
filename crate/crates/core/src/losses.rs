//! Loss functions over the output matrix `G`, classification error reports
//! with the zero-error certificate threshold, and the closed-form Hessian of
//! the cross-entropy loss in a single output-weight column.
//!
//! All three losses are convex in `G` with infimum 0:
//!
//! * cross-entropy `(1/N) Σᵢ −log(e^{G_{iyᵢ}} / Σₖ e^{G_{ik}})`,
//! * square loss `½‖G − Y‖²_F` against one-hot (or explicit) targets,
//! * multi-class hinge `(1/N) Σᵢ maxⱼ≠yᵢ max(0, 1 − (G_{iyᵢ} − G_{ij}))`.
//!
//! The certificate threshold: cross-entropy below `log(2)/N` forces zero
//! training error, because a single misclassified (or tied) sample already
//! contributes `log(2)/N` on its own.

use serde::{Deserialize, Serialize};

use crate::engine::PsiMatrix;
use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Which loss to evaluate/differentiate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    Square,
    Hinge,
}

impl LossKind {
    /// Greatest lower bound `p*` of the loss over all inputs (0 for every
    /// supported loss; escape paths drive the loss toward this value).
    pub fn infimum(&self) -> f64 {
        0.0
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LossKind::CrossEntropy => write!(f, "cross_entropy"),
            LossKind::Square => write!(f, "square"),
            LossKind::Hinge => write!(f, "hinge"),
        }
    }
}

/// Classification outcome plus the zero-error certificate flag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    /// Samples whose true-class logit is not strictly largest (ties count
    /// as errors).
    pub misclassified: usize,
    pub total: usize,
    /// Loss value under the requested [`LossKind`].
    pub loss: f64,
    /// Cross-entropy < log(2)/N; implies `misclassified == 0`.
    pub below_lemma1_threshold: bool,
}

/// The zero-error cross-entropy threshold `log(2)/N`.
pub fn zero_error_threshold(n: usize) -> f64 {
    std::f64::consts::LN_2 / n as f64
}

fn check_labels(g: &Matrix, y: &[usize]) -> Result<()> {
    if y.len() != g.rows() {
        return Err(Error::ShapeMismatch(format!(
            "{} logit rows but {} labels",
            g.rows(),
            y.len()
        )));
    }
    if let Some(&bad) = y.iter().find(|&&l| l < 1 || l > g.cols()) {
        return Err(Error::InvalidInput(format!(
            "label {bad} outside 1..={}",
            g.cols()
        )));
    }
    Ok(())
}

fn require_multiclass(g: &Matrix, what: &str) -> Result<()> {
    if g.cols() < 2 {
        return Err(Error::Unsupported(format!(
            "{what} needs m ≥ 2 output classes, got {}",
            g.cols()
        )));
    }
    Ok(())
}

/// Log-sum-exp of a row with max subtraction (never overflows for finite
/// input).
pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Stable softmax of a row, written into `out`.
pub(crate) fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Per-sample cross-entropy `log Σₖ e^{g_k} − g_y`.
pub(crate) fn row_cross_entropy(row: &[f64], label: usize) -> f64 {
    log_sum_exp(row) - row[label - 1]
}

/// Per-sample square loss against a one-hot target at `label`.
pub(crate) fn row_square(row: &[f64], label: usize) -> f64 {
    let mut acc = 0.0;
    for (k, &g) in row.iter().enumerate() {
        let t = if k == label - 1 { 1.0 } else { 0.0 };
        acc += (g - t) * (g - t);
    }
    0.5 * acc
}

/// Per-sample multi-class hinge `maxⱼ≠y max(0, 1 − (g_y − g_j))`.
pub(crate) fn row_hinge(row: &[f64], label: usize) -> f64 {
    let gy = row[label - 1];
    let mut worst: f64 = 0.0;
    for (j, &gj) in row.iter().enumerate() {
        if j != label - 1 {
            worst = worst.max(1.0 - (gy - gj));
        }
    }
    worst
}

/// Gradient of the per-sample loss with respect to the logit row, written
/// into `out`. For hinge this is the subgradient that picks 0 at exact
/// kinks; ties between challenger classes resolve to the smallest index.
pub(crate) fn row_grad(kind: LossKind, row: &[f64], label: usize, out: &mut [f64]) {
    match kind {
        LossKind::CrossEntropy => {
            softmax_row(row, out);
            out[label - 1] -= 1.0;
        }
        LossKind::Square => {
            for (k, (o, &g)) in out.iter_mut().zip(row).enumerate() {
                let t = if k == label - 1 { 1.0 } else { 0.0 };
                *o = g - t;
            }
        }
        LossKind::Hinge => {
            out.fill(0.0);
            let gy = row[label - 1];
            let mut best: Option<(usize, f64)> = None;
            for (j, &gj) in row.iter().enumerate() {
                if j == label - 1 {
                    continue;
                }
                let margin = 1.0 - (gy - gj);
                if best.is_none_or(|(_, b)| margin > b) {
                    best = Some((j, margin));
                }
            }
            if let Some((j, margin)) = best {
                if margin > 0.0 {
                    out[j] = 1.0;
                    out[label - 1] = -1.0;
                }
            }
        }
    }
}

/// Mean cross-entropy of logits `G` against 1-based labels, via
/// log-sum-exp with max subtraction.
pub fn cross_entropy(g: &Matrix, y: &[usize]) -> Result<f64> {
    require_multiclass(g, "cross-entropy")?;
    check_labels(g, y)?;
    let total: f64 = (0..g.rows())
        .map(|i| row_cross_entropy(g.row(i), y[i]))
        .sum();
    Ok(total / g.rows() as f64)
}

/// Square loss `½‖G − Y‖²_F` against an explicit target matrix.
pub fn square_loss(g: &Matrix, y_targets: &Matrix) -> Result<f64> {
    if g.rows() != y_targets.rows() || g.cols() != y_targets.cols() {
        return Err(Error::ShapeMismatch(format!(
            "logits are {}×{} but targets are {}×{}",
            g.rows(),
            g.cols(),
            y_targets.rows(),
            y_targets.cols()
        )));
    }
    let acc: f64 = g
        .data()
        .iter()
        .zip(y_targets.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(0.5 * acc)
}

/// Square loss against the one-hot encoding of 1-based labels.
pub fn square_loss_labels(g: &Matrix, y: &[usize]) -> Result<f64> {
    check_labels(g, y)?;
    Ok((0..g.rows()).map(|i| row_square(g.row(i), y[i])).sum())
}

/// Mean multi-class hinge loss.
pub fn hinge_loss(g: &Matrix, y: &[usize]) -> Result<f64> {
    require_multiclass(g, "hinge loss")?;
    check_labels(g, y)?;
    let total: f64 = (0..g.rows()).map(|i| row_hinge(g.row(i), y[i])).sum();
    Ok(total / g.rows() as f64)
}

/// Loss value of `G` under `kind`, with one-hot targets derived from labels.
pub fn loss_value(g: &Matrix, y: &[usize], kind: LossKind) -> Result<f64> {
    match kind {
        LossKind::CrossEntropy => cross_entropy(g, y),
        LossKind::Square => square_loss_labels(g, y),
        LossKind::Hinge => hinge_loss(g, y),
    }
}

/// Counts misclassifications (strict argmax; ties are errors) and evaluates
/// the loss plus the zero-error certificate flag. The flag always refers to
/// cross-entropy regardless of `kind`, and is false when `m < 2` (the
/// cross-entropy is undefined there).
pub fn error_report(g: &Matrix, y: &[usize], kind: LossKind) -> Result<ErrorReport> {
    check_labels(g, y)?;
    if matches!(kind, LossKind::CrossEntropy | LossKind::Hinge) {
        require_multiclass(g, "this loss")?;
    }
    let mut misclassified = 0;
    for i in 0..g.rows() {
        let row = g.row(i);
        let gy = row[y[i] - 1];
        let beaten = row
            .iter()
            .enumerate()
            .any(|(k, &v)| k != y[i] - 1 && v >= gy);
        if beaten {
            misclassified += 1;
        }
    }
    let loss = loss_value(g, y, kind)?;
    let below = if g.cols() >= 2 {
        cross_entropy(g, y)? < zero_error_threshold(g.rows())
    } else {
        false
    };
    Ok(ErrorReport {
        misclassified,
        total: g.rows(),
        loss,
        below_lemma1_threshold: below,
    })
}

/// Hessian of the cross-entropy loss in output-weight column `j` (0-based
/// class column): `(1/N) Σᵢ pᵢⱼ(1−pᵢⱼ) Ψᵢ:Ψᵢ:ᵀ` with `pᵢⱼ` the softmax of
/// row `i`. The `1/N` matches the implemented loss normalization (the bare
/// rank-one sum would be the Hessian of the *unnormalized* loss).
///
/// Positive semidefinite by construction — each term is a nonnegative
/// multiple of a rank-one projector — which is what rules out strict local
/// maxima in `V`.
pub fn hessian_v_column(psi: &PsiMatrix, g: &Matrix, j: usize) -> Result<Matrix> {
    require_multiclass(g, "the softmax Hessian")?;
    let n = psi.values.rows();
    let m_feat = psi.values.cols();
    if g.rows() != n {
        return Err(Error::ShapeMismatch(format!(
            "Ψ has {n} rows but G has {}",
            g.rows()
        )));
    }
    if j >= g.cols() {
        return Err(Error::InvalidInput(format!(
            "class column {j} out of range for m = {}",
            g.cols()
        )));
    }
    let mut hess = Matrix::zeros(m_feat, m_feat);
    let mut p = vec![0.0; g.cols()];
    for i in 0..n {
        softmax_row(g.row(i), &mut p);
        let w = p[j] * (1.0 - p[j]) / n as f64;
        let psi_row = psi.values.row(i);
        for a in 0..m_feat {
            let wa = w * psi_row[a];
            if wa == 0.0 {
                continue;
            }
            let out_row = hess.row_mut(a);
            for (o, &pb) in out_row.iter_mut().zip(psi_row) {
                *o += wa * pb;
            }
        }
    }
    Ok(hess)
}
