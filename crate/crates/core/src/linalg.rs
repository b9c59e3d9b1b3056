//! Dense linear algebra kernel: row-major 64-bit matrices, column-pivoted
//! Householder least squares, numerical rank, and pivoted-LU determinants.
//!
//! This is deliberately a small desk-scale kernel, not a LAPACK replacement.
//! The workbench needs exactly three nontrivial operations — minimum-norm
//! least squares (`Ψ V = G` solves), a rank decision, and determinants of
//! modest matrices for rank certificates — and all three come out of the same
//! column-pivoted orthogonal factorization plus a partial-pivot LU. A full
//! SVD is intentionally absent: nothing downstream needs singular values.
//!
//! All arithmetic is `f64`; there is no mixed precision anywhere.

use crate::error::{Error, Result};

/// Hard cap for [`determinant`]: beyond this size the magnitude of a
/// determinant stops being a meaningful desk-scale quantity (it over- or
/// underflows for perfectly benign matrices).
pub const MAX_DET_DIM: usize = 64;

/// Default relative tolerance used by rank decisions when the caller has no
/// better idea: `1e-9 × max(rows, cols)`.
pub fn default_rank_tol(rows: usize, cols: usize) -> f64 {
    1e-9 * rows.max(cols) as f64
}

/// Dense row-major matrix of `f64` values.
///
/// Construction rejects non-finite entries, so a `Matrix` obtained through
/// the public constructors always carries finite data. Mutation through
/// [`Matrix::data_mut`] or [`Matrix::set`] is the caller's responsibility;
/// boundary APIs re-validate where it matters.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix from row-major data. Fails if the length does not
    /// match `rows × cols` or any entry is NaN/±∞.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "matrix data has {} entries, expected {}×{} = {}",
                data.len(),
                rows,
                cols,
                rows * cols
            )));
        }
        if let Some(bad) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "matrix entry at flat index {bad} is not finite ({})",
                data[bad]
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// All-zero matrix.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Identity matrix of order `n`.
    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix by evaluating `f(i, j)` at every position. The values
    /// are validated exactly like [`Matrix::new`].
    pub fn from_fn(
        rows: usize,
        cols: usize,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self::new(rows, cols, data)
    }

    /// Builds a matrix from nested rows; every row must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        for (i, row) in rows.iter().enumerate() {
            if row.len() != c {
                return Err(Error::ShapeMismatch(format!(
                    "row {i} has {} entries, expected {c}",
                    row.len()
                )));
            }
        }
        Self::new(r, c, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Row-major backing slice.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable row-major backing slice. Callers must keep entries finite.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(v.is_finite(), "attempted to store non-finite matrix entry");
        self.data[i * self.cols + j] = v;
    }

    /// Borrow row `i` as a contiguous slice.
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Mutably borrow row `i`.
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// Matrix product `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::ShapeMismatch(format!(
                "cannot multiply {}×{} by {}×{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        // i-k-j loop order keeps both inner accesses contiguous in row-major
        // storage, which matters for the larger feature matrices.
        for i in 0..self.rows {
            let arow = self.row(i);
            let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &aik) in arow.iter().enumerate() {
                if aik == 0.0 {
                    continue;
                }
                let brow = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += aik * b;
                }
            }
        }
        Ok(out)
    }

    /// Entry-wise difference `self − other`.
    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::ShapeMismatch(format!(
                "cannot subtract {}×{} from {}×{}",
                other.rows, other.cols, self.rows, self.cols
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    /// Frobenius norm.
    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Largest absolute entry (0 for an empty matrix).
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
    }

    /// True when every entry is finite.
    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Copies the matrix into nested `Vec` rows (for JSON serialization).
    pub fn to_nested(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Result of a least-squares solve.
#[derive(Debug, Clone)]
pub struct LsSolution {
    /// Minimum-norm minimizer of `‖A X − B‖_F`.
    pub solution: Matrix,
    /// `‖A·solution − B‖_F`, computed directly from the returned solution
    /// rather than from factorization byproducts.
    pub residual_norm: f64,
    /// Number of pivots the factorization accepted at the given tolerance.
    pub effective_rank: usize,
}

/// Column-pivoted Householder QR factorization, `A·P = Q·R`.
///
/// Stored column-major so each reflector touches contiguous memory. `Q` is
/// kept implicitly as the list of Householder vectors.
struct PivotedQr {
    n: usize,
    /// Column-major factored matrix: upper triangle holds `R`.
    fact: Vec<f64>,
    /// Householder vector for each elimination step `k` (length `n − k`).
    reflectors: Vec<Vec<f64>>,
    /// `beta = 2 / vᵀv` for each reflector (0 for a null step).
    betas: Vec<f64>,
    /// `perm[k]` = original column index now sitting at position `k`.
    perm: Vec<usize>,
}

impl PivotedQr {
    fn factor(a: &Matrix) -> Self {
        let n = a.rows;
        let m = a.cols;
        let mut fact = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                fact[i + j * n] = a.get(i, j);
            }
        }
        let mut perm: Vec<usize> = (0..m).collect();
        let steps = n.min(m);
        let mut reflectors = Vec::with_capacity(steps);
        let mut betas = Vec::with_capacity(steps);

        for k in 0..steps {
            // Greedy pivot: bring the trailing column with the largest
            // remaining norm to position k. Norms are recomputed from scratch
            // each step — O(nm) extra per step is irrelevant at this scale and
            // avoids the classic downdating drift.
            let mut best = k;
            let mut best_norm = -1.0;
            for j in k..m {
                let col = &fact[j * n..j * n + n];
                let norm: f64 = col[k..].iter().map(|x| x * x).sum();
                if norm > best_norm {
                    best_norm = norm;
                    best = j;
                }
            }
            if best != k {
                let (lo, hi) = (k.min(best), k.max(best));
                let (left, right) = fact.split_at_mut(hi * n);
                left[lo * n..lo * n + n].swap_with_slice(&mut right[..n]);
                perm.swap(k, best);
            }

            // Householder vector annihilating column k below the diagonal.
            let col = &fact[k * n..k * n + n];
            let xnorm: f64 = col[k..].iter().map(|x| x * x).sum::<f64>().sqrt();
            if xnorm == 0.0 {
                reflectors.push(Vec::new());
                betas.push(0.0);
                continue;
            }
            let x0 = col[k];
            let alpha = if x0 >= 0.0 { -xnorm } else { xnorm };
            let mut v: Vec<f64> = col[k..].to_vec();
            v[0] -= alpha;
            let vtv: f64 = v.iter().map(|x| x * x).sum();
            let beta = if vtv > 0.0 { 2.0 / vtv } else { 0.0 };

            // Apply (I − beta v vᵀ) to the trailing columns, then write the
            // eliminated column explicitly.
            for j in (k + 1)..m {
                let cj = &mut fact[j * n..j * n + n];
                let dot: f64 = v.iter().zip(&cj[k..]).map(|(a, b)| a * b).sum();
                let scale = beta * dot;
                for (vi, c) in v.iter().zip(&mut cj[k..]) {
                    *c -= scale * vi;
                }
            }
            let ck = &mut fact[k * n..k * n + n];
            ck[k] = alpha;
            for c in &mut ck[k + 1..] {
                *c = 0.0;
            }
            reflectors.push(v);
            betas.push(beta);
        }

        Self {
            n,
            fact,
            reflectors,
            betas,
            perm,
        }
    }

    /// `R[k][k]` for each elimination step.
    fn diagonal(&self) -> Vec<f64> {
        (0..self.reflectors.len())
            .map(|k| self.fact[k + k * self.n])
            .collect()
    }

    /// Pivot count at relative tolerance `tol`: entries exceeding
    /// `tol × (largest |diagonal|)`.
    fn rank(&self, tol: f64) -> usize {
        let diag = self.diagonal();
        let largest = diag.iter().fold(0.0_f64, |acc, d| acc.max(d.abs()));
        if largest == 0.0 {
            return 0;
        }
        diag.iter().filter(|d| d.abs() > tol * largest).count()
    }

    /// Applies `Qᵀ` in place to a column-major `n × p` block.
    fn apply_qt(&self, b: &mut [f64], p: usize) {
        let n = self.n;
        for (k, v) in self.reflectors.iter().enumerate() {
            if v.is_empty() {
                continue;
            }
            let beta = self.betas[k];
            for j in 0..p {
                let cj = &mut b[j * n..j * n + n];
                let dot: f64 = v.iter().zip(&cj[k..]).map(|(a, b)| a * b).sum();
                let scale = beta * dot;
                for (vi, c) in v.iter().zip(&mut cj[k..]) {
                    *c -= scale * vi;
                }
            }
        }
    }
}

/// Unpivoted Householder QR of a column-major `n × m` block (`n ≥ m`),
/// used for the second stage of the complete orthogonal decomposition.
struct PlainQr {
    n: usize,
    fact: Vec<f64>,
    reflectors: Vec<Vec<f64>>,
    betas: Vec<f64>,
}

impl PlainQr {
    fn factor(n: usize, m: usize, mut fact: Vec<f64>) -> Self {
        let steps = n.min(m);
        let mut reflectors = Vec::with_capacity(steps);
        let mut betas = Vec::with_capacity(steps);
        for k in 0..steps {
            let col = &fact[k * n..k * n + n];
            let xnorm: f64 = col[k..].iter().map(|x| x * x).sum::<f64>().sqrt();
            if xnorm == 0.0 {
                reflectors.push(Vec::new());
                betas.push(0.0);
                continue;
            }
            let x0 = col[k];
            let alpha = if x0 >= 0.0 { -xnorm } else { xnorm };
            let mut v: Vec<f64> = col[k..].to_vec();
            v[0] -= alpha;
            let vtv: f64 = v.iter().map(|x| x * x).sum();
            let beta = if vtv > 0.0 { 2.0 / vtv } else { 0.0 };
            for j in (k + 1)..m {
                let cj = &mut fact[j * n..j * n + n];
                let dot: f64 = v.iter().zip(&cj[k..]).map(|(a, b)| a * b).sum();
                let scale = beta * dot;
                for (vi, c) in v.iter().zip(&mut cj[k..]) {
                    *c -= scale * vi;
                }
            }
            let ck = &mut fact[k * n..k * n + n];
            ck[k] = alpha;
            for c in &mut ck[k + 1..] {
                *c = 0.0;
            }
            reflectors.push(v);
            betas.push(beta);
        }
        Self {
            n,
            fact,
            reflectors,
            betas,
        }
    }

    /// Applies `Q` (not transposed) in place to a column-major `n × p` block.
    fn apply_q(&self, b: &mut [f64], p: usize) {
        let n = self.n;
        for (k, v) in self.reflectors.iter().enumerate().rev() {
            if v.is_empty() {
                continue;
            }
            let beta = self.betas[k];
            for j in 0..p {
                let cj = &mut b[j * n..j * n + n];
                let dot: f64 = v.iter().zip(&cj[k..]).map(|(a, b)| a * b).sum();
                let scale = beta * dot;
                for (vi, c) in v.iter().zip(&mut cj[k..]) {
                    *c -= scale * vi;
                }
            }
        }
    }
}

/// Minimum-norm least-squares solve of `A X = B` via a complete orthogonal
/// decomposition (column-pivoted QR of `A`, then QR of the leading block of
/// `Rᵀ`).
///
/// `rank_tol` is the relative pivot tolerance deciding the effective rank;
/// [`default_rank_tol`] is a sensible default. Among all minimizers of
/// `‖A X − B‖_F` the returned `X` has minimal Frobenius norm, which is what
/// makes under-determined feature-fit systems well-posed.
pub fn solve_least_squares(a: &Matrix, b: &Matrix, rank_tol: f64) -> Result<LsSolution> {
    if a.rows() != b.rows() {
        return Err(Error::ShapeMismatch(format!(
            "system matrix has {} rows but right-hand side has {}",
            a.rows(),
            b.rows()
        )));
    }
    if a.rows() == 0 || a.cols() == 0 || b.cols() == 0 {
        return Err(Error::InvalidInput(
            "least-squares solve requires non-empty matrices".into(),
        ));
    }
    if !(rank_tol > 0.0 && rank_tol.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "rank_tol must be a positive finite real, got {rank_tol}"
        )));
    }

    let n = a.rows();
    let m = a.cols();
    let p = b.cols();
    let qr = PivotedQr::factor(a);
    let r = qr.rank(rank_tol);

    let mut x = Matrix::zeros(m, p);
    if r > 0 {
        // c = Qᵀ B, column-major.
        let mut c = vec![0.0; n * p];
        for i in 0..n {
            for j in 0..p {
                c[i + j * n] = b.get(i, j);
            }
        }
        qr.apply_qt(&mut c, p);

        // Leading r×m block of R, transposed into an m×r column-major block,
        // then factored R1ᵀ = Q₂ U with U upper-triangular r×r.
        let mut r1t = vec![0.0; m * r];
        for k in 0..r {
            for j in k..m {
                // R[k][j] lives at fact[k + j*n]; R1ᵀ[j][k] at [j + k*m].
                r1t[j + k * m] = qr.fact[k + j * n];
            }
        }
        let coq = PlainQr::factor(m, r, r1t);

        // Forward-substitute Uᵀ w = c₁ (Uᵀ is lower triangular).
        let mut y = vec![0.0; m * p];
        for j in 0..p {
            for i in 0..r {
                let mut s = c[i + j * n];
                for k in 0..i {
                    s -= coq.fact[k + i * m] * y[k + j * m];
                }
                let uii = coq.fact[i + i * m];
                if uii == 0.0 {
                    return Err(Error::Numerical(
                        "orthogonal factorization lost rank during the minimum-norm stage".into(),
                    ));
                }
                y[i + j * m] = s / uii;
            }
        }

        // Minimum-norm solution in pivoted coordinates: Q₂ [w; 0].
        coq.apply_q(&mut y, p);

        // Undo the column permutation.
        for k in 0..m {
            for j in 0..p {
                x.set(qr.perm[k], j, y[k + j * m]);
            }
        }
    }

    let residual_norm = a.matmul(&x)?.sub(b)?.frobenius_norm();
    Ok(LsSolution {
        solution: x,
        residual_norm,
        effective_rank: r,
    })
}

/// Numerical rank of `A`: the number of column-pivoted factorization pivots
/// whose magnitude exceeds `tol × (largest pivot)`.
pub fn numerical_rank(a: &Matrix, tol: f64) -> Result<usize> {
    if a.rows() == 0 || a.cols() == 0 {
        return Err(Error::InvalidInput(
            "numerical rank of an empty matrix is undefined".into(),
        ));
    }
    if !(tol > 0.0 && tol.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "tolerance must be a positive finite real, got {tol}"
        )));
    }
    Ok(PivotedQr::factor(a).rank(tol))
}

/// Determinant of a square matrix via partially pivoted LU elimination.
///
/// Rejects matrices larger than [`MAX_DET_DIM`]: beyond that the determinant
/// magnitude routinely leaves `f64` range and says nothing useful.
pub fn determinant(a: &Matrix) -> Result<f64> {
    if a.rows() != a.cols() {
        return Err(Error::ShapeMismatch(format!(
            "determinant requires a square matrix, got {}×{}",
            a.rows(),
            a.cols()
        )));
    }
    let n = a.rows();
    if n > MAX_DET_DIM {
        return Err(Error::Unsupported(format!(
            "determinant guard: {n}×{n} exceeds the supported maximum of {MAX_DET_DIM}"
        )));
    }
    if n == 0 {
        return Ok(1.0);
    }

    let mut w = a.data.clone();
    let mut sign = 1.0_f64;
    let mut det = 1.0_f64;
    for k in 0..n {
        // Partial pivot: largest magnitude in column k at or below the diagonal.
        let mut piv = k;
        let mut piv_abs = w[k * n + k].abs();
        for i in (k + 1)..n {
            let cand = w[i * n + k].abs();
            if cand > piv_abs {
                piv_abs = cand;
                piv = i;
            }
        }
        if piv_abs == 0.0 {
            return Ok(0.0);
        }
        if piv != k {
            let (lo, hi) = w.split_at_mut(piv * n);
            lo[k * n..k * n + n].swap_with_slice(&mut hi[..n]);
            sign = -sign;
        }
        let pivot = w[k * n + k];
        det *= pivot;
        for i in (k + 1)..n {
            let factor = w[i * n + k] / pivot;
            if factor == 0.0 {
                continue;
            }
            let (pk, pi) = {
                let (lo, hi) = w.split_at_mut(i * n);
                (&lo[k * n..k * n + n], &mut hi[..n])
            };
            for j in (k + 1)..n {
                pi[j] -= factor * pk[j];
            }
            pi[k] = 0.0;
        }
    }
    Ok(sign * det)
}
