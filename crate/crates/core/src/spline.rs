//! B-spline design blocks, difference penalties and ANOVA-constrained tensor
//! interaction bases.
//!
//! Every smooth term of the perception model is expanded in a B-spline basis
//! evaluated with the Cox–de Boor recursion. Roughness is controlled with a
//! P-spline difference penalty; the null space of that penalty can be
//! penalized separately so that a term may shrink to exactly zero.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg;

/// Relative eigenvalue tolerance used to decide whether a penalty direction is
/// unpenalized.
pub const NULL_SPACE_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SplineError {
    #[error("non-finite sample {value} at index {index}")]
    NonFiniteSample { index: usize, value: f64 },

    #[error("{num_basis} basis functions are too few for a degree-{degree} spline (need at least {})", degree + 2)]
    TooFewBasisFunctions { degree: usize, num_basis: usize },

    #[error("invalid range [{0}, {1}]: lower bound must be below upper bound")]
    InvalidRange(f64, f64),

    #[error("difference order {order} must be 1 or 2 and below the basis size {num_basis}")]
    InvalidPenaltyOrder { order: usize, num_basis: usize },

    #[error("design blocks have mismatched row counts ({0} vs {1})")]
    RowMismatch(usize, usize),

    #[error("eigendecomposition of a {0}x{0} penalty did not produce finite values")]
    Eigendecomposition(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum KnotPlacement {
    #[default]
    UniformOverRange,
    Quantile,
}

/// Configuration of one spline expansion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub covariate: String,
    pub degree: usize,
    pub num_basis: usize,
    pub knot_placement: KnotPlacement,
    pub range: (f64, f64),
}

impl BasisSpec {
    pub fn new(covariate: impl Into<String>, num_basis: usize, range: (f64, f64)) -> Self {
        Self {
            covariate: covariate.into(),
            degree: 3,
            num_basis,
            knot_placement: KnotPlacement::UniformOverRange,
            range,
        }
    }

    pub fn with_degree(mut self, degree: usize) -> Self {
        self.degree = degree;
        self
    }

    pub fn with_knots(mut self, placement: KnotPlacement) -> Self {
        self.knot_placement = placement;
        self
    }

    pub fn validate(&self) -> Result<(), SplineError> {
        if self.num_basis < self.degree + 2 {
            return Err(SplineError::TooFewBasisFunctions {
                degree: self.degree,
                num_basis: self.num_basis,
            });
        }
        let (lo, hi) = self.range;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(SplineError::InvalidRange(lo, hi));
        }
        Ok(())
    }
}

/// A B-spline basis with a realized knot vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineBasis {
    pub spec: BasisSpec,
    pub knots: Vec<f64>,
}

/// Nonzero basis values at one point: `values[j]` belongs to basis function
/// `first + j`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseBasisRow {
    pub first: usize,
    pub values: Vec<f64>,
}

impl SplineBasis {
    /// Realizes the knot vector. Quantile placement uses `samples`; uniform
    /// placement ignores them.
    pub fn new(spec: BasisSpec, samples: &[f64]) -> Result<Self, SplineError> {
        spec.validate()?;
        check_finite(samples)?;
        let knots = match spec.knot_placement {
            KnotPlacement::UniformOverRange => uniform_knots(&spec),
            KnotPlacement::Quantile => match quantile_knots(&spec, samples) {
                Some(knots) => knots,
                None => {
                    log::warn!(
                        "quantile knots for '{}' collapse on tied samples; using uniform knots",
                        spec.covariate
                    );
                    uniform_knots(&spec)
                }
            },
        };
        Ok(Self { spec, knots })
    }

    pub fn num_basis(&self) -> usize {
        self.spec.num_basis
    }

    pub fn clamp(&self, x: f64) -> f64 {
        x.clamp(self.spec.range.0, self.spec.range.1)
    }

    /// Index `mu` of the knot span `[t_mu, t_mu+1)` containing `x` (already
    /// clamped). The right end of the range belongs to the last span.
    fn span(&self, x: f64) -> usize {
        let d = self.spec.degree;
        let k = self.spec.num_basis;
        let t = &self.knots;
        let mut lo = d;
        let mut hi = k - 1;
        if x >= t[hi] {
            // Skip zero-width spans at the top (clamped knots).
            while hi > d && t[hi] >= t[hi + 1] {
                hi -= 1;
            }
            return hi;
        }
        while lo < hi {
            let mid = (lo + hi).div_ceil(2);
            if t[mid] <= x {
                lo = mid;
            } else {
                hi = mid - 1;
            }
        }
        lo
    }

    /// The `degree + 1` nonzero basis values on the given span at `x`.
    pub(crate) fn eval_on_span(&self, x: f64, mu: usize) -> Vec<f64> {
        let d = self.spec.degree;
        let t = &self.knots;
        let mut n = vec![0.0; d + 1];
        let mut left = vec![0.0; d + 1];
        let mut right = vec![0.0; d + 1];
        n[0] = 1.0;
        for j in 1..=d {
            left[j] = x - t[mu + 1 - j];
            right[j] = t[mu + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                let denom = right[r + 1] + left[j - r];
                let temp = if denom == 0.0 { 0.0 } else { n[r] / denom };
                n[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            n[j] = saved;
        }
        n
    }

    /// Nonzero basis values at `x`; out-of-range inputs are clamped.
    pub fn eval_sparse(&self, x: f64) -> SparseBasisRow {
        let x = self.clamp(x);
        let mu = self.span(x);
        SparseBasisRow {
            first: mu - self.spec.degree,
            values: self.eval_on_span(x, mu),
        }
    }

    pub fn eval_row(&self, x: f64) -> DVector<f64> {
        let sparse = self.eval_sparse(x);
        let mut row = DVector::zeros(self.num_basis());
        for (j, v) in sparse.values.iter().enumerate() {
            row[sparse.first + j] = *v;
        }
        row
    }

    /// Dense `n x k` design block.
    pub fn design(&self, x: &[f64]) -> Result<DMatrix<f64>, SplineError> {
        check_finite(x)?;
        let mut out = DMatrix::zeros(x.len(), self.num_basis());
        for (i, &xi) in x.iter().enumerate() {
            let sparse = self.eval_sparse(xi);
            for (j, v) in sparse.values.iter().enumerate() {
                out[(i, sparse.first + j)] = *v;
            }
        }
        Ok(out)
    }
}

fn check_finite(x: &[f64]) -> Result<(), SplineError> {
    match x.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(SplineError::NonFiniteSample { index, value: x[index] }),
        None => Ok(()),
    }
}

/// Equally spaced knots extended `degree` intervals beyond both ends of the
/// range, so that every basis function has the same shape.
fn uniform_knots(spec: &BasisSpec) -> Vec<f64> {
    let d = spec.degree;
    let k = spec.num_basis;
    let (lo, hi) = spec.range;
    let intervals = (k - d) as f64;
    let h = (hi - lo) / intervals;
    let mut knots: Vec<f64> = (0..k + d + 1)
        .map(|j| lo + (j as f64 - d as f64) * h)
        .collect();
    // Pin the range ends exactly; the arithmetic above can be off by an ulp.
    knots[d] = lo;
    knots[k] = hi;
    knots
}

/// Clamped knots with interior knots at sample quantiles. Returns `None` when
/// ties make two consecutive knots coincide.
fn quantile_knots(spec: &BasisSpec, samples: &[f64]) -> Option<Vec<f64>> {
    let d = spec.degree;
    let k = spec.num_basis;
    let (lo, hi) = spec.range;
    let mut sorted: Vec<f64> = samples.iter().map(|v| v.clamp(lo, hi)).collect();
    if sorted.is_empty() {
        return None;
    }
    sorted.sort_by(f64::total_cmp);
    let interior = k - d - 1;
    let mut knots = vec![lo; d + 1];
    for j in 1..=interior {
        let p = j as f64 / (interior + 1) as f64;
        knots.push(quantile_sorted(&sorted, p));
    }
    knots.extend(std::iter::repeat_n(hi, d + 1));
    let strictly_inside = knots[d..=k].windows(2).all(|w| w[0] < w[1]);
    strictly_inside.then_some(knots)
}

fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lower = pos.floor() as usize;
    let upper = pos.ceil() as usize;
    let frac = pos - lower as f64;
    sorted[lower] + frac * (sorted[upper] - sorted[lower])
}

/// Builds the `n x k` B-spline design block for `x` under `spec`.
pub fn build_bspline_basis(x: &[f64], spec: &BasisSpec) -> Result<DMatrix<f64>, SplineError> {
    SplineBasis::new(spec.clone(), x)?.design(x)
}

/// A symmetric positive semi-definite penalty with a known null space size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyMatrix {
    #[serde(with = "crate::linalg::matrix_serde")]
    pub matrix: DMatrix<f64>,
    pub null_space_dim: usize,
}

impl PenaltyMatrix {
    /// Wraps a symmetric matrix, counting its null space numerically.
    pub fn from_matrix(matrix: DMatrix<f64>) -> Result<Self, SplineError> {
        let n = matrix.nrows();
        let eig = SymmetricEigen::new(matrix.clone());
        if eig.eigenvalues.iter().any(|v| !v.is_finite()) {
            return Err(SplineError::Eigendecomposition(n));
        }
        let tol = null_tolerance(&eig.eigenvalues);
        let null_space_dim = eig.eigenvalues.iter().filter(|&&v| v.abs() <= tol).count();
        Ok(Self { matrix, null_space_dim })
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn quadratic_form(&self, beta: &DVector<f64>) -> f64 {
        beta.dot(&(&self.matrix * beta))
    }
}

fn null_tolerance(eigenvalues: &DVector<f64>) -> f64 {
    let max = eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max == 0.0 {
        f64::MIN_POSITIVE
    } else {
        NULL_SPACE_TOL * max
    }
}

/// `D'D` for the `order`-th forward-difference operator on `k` coefficients.
pub fn difference_penalty_matrix(num_basis: usize, order: usize) -> Result<DMatrix<f64>, SplineError> {
    if !(1..=2).contains(&order) || order >= num_basis {
        return Err(SplineError::InvalidPenaltyOrder { order, num_basis });
    }
    let mut d = DMatrix::<f64>::identity(num_basis, num_basis);
    for _ in 0..order {
        let rows = d.nrows() - 1;
        let mut next = DMatrix::zeros(rows, num_basis);
        for i in 0..rows {
            let diff = d.row(i + 1) - d.row(i);
            next.set_row(i, &diff);
        }
        d = next;
    }
    Ok(d.transpose() * d)
}

pub fn difference_penalty(spec: &BasisSpec, order: usize) -> Result<PenaltyMatrix, SplineError> {
    let matrix = difference_penalty_matrix(spec.num_basis, order)?;
    Ok(PenaltyMatrix { matrix, null_space_dim: order })
}

/// Projector onto the null space of `p`. Adding a multiple of it to `p`
/// penalizes the directions `p` leaves free.
pub fn null_space_penalty(p: &PenaltyMatrix) -> Result<PenaltyMatrix, SplineError> {
    let n = p.dim();
    let eig = SymmetricEigen::new(p.matrix.clone());
    if eig.eigenvalues.iter().any(|v| !v.is_finite()) {
        return Err(SplineError::Eigendecomposition(n));
    }
    let tol = null_tolerance(&eig.eigenvalues);
    let mut proj = DMatrix::zeros(n, n);
    let mut rank = 0;
    for (j, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda.abs() <= tol {
            let u = eig.eigenvectors.column(j);
            proj += u * u.transpose();
            rank += 1;
        }
    }
    linalg::symmetrize(&mut proj);
    Ok(PenaltyMatrix {
        matrix: proj,
        null_space_dim: n - rank,
    })
}

/// Orthonormal `k x (k-1)` basis of the directions whose fitted values sum to
/// zero over the training sample (Householder reflection of the column sums).
pub fn sum_to_zero_constraint(design: &DMatrix<f64>) -> DMatrix<f64> {
    let k = design.ncols();
    let sums = DVector::from_iterator(k, design.column_iter().map(|c| c.sum()));
    householder_complement(&sums)
}

pub(crate) fn householder_complement(c: &DVector<f64>) -> DMatrix<f64> {
    let k = c.len();
    let norm = c.norm();
    if norm == 0.0 {
        return DMatrix::identity(k, k).columns(1, k - 1).into_owned();
    }
    let mut u = c / norm;
    let sign = if u[0] >= 0.0 { 1.0 } else { -1.0 };
    u[0] += sign;
    let un = u.norm();
    u /= un;
    let h = DMatrix::identity(k, k) - 2.0 * &u * u.transpose();
    h.columns(1, k - 1).into_owned()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TensorConstraint {
    #[default]
    AnovaCentered,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub marginal_a: BasisSpec,
    pub marginal_b: BasisSpec,
    pub constraint: TensorConstraint,
    #[serde(default = "default_penalty_order")]
    pub penalty_order: usize,
}

fn default_penalty_order() -> usize {
    2
}

impl TensorSpec {
    pub fn new(marginal_a: BasisSpec, marginal_b: BasisSpec) -> Self {
        Self {
            marginal_a,
            marginal_b,
            constraint: TensorConstraint::AnovaCentered,
            penalty_order: 2,
        }
    }
}

/// Linear map taking the raw row-wise Kronecker row of a point to its
/// constrained interaction row: `t(x) = (kron(a, b) - [a, b, 1] G) Z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorTransform {
    #[serde(with = "crate::linalg::matrix_serde")]
    pub main_effects: DMatrix<f64>,
    #[serde(with = "crate::linalg::matrix_serde")]
    pub reparam: DMatrix<f64>,
}

impl TensorTransform {
    pub fn ncols(&self) -> usize {
        self.reparam.ncols()
    }

    pub fn apply(&self, a_row: &DVector<f64>, b_row: &DVector<f64>) -> DVector<f64> {
        let ka = a_row.len();
        let kb = b_row.len();
        let mut raw = DVector::zeros(ka * kb);
        for i in 0..ka {
            for j in 0..kb {
                raw[i * kb + j] = a_row[i] * b_row[j];
            }
        }
        let mut main = DVector::zeros(ka + kb + 1);
        main.rows_mut(0, ka).copy_from(a_row);
        main.rows_mut(ka, kb).copy_from(b_row);
        main[ka + kb] = 1.0;
        let resid = raw - self.main_effects.transpose() * main;
        self.reparam.transpose() * resid
    }
}

/// An ANOVA-constrained tensor interaction block with its two penalties.
#[derive(Debug, Clone)]
pub struct TensorBasis {
    pub design: DMatrix<f64>,
    /// Penalties in the constrained parameterization, one per marginal.
    pub penalties: [PenaltyMatrix; 2],
    /// `S_a (x) I` and `I (x) S_b` on the unconstrained Kronecker coefficients.
    pub lifted_penalties: [DMatrix<f64>; 2],
    pub transform: TensorTransform,
}

/// Row-wise Kronecker product of two design blocks.
pub fn row_kronecker(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>, SplineError> {
    if a.nrows() != b.nrows() {
        return Err(SplineError::RowMismatch(a.nrows(), b.nrows()));
    }
    let (ka, kb) = (a.ncols(), b.ncols());
    let mut out = DMatrix::zeros(a.nrows(), ka * kb);
    for r in 0..a.nrows() {
        for i in 0..ka {
            let ai = a[(r, i)];
            if ai == 0.0 {
                continue;
            }
            for j in 0..kb {
                out[(r, i * kb + j)] = ai * b[(r, j)];
            }
        }
    }
    Ok(out)
}

/// Builds the interaction block of two marginal design blocks on the same
/// sample. The raw row-wise Kronecker product is projected onto the orthogonal
/// complement of the constant and both marginal blocks, then reparameterized
/// onto the surviving column space.
pub fn tensor_interaction_basis(
    a_block: &DMatrix<f64>,
    b_block: &DMatrix<f64>,
    spec: &TensorSpec,
) -> Result<TensorBasis, SplineError> {
    let n = a_block.nrows();
    if n != b_block.nrows() {
        return Err(SplineError::RowMismatch(n, b_block.nrows()));
    }
    let (ka, kb) = (a_block.ncols(), b_block.ncols());
    let raw = row_kronecker(a_block, b_block)?;

    // The constant column is appended explicitly so that the constraint also
    // holds for blocks that are not partitions of unity.
    let mut main = DMatrix::zeros(n, ka + kb + 1);
    main.columns_mut(0, ka).copy_from(a_block);
    main.columns_mut(ka, kb).copy_from(b_block);
    main.column_mut(ka + kb).fill(1.0);
    let mut main_effects = linalg::least_squares(&main, &raw);
    let mut resid = &raw - &main * &main_effects;
    // One refinement pass brings the orthogonality down to rounding level.
    let correction = linalg::least_squares(&main, &resid);
    resid -= &main * &correction;
    main_effects += correction;

    let gram = resid.transpose() * &resid;
    let eig = SymmetricEigen::new(gram);
    let max = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let keep: Vec<usize> = (0..eig.eigenvalues.len())
        .filter(|&j| max > 0.0 && eig.eigenvalues[j] > NULL_SPACE_TOL * max)
        .collect();
    let mut reparam = DMatrix::zeros(ka * kb, keep.len());
    for (c, &j) in keep.iter().enumerate() {
        reparam.set_column(c, &eig.eigenvectors.column(j));
    }
    let design = &resid * &reparam;

    let sa = difference_penalty_matrix(ka, spec.penalty_order.min(ka.saturating_sub(1)).max(1))
        .unwrap_or_else(|_| DMatrix::zeros(ka, ka));
    let sb = difference_penalty_matrix(kb, spec.penalty_order.min(kb.saturating_sub(1)).max(1))
        .unwrap_or_else(|_| DMatrix::zeros(kb, kb));
    let lifted_a = sa.kronecker(&DMatrix::<f64>::identity(kb, kb));
    let lifted_b = DMatrix::<f64>::identity(ka, ka).kronecker(&sb);
    let pa = reparam.transpose() * &lifted_a * &reparam;
    let pb = reparam.transpose() * &lifted_b * &reparam;

    Ok(TensorBasis {
        design,
        penalties: [
            PenaltyMatrix::from_matrix(linalg::symmetrized(pa))?,
            PenaltyMatrix::from_matrix(linalg::symmetrized(pb))?,
        ],
        lifted_penalties: [lifted_a, lifted_b],
        transform: TensorTransform { main_effects, reparam },
    })
}
