//! Dense symmetric kernels: the generalized symmetric-definite eigenproblem,
//! thin SVD, Moore-Penrose pseudoinverse and orthogonal projectors.
//!
//! The pencil `(a, b)` is reduced to an ordinary symmetric problem by
//! whitening with the eigendecomposition of `b`. A scale-aware ridge
//! `RIDGE_REL * trace(b) / d` is added to `b` first and directions of `b`
//! below `WHITEN_CUTOFF_REL * λ_max(b)` are discarded, so near-singular
//! covariance estimates never hit a factorization failure.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{NtpsError, Result};
use crate::scalar::Scalar;

/// Relative ridge added to the right-hand side of every pencil.
pub const RIDGE_REL: f64 = 1e-8;
/// Whitening discards eigen-directions of `b` below this fraction of its largest eigenvalue.
pub const WHITEN_CUTOFF_REL: f64 = 1e-12;
/// Eigenvalues of the ridged `b` below `-INDEFINITE_REL * max|λ|` mean `b` is indefinite.
pub const INDEFINITE_REL: f64 = 1e-9;
/// Relative symmetry tolerance for [`SymMatrix::new`].
pub const SYMMETRY_TOL: f64 = 1e-8;

/// A square matrix known to be symmetric with finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix<T: Scalar>(DMatrix<T>);

impl<T: Scalar> SymMatrix<T> {
    /// Validates symmetry within `1e-8 · max(1, max|entry|)` and stores the exact
    /// symmetric part.
    pub fn new(m: DMatrix<T>) -> Result<Self> {
        if !m.is_square() {
            return Err(NtpsError::DimensionMismatch(format!(
                "symmetric matrix must be square, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        if m.iter().any(|x| !x.is_finite()) {
            return Err(NtpsError::NonFinite);
        }
        let scale = m.iter().fold(T::one(), |acc, x| acc.max(x.abs()));
        let asym = (&m - m.transpose()).iter().fold(T::zero(), |acc, x| acc.max(x.abs()));
        if asym > T::lit(SYMMETRY_TOL) * scale {
            return Err(NtpsError::NotSymmetric { asymmetry: asym.as_f64() });
        }
        Ok(Self::from_symmetrized(m))
    }

    /// Takes `(m + mᵀ) / 2` without checking how far `m` was from symmetric.
    pub fn from_symmetrized(m: DMatrix<T>) -> Self {
        let half = T::lit(0.5);
        let t = m.transpose();
        SymMatrix((m + t) * half)
    }

    pub fn zeros(d: usize) -> Self {
        SymMatrix(DMatrix::zeros(d, d))
    }

    pub fn identity(d: usize) -> Self {
        SymMatrix(DMatrix::identity(d, d))
    }

    pub fn from_diagonal(diag: &[T]) -> Self {
        SymMatrix(DMatrix::from_diagonal(&DVector::from_column_slice(diag)))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<T> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<T> {
        self.0
    }

    pub fn trace(&self) -> T {
        self.0.trace()
    }
}

/// Eigenvectors as columns with eigenvalues in descending order.
#[derive(Debug, Clone, PartialEq)]
pub struct EigPair<T: Scalar> {
    pub vectors: DMatrix<T>,
    pub values: DVector<T>,
}

impl<T: Scalar> EigPair<T> {
    pub fn k(&self) -> usize {
        self.values.len()
    }
}

/// Top-k solution of a pencil together with the regularization that was applied.
#[derive(Debug, Clone, PartialEq)]
pub struct Gevp<T: Scalar> {
    pub pair: EigPair<T>,
    /// Ridge added to the diagonal of `b`.
    pub ridge: T,
    /// Number of whitened directions kept.
    pub retained: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegularizationInfo {
    pub ridge: f64,
    pub ridge_rel: f64,
    pub retained: usize,
}

impl<T: Scalar> Gevp<T> {
    pub fn info(&self) -> RegularizationInfo {
        RegularizationInfo { ridge: self.ridge.as_f64(), ridge_rel: RIDGE_REL, retained: self.retained }
    }
}

/// Full eigendecomposition of a symmetric matrix, eigenvalues descending.
///
/// Ties keep the order produced by the underlying solver (stable sort).
pub fn sym_eigen<T: Scalar>(m: &SymMatrix<T>) -> EigPair<T> {
    let d = m.dim();
    let eig = SymmetricEigen::new(m.as_matrix().clone());
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| {
        eig.eigenvalues[j].partial_cmp(&eig.eigenvalues[i]).unwrap_or(std::cmp::Ordering::Equal)
    });
    let values = DVector::from_iterator(d, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(d, d);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    EigPair { vectors, values }
}

/// Flips each column so its largest-magnitude entry is positive.
/// The first index wins among equal magnitudes.
pub fn fix_signs<T: Scalar>(m: &mut DMatrix<T>) {
    for mut col in m.column_iter_mut() {
        let mut best = T::zero();
        let mut sign_neg = false;
        for x in col.iter() {
            if x.abs() > best {
                best = x.abs();
                sign_neg = *x < T::zero();
            }
        }
        if sign_neg {
            col.neg_mut();
        }
    }
}

/// Top-k eigenpairs of `a v = λ b v` with `b`-orthonormal eigenvectors.
pub fn solve_gevp<T: Scalar>(a: &SymMatrix<T>, b: &SymMatrix<T>, k: usize) -> Result<Gevp<T>> {
    let d = a.dim();
    if b.dim() != d {
        return Err(NtpsError::DimensionMismatch(format!(
            "pencil matrices are {}x{} and {}x{}",
            d,
            d,
            b.dim(),
            b.dim()
        )));
    }
    if k == 0 || k > d {
        return Err(NtpsError::InvalidRank { k, max: d });
    }

    let ridge = T::lit(RIDGE_REL) * b.trace().max(T::zero()) / T::from_count(d);
    let mut b_reg = b.as_matrix().clone();
    for i in 0..d {
        b_reg[(i, i)] += ridge;
    }
    let b_eig = sym_eigen(&SymMatrix(b_reg));
    let max_abs = b_eig.values.iter().fold(T::zero(), |acc, x| acc.max(x.abs()));
    let smallest = b_eig.values[d - 1];
    if smallest < -T::lit(INDEFINITE_REL) * max_abs {
        return Err(NtpsError::Indefinite { smallest: smallest.as_f64() });
    }
    let cutoff = T::lit(WHITEN_CUTOFF_REL) * b_eig.values[0];
    let retained = b_eig.values.iter().take_while(|&&mu| mu > cutoff && mu > T::zero()).count();
    if retained < k {
        return Err(NtpsError::RankDeficient { requested: k, available: retained });
    }

    // whitener: columns q_i / sqrt(μ_i) of the retained eigenbasis
    let mut whitener = b_eig.vectors.columns(0, retained).into_owned();
    for (j, mut col) in whitener.column_iter_mut().enumerate() {
        col /= b_eig.values[j].sqrt();
    }
    let reduced = SymMatrix::from_symmetrized(whitener.transpose() * a.as_matrix() * &whitener);
    let inner = sym_eigen(&reduced);

    let mut vectors = &whitener * inner.vectors.columns(0, k);
    fix_signs(&mut vectors);
    let values = inner.values.rows(0, k).into_owned();
    Ok(Gevp { pair: EigPair { vectors, values }, ridge, retained })
}

/// Thin singular value decomposition `m = u · diag(values) · vᵀ` restricted to
/// singular values above `max(r, c) · ε_machine · σ_max`, in descending order.
#[derive(Debug, Clone, PartialEq)]
pub struct ThinSvd<T: Scalar> {
    pub u: DMatrix<T>,
    pub values: DVector<T>,
    pub v: DMatrix<T>,
}

impl<T: Scalar> ThinSvd<T> {
    pub fn rank(&self) -> usize {
        self.values.len()
    }
}

/// Householder QR reduces a tall `m` to its square triangular factor `R`; the
/// singular triplets of `R` are the positive eigenpairs of `[[0, R], [Rᵀ, 0]]`,
/// whose eigenvectors are `(u; v) / √2`.
pub fn thin_svd<T: Scalar>(m: &DMatrix<T>) -> ThinSvd<T> {
    let (r, c) = m.shape();
    if r < c {
        let t = thin_svd(&m.transpose());
        return ThinSvd { u: t.v, values: t.values, v: t.u };
    }
    if c == 0 {
        return ThinSvd { u: DMatrix::zeros(r, 0), values: DVector::zeros(0), v: DMatrix::zeros(0, 0) };
    }
    let qr = m.clone().qr();
    let (q, tri) = (qr.q(), qr.r());
    let mut jordan = DMatrix::zeros(2 * c, 2 * c);
    jordan.view_mut((0, c), (c, c)).copy_from(&tri);
    jordan.view_mut((c, 0), (c, c)).copy_from(&tri.transpose());
    let eig = sym_eigen(&SymMatrix::from_symmetrized(jordan));
    let sigma_max = eig.values[0].max(T::zero());
    let cutoff = T::from_count(r) * T::default_epsilon() * sigma_max;
    let rank = (0..c).take_while(|&i| eig.values[i] > cutoff).count();
    let root2 = T::lit(std::f64::consts::SQRT_2);
    let u_tri = eig.vectors.view((0, 0), (c, rank)) * root2;
    let mut v = eig.vectors.view((c, 0), (c, rank)) * root2;
    let mut u = q * u_tri;
    // re-orthonormalize against the O(ε) mixing of each (u; v) half
    for j in 0..rank {
        let nu = u.column(j).norm();
        let nv = v.column(j).norm();
        u.column_mut(j).scale_mut(T::one() / nu);
        v.column_mut(j).scale_mut(T::one() / nv);
    }
    ThinSvd { u, values: eig.values.rows(0, rank).into_owned(), v }
}

/// Moore-Penrose pseudoinverse from [`thin_svd`], with singular values at or
/// below `max(m, n) · ε_machine · σ_max` treated as zero.
pub fn pinv<T: Scalar>(m: &DMatrix<T>) -> DMatrix<T> {
    let svd = thin_svd(m);
    let mut scaled = svd.v.clone();
    for (j, s) in svd.values.iter().enumerate() {
        scaled.column_mut(j).scale_mut(T::one() / *s);
    }
    scaled * svd.u.transpose()
}

/// Orthogonal projector `v v⁺` onto the column space of `v`.
pub fn projector<T: Scalar>(v: &DMatrix<T>) -> SymMatrix<T> {
    let u = thin_svd(v).u;
    SymMatrix::from_symmetrized(&u * u.transpose())
}

pub fn frobenius_sq<T: Scalar>(m: &DMatrix<T>) -> T {
    m.iter().fold(T::zero(), |acc, x| acc + *x * *x)
}

/// Solves `inner · x = rhs` for a symmetric positive semi-definite `inner`.
///
/// Tries a plain Cholesky factorization first and falls back to a relative
/// ridge of `RIDGE_REL · trace / k` before reporting [`NtpsError::Singular`].
pub fn solve_psd<T: Scalar>(inner: &DMatrix<T>, rhs: &DMatrix<T>) -> Result<DMatrix<T>> {
    let k = inner.nrows();
    if inner.ncols() != k || rhs.nrows() != k {
        return Err(NtpsError::DimensionMismatch(format!(
            "system {}x{} with right-hand side {}x{}",
            inner.nrows(),
            inner.ncols(),
            rhs.nrows(),
            rhs.ncols()
        )));
    }
    let sym = SymMatrix::from_symmetrized(inner.clone()).into_inner();
    if let Some(ch) = Cholesky::new(sym.clone()) {
        let x = ch.solve(rhs);
        if x.iter().all(|v| v.is_finite()) {
            return Ok(x);
        }
    }
    let tr = sym.trace();
    if !(tr > T::zero()) {
        return Err(NtpsError::Singular);
    }
    let mut ridged = sym;
    let ridge = T::lit(RIDGE_REL) * tr / T::from_count(k);
    for i in 0..k {
        ridged[(i, i)] += ridge;
    }
    let ch = Cholesky::new(ridged).ok_or(NtpsError::Singular)?;
    let x = ch.solve(rhs);
    if x.iter().all(|v| v.is_finite()) {
        Ok(x)
    } else {
        Err(NtpsError::Singular)
    }
}
