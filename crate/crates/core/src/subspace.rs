//! Perception and autoregressive subspaces, the alignment score between them,
//! closed-form decoders and the excess-loss bounds.

use nalgebra::{DMatrix, DVector};

use crate::error::{NtpsError, Result};
use crate::linalg::{frobenius_sq, projector, solve_gevp, solve_psd, sym_eigen, RegularizationInfo, SymMatrix};
use crate::scalar::Scalar;
use crate::stats::{Moments, Pooling};

/// Scores within this distance outside `[0, 1]` are clamped; further out is an error.
pub const NTPS_CLAMP_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubspaceKind {
    Perception,
    Autoregressive,
}

/// A `d × k` encoder basis, orthonormal with respect to its pencil's right-hand matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Subspace<T: Scalar> {
    pub basis: DMatrix<T>,
    /// Generalized eigenvalues, descending.
    pub eigenvalues: DVector<T>,
    pub kind: SubspaceKind,
    /// Pooling of the perception pencil; `None` for autoregressive subspaces.
    pub pooling: Option<Pooling>,
    pub regularization: RegularizationInfo,
}

impl<T: Scalar> Subspace<T> {
    pub fn k(&self) -> usize {
        self.basis.ncols()
    }

    pub fn dim(&self) -> usize {
        self.basis.nrows()
    }

    /// Keeps the leading `k` directions.
    pub fn truncate(&self, k: usize) -> Result<Self> {
        if k == 0 || k > self.k() {
            return Err(NtpsError::InvalidRank { k, max: self.k() });
        }
        Ok(Self {
            basis: self.basis.columns(0, k).into_owned(),
            eigenvalues: self.eigenvalues.rows(0, k).into_owned(),
            ..self.clone()
        })
    }
}

/// Maps a rank proportion to an integer rank: `max(1, round(p · d))`, capped at `d`.
pub fn k_from_proportion(proportion: f64, d: usize) -> Result<usize> {
    if !(proportion > 0.0 && proportion <= 1.0) {
        return Err(NtpsError::InvalidConfig(format!("rank proportion {proportion} must lie in (0, 1]")));
    }
    Ok(((proportion * d as f64).round() as usize).clamp(1, d.max(1)))
}

/// Top-k solution of `(M Mᵀ, N)` with `(N, M)` taken from the requested pooling.
pub fn perception_subspace<T: Scalar>(m: &Moments<T>, k: usize, pooling: Pooling) -> Result<Subspace<T>> {
    let (second, cross) = m.pooled(pooling);
    let lhs = SymMatrix::from_symmetrized(cross * cross.transpose());
    let g = solve_gevp(&lhs, second, k)?;
    let regularization = g.info();
    Ok(Subspace {
        basis: g.pair.vectors,
        eigenvalues: g.pair.values,
        kind: SubspaceKind::Perception,
        pooling: Some(pooling),
        regularization,
    })
}

/// Top-k solution of `(cov1 cov1ᵀ, cov0)`.
pub fn autoregressive_subspace<T: Scalar>(m: &Moments<T>, k: usize) -> Result<Subspace<T>> {
    let lhs = SymMatrix::from_symmetrized(&m.cov1 * m.cov1.transpose());
    let g = solve_gevp(&lhs, &m.cov0, k)?;
    let regularization = g.info();
    Ok(Subspace {
        basis: g.pair.vectors,
        eigenvalues: g.pair.values,
        kind: SubspaceKind::Autoregressive,
        pooling: None,
        regularization,
    })
}

/// `‖P U‖²_F / ‖U‖²_F` with `P` the orthogonal projector onto `col(v)`.
///
/// Depends only on the column space of `v`, and on `u` through its columns'
/// norms and directions.
pub fn ntps<T: Scalar>(u: &DMatrix<T>, v: &DMatrix<T>) -> Result<T> {
    if u.nrows() != v.nrows() {
        return Err(NtpsError::DimensionMismatch(format!(
            "bases live in R^{} and R^{}",
            u.nrows(),
            v.nrows()
        )));
    }
    if u.ncols() == 0 || v.ncols() == 0 {
        return Err(NtpsError::InvalidRank { k: 0, max: u.nrows() });
    }
    let denom = frobenius_sq(u);
    if !(denom > T::zero()) {
        return Err(NtpsError::ZeroBasis);
    }
    let p = projector(v);
    let score = frobenius_sq(&(p.as_matrix() * u)) / denom;
    let tol = T::lit(NTPS_CLAMP_TOL);
    if !score.is_finite() || score < -tol || score > T::one() + tol {
        return Err(NtpsError::ScoreOutOfRange { value: score.as_f64() });
    }
    Ok(score.clamp(T::zero(), T::one()))
}

fn check_encoder<T: Scalar>(m: &Moments<T>, encoder: &DMatrix<T>) -> Result<()> {
    if encoder.nrows() != m.d() || encoder.ncols() == 0 {
        return Err(NtpsError::DimensionMismatch(format!(
            "encoder is {}x{}, expected {}xk with k >= 1",
            encoder.nrows(),
            encoder.ncols(),
            m.d()
        )));
    }
    Ok(())
}

fn frob_inner<T: Scalar>(a: &DMatrix<T>, b: &DMatrix<T>) -> T {
    a.iter().zip(b.iter()).fold(T::zero(), |acc, (x, y)| acc + *x * *y)
}

/// Closed-form next-token decoder `W = (Vᵀ cov0 V)⁻¹ Vᵀ cov1` (`k × d`).
pub fn optimal_w<T: Scalar>(m: &Moments<T>, v: &DMatrix<T>) -> Result<DMatrix<T>> {
    check_encoder(m, v)?;
    let inner = v.tr_mul(&(m.cov0.as_matrix() * v));
    let rhs = v.tr_mul(&m.cov1);
    solve_psd(&inner, &rhs)
}

/// `E‖Wᵀ Vᵀ X L1 − X L2‖²_F` evaluated from the moments.
pub fn autoregressive_loss<T: Scalar>(m: &Moments<T>, v: &DMatrix<T>, w: &DMatrix<T>) -> Result<T> {
    check_encoder(m, v)?;
    if w.shape() != (v.ncols(), m.d()) {
        return Err(NtpsError::DimensionMismatch(format!("decoder is {:?}, expected {:?}", w.shape(), (v.ncols(), m.d()))));
    }
    let h = v.tr_mul(&(m.cov0.as_matrix() * v));
    let cross = v.tr_mul(&m.cov1);
    let two = T::lit(2.0);
    Ok(frob_inner(w, &(h * w)) - two * frob_inner(w, &cross) + m.next_sq)
}

/// Closed-form label decoder `Z = (Uᵀ N U)⁻¹ Uᵀ M` (`k × c`).
pub fn optimal_z<T: Scalar>(m: &Moments<T>, u: &DMatrix<T>, pooling: Pooling) -> Result<DMatrix<T>> {
    check_encoder(m, u)?;
    let (second, cross) = m.pooled(pooling);
    let inner = u.tr_mul(&(second.as_matrix() * u));
    let rhs = u.tr_mul(cross);
    solve_psd(&inner, &rhs)
}

/// `E‖Zᵀ Uᵀ x_pooled − y‖²` evaluated from the moments.
pub fn perception_loss_at<T: Scalar>(m: &Moments<T>, encoder: &DMatrix<T>, z: &DMatrix<T>, pooling: Pooling) -> Result<T> {
    check_encoder(m, encoder)?;
    if z.shape() != (encoder.ncols(), m.c()) {
        return Err(NtpsError::DimensionMismatch(format!("decoder is {:?}, expected {:?}", z.shape(), (encoder.ncols(), m.c()))));
    }
    let (second, cross) = m.pooled(pooling);
    let h = encoder.tr_mul(&(second.as_matrix() * encoder));
    let c = encoder.tr_mul(cross);
    let two = T::lit(2.0);
    Ok(frob_inner(z, &(h * z)) - two * frob_inner(z, &c) + m.yy)
}

/// Minimal label loss over decoders for a fixed encoder:
/// `Tr E[y yᵀ] − Tr(Vᵀ M Mᵀ V (Vᵀ N V)⁻¹)`.
pub fn perception_loss<T: Scalar>(m: &Moments<T>, encoder: &DMatrix<T>, pooling: Pooling) -> Result<T> {
    perception_loss_ridged(m, encoder, pooling, T::zero())
}

/// [`perception_loss`] with the pooled second moment replaced by `N + ridge · I`.
pub fn perception_loss_ridged<T: Scalar>(m: &Moments<T>, encoder: &DMatrix<T>, pooling: Pooling, ridge: T) -> Result<T> {
    check_encoder(m, encoder)?;
    let (second, cross) = m.pooled(pooling);
    let inner = encoder.tr_mul(&(second.as_matrix() * encoder)) + encoder.tr_mul(encoder) * ridge;
    let proj = encoder.tr_mul(cross);
    // zero-variance features carry no label information
    if inner.iter().all(|x| x.is_zero()) {
        return Ok(m.yy);
    }
    let solved = solve_psd(&inner, &proj)?;
    Ok(m.yy - frob_inner(&proj, &solved))
}

/// Excess loss of an encoder over the optimal perception subspace, with the
/// constants of the two-sided bound `c_min (1 − ntps) ≤ ΔL ≤ c_max (1 − ntps)`.
///
/// Losses and `λ(N)` are taken on `N + ridge · I`, the matrix `U` was solved
/// against, so `Uᵀ N U = I` holds to rounding.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundsReport<T: Scalar> {
    pub ridge: T,
    pub ntps: T,
    pub excess_loss: T,
    pub lower: T,
    pub upper: T,
    pub c_min: T,
    pub c_max: T,
    pub lambda_min_n: T,
    pub lambda_max_n: T,
    pub lambda_min_spec: T,
    pub lambda_max_spec: T,
    pub u_frob_sq: T,
}

impl<T: Scalar> BoundsReport<T> {
    pub fn lower_slack(&self) -> T {
        self.excess_loss - self.lower
    }

    pub fn upper_slack(&self) -> T {
        self.upper - self.excess_loss
    }
}

/// Requires a sum-pooled perception subspace (so `Uᵀ N U = I`).
pub fn excess_loss_and_bounds<T: Scalar>(m: &Moments<T>, u: &Subspace<T>, v_encoder: &DMatrix<T>) -> Result<BoundsReport<T>> {
    if u.kind != SubspaceKind::Perception || u.pooling != Some(Pooling::Sum) {
        return Err(NtpsError::InvalidConfig("bounds need a sum-pooled perception subspace".into()));
    }
    check_encoder(m, &u.basis)?;
    check_encoder(m, v_encoder)?;

    let ridge = T::lit(u.regularization.ridge);
    let loss_u = perception_loss_ridged(m, &u.basis, Pooling::Sum, ridge)?;
    let loss_v = perception_loss_ridged(m, v_encoder, Pooling::Sum, ridge)?;
    let score = ntps(&u.basis, v_encoder)?;

    let n_eig = sym_eigen(&m.sum_xx);
    let lambda_max_n = n_eig.values[0] + ridge;
    let lambda_min_n = n_eig.values[n_eig.values.len() - 1] + ridge;
    let k = u.k();
    let lambda_max_spec = u.eigenvalues[0];
    let lambda_min_spec = u.eigenvalues[k - 1];
    let u_frob_sq = frobenius_sq(&u.basis);

    let c_min = lambda_min_n * lambda_min_spec * u_frob_sq;
    let c_max = lambda_max_n * lambda_max_spec * u_frob_sq;
    let gap = T::one() - score;
    Ok(BoundsReport {
        ridge,
        ntps: score,
        excess_loss: loss_v - loss_u,
        lower: c_min * gap,
        upper: c_max * gap,
        c_min,
        c_max,
        lambda_min_n,
        lambda_max_n,
        lambda_min_spec,
        lambda_max_spec,
        u_frob_sq,
    })
}

/// Outcome of argmax decoding a predicted hidden state against a vocabulary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginCheck<T: Scalar> {
    /// Index of the vocabulary row the target decodes to.
    pub target_index: usize,
    /// `min_{j≠y} ⟨w_y − w_j, target⟩`.
    pub margin: T,
    /// `max_{i≠j} ‖w_i − w_j‖`.
    pub diameter: T,
    pub distance: T,
    /// `distance < margin / diameter`; implies `correct`.
    pub guaranteed: bool,
    pub correct: bool,
}

fn strict_argmax<T: Scalar>(scores: &DVector<T>) -> (usize, T) {
    let mut best = 0;
    for i in 1..scores.len() {
        if scores[i] > scores[best] {
            best = i;
        }
    }
    let runner_up = (0..scores.len())
        .filter(|&j| j != best)
        .map(|j| scores[best] - scores[j])
        .fold(None, |acc: Option<T>, g| Some(acc.map_or(g, |a| a.min(g))));
    (best, runner_up.unwrap_or(T::zero()))
}

/// `max_{i≠j} ‖w_i − w_j‖` over the rows of `vocab`.
pub fn vocab_diameter<T: Scalar>(vocab: &DMatrix<T>) -> T {
    let rows = vocab.nrows();
    let mut diameter = T::zero();
    for i in 0..rows {
        for j in i + 1..rows {
            diameter = diameter.max((vocab.row(i) - vocab.row(j)).norm());
        }
    }
    diameter
}

/// `vocab` holds one embedding per row.
pub fn margin_decode_check<T: Scalar>(vocab: &DMatrix<T>, target: &DVector<T>, predicted: &DVector<T>) -> Result<MarginCheck<T>> {
    margin_decode_check_with_diameter(vocab, vocab_diameter(vocab), target, predicted)
}

/// [`margin_decode_check`] with a precomputed [`vocab_diameter`].
pub fn margin_decode_check_with_diameter<T: Scalar>(
    vocab: &DMatrix<T>,
    diameter: T,
    target: &DVector<T>,
    predicted: &DVector<T>,
) -> Result<MarginCheck<T>> {
    let d = vocab.ncols();
    if target.len() != d || predicted.len() != d {
        return Err(NtpsError::DimensionMismatch(format!(
            "vocabulary rows have d = {d}, target {} and prediction {}",
            target.len(),
            predicted.len()
        )));
    }
    if vocab.nrows() < 2 {
        return Err(NtpsError::InsufficientData("vocabulary needs at least two entries".into()));
    }
    let (target_index, margin) = strict_argmax(&(vocab * target));
    if !(margin > T::zero()) {
        return Err(NtpsError::NonPositiveMargin { margin: margin.as_f64() });
    }

    let distance = (predicted - target).norm();
    let guaranteed = diameter > T::zero() && distance < margin / diameter;
    let pred_scores = vocab * predicted;
    let (pred_index, pred_margin) = strict_argmax(&pred_scores);
    let correct = pred_index == target_index && pred_margin > T::zero();
    Ok(MarginCheck { target_index, margin, diameter, distance, guaranteed, correct })
}

/// Coordinates of each row of `features` in an encoder basis (`n × k`).
pub fn projection_coordinates<T: Scalar>(features: &DMatrix<T>, basis: &DMatrix<T>) -> Result<DMatrix<T>> {
    if features.ncols() != basis.nrows() {
        return Err(NtpsError::DimensionMismatch(format!(
            "features have d = {}, basis has {} rows",
            features.ncols(),
            basis.nrows()
        )));
    }
    Ok(features * basis)
}
