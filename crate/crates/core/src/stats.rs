//! Per-sentence selection products and the mergeable accumulator behind every score.
//!
//! A sentence is an `ℓ × d` token matrix `X` (one row per token). With prefix
//! sums `p_i = x_1 + … + x_i` the autoregressive moments are
//! `cov0 = Σ_{i<ℓ} p_i p_iᵀ` and `cov1 = Σ_{i<ℓ} p_i x_{i+1}ᵀ`, the same values as
//! `Xᵀ L1 L1ᵀ X` and `Xᵀ L1 L2ᵀ X` with the unit upper-triangular / shifted
//! identity selectors, but computed in `O(ℓ d²)` without forming them.
//!
//! [`SufficientStats`] keeps raw sums and divides once in [`SufficientStats::finalize`],
//! so partial accumulators can be merged in any order.

use nalgebra::{DMatrix, DVector};

use crate::error::{NtpsError, Result};
use crate::linalg::{frobenius_sq, SymMatrix};
use crate::scalar::Scalar;

/// Token pooling used for the perception moments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    /// Mean token representation, as used for production scores.
    Mean,
    /// Sum of token representations, the setting of the excess-loss bounds.
    Sum,
}

impl std::str::FromStr for Pooling {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "mean" => Ok(Pooling::Mean),
            "sum" => Ok(Pooling::Sum),
            other => Err(format!("unknown pooling '{other}', expected mean|sum")),
        }
    }
}

impl std::fmt::Display for Pooling {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Pooling::Mean => "mean",
            Pooling::Sum => "sum",
        })
    }
}

/// One sentence: `ℓ × d` token representations and a class index.
#[derive(Debug, Clone, PartialEq)]
pub struct SentenceSample<T: Scalar> {
    tokens: DMatrix<T>,
    label: usize,
}

impl<T: Scalar> SentenceSample<T> {
    pub fn new(tokens: DMatrix<T>, label: usize) -> Result<Self> {
        if tokens.nrows() < 2 {
            return Err(NtpsError::InvalidSample(format!(
                "sentence needs at least 2 tokens, got {}",
                tokens.nrows()
            )));
        }
        if tokens.iter().any(|x| !x.is_finite()) {
            return Err(NtpsError::InvalidSample("non-finite token entry".into()));
        }
        Ok(Self { tokens, label })
    }

    pub fn tokens(&self) -> &DMatrix<T> {
        &self.tokens
    }

    pub fn label(&self) -> usize {
        self.label
    }

    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.tokens.ncols()
    }

    pub fn into_parts(self) -> (DMatrix<T>, usize) {
        (self.tokens, self.label)
    }
}

/// Contributions of one sentence to the accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionProducts<T: Scalar> {
    pub cov0: SymMatrix<T>,
    pub cov1: DMatrix<T>,
    pub mean_vec: DVector<T>,
    pub sum_vec: DVector<T>,
    /// `Σ_{i≥2} ‖x_i‖²`, the constant term of the next-token loss.
    pub next_sq: T,
}

pub fn selection_products<T: Scalar>(sample: &SentenceSample<T>) -> SelectionProducts<T> {
    let x = sample.tokens();
    let (len, d) = x.shape();

    let mut prefix = DMatrix::zeros(len - 1, d);
    let mut running = DVector::<T>::zeros(d);
    for i in 0..len - 1 {
        running += x.row(i).transpose();
        prefix.set_row(i, &running.transpose());
    }
    let sum_vec = &running + x.row(len - 1).transpose();
    let next = x.rows(1, len - 1);

    let cov0 = SymMatrix::from_symmetrized(prefix.tr_mul(&prefix));
    let cov1 = prefix.tr_mul(&next);
    let mean_vec = &sum_vec / T::from_count(len);
    let next_sq = next.iter().fold(T::zero(), |acc, v| acc + *v * *v);
    SelectionProducts { cov0, cov1, mean_vec, sum_vec, next_sq }
}

/// Identity of an accumulator: two stats may only be merged when these agree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StatsMeta {
    pub d: usize,
    pub c: usize,
    pub layer: u32,
}

/// Raw (undivided) sums over a stream of sentences.
///
/// Both poolings are carried: `mean_xx`/`mean_xy` from mean-pooled tokens and
/// `sum_xx`/`sum_xy` from sum-pooled tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct SufficientStats<T: Scalar> {
    meta: StatsMeta,
    n: u64,
    mean_xx: DMatrix<T>,
    mean_xy: DMatrix<T>,
    cov0: DMatrix<T>,
    cov1: DMatrix<T>,
    sum_xx: DMatrix<T>,
    sum_xy: DMatrix<T>,
    yy_trace: T,
    next_sq: T,
}

/// Borrowed view of all raw sums, in serialization order.
pub struct RawSums<'a, T: Scalar> {
    pub mean_xx: &'a DMatrix<T>,
    pub mean_xy: &'a DMatrix<T>,
    pub cov0: &'a DMatrix<T>,
    pub cov1: &'a DMatrix<T>,
    pub sum_xx: &'a DMatrix<T>,
    pub sum_xy: &'a DMatrix<T>,
    pub yy_trace: T,
    pub next_sq: T,
}

impl<T: Scalar> SufficientStats<T> {
    pub fn new(d: usize, c: usize, layer: u32) -> Self {
        Self {
            meta: StatsMeta { d, c, layer },
            n: 0,
            mean_xx: DMatrix::zeros(d, d),
            mean_xy: DMatrix::zeros(d, c),
            cov0: DMatrix::zeros(d, d),
            cov1: DMatrix::zeros(d, d),
            sum_xx: DMatrix::zeros(d, d),
            sum_xy: DMatrix::zeros(d, c),
            yy_trace: T::zero(),
            next_sq: T::zero(),
        }
    }

    /// Rebuilds an accumulator from stored sums (used by deserializers).
    #[allow(clippy::too_many_arguments)]
    pub fn from_raw_parts(
        meta: StatsMeta,
        n: u64,
        mean_xx: DMatrix<T>,
        mean_xy: DMatrix<T>,
        cov0: DMatrix<T>,
        cov1: DMatrix<T>,
        sum_xx: DMatrix<T>,
        sum_xy: DMatrix<T>,
        yy_trace: T,
        next_sq: T,
    ) -> Result<Self> {
        let StatsMeta { d, c, .. } = meta;
        let shapes = [
            ("mean_xx", mean_xx.shape(), (d, d)),
            ("mean_xy", mean_xy.shape(), (d, c)),
            ("cov0", cov0.shape(), (d, d)),
            ("cov1", cov1.shape(), (d, d)),
            ("sum_xx", sum_xx.shape(), (d, d)),
            ("sum_xy", sum_xy.shape(), (d, c)),
        ];
        for (name, got, want) in shapes {
            if got != want {
                return Err(NtpsError::DimensionMismatch(format!("{name} is {got:?}, expected {want:?}")));
            }
        }
        Ok(Self { meta, n, mean_xx, mean_xy, cov0, cov1, sum_xx, sum_xy, yy_trace, next_sq })
    }

    pub fn meta(&self) -> StatsMeta {
        self.meta
    }

    pub fn n(&self) -> u64 {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn raw(&self) -> RawSums<'_, T> {
        RawSums {
            mean_xx: &self.mean_xx,
            mean_xy: &self.mean_xy,
            cov0: &self.cov0,
            cov1: &self.cov1,
            sum_xx: &self.sum_xx,
            sum_xy: &self.sum_xy,
            yy_trace: self.yy_trace,
            next_sq: self.next_sq,
        }
    }

    pub fn accumulate(&mut self, sample: &SentenceSample<T>) -> Result<()> {
        if sample.dim() != self.meta.d {
            return Err(NtpsError::DimensionMismatch(format!(
                "sample has d = {}, stats expect {}",
                sample.dim(),
                self.meta.d
            )));
        }
        if sample.label() >= self.meta.c {
            return Err(NtpsError::LabelOutOfRange { label: sample.label(), classes: self.meta.c });
        }
        let p = selection_products(sample);
        let one = T::one();
        self.mean_xx.ger(one, &p.mean_vec, &p.mean_vec, one);
        self.sum_xx.ger(one, &p.sum_vec, &p.sum_vec, one);
        let label = sample.label();
        {
            let mut col = self.mean_xy.column_mut(label);
            col += &p.mean_vec;
        }
        {
            let mut col = self.sum_xy.column_mut(label);
            col += &p.sum_vec;
        }
        self.cov0 += p.cov0.as_matrix();
        self.cov1 += &p.cov1;
        self.yy_trace += one;
        self.next_sq += p.next_sq;
        self.n += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if self.meta != other.meta {
            return Err(NtpsError::MetadataMismatch(format!("{:?} vs {:?}", self.meta, other.meta)));
        }
        self.mean_xx += &other.mean_xx;
        self.mean_xy += &other.mean_xy;
        self.cov0 += &other.cov0;
        self.cov1 += &other.cov1;
        self.sum_xx += &other.sum_xx;
        self.sum_xy += &other.sum_xy;
        self.yy_trace += other.yy_trace;
        self.next_sq += other.next_sq;
        self.n += other.n;
        Ok(())
    }

    pub fn merged(mut self, other: &Self) -> Result<Self> {
        self.merge(other)?;
        Ok(self)
    }

    /// Divides every sum by `n`.
    pub fn finalize(&self) -> Result<Moments<T>> {
        if self.n == 0 {
            return Err(NtpsError::NoSamples);
        }
        let inv = T::one() / T::lit(self.n as f64);
        Ok(Moments {
            meta: self.meta,
            n: self.n,
            mean_xx: SymMatrix::from_symmetrized(&self.mean_xx * inv),
            mean_xy: &self.mean_xy * inv,
            cov0: SymMatrix::from_symmetrized(&self.cov0 * inv),
            cov1: &self.cov1 * inv,
            sum_xx: SymMatrix::from_symmetrized(&self.sum_xx * inv),
            sum_xy: &self.sum_xy * inv,
            yy: self.yy_trace * inv,
            next_sq: self.next_sq * inv,
        })
    }
}

/// Finalized expectations over the sample stream.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments<T: Scalar> {
    pub meta: StatsMeta,
    pub n: u64,
    /// `E[x̄ x̄ᵀ]` of the mean token.
    pub mean_xx: SymMatrix<T>,
    /// `E[x̄ yᵀ]`.
    pub mean_xy: DMatrix<T>,
    /// `E[X L1 L1ᵀ Xᵀ]`.
    pub cov0: SymMatrix<T>,
    /// `E[X L1 L2ᵀ Xᵀ]`.
    pub cov1: DMatrix<T>,
    /// `N = E[X 1 1ᵀ Xᵀ]` of the summed tokens.
    pub sum_xx: SymMatrix<T>,
    /// `M = E[X 1 yᵀ]`.
    pub sum_xy: DMatrix<T>,
    /// `Tr E[y yᵀ]`, exactly 1 for one-hot labels.
    pub yy: T,
    /// `Tr E[X2ᵀ X2]` over next tokens.
    pub next_sq: T,
}

impl<T: Scalar> Moments<T> {
    pub fn d(&self) -> usize {
        self.meta.d
    }

    pub fn c(&self) -> usize {
        self.meta.c
    }

    /// Feature second moment and feature/label cross moment for a pooling.
    pub fn pooled(&self, pooling: Pooling) -> (&SymMatrix<T>, &DMatrix<T>) {
        match pooling {
            Pooling::Mean => (&self.mean_xx, &self.mean_xy),
            Pooling::Sum => (&self.sum_xx, &self.sum_xy),
        }
    }

    /// Scale used for relative tolerances: the largest trace among the moments.
    pub fn scale(&self) -> T {
        let a = self.cov0.trace();
        let b = self.sum_xx.trace();
        a.max(b).max(self.next_sq).max(frobenius_sq(&self.cov1).sqrt())
    }
}
