//! Independent numerical routes used as oracles. Nothing here calls a
//! factorization from nalgebra; matrices are only used as storage.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use ntps_core::stats::SentenceSample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// `G Gᵀ / d + shift · I`.
pub fn random_spd(rng: &mut ChaCha8Rng, d: usize, shift: f64) -> DMatrix<f64> {
    let g = gaussian(rng, d, d);
    &g * g.transpose() / d as f64 + DMatrix::identity(d, d) * shift
}

/// Cyclic Jacobi rotations; returns eigenvalues descending and matching columns.
pub fn jacobi_eigen(a: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let mut m = a.clone();
    let mut v = DMatrix::<f64>::identity(n, n);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += m[(p, q)] * m[(p, q)];
            }
        }
        let scale: f64 = m.iter().map(|x| x * x).sum();
        if off <= 1e-30 * scale.max(1e-300) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(j, j)].partial_cmp(&m[(i, i)]).unwrap());
    let values = order.iter().map(|&i| m[(i, i)]).collect();
    let vectors = DMatrix::from_fn(n, n, |r, c| v[(r, order[c])]);
    (values, vectors)
}

/// `b^{-1/2} a b^{-1/2}` eigenvalues of the pencil after the same relative ridge
/// the production solver applies, via Jacobi throughout.
pub fn whitening_oracle(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Vec<f64> {
    let d = b.nrows();
    let ridge = 1e-8 * b.trace().max(0.0) / d as f64;
    let b_reg = b + DMatrix::identity(d, d) * ridge;
    let (mu, q) = jacobi_eigen(&b_reg);
    let inv_sqrt = DMatrix::from_diagonal(&DVector::from_iterator(d, mu.iter().map(|m| 1.0 / m.sqrt())));
    let w = &q * inv_sqrt * q.transpose();
    let reduced = &w * a * &w;
    let sym = (&reduced + reduced.transpose()) * 0.5;
    jacobi_eigen(&sym).0
}

/// Gaussian elimination with partial pivoting for `a x = b`.
pub fn gauss_solve(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let mut m = a.clone();
    let mut x = b.clone();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| m[(i, col)].abs().partial_cmp(&m[(j, col)].abs()).unwrap()).unwrap();
        m.swap_rows(col, pivot);
        x.swap_rows(col, pivot);
        for row in col + 1..n {
            let f = m[(row, col)] / m[(col, col)];
            for k in col..n {
                m[(row, k)] -= f * m[(col, k)];
            }
            for k in 0..x.ncols() {
                x[(row, k)] -= f * x[(col, k)];
            }
        }
    }
    for col in (0..n).rev() {
        for k in 0..x.ncols() {
            let mut acc = x[(col, k)];
            for j in col + 1..n {
                acc -= m[(col, j)] * x[(j, k)];
            }
            x[(col, k)] = acc / m[(col, col)];
        }
    }
    x
}

/// Orthonormal basis of the columns of `m` by modified Gram-Schmidt, dropping dependent columns.
pub fn gram_schmidt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut cols: Vec<DVector<f64>> = Vec::new();
    for j in 0..m.ncols() {
        let mut v = m.column(j).into_owned();
        for _ in 0..2 {
            for q in &cols {
                let proj = q.dot(&v);
                v -= q * proj;
            }
        }
        let norm = v.norm();
        if norm > 1e-10 * m.column(j).norm().max(1e-300) {
            cols.push(v / norm);
        }
    }
    DMatrix::from_columns(&cols)
}

/// Random sentences with lengths in `lens` and labels in `0..c`.
pub fn random_sentences(rng: &mut ChaCha8Rng, n: usize, d: usize, c: usize, lens: (usize, usize)) -> Vec<SentenceSample<f64>> {
    (0..n)
        .map(|_| {
            let len = rng.random_range(lens.0..=lens.1);
            let tokens = gaussian(rng, len, d);
            let label = rng.random_range(0..c);
            SentenceSample::new(tokens, label).unwrap()
        })
        .collect()
}

/// Next-token loss `(1/n) Σ_s Σ_i ‖Wᵀ Vᵀ p_i − x_{i+1}‖²` from the raw sentences.
pub fn direct_autoregressive_loss(samples: &[SentenceSample<f64>], v: &DMatrix<f64>, w: &DMatrix<f64>) -> f64 {
    let mut total = 0.0;
    for s in samples {
        let x = s.tokens();
        let mut prefix = DVector::zeros(x.ncols());
        for i in 0..x.nrows() - 1 {
            prefix += x.row(i).transpose();
            let pred = w.transpose() * (v.transpose() * &prefix);
            total += (pred - x.row(i + 1).transpose()).norm_squared();
        }
    }
    total / samples.len() as f64
}

/// Label loss `(1/n) Σ ‖Zᵀ Uᵀ s − y‖²` with sum pooling, from the raw sentences.
pub fn direct_perception_loss(samples: &[SentenceSample<f64>], c: usize, u: &DMatrix<f64>, z: &DMatrix<f64>) -> f64 {
    let mut total = 0.0;
    for s in samples {
        let sum = s.tokens().row_sum().transpose();
        let mut y = DVector::zeros(c);
        y[s.label()] = 1.0;
        total += (z.transpose() * (u.transpose() * sum) - y).norm_squared();
    }
    total / samples.len() as f64
}
