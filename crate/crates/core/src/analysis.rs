//! Probes, rank correlation, the layer × rank sweep and gain ranking.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{NtpsError, Result};
use crate::linalg::{solve_psd, sym_eigen, SymMatrix};
use crate::scalar::Scalar;
use crate::stats::{Moments, Pooling, SentenceSample};
use crate::subspace::{autoregressive_subspace, k_from_proportion, ntps, perception_subspace};

/// Row-wise one-hot encoding.
pub fn one_hot<T: Scalar>(labels: &[usize], c: usize) -> Result<DMatrix<T>> {
    let mut y = DMatrix::zeros(labels.len(), c);
    for (i, &label) in labels.iter().enumerate() {
        if label >= c {
            return Err(NtpsError::LabelOutOfRange { label, classes: c });
        }
        y[(i, label)] = T::one();
    }
    Ok(y)
}

/// One pooled feature row per sentence.
pub fn pooled_features<T: Scalar>(samples: &[SentenceSample<T>], pooling: Pooling) -> Result<DMatrix<T>> {
    let d = samples.first().ok_or(NtpsError::NoSamples)?.dim();
    let mut out = DMatrix::zeros(samples.len(), d);
    for (i, s) in samples.iter().enumerate() {
        if s.dim() != d {
            return Err(NtpsError::DimensionMismatch(format!("sentence {i} has dimension {}, expected {d}", s.dim())));
        }
        let mut row = s.tokens().row_sum();
        if pooling == Pooling::Mean {
            row /= T::from_count(s.len());
        }
        out.set_row(i, &row);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OlsFit<T: Scalar> {
    /// `d × c`.
    pub weights: DMatrix<T>,
    /// `(1/n) Σ_i ‖y_i − Wᵀ x_i‖²`.
    pub mse: T,
}

/// Least-squares probe without intercept, fitted on the training rows.
///
/// An all-zero design yields zero weights.
pub fn ols_probe<T: Scalar>(features: &DMatrix<T>, targets: &DMatrix<T>) -> Result<OlsFit<T>> {
    let (n, d) = features.shape();
    if n == 0 {
        return Err(NtpsError::NoSamples);
    }
    if targets.nrows() != n {
        return Err(NtpsError::DimensionMismatch(format!("{n} feature rows but {} target rows", targets.nrows())));
    }
    let gram = features.tr_mul(features);
    let weights = if gram.iter().all(|x| x.is_zero()) {
        DMatrix::zeros(d, targets.ncols())
    } else {
        solve_psd(&gram, &features.tr_mul(targets))?
    };
    let resid = targets - features * &weights;
    let mse = resid.norm_squared() / T::from_count(n);
    Ok(OlsFit { weights, mse })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticFit<T: Scalar> {
    /// `(d + 1) × c`; the last row is the bias.
    pub weights: DMatrix<T>,
    pub accuracy: T,
    pub loss: T,
    pub step: T,
}

/// Appends a column of ones.
pub fn with_bias<T: Scalar>(features: &DMatrix<T>) -> DMatrix<T> {
    let (n, d) = features.shape();
    let mut x = features.clone().resize(n, d + 1, T::one());
    x.column_mut(d).fill(T::one());
    x
}

/// Mean softmax cross-entropy of `x · w` and its gradient in `w`.
pub fn softmax_loss_grad<T: Scalar>(x: &DMatrix<T>, labels: &[usize], w: &DMatrix<T>) -> (T, DMatrix<T>) {
    let n = x.nrows();
    let logits = x * w;
    let mut probs = logits.clone();
    let mut loss = T::zero();
    for i in 0..n {
        let mut row = probs.row_mut(i);
        let max = row.max();
        row.apply(|v| *v = (*v - max).exp());
        let z = row.sum();
        row /= z;
        loss += z.ln() + max - logits[(i, labels[i])];
        probs[(i, labels[i])] -= T::one();
    }
    let scale = T::one() / T::from_count(n);
    (loss * scale, x.tr_mul(&probs) * scale)
}

/// Multinomial logistic probe with bias, by full-batch gradient descent from zero.
///
/// The step is `0.1 / L` with `L = λ_max(X̃ᵀX̃ / n) / 2`, where `X̃` carries the bias column.
pub fn logistic_probe<T: Scalar>(features: &DMatrix<T>, labels: &[usize], c: usize, iters: usize) -> Result<LogisticFit<T>> {
    let n = features.nrows();
    if labels.len() != n {
        return Err(NtpsError::DimensionMismatch(format!("{n} feature rows but {} labels", labels.len())));
    }
    if n < c {
        return Err(NtpsError::InsufficientData(format!("{n} samples for {c} classes")));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= c) {
        return Err(NtpsError::LabelOutOfRange { label, classes: c });
    }
    let x = with_bias(features);
    let gram = SymMatrix::from_symmetrized(x.tr_mul(&x) / T::from_count(n));
    let lipschitz = sym_eigen(&gram).values[0] * T::lit(0.5);
    let step = T::lit(0.1) / lipschitz;
    let mut w = DMatrix::zeros(x.ncols(), c);
    for _ in 0..iters {
        let (_, grad) = softmax_loss_grad(&x, labels, &w);
        w -= grad * step;
    }
    let (loss, _) = softmax_loss_grad(&x, labels, &w);
    let logits = &x * &w;
    let hits = (0..n).filter(|&i| logits.row(i).transpose().argmax().0 == labels[i]).count();
    Ok(LogisticFit { weights: w, accuracy: T::from_count(hits) / T::from_count(n), loss, step })
}

/// 1-based ranks, ties receiving the mean of the ranks they span.
pub fn average_ranks<T: Scalar>(x: &[T]) -> Result<Vec<T>> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(NtpsError::NonFinite);
    }
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].partial_cmp(&x[b]).expect("finite values"));
    let mut ranks = vec![T::zero(); x.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && x[order[end]] == x[order[start]] {
            end += 1;
        }
        // positions start..end hold ranks start+1..=end
        let rank = T::from_count(start + 1 + end) / T::lit(2.0);
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    Ok(ranks)
}

/// Spearman rank correlation: Pearson correlation of averaged ranks.
pub fn spearman<T: Scalar>(x: &[T], y: &[T]) -> Result<T> {
    if x.len() != y.len() {
        return Err(NtpsError::DimensionMismatch(format!("{} vs {} observations", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(NtpsError::InsufficientData(format!("{} observations, need at least 2", x.len())));
    }
    let rx = DVector::from_vec(average_ranks(x)?);
    let ry = DVector::from_vec(average_ranks(y)?);
    let center = |r: DVector<T>| {
        let mean = r.mean();
        r.add_scalar(-mean)
    };
    let (cx, cy) = (center(rx), center(ry));
    let (vx, vy) = (cx.norm_squared(), cy.norm_squared());
    if vx.is_zero() {
        return Err(NtpsError::ZeroVariance("x"));
    }
    if vy.is_zero() {
        return Err(NtpsError::ZeroVariance("y"));
    }
    Ok((cx.dot(&cy) / (vx * vy).sqrt()).clamp(-T::one(), T::one()))
}

/// Rank proportions `start, start + step, …` up to `stop` inclusive, rounded to 1e-9.
pub fn k_grid(start: f64, stop: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && start > 0.0 && stop <= 1.0 && start <= stop) {
        return Err(NtpsError::InvalidConfig(format!(
            "grid {start}:{stop}:{step} must satisfy 0 < start <= stop <= 1 and step > 0"
        )));
    }
    let count = ((stop - start) / step + 1e-9).floor() as usize + 1;
    Ok((0..count).map(|i| ((start + i as f64 * step) * 1e9).round() / 1e9).collect())
}

/// `0.05, 0.10, …, 0.95`.
pub fn default_k_grid() -> Vec<f64> {
    (1..=19).map(|i| i as f64 / 20.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub dataset: String,
    pub layer: u32,
    pub k_prop: f64,
    pub k: usize,
    pub ntps: f64,
}

/// Rank correlation across datasets at one `(layer, k_prop)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellCorrelation {
    pub layer: u32,
    pub k_prop: f64,
    /// `None` when the scores or metrics have no rank variance.
    pub spearman_r: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub cells: Vec<SweepCell>,
    pub metrics: Option<BTreeMap<String, f64>>,
    pub correlations: Vec<CellCorrelation>,
    pub best_config: Option<CellCorrelation>,
}

/// Mean-pooled scores of one layer at every grid proportion, with one eigen-solve per subspace.
pub fn layer_cells<T: Scalar>(m: &Moments<T>, k_grid: &[f64]) -> Result<Vec<(f64, usize, f64)>> {
    let d = m.d();
    let ks = k_grid.iter().map(|&p| k_from_proportion(p, d)).collect::<Result<Vec<_>>>()?;
    let k_max = ks.iter().copied().max().ok_or_else(|| NtpsError::InvalidConfig("empty rank grid".into()))?;
    let u = perception_subspace(m, k_max, Pooling::Mean)?;
    let v = autoregressive_subspace(m, k_max)?;
    k_grid
        .iter()
        .zip(&ks)
        .map(|(&p, &k)| {
            let score = ntps(&u.basis.columns(0, k).into_owned(), &v.basis.columns(0, k).into_owned())?;
            Ok((p, k, score.as_f64()))
        })
        .collect()
}

/// Per-layer moments of one dataset.
#[derive(Debug, Clone)]
pub struct DatasetLayers<T: Scalar> {
    pub name: String,
    pub layers: BTreeMap<u32, Moments<T>>,
}

/// Scores every `(dataset, layer, k_prop)`; cells are ordered by dataset, layer, then grid position.
pub fn sweep_cells<T: Scalar>(datasets: &[DatasetLayers<T>], k_grid: &[f64]) -> Result<Vec<SweepCell>> {
    let mut cells = Vec::new();
    for ds in datasets {
        for (&layer, m) in &ds.layers {
            for (k_prop, k, ntps) in layer_cells(m, k_grid)? {
                cells.push(SweepCell { dataset: ds.name.clone(), layer, k_prop, k, ntps });
            }
        }
    }
    Ok(cells)
}

/// Joins scored cells with per-dataset metrics.
///
/// Without metrics only the cells are reported. With metrics, every dataset
/// must have one, there must be at least two datasets, and each `(layer,
/// k_prop)` is correlated across datasets. The best configuration maximizes
/// `|r|`, ties going to the earlier layer and then the smaller proportion.
pub fn correlate(cells: Vec<SweepCell>, metrics: Option<&BTreeMap<String, f64>>) -> Result<SweepResult> {
    if cells.is_empty() {
        return Err(NtpsError::InsufficientData("no sweep cells".into()));
    }
    let Some(metrics) = metrics else {
        return Ok(SweepResult { cells, metrics: None, correlations: Vec::new(), best_config: None });
    };
    let datasets: BTreeSet<&str> = cells.iter().map(|c| c.dataset.as_str()).collect();
    if datasets.len() < 2 {
        return Err(NtpsError::InsufficientData(format!("{} dataset(s) joined, need at least 2", datasets.len())));
    }
    if let Some(missing) = datasets.iter().find(|d| !metrics.contains_key(**d)) {
        return Err(NtpsError::MetadataMismatch(format!("no metric for dataset '{missing}'")));
    }

    let mut groups: BTreeMap<(u32, u64), Vec<&SweepCell>> = BTreeMap::new();
    for cell in &cells {
        groups.entry((cell.layer, cell.k_prop.to_bits())).or_default().push(cell);
    }
    let mut correlations = Vec::with_capacity(groups.len());
    for ((layer, _), group) in &groups {
        if group.len() != datasets.len() {
            return Err(NtpsError::MetadataMismatch(format!(
                "layer {layer} at k_prop {} is scored for {} of {} datasets",
                group[0].k_prop,
                group.len(),
                datasets.len()
            )));
        }
        let scores: Vec<f64> = group.iter().map(|c| c.ntps).collect();
        let values: Vec<f64> = group.iter().map(|c| metrics[&c.dataset]).collect();
        let spearman_r = match spearman(&scores, &values) {
            Ok(r) => Some(r),
            Err(NtpsError::ZeroVariance(_)) => None,
            Err(e) => return Err(e),
        };
        correlations.push(CellCorrelation { layer: *layer, k_prop: group[0].k_prop, spearman_r });
    }
    correlations.sort_by(|a, b| a.layer.cmp(&b.layer).then(a.k_prop.total_cmp(&b.k_prop)));
    let mut best: Option<&CellCorrelation> = None;
    for c in &correlations {
        if let Some(r) = c.spearman_r {
            if best.is_none_or(|b| r.abs() > b.spearman_r.unwrap_or(0.0).abs()) {
                best = Some(c);
            }
        }
    }
    let best_config = best.cloned();
    Ok(SweepResult { cells, metrics: Some(metrics.clone()), correlations, best_config })
}

/// Scores all datasets and joins optional metrics.
pub fn sweep<T: Scalar>(
    datasets: &[DatasetLayers<T>],
    k_grid: &[f64],
    metrics: Option<&BTreeMap<String, f64>>,
) -> Result<SweepResult> {
    if datasets.iter().all(|d| d.layers.is_empty()) {
        return Err(NtpsError::InsufficientData("no layers to sweep".into()));
    }
    correlate(sweep_cells(datasets, k_grid)?, metrics)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainEntry {
    pub dataset: String,
    pub ntps: f64,
    /// 1 for the largest predicted gain.
    pub rank: usize,
    pub observed_gain: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainPrediction {
    /// Ordered by ascending score, ties kept in input order.
    pub ranking: Vec<GainEntry>,
    /// Correlation of score with observed gain over datasets that report one.
    pub spearman_r: Option<f64>,
}

/// Gain from adaptation over the frozen linear probe.
pub fn observed_gain(adapted_accuracy: f64, probe_accuracy: f64) -> f64 {
    adapted_accuracy - probe_accuracy
}

/// Ranks datasets by expected adaptation gain: lower score, larger gain.
pub fn predict_lora_gain(ntps_per_dataset: &[(String, f64)], observed: Option<&BTreeMap<String, f64>>) -> Result<GainPrediction> {
    if ntps_per_dataset.len() < 2 {
        return Err(NtpsError::InsufficientData(format!("{} dataset(s), need at least 2", ntps_per_dataset.len())));
    }
    if ntps_per_dataset.iter().any(|(_, s)| !s.is_finite()) {
        return Err(NtpsError::NonFinite);
    }
    let mut order: Vec<usize> = (0..ntps_per_dataset.len()).collect();
    order.sort_by(|&a, &b| ntps_per_dataset[a].1.total_cmp(&ntps_per_dataset[b].1));
    let ranking: Vec<GainEntry> = order
        .iter()
        .enumerate()
        .map(|(pos, &i)| {
            let (dataset, ntps) = &ntps_per_dataset[i];
            GainEntry {
                dataset: dataset.clone(),
                ntps: *ntps,
                rank: pos + 1,
                observed_gain: observed.and_then(|o| o.get(dataset).copied()),
            }
        })
        .collect();
    let spearman_r = match observed {
        None => None,
        Some(_) => {
            let (scores, gains): (Vec<f64>, Vec<f64>) =
                ranking.iter().filter_map(|e| e.observed_gain.map(|g| (e.ntps, g))).unzip();
            Some(spearman(&scores, &gains)?)
        }
    };
    Ok(GainPrediction { ranking, spearman_r })
}
