//! Synthetic linear-regime corpora with a planted overlap between the
//! next-token dynamics and the label rule, and the theorem checks run on them.
//!
//! Construction: orthonormal frames `A` (drives next tokens) and `A⊥` are drawn
//! jointly, and the label frame is `B = cos θ · A + sin θ · A⊥` with
//! `cos² θ = overlap`, so every direction of `col(B)` makes angle `θ` with
//! `col(A)`. Tokens follow `x_{t+1} = A (Q − I) Aᵀ (x_1 + … + x_t) + σ ξ_t`
//! with `Q` orthogonal, so the prefix sum only rotates inside `col(A)` and the
//! sentence sum stays isotropic. The label is the argmax of `Z₀ᵀ Bᵀ Σ_t x_t`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::analysis::{ols_probe, one_hot, pooled_features};
use crate::error::{NtpsError, Result};
use crate::linalg::{frobenius_sq, thin_svd};
use crate::scalar::Scalar;
use crate::stats::{Pooling, SentenceSample, SufficientStats};
use crate::subspace::{
    autoregressive_loss, autoregressive_subspace, excess_loss_and_bounds, margin_decode_check_with_diameter, ntps, vocab_diameter, optimal_w,
    optimal_z, perception_loss_at, perception_loss_ridged, perception_subspace,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub d: usize,
    pub c: usize,
    pub k_true: usize,
    pub overlap: f64,
    pub n: usize,
    pub len_range: (usize, usize),
    pub noise_sigma: f64,
    pub seed: u64,
    /// Emit every second sentence as the reflection of the previous one through
    /// `col([A, B])`, which cancels in-sample correlations with the directions
    /// that neither dynamics nor labels use.
    pub mirror: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            d: 16,
            c: 3,
            k_true: 2,
            overlap: 0.5,
            n: 1000,
            len_range: (3, 6),
            noise_sigma: 0.1,
            seed: 0,
            mirror: true,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(NtpsError::InvalidConfig(msg));
        if self.d == 0 || self.n == 0 {
            return bad("d and n must be positive".into());
        }
        if self.c < 2 {
            return bad(format!("need at least 2 classes, got {}", self.c));
        }
        if self.k_true == 0 || self.k_true > self.d.min(self.c - 1) {
            return bad(format!("k_true = {} must lie in 1..=min(d, c - 1) = {}", self.k_true, self.d.min(self.c - 1)));
        }
        if !(0.0..=1.0).contains(&self.overlap) {
            return bad(format!("overlap {} outside [0, 1]", self.overlap));
        }
        if self.overlap < 1.0 && self.d < 2 * self.k_true {
            return bad(format!(
                "overlap {} is infeasible: d = {} < 2 * k_true = {}",
                self.overlap,
                self.d,
                2 * self.k_true
            ));
        }
        let (lo, hi) = self.len_range;
        if lo < 2 || lo > hi {
            return bad(format!("length range ({lo}, {hi}) must satisfy 2 <= min <= max"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise sigma {} must be finite and nonnegative", self.noise_sigma));
        }
        Ok(())
    }
}

pub fn standard_normal_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Orthonormal `rows × cols` frame from a Gaussian draw (thin QR, signs fixed by `R`'s diagonal).
pub fn random_orthonormal<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> DMatrix<f64> {
    let g = standard_normal_matrix(rng, rows, cols);
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..cols {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Orthogonal `k × k` matrix with `det = (−1)^k`, which leaves no eigenvalue
/// forced to 1, redrawn until `Q − I` is well conditioned.
pub fn rotation_without_fixed_points<R: Rng + ?Sized>(rng: &mut R, k: usize) -> DMatrix<f64> {
    loop {
        let mut q = random_orthonormal(rng, k, k);
        let want_negative = k % 2 == 1;
        if (q.determinant() < 0.0) != want_negative {
            q.column_mut(0).neg_mut();
        }
        let shifted = &q - DMatrix::identity(k, k);
        let svd = thin_svd(&shifted);
        if svd.rank() == k && svd.values[k - 1] > 0.25 {
            return q;
        }
    }
}

/// `k × c` map with orthonormal rows and zero row sums (a regular simplex when `c = k + 1`).
pub fn tight_frame<R: Rng + ?Sized>(rng: &mut R, k: usize, c: usize) -> DMatrix<f64> {
    let mut g = standard_normal_matrix(rng, k, c);
    for mut row in g.row_iter_mut() {
        let mean = row.mean();
        row.add_scalar_mut(-mean);
    }
    let svd = thin_svd(&g);
    &svd.u * svd.v.transpose()
}

/// The hidden linear structure of a synthetic corpus.
#[derive(Debug, Clone)]
pub struct Plant {
    /// Next-token drive frame (`d × k`).
    pub a: DMatrix<f64>,
    /// Label frame (`d × k`).
    pub b: DMatrix<f64>,
    /// `A (Q − I) Aᵀ`.
    pub transition: DMatrix<f64>,
    /// `k × c` logit map.
    pub label_map: DMatrix<f64>,
    /// Orthonormal basis of `col([A, B])`.
    pub used: DMatrix<f64>,
}

impl Plant {
    pub fn draw<R: Rng + ?Sized>(config: &SynthConfig, rng: &mut R) -> Self {
        let (d, k) = (config.d, config.k_true);
        let two_k = if config.overlap < 1.0 { 2 * k } else { k };
        let frame = random_orthonormal(rng, d, two_k);
        let a = frame.columns(0, k).into_owned();
        let cos = config.overlap.sqrt();
        let sin = (1.0 - config.overlap).max(0.0).sqrt();
        let b = if two_k > k { &a * cos + frame.columns(k, k) * sin } else { a.clone() };
        let rotation = rotation_without_fixed_points(rng, k);
        let transition = &a * (rotation - DMatrix::identity(k, k)) * a.transpose();
        let label_map = tight_frame(rng, k, config.c);
        let used = if sin > 0.0 { frame } else { a.clone() };
        Plant { a, b, transition, label_map, used }
    }

    /// The exact subspace overlap `‖P_A B‖² / ‖B‖²`.
    pub fn planted_overlap(&self) -> f64 {
        let pa = &self.a * self.a.transpose();
        frobenius_sq(&(pa * &self.b)) / frobenius_sq(&self.b)
    }

    /// Class index of a sum-pooled sentence.
    pub fn label_of(&self, sum: &DVector<f64>) -> usize {
        let logits = self.label_map.transpose() * (self.b.transpose() * sum);
        logits.argmax().0
    }
}

/// Deterministic stream of synthetic sentences.
pub struct SynthCorpus<T: Scalar> {
    config: SynthConfig,
    plant: Plant,
    rng: ChaCha8Rng,
    emitted: usize,
    pending_mirror: Option<DMatrix<f64>>,
    reflector: DMatrix<f64>,
    _scalar: std::marker::PhantomData<T>,
}

impl<T: Scalar> SynthCorpus<T> {
    pub fn plant(&self) -> &Plant {
        &self.plant
    }

    pub fn config(&self) -> &SynthConfig {
        &self.config
    }

    fn draw_sentence(&mut self) -> (DMatrix<f64>, usize) {
        let d = self.config.d;
        let (lo, hi) = self.config.len_range;
        let len = self.rng.random_range(lo..=hi);
        let mut tokens = DMatrix::zeros(len, d);
        let mut prefix = DVector::<f64>::zeros(d);
        for t in 0..len {
            let token = if t == 0 {
                DVector::from_fn(d, |_, _| self.rng.sample(StandardNormal))
            } else {
                let noise = DVector::from_fn(d, |_, _| self.rng.sample::<f64, _>(StandardNormal));
                &self.plant.transition * &prefix + noise * self.config.noise_sigma
            };
            prefix += &token;
            tokens.set_row(t, &token.transpose());
        }
        let label = self.plant.label_of(&prefix);
        (tokens, label)
    }

    fn to_sample(tokens: &DMatrix<f64>, label: usize) -> SentenceSample<T> {
        let converted = tokens.map(T::lit);
        SentenceSample::new(converted, label).expect("generated sentences are valid")
    }
}

impl<T: Scalar> Iterator for SynthCorpus<T> {
    type Item = SentenceSample<T>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.emitted >= self.config.n {
            return None;
        }
        self.emitted += 1;
        if let Some(mirrored) = self.pending_mirror.take() {
            let sum = mirrored.row_sum().transpose();
            let label = self.plant.label_of(&sum);
            return Some(Self::to_sample(&mirrored, label));
        }
        let (tokens, label) = self.draw_sentence();
        if self.config.mirror {
            self.pending_mirror = Some(&tokens * &self.reflector);
        }
        Some(Self::to_sample(&tokens, label))
    }
}

/// Starts a deterministic stream for `config`.
pub fn generate<T: Scalar>(config: &SynthConfig) -> Result<SynthCorpus<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let plant = Plant::draw(config, &mut rng);
    let d = config.d;
    // reflection x ↦ x − 2 P⊥ x, applied to row vectors; symmetric
    let keep = &plant.used * plant.used.transpose();
    let reflector = keep * 2.0 - DMatrix::identity(d, d);
    Ok(SynthCorpus {
        config: config.clone(),
        plant,
        rng,
        emitted: 0,
        pending_mirror: None,
        reflector,
        _scalar: std::marker::PhantomData,
    })
}

/// Seed for shard `shard` of a stream seeded with `seed`.
pub fn shard_seed(seed: u64, shard: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(shard + 1);
    rng.random()
}

/// Accumulates a whole synthetic corpus.
pub fn corpus_stats(config: &SynthConfig) -> Result<(SufficientStats<f64>, Plant)> {
    let corpus = generate::<f64>(config)?;
    let plant = corpus.plant().clone();
    let mut stats = SufficientStats::new(config.d, config.c, 0);
    for s in corpus {
        stats.accumulate(&s)?;
    }
    Ok((stats, plant))
}

/// One member of a planted-overlap family, scored as a pretrained encoder would be.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyPoint {
    pub config: SynthConfig,
    /// Mean-pooled score at `k = k_true`.
    pub ntps: f64,
    /// Training MSE of a least-squares probe on mean-pooled features projected onto `V`.
    pub probe_mse: f64,
    /// The same probe on all `d` features.
    pub full_probe_mse: f64,
    /// `1 − overlap`: the label directions the next-token subspace misses.
    pub headroom: f64,
}

/// `levels` configurations with overlaps evenly spaced over `[0, 1]` and consecutive seeds.
pub fn overlap_family(levels: usize, base: &SynthConfig) -> Vec<SynthConfig> {
    let denom = levels.saturating_sub(1).max(1) as f64;
    (0..levels)
        .map(|i| SynthConfig { overlap: i as f64 / denom, seed: base.seed.wrapping_add(i as u64), ..base.clone() })
        .collect()
}

pub fn family_point(config: &SynthConfig) -> Result<FamilyPoint> {
    let samples: Vec<SentenceSample<f64>> = generate(config)?.collect();
    let mut stats = SufficientStats::new(config.d, config.c, 0);
    for s in &samples {
        stats.accumulate(s)?;
    }
    let m = stats.finalize()?;
    let k = config.k_true;
    let u = perception_subspace(&m, k, Pooling::Mean)?;
    let v = autoregressive_subspace(&m, k)?;
    let score = ntps(&u.basis, &v.basis)?;
    let features = pooled_features(&samples, Pooling::Mean)?;
    let labels: Vec<usize> = samples.iter().map(|s| s.label()).collect();
    let targets = one_hot::<f64>(&labels, config.c)?;
    let probe = ols_probe(&(&features * &v.basis), &targets)?;
    let full = ols_probe(&features, &targets)?;
    Ok(FamilyPoint {
        config: config.clone(),
        ntps: score,
        probe_mse: probe.mse,
        full_probe_mse: full.mse,
        headroom: 1.0 - config.overlap,
    })
}

/// Per-scale decoding statistics of the margin Monte Carlo.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginSweep {
    pub scales: Vec<f64>,
    pub accuracy: Vec<f64>,
    pub guaranteed_fraction: Vec<f64>,
    /// Trials where the guarantee held but decoding failed (must be 0).
    pub implication_violations: usize,
    pub trials: usize,
}

impl MarginSweep {
    /// Accuracy never drops as the noise scale shrinks.
    pub fn monotone(&self) -> bool {
        self.accuracy.windows(2).all(|w| w[1] >= w[0])
    }

    /// Accuracy is 1 at every scale where all trials are within the guarantee radius.
    pub fn saturates(&self) -> bool {
        let mut any = false;
        for (acc, g) in self.accuracy.iter().zip(&self.guaranteed_fraction) {
            if *g == 1.0 {
                any = true;
                if *acc != 1.0 {
                    return false;
                }
            }
        }
        any
    }
}

/// Decodes `target + s·ξ` against a random vocabulary for shrinking `s`.
///
/// Each trial keeps its target and noise direction across scales, so its
/// decoding margin is affine in `s`. Scales run geometrically from `4` down to
/// half the smallest guarantee radius over all trials.
pub fn margin_sweep(d: usize, vocab_size: usize, trials: usize, seed: u64) -> Result<MarginSweep> {
    if vocab_size < 2 || trials == 0 || d == 0 {
        return Err(NtpsError::InvalidConfig("margin sweep needs d >= 1, vocab >= 2, trials >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = standard_normal_matrix(&mut rng, vocab_size, d);
    let diameter = vocab_diameter(&vocab);
    let mut cases = Vec::with_capacity(trials);
    let mut min_radius = f64::INFINITY;
    while cases.len() < trials {
        let target = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let dir = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal)).normalize();
        let probe = margin_decode_check_with_diameter(&vocab, diameter, &target, &target);
        let Ok(check) = probe else { continue };
        min_radius = min_radius.min(check.margin / check.diameter);
        cases.push((target, dir));
    }

    let mut scales = Vec::new();
    let floor = 0.5 * min_radius;
    let mut s = 4.0;
    while s > floor {
        scales.push(s);
        s *= 0.5;
    }
    scales.push(floor);

    let mut accuracy = Vec::with_capacity(scales.len());
    let mut guaranteed_fraction = Vec::with_capacity(scales.len());
    let mut implication_violations = 0;
    for &scale in &scales {
        let (mut correct, mut guaranteed) = (0usize, 0usize);
        for (target, dir) in &cases {
            let predicted = target + dir * scale;
            let check = margin_decode_check_with_diameter(&vocab, diameter, target, &predicted)?;
            correct += check.correct as usize;
            guaranteed += check.guaranteed as usize;
            if check.guaranteed && !check.correct {
                implication_violations += 1;
            }
        }
        accuracy.push(correct as f64 / trials as f64);
        guaranteed_fraction.push(guaranteed as f64 / trials as f64);
    }
    Ok(MarginSweep { scales, accuracy, guaranteed_fraction, implication_violations, trials })
}

/// One theorem check on one configuration. `slack >= 0` iff the check passed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub check: String,
    pub config: usize,
    pub passed: bool,
    pub slack: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremReport {
    pub configs: Vec<SynthConfig>,
    pub checks: Vec<CheckResult>,
    pub passed: usize,
    pub failed: usize,
}

impl TheoremReport {
    pub fn all_passed(&self) -> bool {
        self.failed == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteOptions {
    pub perturbations: usize,
    pub perturbation_norm: f64,
    pub random_encoders: usize,
    pub margin_trials: usize,
    pub margin_vocab: usize,
    /// Allowed `|ntps − overlap|` for interior overlap levels.
    pub recovery_tolerance: f64,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            perturbations: 20,
            perturbation_norm: 1e-3,
            random_encoders: 4,
            margin_trials: 1000,
            margin_vocab: 32,
            recovery_tolerance: 0.15,
        }
    }
}

/// Configurations of the default validation grid: every `d` in `{8, 16, 32}`
/// with each overlap level, plus a noiseless mirrored fully-aligned corpus per `d`.
pub fn default_grid(overlaps: &[f64], seed: u64) -> Vec<SynthConfig> {
    let mut grid = Vec::new();
    for &d in &[8usize, 16, 32] {
        for &overlap in overlaps {
            grid.push(SynthConfig { d, overlap, n: 600, seed, ..SynthConfig::default() });
        }
        grid.push(SynthConfig { d, overlap: 1.0, n: 600, noise_sigma: 0.0, seed, ..SynthConfig::default() });
    }
    grid
}

fn perturbation<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, norm: f64) -> DMatrix<f64> {
    let g = standard_normal_matrix(rng, rows, cols);
    let len = g.norm();
    g * (norm / len)
}

fn push(checks: &mut Vec<CheckResult>, config: usize, check: &str, slack: f64, value: f64) {
    checks.push(CheckResult { check: check.to_string(), config, passed: slack >= 0.0, slack, value });
}

fn run_config(index: usize, config: &SynthConfig, opts: &SuiteOptions, checks: &mut Vec<CheckResult>) -> Result<()> {
    let (stats, _) = corpus_stats(config)?;
    let m = stats.finalize()?;
    let k = config.k_true;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0f_7e57);

    // plant-and-recover with mean pooling
    let u_mean = perception_subspace(&m, k, Pooling::Mean)?;
    let v = autoregressive_subspace(&m, k)?;
    let recovered = ntps(&u_mean.basis, &v.basis)?;
    let recovery_slack = if config.overlap >= 1.0 && config.noise_sigma == 0.0 {
        recovered - 0.99
    } else if config.overlap <= 0.0 {
        0.05 - recovered
    } else {
        opts.recovery_tolerance - (recovered - config.overlap).abs()
    };
    push(checks, index, "plant_recovery", recovery_slack, recovered);

    // closed-form W beats random perturbations
    let w = optimal_w(&m, &v.basis)?;
    let base = autoregressive_loss(&m, &v.basis, &w)?;
    let mut w_slack = f64::INFINITY;
    for _ in 0..opts.perturbations {
        let delta = perturbation(&mut rng, w.nrows(), w.ncols(), opts.perturbation_norm);
        let loss = autoregressive_loss(&m, &v.basis, &(&w + delta))?;
        w_slack = w_slack.min(loss - base);
    }
    push(checks, index, "w_optimality", w_slack, base);

    // closed-form Z beats random perturbations
    let u = perception_subspace(&m, k, Pooling::Sum)?;
    let z = optimal_z(&m, &u.basis, Pooling::Sum)?;
    let base_z = perception_loss_at(&m, &u.basis, &z, Pooling::Sum)?;
    let mut z_slack = f64::INFINITY;
    for _ in 0..opts.perturbations {
        let delta = perturbation(&mut rng, z.nrows(), z.ncols(), opts.perturbation_norm);
        let loss = perception_loss_at(&m, &u.basis, &(&z + delta), Pooling::Sum)?;
        z_slack = z_slack.min(loss - base_z);
    }
    push(checks, index, "z_optimality", z_slack, base_z);

    // minimal loss equals trace minus eigenvalue sum
    let loss_u = perception_loss_ridged(&m, &u.basis, Pooling::Sum, u.regularization.ridge)?;
    let eig_sum = u.eigenvalues.sum();
    let identity_err = (m.yy - loss_u - eig_sum).abs();
    push(checks, index, "eigenvalue_sum", 1e-8 * eig_sum.abs().max(1.0) - identity_err, identity_err);

    // excess-loss sandwich for the autoregressive encoder and random encoders
    let mut encoders = vec![("sandwich_autoregressive".to_string(), v.basis.clone())];
    for j in 0..opts.random_encoders {
        encoders.push((format!("sandwich_random_{j}"), standard_normal_matrix(&mut rng, config.d, k)));
    }
    for (name, enc) in encoders {
        let r = excess_loss_and_bounds(&m, &u, &enc)?;
        let tol = 1e-8 * r.excess_loss.abs().max(1.0);
        let slack = (r.lower_slack() + tol).min(r.upper_slack() + tol);
        push(checks, index, &name, slack, r.excess_loss);
    }

    if config.noise_sigma == 0.0 && config.overlap >= 1.0 && config.mirror && config.n % 2 == 0 {
        let r = excess_loss_and_bounds(&m, &u, &v.basis)?;
        push(checks, index, "aligned_excess", 1e-6 * m.yy - r.excess_loss, r.excess_loss);
    }

    let sweep = margin_sweep(config.d, opts.margin_vocab, opts.margin_trials, config.seed)?;
    let margin_ok = sweep.implication_violations == 0 && sweep.monotone() && sweep.saturates();
    push(
        checks,
        index,
        "margin_decoding",
        if margin_ok { 0.0 } else { -1.0 },
        sweep.accuracy.last().copied().unwrap_or(0.0),
    );
    Ok(())
}

/// Runs every check on every configuration. Numerical failures inside a
/// configuration are recorded as a failed `error` check rather than returned.
pub fn theorem_suite(grid: &[SynthConfig], opts: &SuiteOptions) -> Result<TheoremReport> {
    for config in grid {
        config.validate()?;
    }
    let mut checks = Vec::new();
    for (i, config) in grid.iter().enumerate() {
        if run_config(i, config, opts, &mut checks).is_err() {
            push(&mut checks, i, "error", -1.0, f64::NAN);
        }
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    Ok(TheoremReport { configs: grid.to_vec(), passed: checks.len() - failed, failed, checks })
}
