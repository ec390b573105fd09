mod common;

use std::collections::BTreeMap;

use common::*;
use nalgebra::DMatrix;
use ntps_core::analysis::*;
use ntps_core::synth::{family_point, overlap_family, SynthConfig};
use ntps_core::{autoregressive_subspace, ntps, perception_subspace, Moments, Pooling, SufficientStats};
use proptest::prelude::*;
use rand::Rng;

/// Rank of `x[i]`: one plus the number of smaller entries plus half the other ties.
fn brute_force_ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let below = x.iter().filter(|&&w| w < v).count() as f64;
            let ties = x.iter().filter(|&&w| w == v).count() as f64;
            1.0 + below + (ties - 1.0) / 2.0
        })
        .collect()
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn tied_spearman_matches_brute_force() {
    let x = [1.0, 2.0, 2.0, 3.0];
    let y = [1.0, 3.0, 2.0, 4.0];
    let want = pearson(&brute_force_ranks(&x), &brute_force_ranks(&y));
    assert!((spearman(&x, &y).unwrap() - want).abs() < 1e-12);
}

proptest! {
    #[test]
    fn spearman_matches_brute_force(pairs in prop::collection::vec((0i32..6, 0i32..6), 2..30)) {
        let x: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
        let y: Vec<f64> = pairs.iter().map(|p| p.1 as f64).collect();
        let (rx, ry) = (brute_force_ranks(&x), brute_force_ranks(&y));
        match spearman(&x, &y) {
            Ok(r) => {
                prop_assert!((-1.0..=1.0).contains(&r));
                prop_assert!((r - pearson(&rx, &ry)).abs() < 1e-12);
            }
            Err(e) => prop_assert!(matches!(e, ntps_core::NtpsError::ZeroVariance(_))),
        }
    }

    #[test]
    fn spearman_ignores_increasing_transforms(x in prop::collection::vec(-5.0f64..5.0, 3..25), y in prop::collection::vec(-5.0f64..5.0, 3..25)) {
        let n = x.len().min(y.len());
        let (x, y) = (&x[..n], &y[..n]);
        if let Ok(r) = spearman(x, y) {
            let fx: Vec<f64> = x.iter().map(|v| v.powi(3) + v.exp()).collect();
            let gy: Vec<f64> = y.iter().map(|v| 3.0 * v - 7.0).collect();
            prop_assert!((spearman(&fx, &gy).unwrap() - r).abs() < 1e-12);
            let neg: Vec<f64> = y.iter().map(|v| -v).collect();
            prop_assert!((spearman(x, &neg).unwrap() + r).abs() < 1e-12);
        }
    }

    #[test]
    fn ols_mse_never_grows_with_nested_features(seed in any::<u64>(), n in 5usize..60, d in 1usize..8) {
        let mut r = rng(seed);
        let x = gaussian(&mut r, n, d);
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..3)).collect();
        let y = one_hot::<f64>(&labels, 3).unwrap();
        let mut prev = f64::INFINITY;
        for cols in 1..=d {
            let fit = ols_probe(&x.columns(0, cols).into_owned(), &y).unwrap();
            prop_assert!(fit.mse <= prev + 1e-12);
            prev = fit.mse;
        }
    }

    #[test]
    fn gain_ranking_depends_only_on_score_order(scores in prop::collection::vec(0.0f64..1.0, 2..12)) {
        let named: Vec<(String, f64)> = scores.iter().enumerate().map(|(i, s)| (format!("d{i}"), *s)).collect();
        let squashed: Vec<(String, f64)> = named.iter().map(|(n, s)| (n.clone(), s.sqrt() * 0.5 + 0.1)).collect();
        let a = predict_lora_gain(&named, None).unwrap();
        let b = predict_lora_gain(&squashed, None).unwrap();
        let order = |p: &GainPrediction| p.ranking.iter().map(|e| e.dataset.clone()).collect::<Vec<_>>();
        prop_assert_eq!(order(&a), order(&b));
    }
}

#[test]
fn ols_realizable_and_normal_equations() {
    let mut r = rng(50);
    let x = gaussian(&mut r, 40, 5);
    let w = gaussian(&mut r, 5, 3);
    let exact = ols_probe(&x, &(&x * &w)).unwrap();
    assert!(exact.mse <= 1e-10);

    let labels: Vec<usize> = (0..40).map(|_| r.random_range(0..3)).collect();
    let y = one_hot::<f64>(&labels, 3).unwrap();
    let fit = ols_probe(&x, &y).unwrap();
    let oracle = gauss_solve(&(x.transpose() * &x), &(x.transpose() * &y));
    assert!((fit.weights - oracle).amax() <= 1e-8);
}

#[test]
fn logistic_gradient_matches_finite_differences() {
    let mut r = rng(51);
    let x = gaussian(&mut r, 60, 3);
    let labels: Vec<usize> = (0..60).map(|i| (i + usize::from(x[(i, 0)] > 0.0)) % 3).collect();
    let fit = logistic_probe(&x, &labels, 3, 500).unwrap();
    let xb = with_bias(&x);
    let (_, grad) = softmax_loss_grad(&xb, &labels, &fit.weights);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for i in 0..fit.weights.nrows() {
        for j in 0..fit.weights.ncols() {
            let mut plus = fit.weights.clone();
            plus[(i, j)] += h;
            let mut minus = fit.weights.clone();
            minus[(i, j)] -= h;
            let fd = (softmax_loss_grad(&xb, &labels, &plus).0 - softmax_loss_grad(&xb, &labels, &minus).0) / (2.0 * h);
            worst = worst.max((fd - grad[(i, j)]).abs());
        }
    }
    assert!(worst <= 1e-5, "max gradient gap {worst}");
}

#[test]
fn logistic_separable_blobs_fit_perfectly() {
    let mut r = rng(52);
    let mut x = gaussian(&mut r, 100, 2) * 0.3;
    let labels: Vec<usize> = (0..100).map(|i| i % 2).collect();
    for i in 0..100 {
        x[(i, 0)] += if labels[i] == 0 { -2.0 } else { 2.0 };
    }
    assert_eq!(logistic_probe(&x, &labels, 2, 500).unwrap().accuracy, 1.0);
}

#[test]
fn logistic_on_independent_labels_is_chance() {
    for seed in 0..20 {
        let mut r = rng(1000 + seed);
        let x = gaussian(&mut r, 2000, 2);
        let labels: Vec<usize> = (0..2000).map(|i| i % 2).collect();
        let acc = logistic_probe(&x, &labels, 2, 500).unwrap().accuracy;
        assert!((acc - 0.5).abs() <= 0.05, "seed {seed}: accuracy {acc}");
    }
}

#[test]
fn logistic_rejects_too_few_samples() {
    assert!(logistic_probe(&DMatrix::<f64>::zeros(2, 2), &[0, 1], 3, 10).is_err());
}

fn moments_of(config: &SynthConfig, layer: u32) -> Moments<f64> {
    let mut s = SufficientStats::new(config.d, config.c, layer);
    for x in ntps_core::synth::generate::<f64>(config).unwrap() {
        s.accumulate(&x).unwrap();
    }
    s.finalize().unwrap()
}

#[test]
fn single_cell_equals_direct_score() {
    let config = SynthConfig { d: 10, n: 200, ..SynthConfig::default() };
    let m = moments_of(&config, 3);
    let ds = DatasetLayers { name: "a".into(), layers: BTreeMap::from([(3, m.clone())]) };
    let result = sweep(&[ds], &[0.5], None).unwrap();
    assert_eq!(result.cells.len(), 1);
    let k = 5;
    let direct = ntps(&perception_subspace(&m, k, Pooling::Mean).unwrap().basis, &autoregressive_subspace(&m, k).unwrap().basis).unwrap();
    assert_eq!(result.cells[0].k, k);
    assert!((result.cells[0].ntps - direct).abs() < 1e-12);
    assert!(result.correlations.is_empty() && result.best_config.is_none());
}

#[test]
fn cells_do_not_depend_on_layer_set() {
    let configs: Vec<SynthConfig> = (0..3).map(|i| SynthConfig { d: 8, n: 150, seed: i, ..SynthConfig::default() }).collect();
    let layers: BTreeMap<u32, Moments<f64>> = configs.iter().enumerate().map(|(i, c)| (i as u32, moments_of(c, i as u32))).collect();
    let grid = default_k_grid();
    let all = sweep_cells(&[DatasetLayers { name: "x".into(), layers: layers.clone() }], &grid).unwrap();
    assert_eq!(all.len(), 3 * 19);
    for (layer, m) in layers.into_iter().rev() {
        let alone = sweep_cells(&[DatasetLayers { name: "x".into(), layers: BTreeMap::from([(layer, m)]) }], &grid).unwrap();
        let matching: Vec<_> = all.iter().filter(|c| c.layer == layer).cloned().collect();
        assert_eq!(alone, matching);
    }
}

#[test]
fn planted_family_sweep_finds_strong_configuration() {
    let family = overlap_family(10, &SynthConfig { n: 1000, seed: 77, ..SynthConfig::default() });
    let datasets: Vec<DatasetLayers<f64>> = family
        .iter()
        .enumerate()
        .map(|(i, c)| DatasetLayers { name: format!("set{i}"), layers: BTreeMap::from([(0, moments_of(c, 0))]) })
        .collect();
    let metrics: BTreeMap<String, f64> = family.iter().enumerate().map(|(i, c)| (format!("set{i}"), c.overlap)).collect();
    let result = sweep(&datasets, &default_k_grid(), Some(&metrics)).unwrap();
    let best = result.best_config.unwrap();
    assert!(best.spearman_r.unwrap() >= 0.95, "{best:?}");
    assert_eq!(result.correlations.len(), 19);
}

#[test]
fn sweep_requires_metrics_for_every_dataset() {
    let config = SynthConfig { d: 8, n: 100, ..SynthConfig::default() };
    let ds = |name: &str| DatasetLayers { name: name.into(), layers: BTreeMap::from([(0, moments_of(&config, 0))]) };
    let metrics = BTreeMap::from([("a".to_string(), 1.0)]);
    assert!(sweep(&[ds("a"), ds("b")], &[0.5], Some(&metrics)).is_err());
    assert!(sweep(&[ds("a")], &[0.5], Some(&metrics)).is_err());
    assert!(sweep::<f64>(&[], &[0.5], None).is_err());
}

#[test]
fn best_config_prefers_earlier_layer_and_smaller_k_on_ties() {
    let cell = |dataset: &str, layer, k_prop, ntps| SweepCell { dataset: dataset.into(), layer, k_prop, k: 1, ntps };
    let cells = vec![
        cell("a", 2, 0.1, 0.1),
        cell("b", 2, 0.1, 0.9),
        cell("a", 1, 0.2, 0.1),
        cell("b", 1, 0.2, 0.9),
        cell("a", 1, 0.1, 0.9),
        cell("b", 1, 0.1, 0.1),
    ];
    let metrics = BTreeMap::from([("a".to_string(), 0.0), ("b".to_string(), 1.0)]);
    let result = correlate(cells, Some(&metrics)).unwrap();
    let best = result.best_config.unwrap();
    assert_eq!((best.layer, best.k_prop, best.spearman_r), (1, 0.1, Some(-1.0)));
}

#[test]
fn gain_prediction_examples() {
    let scores = vec![("first".to_string(), 0.2), ("second".to_string(), 0.9)];
    let ranking = predict_lora_gain(&scores, None).unwrap();
    assert_eq!(ranking.ranking[0].dataset, "first");
    assert!(ranking.spearman_r.is_none());
    let observed = BTreeMap::from([("first".to_string(), 0.3), ("second".to_string(), 0.05)]);
    let with = predict_lora_gain(&scores, Some(&observed)).unwrap();
    assert_eq!(with.spearman_r, Some(-1.0));
    assert_eq!(with.ranking[1].observed_gain, Some(0.05));
    assert_eq!(observed_gain(0.91, 0.85), 0.91 - 0.85);
}

#[test]
fn headroom_gain_is_anticorrelated_with_score() {
    let family = overlap_family(10, &SynthConfig { n: 1000, seed: 5, ..SynthConfig::default() });
    let points: Vec<_> = family.iter().map(|c| family_point(c).unwrap()).collect();
    let scores: Vec<(String, f64)> = points.iter().enumerate().map(|(i, p)| (format!("set{i}"), p.ntps)).collect();
    let gains: BTreeMap<String, f64> = points.iter().enumerate().map(|(i, p)| (format!("set{i}"), p.headroom)).collect();
    let r = predict_lora_gain(&scores, Some(&gains)).unwrap().spearman_r.unwrap();
    assert!(r <= -0.9, "r = {r}");
}
