//! Invariants of the encoder, the dependence measure, the metrics and the back-test.

mod common;

use dishft::distill::{centering, hsic, Bandwidth, HsicConfig, KernelKind};
use dishft::evalkit::{
    accuracy, backtest, confusion, equal_weight, mcc, oracle_probabilities, BacktestPolicy,
};
use dishft::marketdata::{build_relation, generate_synthetic, RegimeEvent, SyntheticSpec};
use dishft::stgnn::{STConfig, STModel, SpatialKind, TemporalKind};
use ndgrad::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn st_model(kind: SpatialKind, seed: u64) -> STModel {
    let cfg = STConfig {
        temporal_kind: TemporalKind::Gru,
        spatial_kind: kind,
        hidden_dim: 5,
        spatial_layers: 2,
        output_dim: 3,
    };
    STModel::new(cfg, 2, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| StandardNormal.sample(rng)).unwrap()
}

/// Rows of `[N × L × M]` history reordered so that new row `i` is old row `perm[i]`.
fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let row = t.numel() / t.shape()[0];
    let mut data = Vec::with_capacity(t.numel());
    for &p in perm {
        data.extend_from_slice(&t.data()[p * row..(p + 1) * row]);
    }
    Tensor::new(t.shape().to_vec(), data).unwrap()
}

fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        p.swap(i, rng.random_range(0..=i));
    }
    p
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn encoder_is_permutation_equivariant(seed in 0u64..1000, gat in any::<bool>()) {
        let kind = if gat { SpatialKind::Gat } else { SpatialKind::Gcn };
        let panel = common::random_panel(6, 10, 2, seed);
        let a = build_relation(&panel).unwrap();
        let model = st_model(kind, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 7);
        let x = normal_tensor(&mut rng, &[6, 4, 2]);
        let perm = shuffled(6, seed);
        let out = model.st_forward(&x, &a).unwrap();
        let out_p = model.st_forward(&permute_rows(&x, &perm), &a.permuted(&perm)).unwrap();
        let expected = permute_rows(&out, &perm);
        prop_assert!(out_p.max_abs_diff(&expected).unwrap() < 1e-12);
    }

    #[test]
    fn unrelated_stocks_do_not_move_each_other(seed in 0u64..1000, gat in any::<bool>()) {
        // Stocks alternate between two industries, so stock 0 never sees stock 1.
        let kind = if gat { SpatialKind::Gat } else { SpatialKind::Gcn };
        let panel = common::random_panel(4, 10, 2, seed);
        let a = build_relation(&panel).unwrap();
        let model = st_model(kind, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = normal_tensor(&mut rng, &[4, 4, 2]);
        let mut y = x.clone();
        for v in &mut y.data_mut()[8..16] {
            *v += 3.0;
        }
        let (ox, oy) = (model.st_forward(&x, &a).unwrap(), model.st_forward(&y, &a).unwrap());
        for s in [0, 2] {
            prop_assert_eq!(&ox.data()[s * 3..s * 3 + 3], &oy.data()[s * 3..s * 3 + 3]);
        }
        prop_assert_ne!(&ox.data()[3..6], &oy.data()[3..6]);
    }

    #[test]
    fn hsic_is_symmetric(seed in 0u64..1000, m in 4usize..24, linear in any::<bool>()) {
        let cfg = HsicConfig {
            kernel: if linear { KernelKind::Linear } else { KernelKind::Rbf },
            ..HsicConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = normal_tensor(&mut rng, &[m, 3]);
        let y = normal_tensor(&mut rng, &[m, 3]);
        let (xy, yx) = (hsic(&x, &y, &cfg).unwrap(), hsic(&y, &x, &cfg).unwrap());
        prop_assert!((xy - yx).abs() < 1e-12, "{} vs {}", xy, yx);
    }

    #[test]
    fn median_rbf_hsic_ignores_input_scale(seed in 0u64..1000, m in 4usize..24, c in 0.01f64..100.0) {
        let cfg = HsicConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = normal_tensor(&mut rng, &[m, 3]);
        let y = normal_tensor(&mut rng, &[m, 3]);
        let xs = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v * c).collect()).unwrap();
        let (a, b) = (hsic(&x, &y, &cfg).unwrap(), hsic(&xs, &y, &cfg).unwrap());
        prop_assert!((a - b).abs() < 1e-10 * a.abs().max(1.0), "{} vs {}", a, b);
    }

    #[test]
    fn hsic_of_a_constant_is_zero(seed in 0u64..1000, m in 2usize..24, v in -5.0f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = normal_tensor(&mut rng, &[m, 3]);
        let x = Tensor::full(vec![m, 3], v).unwrap();
        for cfg in [HsicConfig::default(), HsicConfig { kernel: KernelKind::Linear, ..HsicConfig::default() }] {
            prop_assert!(hsic(&x, &y, &cfg).unwrap().abs() < 1e-12);
        }
    }

    #[test]
    fn mcc_is_bounded_and_label_swap_symmetric(pairs in prop::collection::vec((any::<bool>(), any::<bool>()), 1..80)) {
        let (pred, truth): (Vec<bool>, Vec<bool>) = pairs.into_iter().unzip();
        let m = mcc(&pred, &truth).unwrap();
        prop_assert!((-1.0..=1.0).contains(&m));
        let np: Vec<bool> = pred.iter().map(|b| !b).collect();
        let nt: Vec<bool> = truth.iter().map(|b| !b).collect();
        prop_assert!((m - mcc(&np, &nt).unwrap()).abs() < 1e-12);
        let c = confusion(&pred, &truth).unwrap();
        prop_assert_eq!(c.total() as usize, pred.len());
    }

    #[test]
    fn accuracy_of_negated_predictions_is_complementary(pairs in prop::collection::vec((any::<bool>(), any::<bool>()), 1..80)) {
        let (pred, truth): (Vec<bool>, Vec<bool>) = pairs.into_iter().unzip();
        let np: Vec<bool> = pred.iter().map(|b| !b).collect();
        let sum = accuracy(&pred, &truth).unwrap() + accuracy(&np, &truth).unwrap();
        prop_assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn oracle_never_trails_equal_weight(
        seed in 0u64..10_000,
        n in 4usize..20,
        top in 1usize..4,
        every in 1usize..8,
        vol in 0.005f64..0.05,
        shift in -0.01f64..0.01,
    ) {
        let spec = SyntheticSpec {
            n_stocks: n,
            n_days: 90,
            n_sectors: 2,
            regime_schedule: vec![RegimeEvent { day: 40, sector: 1, drift_shift: shift }],
            base_vol: vol,
            base_drift: 0.0,
            seed,
            sector_corr: 0.5,
            start_price: 50.0,
        };
        let panel = generate_synthetic(&spec).unwrap();
        let anchors: Vec<usize> = (30..90).collect();
        let policy = BacktestPolicy { top_k: top.min(n), rebalance_every: every, transaction_cost: 0.0 };
        let oracle = backtest(&oracle_probabilities(&anchors, &panel, &policy), &anchors, &panel, &policy).unwrap();
        let ew = equal_weight(&anchors, &panel, &policy).unwrap();
        prop_assert!(oracle.final_return >= ew.final_return - 1e-12);
    }

    #[test]
    fn positions_ignore_later_prices(seed in 0u64..10_000, cut in 35usize..85, every in 1usize..6) {
        let panel = common::random_panel(8, 90, 1, seed);
        let anchors: Vec<usize> = (30..90).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let probs: Vec<Vec<f64>> = anchors.iter().map(|_| (0..8).map(|_| rng.random()).collect()).collect();
        let policy = BacktestPolicy { top_k: 3, rebalance_every: every, transaction_cost: 0.001 };
        let poisoned = panel.with_values_after(cut, 1e6);
        let (a, b) = (
            backtest(&probs, &anchors, &panel, &policy).unwrap(),
            backtest(&probs, &anchors, &poisoned, &policy).unwrap(),
        );
        let upto = |r: &dishft::evalkit::BacktestResult| {
            r.positions_log.iter().filter(|(d, _)| *d <= cut).cloned().collect::<Vec<_>>()
        };
        prop_assert_eq!(upto(&a), upto(&b));
        let k = cut - anchors[0];
        prop_assert_eq!(&a.equity_curve[..=k], &b.equity_curve[..=k]);
    }
}

#[test]
fn hsic_of_independent_normals_is_near_zero() {
    let cfg = HsicConfig::default();
    let mut total = 0.0;
    for seed in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = normal_tensor(&mut rng, &[64, 4]);
        let y = normal_tensor(&mut rng, &[64, 4]);
        total += hsic(&x, &y, &cfg).unwrap();
    }
    let mean = total / 50.0;
    assert!(mean.abs() < 0.05, "mean HSIC {mean}");
}

#[test]
fn hsic_detects_dependence() {
    let cfg = HsicConfig { bandwidth: Bandwidth::Median, ..HsicConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = normal_tensor(&mut rng, &[64, 4]);
    let y = Tensor::new(vec![64, 4], x.data().iter().map(|v| v.tanh()).collect()).unwrap();
    let z = normal_tensor(&mut rng, &[64, 4]);
    let (dep, ind) = (hsic(&x, &y, &cfg).unwrap(), hsic(&x, &z, &cfg).unwrap());
    assert!(dep > 5.0 * ind.abs(), "{dep} vs {ind}");
}

#[test]
fn centering_is_symmetric_and_idempotent() {
    for m in [1, 2, 5, 64] {
        let h = centering(m);
        let d = h.data();
        for i in 0..m {
            for j in 0..m {
                assert!((d[i * m + j] - d[j * m + i]).abs() < 1e-12);
                let hh: f64 = (0..m).map(|k| d[i * m + k] * d[k * m + j]).sum();
                assert!((hh - d[i * m + j]).abs() < 1e-12, "m = {m}");
            }
        }
    }
}

#[test]
fn encoder_is_deterministic_per_seed() {
    let panel = common::random_panel(5, 10, 2, 1);
    let a = build_relation(&panel).unwrap();
    let x = normal_tensor(&mut ChaCha8Rng::seed_from_u64(1), &[5, 4, 2]);
    for kind in [SpatialKind::Gcn, SpatialKind::Gat] {
        let (m1, m2) = (st_model(kind, 9), st_model(kind, 9));
        assert_eq!(m1.params, m2.params);
        assert_eq!(m1.st_forward(&x, &a).unwrap(), m2.st_forward(&x, &a).unwrap());
        assert_ne!(m1.params, st_model(kind, 10).params);
    }
}
