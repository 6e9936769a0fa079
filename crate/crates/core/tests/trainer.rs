use std::sync::OnceLock;

use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regimenas_core::arch::{ArchSpec, CellType};
use regimenas_core::data::{generate_synthetic, prepare_panel, FeaturePanel, Regime, Split, SynthMarketConfig, DEFAULT_Z_WINDOW};
use regimenas_core::model::{Forecaster, GateMode, RegimeModel};
use regimenas_core::nn::ParamStore;
use regimenas_core::objective::LossBreakdown;
use regimenas_core::optim::*;
use regimenas_core::train::*;
use regimenas_tensor::Tensor;

fn panel() -> &'static FeaturePanel {
    static PANEL: OnceLock<FeaturePanel> = OnceLock::new();
    PANEL.get_or_init(|| {
        let market = generate_synthetic(&SynthMarketConfig::benchmark(900, 5)).unwrap();
        prepare_panel(&market.series, DEFAULT_Z_WINDOW).unwrap()
    })
}

fn small_cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        max_epochs: 3,
        patience: 2,
        window: 8,
        heads: 2,
        d_k: 8,
        width_scale: 0.0625,
        batch_size: 32,
        max_batches_per_epoch: Some(4),
        seed,
        ..TrainConfig::default()
    }
}

fn small_arch() -> ArchSpec {
    ArchSpec {
        cells: vec![CellType::Gru],
        hidden: vec![128],
        kernel_set: 1,
        range_lookback: 4,
        gate_width: 8,
        ..ArchSpec::default()
    }
}

fn svd_norm(t: &Tensor) -> f64 {
    DMatrix::from_row_slice(t.shape()[0], t.cols(), t.data()).singular_values().max()
}

#[test]
fn adamw_solves_a_scalar_quadratic() {
    // f(w) = (w − 3)², minimum at 3
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::new([1], vec![-2.0]).unwrap(), false, true);
    let mut opt = AdamW::new(&store, 0.0);
    let steps = 500;
    for t in 0..steps {
        let w = store.get(id).data()[0];
        opt.step(&mut store, &[vec![2.0 * (w - 3.0)]], cosine_lr(0.1, t, steps)).unwrap();
    }
    let w = store.get(id).data()[0];
    assert!((w - 3.0).abs() < 1e-6, "{w}");
}

#[test]
fn decay_applies_only_where_allowed() {
    let mut store = ParamStore::new();
    let a = store.add("a", Tensor::full([3], 1.0), false, false);
    let b = store.add("b", Tensor::full([3], 1.0), false, true);
    let mut opt = AdamW::new(&store, 0.1);
    opt.step(&mut store, &[vec![0.0; 3], vec![0.0; 3]], 0.5).unwrap();
    assert!(store.get(a).data().iter().all(|&v| (v - 0.95).abs() < 1e-15));
    assert_eq!(store.get(b).data(), &[1.0; 3]);
    assert!(opt.step(&mut store, &[vec![0.0; 3]], 0.5).is_err());
}

#[test]
fn cosine_schedule_endpoints_and_monotonicity() {
    assert_eq!(cosine_lr(3e-3, 0, 100), 3e-3);
    assert!(cosine_lr(3e-3, 100, 100).abs() < 1e-18);
    assert!((cosine_lr(2.0, 50, 100) - 1.0).abs() < 1e-12);
    let lrs: Vec<f64> = (0..=250).map(|t| cosine_lr(1e-3, t, 250)).collect();
    assert!(lrs.windows(2).all(|p| p[1] <= p[0]));
}

#[test]
fn clipping_thresholds() {
    assert_eq!(adaptive_tau(1.0, 1.0, 1.0, 0.0, 0.0), 1.0);
    assert!((adaptive_tau(1.0, 1.0, 1.0, 1.0, 1.0) - 1.0 / 3.0).abs() < 1e-15);
    let mut g = vec![vec![3.0, 4.0]];
    assert_eq!(clip_gradients(&mut g, 10.0), 5.0);
    assert_eq!(g, vec![vec![3.0, 4.0]]);
    assert_eq!(clip_gradients(&mut g, 2.5), 5.0);
    assert!((global_norm(&g) - 2.5).abs() < 1e-15);
}

#[test]
fn halving_target_halves_the_norm() {
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::new([2, 2], vec![2.0, 0.0, 0.0, 0.5]).unwrap(), true, false);
    apply_spectral_normalization(&mut store, 1.0).unwrap();
    assert!((svd_norm(store.get(id)) - 1.0).abs() < 1e-6);
    let before = store.get(id).clone();
    apply_spectral_normalization(&mut store, 1.5).unwrap();
    assert_eq!(store.get(id), &before);
    assert!(apply_spectral_normalization(&mut store, 0.0).is_err());
}

#[test]
fn plateau_triggers_at_the_exact_epoch() {
    let losses = [1.0, 0.8, 0.8, 0.8 + 1e-12, 0.9, 0.1];
    let mut es = EarlyStopping::new(3);
    let mut stopped_at = None;
    for (e, &l) in losses.iter().enumerate() {
        es.update(e, l);
        if es.should_stop() {
            stopped_at = Some(e);
            break;
        }
    }
    assert_eq!(stopped_at, Some(4));
    assert_eq!(es.best_epoch, 1);
}

#[test]
fn one_epoch_runs_one_epoch() {
    let mut cfg = small_cfg(1);
    cfg.max_epochs = 1;
    cfg.patience = 1;
    let t = train_candidate(&small_arch(), panel(), &cfg).unwrap();
    assert_eq!(t.report.epochs.len(), 1);
    assert_eq!(t.report.epochs_run, 1);
    assert_eq!(t.report.steps, 4);
    assert!(t.report.failed.is_none());
}

#[test]
fn training_is_bit_reproducible() {
    let cfg = small_cfg(7);
    let a = train_candidate(&small_arch(), panel(), &cfg).unwrap();
    let b = train_candidate(&small_arch(), panel(), &cfg).unwrap();
    assert_eq!(a.report.epochs, b.report.epochs);
    assert_eq!(a.report.val, b.report.val);
    assert_eq!(a.model.store.snapshot(), b.model.store.snapshot());
}

#[test]
fn epoch_log_rebuilds_totals() {
    let cfg = small_cfg(2);
    let t = train_candidate(&small_arch(), panel(), &cfg).unwrap();
    for e in &t.report.epochs {
        for bd in [e.train, e.val] {
            let again = LossBreakdown::compose(bd.pred, bd.vol, bd.reg, bd.stable, &cfg.weights);
            assert_eq!(again.total, bd.total);
        }
        assert!(e.mean_tau <= cfg.clip_base);
    }
    let lines = t.report.log_lines();
    assert_eq!(lines.len(), t.report.epochs.len());
    let back: EpochRecord = serde_json::from_str(&lines[0]).unwrap();
    assert_eq!(back, t.report.epochs[0]);
}

#[test]
fn spectral_norms_stay_bounded_for_two_hundred_steps() {
    let mut cfg = small_cfg(3);
    cfg.max_epochs = 50;
    cfg.patience = 50;
    cfg.adaptive_l_target = false;
    cfg.lr = 1e-2;
    let mut model = RegimeModel::new(cfg.model_config(&small_arch(), panel().n_features, GateMode::Learned), 3).unwrap();
    let train = window_rows(panel(), Split::Train, cfg.window, 1);
    let val = window_rows(panel(), Split::Val, cfg.window, 1);
    // 50 epochs of 4 batches; spot-check after each block of 50 steps
    let mut checked = 0;
    for block in 0..4 {
        let mut c = cfg.clone();
        c.max_epochs = 12 + usize::from(block < 2);
        c.patience = c.max_epochs;
        c.seed = block;
        let report = fit(&mut model, panel(), &train, &val[..64], &c).unwrap();
        assert!(report.failed.is_none());
        for p in model.store().params().iter().filter(|p| p.spectral) {
            let s = svd_norm(&p.value);
            assert!(s <= cfg.l_target * 1.01, "{} has σ = {s}", p.name);
            checked += 1;
        }
    }
    assert!(checked > 0);
}

#[test]
fn evaluation_identities() {
    let p = panel();
    let rows = window_rows(p, Split::Test, 8, 1);
    let y: Vec<f64> = rows.iter().map(|&r| p.target[r] * 100.0).collect();
    let perfect = Predictions {
        rows: rows.clone(),
        y: y.clone(),
        y_hat: y.clone(),
        probs: None,
        uncertainty: None,
    };
    let m = metrics_from(&perfect, &p.regime, LossBreakdown::default()).unwrap();
    assert_eq!((m.mae, m.rmse, m.r2), (0.0, 0.0, 1.0));

    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let constant = Predictions {
        y_hat: vec![mean; y.len()],
        ..perfect.clone()
    };
    let m = metrics_from(&constant, &p.regime, LossBreakdown::default()).unwrap();
    assert!(m.r2.abs() < 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let noisy = Predictions {
        y_hat: y.iter().map(|v| v + rng.random_range(-1.0..1.0)).collect(),
        ..perfect
    };
    let m = metrics_from(&noisy, &p.regime, LossBreakdown::default()).unwrap();
    let weighted: f64 = (0..3)
        .filter_map(|r| m.regime_mae[r].map(|e| e * m.regime_count[r] as f64))
        .sum::<f64>()
        / m.n as f64;
    assert!((weighted - m.mae).abs() < 1e-9);
    assert_eq!(m.regime_count.iter().sum::<usize>(), m.n);
    for r in 0..3 {
        let want = rows.iter().filter(|&&row| p.regime[row] == Regime::from_index(r).unwrap()).count();
        assert_eq!(m.regime_count[r], want);
    }
}

#[test]
fn empty_splits_are_rejected() {
    let cfg = small_cfg(0);
    let model = RegimeModel::new(cfg.model_config(&small_arch(), panel().n_features, GateMode::Learned), 0).unwrap();
    assert!(evaluate_rows(&model, panel(), &[], &cfg).is_err());
    let mut m2 = model.clone();
    assert!(fit(&mut m2, panel(), &[], &[40], &cfg).is_err());
}

#[test]
fn oversized_architectures_are_rejected_before_training() {
    let arch = ArchSpec {
        cells: vec![CellType::Lstm; 3],
        hidden: vec![256; 3],
        kernel_set: 2,
        range_lookback: 32,
        gate_width: 32,
        ..ArchSpec::default()
    };
    let mut cfg = small_cfg(0);
    cfg.d_k = 2048;
    cfg.heads = 8;
    cfg.window = 64;
    let err = train_candidate(&arch, panel(), &cfg).err().expect("rejected");
    assert!(err.to_string().contains("cap"), "{err}");
}

#[test]
fn training_improves_validation_loss_across_seeds() {
    let mut improved = 0;
    let runs = 100;
    for seed in 0..runs {
        let mut cfg = small_cfg(1000 + seed);
        cfg.max_epochs = 3;
        cfg.patience = 3;
        cfg.max_batches_per_epoch = Some(3);
        cfg.width_scale = 0.03125;
        let t = train_candidate(&small_arch(), panel(), &cfg).unwrap();
        let r = &t.report;
        if r.epochs[r.best_epoch].val.total < r.epochs[0].val.total {
            improved += 1;
        }
    }
    assert!(improved >= 95, "{improved}/{runs}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn clipped_norm_never_exceeds_tau(seed in 0u64..100_000, tau in 0.01f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..rng.random_range(1..20)).map(|_| rng.random_range(-10.0..10.0)).collect())
            .collect();
        let before = global_norm(&g);
        let reported = clip_gradients(&mut g, tau);
        prop_assert_eq!(reported, before);
        prop_assert!(global_norm(&g) <= tau + 1e-9);
    }

    #[test]
    fn stopping_matches_a_direct_count(losses in prop::collection::vec(0.0f64..1.0, 1..30), patience in 1usize..5) {
        let mut es = EarlyStopping::new(patience);
        let (mut best, mut bad, mut stop) = (f64::INFINITY, 0, None);
        for (e, &l) in losses.iter().enumerate() {
            es.update(e, l);
            if l < best - MIN_IMPROVEMENT {
                best = l;
                bad = 0;
            } else {
                bad += 1;
            }
            if es.should_stop() {
                stop = Some(e);
                break;
            }
            prop_assert!(bad < patience);
        }
        if let Some(e) = stop {
            prop_assert_eq!(bad, patience);
            prop_assert!(e + 1 >= patience);
        }
    }
}
