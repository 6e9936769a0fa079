use proptest::prelude::*;
use regimenas_core::data::indicators::{adx, atr, macd, rsi, sma};
use regimenas_core::data::*;

fn series_from_closes(closes: &[f64]) -> OhlcvSeries {
    let rows = closes
        .iter()
        .enumerate()
        .map(|(t, &c)| {
            let open = if t == 0 { c } else { closes[t - 1] };
            OhlcvRow {
                timestamp: 1_000 + t as i64 * 60,
                open,
                high: c.max(open) * 1.004,
                low: c.min(open) * 0.996,
                close: c,
                volume: 1_000.0 + (t % 7) as f64 * 113.0,
            }
        })
        .collect();
    OhlcvSeries::new(rows).unwrap()
}

/// Deterministic wiggly price path without any randomness.
fn fixture_closes(n: usize) -> Vec<f64> {
    (0..n)
        .map(|t| {
            let x = t as f64;
            100.0 + 3.0 * (0.37 * x).sin() + 1.5 * (1.3 * x).cos() + 0.05 * x
        })
        .collect()
}

// Plain re-implementations used as oracles.

fn oracle_rsi(c: &[f64], n: usize) -> Vec<Option<f64>> {
    let diffs: Vec<f64> = c.windows(2).map(|w| w[1] - w[0]).collect();
    let mut out = vec![None; c.len()];
    if c.len() <= n {
        return out;
    }
    let mut up: f64 = diffs[..n].iter().filter(|d| **d > 0.0).sum::<f64>() / n as f64;
    let mut down: f64 = -diffs[..n].iter().filter(|d| **d < 0.0).sum::<f64>() / n as f64;
    let rs = |u: f64, d: f64| if u == 0.0 && d == 0.0 { 50.0 } else if d == 0.0 { 100.0 } else { 100.0 * u / (u + d) };
    out[n] = Some(rs(up, down));
    for (i, d) in diffs.iter().enumerate().skip(n) {
        up = up + (d.max(0.0) - up) / n as f64;
        down = down + ((-d).max(0.0) - down) / n as f64;
        out[i + 1] = Some(rs(up, down));
    }
    out
}

fn oracle_ema(x: &[Option<f64>], n: usize) -> Vec<Option<f64>> {
    let defined: Vec<(usize, f64)> = x.iter().enumerate().filter_map(|(i, v)| v.map(|v| (i, v))).collect();
    let mut out = vec![None; x.len()];
    if defined.len() < n {
        return out;
    }
    let k = 2.0 / (n as f64 + 1.0);
    let mut e = defined[..n].iter().map(|p| p.1).sum::<f64>() / n as f64;
    out[defined[n - 1].0] = Some(e);
    for &(i, v) in &defined[n..] {
        e += k * (v - e);
        out[i] = Some(e);
    }
    out
}

fn oracle_atr(h: &[f64], l: &[f64], c: &[f64], n: usize) -> Vec<Option<f64>> {
    let tr: Vec<f64> = (1..c.len())
        .map(|t| [h[t] - l[t], (h[t] - c[t - 1]).abs(), (l[t] - c[t - 1]).abs()].into_iter().fold(0.0, f64::max))
        .collect();
    let mut out = vec![None; c.len()];
    let mut a = tr[..n].iter().sum::<f64>() / n as f64;
    out[n] = Some(a);
    for t in n + 1..c.len() {
        a += (tr[t - 1] - a) / n as f64;
        out[t] = Some(a);
    }
    out
}

fn assert_matches(name: &str, got: &[f64], want: &[Option<f64>], tol: f64) {
    assert_eq!(got.len(), want.len());
    let mut compared = 0;
    for (t, (g, w)) in got.iter().zip(want).enumerate() {
        match w {
            None => assert!(g.is_nan(), "{name}[{t}] should be undefined, got {g}"),
            Some(w) => {
                assert!((g - w).abs() < tol, "{name}[{t}]: {g} vs {w}");
                compared += 1;
            }
        }
    }
    assert!(compared > 0, "{name}: nothing compared");
}

#[test]
fn indicators_match_independent_implementations() {
    let s = series_from_closes(&fixture_closes(60));
    let (h, l, c) = (s.highs(), s.lows(), s.closes());
    assert_matches("rsi14", &rsi(&c, 14), &oracle_rsi(&c, 14), 1e-9);
    assert_matches("atr14", &atr(&h, &l, &c, 14), &oracle_atr(&h, &l, &c, 14), 1e-9);
    let m = macd(&c, 12, 26, 9);
    let cs: Vec<Option<f64>> = c.iter().map(|&v| Some(v)).collect();
    let fast = oracle_ema(&cs, 12);
    let slow = oracle_ema(&cs, 26);
    let line: Vec<Option<f64>> = fast.iter().zip(&slow).map(|(a, b)| Some((*a)? - (*b)?)).collect();
    assert_matches("macd line", &m.line, &line, 1e-9);
    assert_matches("macd signal", &m.signal, &oracle_ema(&line, 9), 1e-9);

    // the 20-row case: RSI and ATR are defined from index 14 on
    let short = series_from_closes(&fixture_closes(20));
    let c20 = short.closes();
    assert_matches("rsi14/20", &rsi(&c20, 14), &oracle_rsi(&c20, 14), 1e-9);
    assert_matches(
        "atr14/20",
        &atr(&short.highs(), &short.lows(), &c20, 14),
        &oracle_atr(&short.highs(), &short.lows(), &c20, 14),
        1e-9,
    );
}

#[test]
fn sma_seven_of_one_to_ten() {
    let x: Vec<f64> = (1..=10).map(f64::from).collect();
    assert_eq!(sma(&x, 7)[6], 4.0);
}

#[test]
fn constant_prices_give_zero_returns_and_neutral_rsi() {
    let s = series_from_closes(&[50.0; 80]);
    let p = engineer_features(&s).unwrap();
    assert!(p.column(0).iter().all(|&v| v == 0.0));
    assert!(p.column(12).iter().all(|&v| v == 0.5));
    assert!(p.x.iter().all(|v| v.is_finite()));
}

#[test]
fn features_have_declared_shape_and_targets() {
    let s = series_from_closes(&fixture_closes(120));
    let p = engineer_features(&s).unwrap();
    assert_eq!(p.n_features, N_FEATURES);
    assert_eq!(p.n_rows(), 120 - FEATURE_WARMUP - 1);
    let c = s.closes();
    for (i, &y) in p.target.iter().enumerate() {
        let t = FEATURE_WARMUP + i;
        assert_eq!(y, (c[t + 1] / c[t]).ln());
    }
    assert!(p.sigma.iter().all(|&v| v >= 0.0));
    assert!(engineer_features(&series_from_closes(&fixture_closes(FEATURE_WARMUP + 1))).is_err());
}

#[test]
fn rolling_z_zeroes_constant_columns_and_ignores_shifts() {
    let s = series_from_closes(&fixture_closes(200));
    let raw = engineer_features(&s).unwrap();
    let mut shifted = raw.clone();
    for t in 0..raw.n_rows() {
        shifted.x[t * N_FEATURES + 5] += 7.5;
        shifted.x[t * N_FEATURES + 1] = 3.0;
    }
    let a = normalize_rolling_z(&raw, 30).unwrap();
    let b = normalize_rolling_z(&shifted, 30).unwrap();
    assert!(b.column(1).iter().all(|&v| v == 0.0));
    for (u, v) in a.column(5).iter().zip(b.column(5)) {
        assert!((u - v).abs() < 1e-6, "{u} vs {v}");
    }
    assert!(normalize_rolling_z(&raw, 1).is_err());
    assert!(normalize_rolling_z(&raw, raw.n_rows() + 1).is_err());
}

#[test]
fn truncating_the_series_reproduces_the_prefix() {
    let m = generate_synthetic(&SynthMarketConfig::benchmark(900, 4)).unwrap();
    let full = normalize_rolling_z(&engineer_features(&m.series).unwrap(), 60).unwrap();
    for cut in [300, 517, 899] {
        let part = normalize_rolling_z(&engineer_features(&m.series.prefix(cut)).unwrap(), 60).unwrap();
        let n = part.n_rows();
        assert!(n > 0);
        assert_eq!(part.x[..], full.x[..n * N_FEATURES], "features differ at cut {cut}");
        assert_eq!(part.regime[..], full.regime[..n]);
        assert_eq!(part.sigma[..], full.sigma[..n]);
        assert_eq!(part.target[..], full.target[..n]);
    }
}

#[test]
fn chronological_split_counts() {
    let s = series_from_closes(&fixture_closes(400));
    let raw = engineer_features(&s).unwrap();
    let hundred = chronological_split(&raw.slice_rows(0, 100), DEFAULT_SPLIT).unwrap();
    assert_eq!(hundred.split_counts(), (70, 15, 15));
    let ten = chronological_split(&raw.slice_rows(0, 10), DEFAULT_SPLIT).unwrap();
    assert_eq!(ten.split_counts(), (7, 1, 2));
    let (_, last_train) = hundred.split_range(Split::Train).unwrap();
    let (first_test, _) = hundred.split_range(Split::Test).unwrap();
    assert!(hundred.timestamps[last_train] < hundred.timestamps[first_test]);
    assert!(chronological_split(&raw, (0.8, 0.2, 0.0)).is_err());
    assert!(chronological_split(&raw, (0.5, 0.2, 0.2)).is_err());
}

#[test]
fn flat_generator_gives_constant_prices() {
    let mut cfg = SynthMarketConfig::benchmark(300, 1);
    cfg.drift = [0.0; 3];
    cfg.volatility = [0.0; 3];
    cfg.mean_reversion = [0.0; 3];
    let m = generate_synthetic(&cfg).unwrap();
    assert!(m.series.closes().iter().all(|&c| (c - 100.0).abs() < 1e-9));
}

#[test]
fn generator_is_deterministic() {
    let cfg = SynthMarketConfig::benchmark(2_000, 9);
    assert_eq!(generate_synthetic(&cfg).unwrap(), generate_synthetic(&cfg).unwrap());
}

#[test]
fn invalid_transition_matrix_is_rejected() {
    let mut cfg = SynthMarketConfig::benchmark(100, 1);
    cfg.transition_matrix[1] = [0.5, 0.4, 0.2];
    assert!(generate_synthetic(&cfg).is_err());
}

#[test]
fn regime_occupancy_matches_stationary_distribution() {
    let mut cfg = SynthMarketConfig::benchmark(100_000, 17);
    cfg.transition_matrix = [[0.6, 0.3, 0.1], [0.2, 0.5, 0.3], [0.25, 0.25, 0.5]];
    let m = generate_synthetic(&cfg).unwrap();
    // oracle: left eigenvector of P for eigenvalue 1, from the linear system
    let p = cfg.transition_matrix;
    let a = nalgebra::Matrix3::new(
        p[0][0] - 1.0, p[1][0], p[2][0],
        p[0][1], p[1][1] - 1.0, p[2][1],
        1.0, 1.0, 1.0,
    );
    let pi = a.lu().solve(&nalgebra::Vector3::new(0.0, 0.0, 1.0)).unwrap();
    let power = stationary_distribution(&p);
    for r in 0..3 {
        assert!((pi[r] - power[r]).abs() < 1e-9);
    }
    let mut counts = [0usize; 3];
    for r in &m.regimes {
        counts[r.index()] += 1;
    }
    let l1: f64 = (0..3).map(|r| (counts[r] as f64 / 100_000.0 - pi[r]).abs()).sum();
    assert!(l1 < 0.02, "L1 distance {l1}");
}

#[test]
fn conditional_return_means_match_drift() {
    let mut cfg = SynthMarketConfig::benchmark(60_000, 5);
    cfg.mean_reversion = [0.0; 3];
    cfg.drift = [0.004, -0.002, 0.0];
    let m = generate_synthetic(&cfg).unwrap();
    let c = m.series.closes();
    for r in Regime::ALL {
        let rets: Vec<f64> = (1..c.len())
            .filter(|&t| m.regimes[t] == r)
            .map(|t| (c[t] / c[t - 1]).ln())
            .collect();
        let n = rets.len() as f64;
        let mean = rets.iter().sum::<f64>() / n;
        let sd = (rets.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let se = sd / n.sqrt();
        let mu = cfg.drift[r.index()];
        assert!((mean - mu).abs() < 3.0 * se, "{r:?}: mean {mean} vs drift {mu} (se {se})");
    }
}

#[test]
fn ramp_is_labelled_trend_after_warmup() {
    let closes: Vec<f64> = (0..200).map(|t| 100.0 + t as f64).collect();
    let s = series_from_closes(&closes);
    let labels = label_regimes_posthoc(&s, 14, 14, 0.75).unwrap();
    let (h, l, c) = (s.highs(), s.lows(), s.closes());
    let a = adx(&h, &l, &c, 14);
    let defined: Vec<_> = labels.iter().enumerate().filter_map(|(t, x)| x.map(|r| (t, r))).collect();
    assert!(!defined.is_empty());
    for &(t, r) in &defined[10..] {
        assert!(a[t] > ADX_TREND_THRESHOLD);
        assert_eq!(r, Regime::Trend, "t = {t}");
    }
    assert!(label_regimes_posthoc(&series_from_closes(&closes[..28]), 14, 14, 0.75).is_err());
}

#[test]
fn labels_partition_post_warmup_rows() {
    let m = generate_synthetic(&SynthMarketConfig::benchmark(3_000, 2)).unwrap();
    let labels = label_regimes_posthoc(&m.series, 14, 14, 0.75).unwrap();
    let first = labels.iter().position(Option::is_some).unwrap();
    assert!(labels[first..].iter().all(Option::is_some));
    let p = engineer_features(&m.series).unwrap();
    let counts = p.regime_counts();
    assert_eq!(counts.iter().sum::<usize>(), p.n_rows());
    assert!(counts.iter().all(|&c| c > 0), "{counts:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn split_is_ordered_and_complete(n in 10usize..400) {
        let s = series_from_closes(&fixture_closes(n + FEATURE_WARMUP + 1));
        let p = chronological_split(&engineer_features(&s).unwrap(), DEFAULT_SPLIT).unwrap();
        let (a, b, c) = p.split_counts();
        prop_assert_eq!(a + b + c, n);
        prop_assert_eq!(a, (n as f64 * 0.7 + 1e-9).floor() as usize);
        prop_assert_eq!(b, (n as f64 * 0.15 + 1e-9).floor() as usize);
        let order = |s: Split| match s { Split::Train => 0, Split::Val => 1, Split::Test => 2 };
        prop_assert!(p.split.windows(2).all(|w| order(w[0]) <= order(w[1])));
    }

    #[test]
    fn rolling_z_uses_only_past_rows(cut in 80usize..240, seed in 0u64..50) {
        let m = generate_synthetic(&SynthMarketConfig::benchmark(260, seed)).unwrap();
        let raw = engineer_features(&m.series).unwrap();
        let cut = cut.min(raw.n_rows());
        let full = normalize_rolling_z(&raw, 20).unwrap();
        let part = normalize_rolling_z(&raw.slice_rows(0, cut), 20).unwrap();
        prop_assert_eq!(&part.x[..], &full.x[..part.x.len()]);
    }
}
