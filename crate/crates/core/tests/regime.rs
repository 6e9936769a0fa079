use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regimenas_core::nn::{Bound, ParamStore};
use regimenas_core::regime::*;
use regimenas_tensor::gradcheck::{check_gradients, GradCheckOptions};
use regimenas_tensor::{Graph, Tensor};

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn detector(seed: u64, f: usize, heads: usize, d_k: usize, window: usize) -> (ParamStore, RegimeDetector) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let cfg = AttentionConfig {
        heads,
        d_k,
        n_regimes: 3,
        window,
    };
    let det = RegimeDetector::new(&mut store, &mut rng, f, cfg).unwrap();
    (store, det)
}

/// `softmax(q·kᵀ/√d + m)·v` evaluated with plain loops.
fn dense_attention(q: &[f64], k: &[f64], v: &[f64], m: &[f64], t: usize, d: usize, dv: usize) -> (Vec<f64>, Vec<f64>) {
    let mut w = vec![0.0; t * t];
    for i in 0..t {
        let mut row = vec![0.0; t];
        for j in 0..t {
            let dot: f64 = (0..d).map(|c| q[i * d + c] * k[j * d + c]).sum();
            row[j] = dot / (d as f64).sqrt() + m[i * t + j];
        }
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|s| (s - mx).exp()).sum();
        for j in 0..t {
            w[i * t + j] = (row[j] - mx).exp() / z;
        }
    }
    let mut out = vec![0.0; t * dv];
    for i in 0..t {
        for c in 0..dv {
            out[i * dv + c] = (0..t).map(|j| w[i * t + j] * v[j * dv + c]).sum();
        }
    }
    (out, w)
}

#[test]
fn attention_matches_dense_evaluation() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (t, d, dv) = (3, 4, 5);
        let q = rand_tensor(&mut rng, &[t, d], 2.0);
        let k = rand_tensor(&mut rng, &[t, d], 2.0);
        let v = rand_tensor(&mut rng, &[t, dv], 2.0);
        let m = rand_tensor(&mut rng, &[t, t], 1.0);
        let g = Graph::new();
        let (out, w) = attention_head(g.constant(&q), g.constant(&k), g.constant(&v), g.constant(&m), d).unwrap();
        let (want, want_w) = dense_attention(q.data(), k.data(), v.data(), m.data(), t, d, dv);
        for (a, b) in out.to_vec().iter().zip(&want).chain(w.to_vec().iter().zip(&want_w)) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }
}

#[test]
fn identical_keys_average_the_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let g = Graph::new();
    let row = rand_tensor(&mut rng, &[1, 4], 1.0);
    let k = Tensor::new([5, 4], row.data().repeat(5)).unwrap();
    let q = rand_tensor(&mut rng, &[5, 4], 1.0);
    let v = rand_tensor(&mut rng, &[5, 3], 1.0);
    let (out, _) = attention_head(g.constant(&q), g.constant(&k), g.constant(&v), g.constant(&Tensor::zeros([5, 5])), 4).unwrap();
    let out = out.to_vec();
    for i in 0..5 {
        for c in 0..3 {
            let mean: f64 = (0..5).map(|j| v.data()[j * 3 + c]).sum::<f64>() / 5.0;
            assert!((out[i * 3 + c] - mean).abs() < 1e-12);
        }
    }
}

#[test]
fn identity_mask_returns_the_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let g = Graph::new();
    let q = rand_tensor(&mut rng, &[4, 4], 1.0);
    let k = rand_tensor(&mut rng, &[4, 4], 1.0);
    let v = rand_tensor(&mut rng, &[4, 2], 1.0);
    let mask: Vec<f64> = (0..16).map(|i| if i % 5 == 0 { 0.0 } else { f64::NEG_INFINITY }).collect();
    let m = Tensor::new([4, 4], mask).unwrap();
    let (out, _) = attention_head(g.constant(&q), g.constant(&k), g.constant(&v), g.constant(&m), 4).unwrap();
    assert_eq!(out.to_vec(), v.data());
}

#[test]
fn key_width_mismatch_is_an_error() {
    let g = Graph::new();
    let q = g.constant(&Tensor::zeros([3, 4]));
    let k = g.constant(&Tensor::zeros([3, 5]));
    let v = g.constant(&Tensor::zeros([3, 2]));
    assert!(attention_head(q, k, v, g.constant(&Tensor::zeros([3, 3])), 4).is_err());
}

#[test]
fn zero_input_projects_to_zero() {
    let (store, det) = detector(3, 16, 2, 8, 1);
    let g = Graph::new();
    let b = store.bind(&g);
    let x = g.constant(&Tensor::zeros([1, 1, 16]));
    for lin in [&det.q, &det.k, &det.v] {
        let y = b.linear(lin, x).unwrap();
        assert_eq!(y.shape(), vec![1, 1, 8]);
        assert!(y.to_vec().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn untrained_output_is_a_strictly_positive_distribution() {
    let (store, det) = detector(4, 16, 4, 16, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let w = rand_tensor(&mut rng, &[12, 16], 3.0);
    let out = det.regime_forward(&store, &w).unwrap();
    assert_eq!(out.p.len(), 3);
    assert!(out.p.iter().all(|&p| p > 0.0));
    assert!((out.p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert_eq!(out.per_head_p.len(), 4);
    assert!((0.0..=1.0).contains(&out.uncertainty));
    assert_eq!(out, det.regime_forward(&store, &w).unwrap());
}

#[test]
fn detector_weights_are_row_stochastic() {
    let (store, det) = detector(6, 16, 2, 8, 10);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let x = rand_tensor(&mut rng, &[10, 16], 4.0);
        let g = Graph::new();
        let b = store.bind(&g);
        let xv = g.constant(&x);
        let q = b.linear(&det.q, xv).unwrap();
        let k = b.linear(&det.k, xv).unwrap();
        let v = b.linear(&det.v, xv).unwrap();
        for h in 0..2 {
            let qh = q.slice(1, h * 4, 4).unwrap();
            let kh = k.slice(1, h * 4, 4).unwrap();
            let vh = v.slice(1, h * 4, 4).unwrap();
            let (_, w) = attention_head(qh, kh, vh, b.get(det.m), 8).unwrap();
            for row in w.to_vec().chunks(10) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn uncertainty_hand_values() {
    // entropy term 0; variances 1/4, 1/4, 0 → mean 1/6, normalized 2/3
    let u = head_uncertainty(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]).unwrap();
    assert!((u - 1.0 / 3.0).abs() < 1e-15);
    let same = vec![vec![0.2, 0.5, 0.3]; 3];
    let ent = -(0.2f64 * 0.2f64.ln() + 0.5 * 0.5f64.ln() + 0.3 * 0.3f64.ln()) / 3f64.ln();
    assert!((head_uncertainty(&same).unwrap() - 0.5 * ent).abs() < 1e-15);
}

#[test]
fn permuting_classifier_rows_permutes_probabilities() {
    let (mut store, det) = detector(8, 16, 2, 8, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = rand_tensor(&mut rng, &[6, 16], 2.0);
    let before = det.regime_forward(&store, &x).unwrap();
    let perm = [2usize, 0, 1];
    let w = store.get(det.classifier.w).clone();
    let b = store.get(det.classifier.b).clone();
    let d = w.shape()[0];
    {
        let wm = store.get_mut(det.classifier.w).data_mut();
        for r in 0..d {
            for (j, &src) in perm.iter().enumerate() {
                wm[r * 3 + j] = w.data()[r * 3 + src];
            }
        }
    }
    {
        let bm = store.get_mut(det.classifier.b).data_mut();
        for (j, &src) in perm.iter().enumerate() {
            bm[j] = b.data()[src];
        }
    }
    let after = det.regime_forward(&store, &x).unwrap();
    for (j, &src) in perm.iter().enumerate() {
        assert!((after.p[j] - before.p[src]).abs() < 1e-14);
    }
    assert!((after.uncertainty - before.uncertainty).abs() < 1e-12);
}

#[test]
fn query_projection_gradient_matches_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = rand_tensor(&mut rng, &[5, 6], 1.0);
    let wq = rand_tensor(&mut rng, &[6, 4], 1.0);
    let report = check_gradients(&[wq], GradCheckOptions::default(), |g, v| g.constant(&x).matmul(v[0])?.sum()).unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn cross_entropy_gradients_through_the_detector() {
    for seed in 0..10 {
        let (store, det) = detector(seed, 16, 2, 8, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        // non-zero attention bias so its gradient path is exercised away from the init
        let params: Vec<Tensor> = store
            .params()
            .iter()
            .map(|p| {
                if p.value.shape() == [8, 8] && p.name == "detector.m" {
                    rand_tensor(&mut rng, &[8, 8], 0.5)
                } else {
                    p.value.clone()
                }
            })
            .collect();
        let x = rand_tensor(&mut rng, &[2, 8, 16], 1.5);
        let target = [0usize, 2];
        let report = check_gradients(&params, GradCheckOptions::default(), |g, vars| {
            let b = Bound { vars: vars.to_vec() };
            let out = det.forward(&b, g.constant(&x)).unwrap();
            let onehot: Vec<f64> = target.iter().flat_map(|&r| (0..3).map(move |j| (j == r) as u8 as f64)).collect();
            let y = g.constant_from(vec![2, 3], onehot)?;
            out.p.log()?.mul(y)?.sum()?.scale(-0.5)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "seed {seed}: {report:?}");
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let bad = AttentionConfig {
        heads: 3,
        d_k: 8,
        n_regimes: 3,
        window: 4,
    };
    assert!(RegimeDetector::new(&mut store, &mut rng, 16, bad).is_err());
    assert!(head_uncertainty(&[]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn uncertainty_is_bounded(rows in prop::collection::vec(prop::collection::vec(0.01f64..1.0, 3), 1..6)) {
        let rows: Vec<Vec<f64>> = rows
            .into_iter()
            .map(|r| {
                let s: f64 = r.iter().sum();
                r.into_iter().map(|v| v / s).collect()
            })
            .collect();
        let u = head_uncertainty(&rows).unwrap();
        prop_assert!((0.0..=1.0).contains(&u));
        let identical = vec![rows[0].clone(); rows.len()];
        let ent = -rows[0].iter().map(|p| p * p.ln()).sum::<f64>() / 3f64.ln();
        prop_assert!((head_uncertainty(&identical).unwrap() - 0.5 * ent).abs() < 1e-12);
    }

    #[test]
    fn softmax_is_a_distribution(x in prop::collection::vec(-50.0f64..50.0, 1..10)) {
        let p = softmax(&x);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
