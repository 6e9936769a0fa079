use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regimenas_tensor::gradcheck::{check_gradients, GradCheckOptions};
use regimenas_tensor::{Graph, Result, Tensor, Var};

const SEEDS: u64 = 100;
const TOL: f64 = 1e-4;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero so kinked ops are differentiable at every probe.
fn rand_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.1..2.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Weighted sum with fixed non-uniform weights so every output element
/// contributes a distinct amount to the root.
fn weighted_sum<'g>(g: &'g Graph, x: Var<'g>) -> Result<Var<'g>> {
    let shape = x.shape();
    let n: usize = shape.iter().product();
    let w = g.constant_from(shape, (0..n).map(|i| 0.3 + 0.7 * ((i * 7919) % 13) as f64 / 13.0).collect())?;
    x.mul(w)?.sum()
}

fn check<F>(name: &str, make: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor>, f: F)
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>> + Copy,
{
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = make(&mut rng);
        let report = check_gradients(&params, GradCheckOptions::default(), f).unwrap();
        assert!(
            report.max_rel_error < TOL,
            "{name} seed {seed}: {:?}",
            report
        );
    }
}

#[test]
fn matmul_gradient() {
    check(
        "matmul",
        |r| vec![rand_tensor(r, &[5, 7], -1.0, 1.0), rand_tensor(r, &[7, 3], -1.0, 1.0)],
        |g, v| weighted_sum(g, v[0].matmul(v[1])?),
    );
}

#[test]
fn matmul_gradient_below_1e5() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let params = vec![rand_tensor(&mut rng, &[5, 7], -1.0, 1.0), rand_tensor(&mut rng, &[7, 3], -1.0, 1.0)];
    let report = check_gradients(&params, GradCheckOptions::default(), |g, v| {
        weighted_sum(g, v[0].matmul(v[1])?)
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-5, "{report:?}");
}

#[test]
fn batched_matmul_gradient() {
    check(
        "bmm",
        |r| vec![rand_tensor(r, &[2, 3, 4], -1.0, 1.0), rand_tensor(r, &[2, 4, 2], -1.0, 1.0)],
        |g, v| weighted_sum(g, v[0].bmm(v[1])?),
    );
}

#[test]
fn binary_op_gradients_with_broadcasting() {
    let shapes: [(&[usize], &[usize]); 4] = [(&[3, 4], &[3, 4]), (&[3, 4], &[1]), (&[2, 3, 4], &[4]), (&[2, 3, 1], &[1, 3, 4])];
    for (sa, sb) in shapes {
        check(
            "add",
            |r| vec![rand_tensor(r, sa, -1.0, 1.0), rand_tensor(r, sb, -1.0, 1.0)],
            |g, v| weighted_sum(g, v[0].add(v[1])?),
        );
        check(
            "sub",
            |r| vec![rand_tensor(r, sa, -1.0, 1.0), rand_tensor(r, sb, -1.0, 1.0)],
            |g, v| weighted_sum(g, v[0].sub(v[1])?),
        );
        check(
            "mul",
            |r| vec![rand_tensor(r, sa, -1.0, 1.0), rand_tensor(r, sb, -1.0, 1.0)],
            |g, v| weighted_sum(g, v[0].mul(v[1])?),
        );
        check(
            "div",
            |r| vec![rand_tensor(r, sa, -1.0, 1.0), rand_tensor(r, sb, 0.5, 2.0)],
            |g, v| weighted_sum(g, v[0].div(v[1])?),
        );
    }
}

#[test]
fn unary_op_gradients() {
    let shape: &[usize] = &[3, 5];
    check("tanh", |r| vec![rand_tensor(r, shape, -2.0, 2.0)], |g, v| weighted_sum(g, v[0].tanh()?));
    check("sigmoid", |r| vec![rand_tensor(r, shape, -3.0, 3.0)], |g, v| weighted_sum(g, v[0].sigmoid()?));
    check("relu", |r| vec![rand_away_from_zero(r, shape)], |g, v| weighted_sum(g, v[0].relu()?));
    check("leaky_relu", |r| vec![rand_away_from_zero(r, shape)], |g, v| {
        weighted_sum(g, v[0].leaky_relu(0.1)?)
    });
    check("gelu", |r| vec![rand_tensor(r, shape, -3.0, 3.0)], |g, v| weighted_sum(g, v[0].gelu()?));
    check("exp", |r| vec![rand_tensor(r, shape, -2.0, 2.0)], |g, v| weighted_sum(g, v[0].exp()?));
    check("log", |r| vec![rand_tensor(r, shape, 0.2, 3.0)], |g, v| weighted_sum(g, v[0].log()?));
    check("abs", |r| vec![rand_away_from_zero(r, shape)], |g, v| weighted_sum(g, v[0].abs()?));
    check("square", |r| vec![rand_tensor(r, shape, -2.0, 2.0)], |g, v| weighted_sum(g, v[0].square()?));
    check("neg", |r| vec![rand_tensor(r, shape, -2.0, 2.0)], |g, v| weighted_sum(g, v[0].neg()?));
    check("scale", |r| vec![rand_tensor(r, shape, -2.0, 2.0)], |g, v| weighted_sum(g, v[0].scale(-1.7)?));
    check("add_scalar", |r| vec![rand_tensor(r, shape, -2.0, 2.0)], |g, v| {
        weighted_sum(g, v[0].add_scalar(0.4)?.square()?)
    });
}

#[test]
fn gelu_gradient_at_17_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x = rand_tensor(&mut rng, &[17], -4.0, 4.0);
    let report = check_gradients(&[x], GradCheckOptions::default(), |g, v| weighted_sum(g, v[0].gelu()?)).unwrap();
    assert_eq!(report.coords_checked, 17);
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn reduction_gradients() {
    let shape: &[usize] = &[4, 3];
    check("sum", |r| vec![rand_tensor(r, shape, -1.0, 1.0)], |_, v| v[0].square()?.sum());
    check("mean", |r| vec![rand_tensor(r, shape, -1.0, 1.0)], |_, v| v[0].square()?.mean());
    check("variance", |r| vec![rand_tensor(r, shape, -1.0, 1.0)], |_, v| v[0].variance());
    check("sum_axis0", |r| vec![rand_tensor(r, &[2, 3, 4], -1.0, 1.0)], |g, v| {
        weighted_sum(g, v[0].sum_axis(0)?.square()?)
    });
    check("sum_axis1", |r| vec![rand_tensor(r, &[2, 3, 4], -1.0, 1.0)], |g, v| {
        weighted_sum(g, v[0].sum_axis(1)?.square()?)
    });
}

#[test]
fn structural_op_gradients() {
    check("softmax_last", |r| vec![rand_tensor(r, &[3, 5], -2.0, 2.0)], |g, v| {
        weighted_sum(g, v[0].softmax(1)?)
    });
    check("softmax_first", |r| vec![rand_tensor(r, &[3, 5], -2.0, 2.0)], |g, v| {
        weighted_sum(g, v[0].softmax(0)?)
    });
    check(
        "concat",
        |r| vec![rand_tensor(r, &[2, 3, 2], -1.0, 1.0), rand_tensor(r, &[2, 3, 3], -1.0, 1.0)],
        |g, v| weighted_sum(g, g.concat(&[v[0], v[1], v[0]], 2)?.square()?),
    );
    check("slice", |r| vec![rand_tensor(r, &[2, 5, 3], -1.0, 1.0)], |g, v| {
        weighted_sum(g, v[0].slice(1, 1, 3)?.square()?)
    });
    check("transpose", |r| vec![rand_tensor(r, &[2, 3, 4], -1.0, 1.0)], |g, v| {
        weighted_sum(g, v[0].transpose()?)
    });
    check("reshape", |r| vec![rand_tensor(r, &[2, 6], -1.0, 1.0)], |g, v| {
        weighted_sum(g, v[0].reshape(&[3, 4])?.square()?)
    });
}

#[test]
fn sequence_op_gradients() {
    check("shift_time", |r| vec![rand_tensor(r, &[2, 6, 3], -1.0, 1.0)], |g, v| {
        weighted_sum(g, v[0].shift_time(2)?.square()?)
    });
    check(
        "lag_mix",
        |r| vec![rand_tensor(r, &[2, 6, 3], -1.0, 1.0), rand_tensor(r, &[4], -1.0, 1.0)],
        |g, v| weighted_sum(g, v[0].lag_mix(v[1])?.square()?),
    );
    check(
        "kernel_lag_average",
        |r| vec![rand_tensor(r, &[2, 7, 3], -1.0, 1.0), rand_tensor(r, &[1], 0.5, 3.0)],
        |g, v| weighted_sum(g, g.kernel_lag_average(v[0], v[1], 3)?),
    );
}

/// GRU cell unrolled over three steps with a squared-error loss.
#[test]
fn gru_cell_composite_gradient() {
    let hidden = 4;
    let input = 3;
    let make = |r: &mut ChaCha8Rng| {
        let mut ps = Vec::new();
        for _ in 0..3 {
            ps.push(rand_tensor(r, &[input, hidden], -0.5, 0.5));
            ps.push(rand_tensor(r, &[hidden, hidden], -0.5, 0.5));
            ps.push(rand_tensor(r, &[1, hidden], -0.1, 0.1));
        }
        ps.push(rand_tensor(r, &[3, 1, input], -1.0, 1.0));
        ps
    };
    check("gru", make, |g, v| {
        let xs = v[9];
        let mut h = g.constant_from(vec![1, hidden], vec![0.0; hidden])?;
        for t in 0..3 {
            let x = xs.slice(0, t, 1)?.reshape(&[1, input])?;
            let z = x.matmul(v[0])?.add(h.matmul(v[1])?)?.add(v[2])?.sigmoid()?;
            let r = x.matmul(v[3])?.add(h.matmul(v[4])?)?.add(v[5])?.sigmoid()?;
            let n = x.matmul(v[6])?.add(r.mul(h)?.matmul(v[7])?)?.add(v[8])?.tanh()?;
            let one_minus_z = z.neg()?.add_scalar(1.0)?;
            h = one_minus_z.mul(n)?.add(z.mul(h)?)?;
        }
        h.add_scalar(-0.3)?.square()?.mean()
    });
}
