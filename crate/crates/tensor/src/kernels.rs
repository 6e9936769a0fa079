//! Raw numeric kernels shared by the tensor value type and the gradient tape.

use crate::error::{dim_err, Result};

/// `C = op(A)·op(B) + beta·C` for row-major buffers, where `op(A)` is `m×k`
/// and `op(B)` is `k×n`. With `trans_a`, `a` is stored as `k×m`; with
/// `trans_b`, `b` is stored as `n×k`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices are exactly m*k, k*n and m*n long (asserted above in
    // debug builds and guaranteed by every caller), and the strides describe
    // in-bounds row-major or transposed layouts of those buffers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Splits `shape` around `axis` into `(outer, len, inner)`.
pub(crate) fn axis_geometry(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// How the two operands of a binary op map onto the output elements.
#[derive(Debug, Clone)]
pub(crate) enum Broadcast {
    Same,
    /// `b` has one element.
    ScalarB,
    /// `a` has one element.
    ScalarA,
    /// `b` repeats cyclically (its shape is a suffix of `a`'s).
    CycleB(usize),
    /// General case with explicit source indices.
    Indexed { ia: Vec<usize>, ib: Vec<usize> },
}

impl Broadcast {
    pub(crate) fn plan(a: &[usize], b: &[usize]) -> Result<(Vec<usize>, Broadcast)> {
        if a == b {
            return Ok((a.to_vec(), Broadcast::Same));
        }
        let na: usize = a.iter().product();
        let nb: usize = b.iter().product();
        let rank = a.len().max(b.len());
        let pad = |s: &[usize]| {
            let mut p = vec![1; rank - s.len()];
            p.extend_from_slice(s);
            p
        };
        let (pa, pb) = (pad(a), pad(b));
        let mut out = Vec::with_capacity(rank);
        for (&x, &y) in pa.iter().zip(&pb) {
            if x == y || y == 1 {
                out.push(x);
            } else if x == 1 {
                out.push(y);
            } else {
                return dim_err("broadcast", format!("{a:?} vs {b:?}"));
            }
        }
        if nb == 1 && out == pa {
            return Ok((out, Broadcast::ScalarB));
        }
        if na == 1 && out == pb {
            return Ok((out, Broadcast::ScalarA));
        }
        if out == pa {
            let first = pb.iter().position(|&d| d != 1).unwrap_or(rank);
            if pb[first..] == pa[first..] {
                return Ok((out, Broadcast::CycleB(nb)));
            }
        }
        let strides = |s: &[usize]| {
            let mut st = vec![0usize; rank];
            let mut acc = 1;
            for i in (0..rank).rev() {
                st[i] = if s[i] == 1 { 0 } else { acc };
                acc *= s[i];
            }
            st
        };
        let (sa, sb) = (strides(&pa), strides(&pb));
        let n: usize = out.iter().product();
        let mut ia = Vec::with_capacity(n);
        let mut ib = Vec::with_capacity(n);
        let mut idx = vec![0usize; rank];
        for _ in 0..n {
            ia.push(idx.iter().zip(&sa).map(|(i, s)| i * s).sum());
            ib.push(idx.iter().zip(&sb).map(|(i, s)| i * s).sum());
            for d in (0..rank).rev() {
                idx[d] += 1;
                if idx[d] < out[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        Ok((out, Broadcast::Indexed { ia, ib }))
    }

    /// Calls `f(out_index, a_index, b_index)` for every output element.
    #[inline]
    pub(crate) fn for_each(&self, n: usize, mut f: impl FnMut(usize, usize, usize)) {
        match self {
            Broadcast::Same => (0..n).for_each(|i| f(i, i, i)),
            Broadcast::ScalarB => (0..n).for_each(|i| f(i, i, 0)),
            Broadcast::ScalarA => (0..n).for_each(|i| f(i, 0, i)),
            Broadcast::CycleB(nb) => (0..n).for_each(|i| f(i, i, i % nb)),
            Broadcast::Indexed { ia, ib } => (0..n).for_each(|i| f(i, ia[i], ib[i])),
        }
    }
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax along `axis` of a row-major buffer.
pub(crate) fn softmax_axis(shape: &[usize], data: &[f64], axis: usize) -> Vec<f64> {
    let (outer, len, inner) = axis_geometry(shape, axis);
    let mut out = vec![0.0; data.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let max = (0..len).map(|j| data[at(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..len {
                // exp(-inf - max) is 0, which is how masked entries vanish
                let e = if data[at(j)] == f64::NEG_INFINITY {
                    0.0
                } else {
                    (data[at(j)] - max).exp()
                };
                out[at(j)] = e;
                sum += e;
            }
            for j in 0..len {
                out[at(j)] /= sum;
            }
        }
    }
    out
}
