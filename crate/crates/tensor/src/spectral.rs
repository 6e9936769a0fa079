//! Largest-singular-value estimation by power iteration.

use crate::error::{dim_err, Result};
use crate::tensor::Tensor;

pub const DEFAULT_ITERS: usize = 50;
pub const DEFAULT_TOL: f64 = 1e-6;
/// Budget for a one-off estimate with no warm start. Matrices with a small
/// gap between the top two singular values need far more than 50 rounds.
pub const COLD_ITERS: usize = 1000;
pub const COLD_TOL: f64 = 1e-9;

/// Left/right singular vector estimates carried across calls so that a
/// slowly changing weight matrix needs only a few iterations per step.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerIterState {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl PowerIterState {
    /// Deterministic start vectors for an `m×n` matrix.
    pub fn new(m: usize, n: usize) -> Self {
        Self {
            u: start_vector(m, 0x5eed_0001),
            v: start_vector(n, 0x5eed_0002),
        }
    }

    /// Runs up to `iters` rounds, stopping early once the estimate moves by
    /// less than `tol` relative. Returns the estimate.
    pub fn refine(&mut self, w: &Tensor, iters: usize, tol: f64) -> Result<f64> {
        let (m, n) = dims(w)?;
        if self.u.len() != m || self.v.len() != n {
            *self = Self::new(m, n);
        }
        if iters == 0 {
            return dim_err("spectral_norm", "iters must be at least 1");
        }
        let data = w.data();
        if data.iter().all(|&x| x == 0.0) {
            return Ok(0.0);
        }
        let mut sigma = 0.0;
        for _ in 0..iters {
            // u ← W v / ‖W v‖, v ← Wᵀ u / ‖Wᵀ u‖, σ = ‖Wᵀ u‖
            mat_vec(data, m, n, &self.v, &mut self.u);
            if normalize(&mut self.u) == 0.0 {
                // v fell into the null space; restart from a fresh direction
                self.v = start_vector(n, 0x5eed_0003);
                continue;
            }
            mat_t_vec(data, m, n, &self.u, &mut self.v);
            let next = normalize(&mut self.v);
            let done = (next - sigma).abs() <= tol * next;
            sigma = next;
            if done {
                break;
            }
        }
        Ok(sigma)
    }
}

/// Estimate of the largest singular value of a 2-D tensor; 0 for a zero matrix.
pub fn spectral_norm(w: &Tensor, iters: usize, tol: f64) -> Result<f64> {
    let (m, n) = dims(w)?;
    PowerIterState::new(m, n).refine(w, iters, tol)
}

/// Estimate after each of `iters` rounds, without early stopping.
pub fn spectral_norm_trace(w: &Tensor, iters: usize) -> Result<Vec<f64>> {
    let (m, n) = dims(w)?;
    let mut state = PowerIterState::new(m, n);
    (0..iters).map(|_| state.refine(w, 1, 0.0)).collect()
}

fn dims(w: &Tensor) -> Result<(usize, usize)> {
    if w.rank() != 2 {
        return dim_err("spectral_norm", format!("expected a matrix, got {:?}", w.shape()));
    }
    Ok((w.shape()[0], w.shape()[1]))
}

fn mat_vec(w: &[f64], m: usize, n: usize, x: &[f64], out: &mut [f64]) {
    for i in 0..m {
        out[i] = w[i * n..(i + 1) * n].iter().zip(x).map(|(a, b)| a * b).sum();
    }
}

fn mat_t_vec(w: &[f64], m: usize, n: usize, x: &[f64], out: &mut [f64]) {
    out.fill(0.0);
    for i in 0..m {
        let xi = x[i];
        for (o, a) in out.iter_mut().zip(&w[i * n..(i + 1) * n]) {
            *o += a * xi;
        }
    }
}

fn normalize(x: &mut [f64]) -> f64 {
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        x.iter_mut().for_each(|v| *v /= norm);
    }
    norm
}

fn start_vector(len: usize, seed: u64) -> Vec<f64> {
    // splitmix64; any direction not orthogonal to the top singular vector works
    let mut state = seed;
    let mut v: Vec<f64> = (0..len)
        .map(|_| {
            state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
            let mut z = state;
            z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
            z ^= z >> 31;
            (z >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        })
        .collect();
    normalize(&mut v);
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_has_unit_norm() {
        let s = spectral_norm(&Tensor::eye(8), DEFAULT_ITERS, DEFAULT_TOL).unwrap();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn diagonal_picks_largest_entry() {
        let w = Tensor::from_rows(&[vec![3.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let s = spectral_norm(&w, DEFAULT_ITERS, DEFAULT_TOL).unwrap();
        assert!((s - 3.0).abs() < 1e-6);
    }

    #[test]
    fn zero_matrix_gives_zero() {
        assert_eq!(spectral_norm(&Tensor::zeros([4, 3]), 10, 1e-6).unwrap(), 0.0);
    }

    #[test]
    fn rejects_vectors_and_zero_iterations() {
        assert!(spectral_norm(&Tensor::zeros([4]), 10, 1e-6).is_err());
        assert!(spectral_norm(&Tensor::eye(2), 0, 1e-6).is_err());
    }

    #[test]
    fn trace_is_monotone() {
        let w = Tensor::from_rows(&[vec![1.0, 2.0, 0.5], vec![-0.3, 0.8, 1.1]]).unwrap();
        let trace = spectral_norm_trace(&w, 30).unwrap();
        for pair in trace.windows(2) {
            assert!(pair[1] >= pair[0] - 1e-12);
        }
    }
}
