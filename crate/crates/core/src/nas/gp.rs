//! Gaussian-process regression with an ARD Matérn 5/2 kernel.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// `σ²·(1 + √5·r + 5r²/3)·exp(−√5·r)` with `r` the length-scaled distance.
pub fn matern52(x: &[f64], y: &[f64], lengthscales: &[f64], variance: f64) -> Result<f64> {
    if x.len() != y.len() || x.len() != lengthscales.len() {
        return Err(CoreError::Surrogate(format!(
            "kernel dimension mismatch: {}, {}, {} lengthscales",
            x.len(),
            y.len(),
            lengthscales.len()
        )));
    }
    if !(variance > 0.0) || lengthscales.iter().any(|&l| !(l > 0.0)) {
        return Err(CoreError::Surrogate("kernel hyperparameters must be positive".into()));
    }
    Ok(matern52_unchecked(x, y, lengthscales, variance))
}

fn matern52_unchecked(x: &[f64], y: &[f64], ls: &[f64], variance: f64) -> f64 {
    let r2: f64 = x.iter().zip(y).zip(ls).map(|((a, b), l)| ((a - b) / l).powi(2)).sum();
    let s5r = (5.0 * r2).sqrt();
    variance * (1.0 + s5r + 5.0 * r2 / 3.0) * (-s5r).exp()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpHyper {
    pub lengthscales: Vec<f64>,
    /// Signal variance in standardized score units.
    pub variance: f64,
    /// Observation noise variance in standardized score units.
    pub noise: f64,
}

impl GpHyper {
    pub fn isotropic(dim: usize, lengthscale: f64, variance: f64, noise: f64) -> Self {
        Self {
            lengthscales: vec![lengthscale; dim],
            variance,
            noise,
        }
    }
}

pub const MAX_JITTER: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct GpSurrogate {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    pub y_mean: f64,
    pub y_std: f64,
    pub hyper: GpHyper,
    /// Diagonal jitter that was needed on top of the noise for the factorization.
    pub jitter: f64,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
}

fn kernel_matrix(x: &[Vec<f64>], h: &GpHyper) -> DMatrix<f64> {
    let n = x.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = matern52_unchecked(&x[i], &x[j], &h.lengthscales, h.variance);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Factorizes `K + (noise + jitter)·I`, doubling the jitter from 1e-10 up to
/// [`MAX_JITTER`] if needed.
fn factorize(k: &DMatrix<f64>, noise: f64) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let n = k.nrows();
    let mut jitter = 0.0;
    loop {
        let mut a = k.clone();
        for i in 0..n {
            a[(i, i)] += noise + jitter;
        }
        if let Some(c) = Cholesky::new(a) {
            return Ok((c, jitter));
        }
        jitter = if jitter == 0.0 { 1e-10 } else { jitter * 2.0 };
        if jitter > MAX_JITTER {
            return Err(CoreError::Surrogate(format!(
                "kernel matrix not positive definite even with {MAX_JITTER} jitter"
            )));
        }
    }
}

fn standardize(y: &[f64]) -> (f64, f64) {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let std = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    (mean, if std > 1e-12 { std } else { 1.0 })
}

impl GpSurrogate {
    /// Conditions on observations with fixed hyperparameters. Scores are
    /// standardized internally.
    pub fn with_hyper(x: Vec<Vec<f64>>, y: Vec<f64>, hyper: GpHyper) -> Result<Self> {
        if x.is_empty() || x.len() != y.len() {
            return Err(CoreError::Surrogate(format!(
                "need matching non-empty observations, got {} inputs and {} scores",
                x.len(),
                y.len()
            )));
        }
        let d = hyper.lengthscales.len();
        if x.iter().any(|r| r.len() != d) {
            return Err(CoreError::Surrogate(format!("observations must have dimension {d}")));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::Surrogate("scores must be finite".into()));
        }
        if !(hyper.variance > 0.0) || !(hyper.noise >= 0.0) || hyper.lengthscales.iter().any(|&l| !(l > 0.0)) {
            return Err(CoreError::Surrogate(format!("invalid hyperparameters {hyper:?}")));
        }
        let (y_mean, y_std) = standardize(&y);
        let ys = DVector::from_iterator(y.len(), y.iter().map(|v| (v - y_mean) / y_std));
        let k = kernel_matrix(&x, &hyper);
        let (chol, jitter) = factorize(&k, hyper.noise)?;
        let alpha = chol.solve(&ys);
        Ok(Self {
            x,
            y,
            y_mean,
            y_std,
            hyper,
            jitter,
            chol,
            alpha,
        })
    }

    /// Selects hyperparameters by maximizing the log marginal likelihood
    /// (multi-start bounded Nelder–Mead in log space), then conditions.
    pub fn fit(x: Vec<Vec<f64>>, y: Vec<f64>) -> Result<Self> {
        let d = x.first().map_or(0, Vec::len);
        if d == 0 {
            return Err(CoreError::Surrogate("need at least one observation of positive dimension".into()));
        }
        let (y_mean, y_std) = standardize(&y);
        let ys: Vec<f64> = y.iter().map(|v| (v - y_mean) / y_std).collect();
        let lo: Vec<f64> = (0..d)
            .map(|_| LS_BOUNDS.0.ln())
            .chain([VAR_BOUNDS.0.ln(), NOISE_BOUNDS.0.ln()])
            .collect();
        let hi: Vec<f64> = (0..d)
            .map(|_| LS_BOUNDS.1.ln())
            .chain([VAR_BOUNDS.1.ln(), NOISE_BOUNDS.1.ln()])
            .collect();
        let objective = |theta: &[f64]| -> f64 {
            let h = unpack(theta, d);
            match log_marginal_likelihood(&x, &ys, &h) {
                Ok(l) if l.is_finite() => -l,
                _ => f64::INFINITY,
            }
        };
        let mut best: Option<(Vec<f64>, f64)> = None;
        for &ls0 in &[0.5f64, 1.5, 0.2] {
            let start: Vec<f64> = (0..d).map(|_| ls0.ln()).chain([0.0, (1e-2f64).ln()]).collect();
            let (theta, val) = nelder_mead(&objective, &start, &lo, &hi, 150 + 40 * (d + 2));
            if val.is_finite() && best.as_ref().is_none_or(|(_, b)| val < *b) {
                best = Some((theta, val));
            }
        }
        let theta = best
            .map(|(t, _)| t)
            .ok_or_else(|| CoreError::Surrogate("no hyperparameter setting gave a valid factorization".into()))?;
        Self::with_hyper(x, y, unpack(&theta, d))
    }

    pub fn dim(&self) -> usize {
        self.hyper.lengthscales.len()
    }

    pub fn n_obs(&self) -> usize {
        self.y.len()
    }

    /// Posterior mean and standard deviation of the latent function, in score units.
    pub fn predict(&self, x: &[f64]) -> Result<(f64, f64)> {
        if x.len() != self.dim() {
            return Err(CoreError::Surrogate(format!(
                "query has dimension {}, surrogate {}",
                x.len(),
                self.dim()
            )));
        }
        let h = &self.hyper;
        let ks = DVector::from_iterator(
            self.x.len(),
            self.x.iter().map(|xi| matern52_unchecked(xi, x, &h.lengthscales, h.variance)),
        );
        let mean = ks.dot(&self.alpha);
        let v = self.chol.l().solve_lower_triangular(&ks).expect("Cholesky factor is non-singular");
        let var = (h.variance - v.dot(&v)).max(0.0);
        Ok((self.y_mean + self.y_std * mean, self.y_std * var.sqrt()))
    }

    /// Same hyperparameters with one more observation.
    pub fn condition_on(&self, x: Vec<f64>, y: f64) -> Result<Self> {
        let mut xs = self.x.clone();
        let mut ys = self.y.clone();
        xs.push(x);
        ys.push(y);
        Self::with_hyper(xs, ys, self.hyper.clone())
    }

    /// Log marginal likelihood of the standardized scores.
    pub fn log_marginal_likelihood(&self) -> f64 {
        let ys: Vec<f64> = self.y.iter().map(|v| (v - self.y_mean) / self.y_std).collect();
        lml_from(&self.chol, &DVector::from_vec(ys), &self.alpha)
    }
}

const LS_BOUNDS: (f64, f64) = (0.05, 20.0);
const VAR_BOUNDS: (f64, f64) = (0.05, 20.0);
const NOISE_BOUNDS: (f64, f64) = (1e-6, 1.0);

fn unpack(theta: &[f64], d: usize) -> GpHyper {
    GpHyper {
        lengthscales: theta[..d].iter().map(|t| t.exp()).collect(),
        variance: theta[d].exp(),
        noise: theta[d + 1].exp(),
    }
}

fn lml_from(chol: &Cholesky<f64, Dyn>, ys: &DVector<f64>, alpha: &DVector<f64>) -> f64 {
    let n = ys.len() as f64;
    let log_det: f64 = chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum();
    -0.5 * ys.dot(alpha) - log_det - 0.5 * n * (2.0 * std::f64::consts::PI).ln()
}

pub fn log_marginal_likelihood(x: &[Vec<f64>], ys: &[f64], h: &GpHyper) -> Result<f64> {
    let k = kernel_matrix(x, h);
    let (chol, _) = factorize(&k, h.noise)?;
    let yv = DVector::from_column_slice(ys);
    let alpha = chol.solve(&yv);
    Ok(lml_from(&chol, &yv, &alpha))
}

/// Minimizes `f` inside the box `[lo, hi]` (points are clamped) with the
/// Nelder–Mead simplex method.
pub fn nelder_mead<F: Fn(&[f64]) -> f64>(f: &F, start: &[f64], lo: &[f64], hi: &[f64], max_evals: usize) -> (Vec<f64>, f64) {
    let n = start.len();
    let clamp = |p: &mut Vec<f64>| {
        for i in 0..n {
            p[i] = p[i].clamp(lo[i], hi[i]);
        }
    };
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    let mut p0 = start.to_vec();
    clamp(&mut p0);
    let f0 = f(&p0);
    simplex.push((p0.clone(), f0));
    for i in 0..n {
        let mut p = p0.clone();
        let step = 0.1 * (hi[i] - lo[i]);
        p[i] = if p[i] + step <= hi[i] { p[i] + step } else { p[i] - step };
        let v = f(&p);
        simplex.push((p, v));
    }
    let mut evals = n + 1;
    let by_value = |a: &(Vec<f64>, f64), b: &(Vec<f64>, f64)| a.1.total_cmp(&b.1);
    while evals < max_evals {
        simplex.sort_by(by_value);
        let spread = simplex[n].1 - simplex[0].1;
        if spread.is_finite() && spread.abs() < 1e-10 {
            break;
        }
        let centroid: Vec<f64> = (0..n)
            .map(|j| simplex[..n].iter().map(|(p, _)| p[j]).sum::<f64>() / n as f64)
            .collect();
        let toward = |t: f64| -> Vec<f64> {
            let mut p: Vec<f64> = (0..n).map(|j| centroid[j] + t * (simplex[n].0[j] - centroid[j])).collect();
            clamp(&mut p);
            p
        };
        let xr = toward(-1.0);
        let fr = f(&xr);
        evals += 1;
        if fr < simplex[0].1 {
            let xe = toward(-2.0);
            let fe = f(&xe);
            evals += 1;
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
        } else {
            let (xc, fc) = if fr < simplex[n].1 {
                let p = toward(-0.5);
                let v = f(&p);
                (p, v)
            } else {
                let p = toward(0.5);
                let v = f(&p);
                (p, v)
            };
            evals += 1;
            if fc < simplex[n].1.min(fr) {
                simplex[n] = (xc, fc);
            } else {
                let best = simplex[0].0.clone();
                for item in simplex.iter_mut().skip(1) {
                    let mut p: Vec<f64> = (0..n).map(|j| best[j] + 0.5 * (item.0[j] - best[j])).collect();
                    clamp(&mut p);
                    let v = f(&p);
                    *item = (p, v);
                }
                evals += n;
            }
        }
    }
    simplex.sort_by(by_value);
    simplex.swap_remove(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_at_zero_distance_is_variance() {
        let x = [0.3, 0.1];
        assert_eq!(matern52(&x, &x, &[1.0, 2.0], 2.5).unwrap(), 2.5);
        assert!(matern52(&x, &x, &[0.0, 1.0], 1.0).is_err());
    }

    #[test]
    fn nelder_mead_finds_quadratic_minimum() {
        let f = |p: &[f64]| (p[0] - 1.0).powi(2) + 3.0 * (p[1] + 0.5).powi(2);
        let (x, v) = nelder_mead(&f, &[0.0, 0.0], &[-5.0, -5.0], &[5.0, 5.0], 2000);
        assert!(v < 1e-9, "{v}");
        assert!((x[0] - 1.0).abs() < 1e-4 && (x[1] + 0.5).abs() < 1e-4);
    }

    #[test]
    fn nelder_mead_respects_bounds() {
        let f = |p: &[f64]| (p[0] - 10.0).powi(2);
        let (x, _) = nelder_mead(&f, &[0.0], &[-1.0], &[2.0], 500);
        assert!((x[0] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn single_observation_is_reproduced() {
        let gp = GpSurrogate::with_hyper(vec![vec![0.2, 0.4]], vec![3.5], GpHyper::isotropic(2, 1.0, 1.0, 0.0)).unwrap();
        let (m, s) = gp.predict(&[0.2, 0.4]).unwrap();
        assert!((m - 3.5).abs() < 1e-12);
        assert!(s < 1e-6);
    }
}
