//! Prediction, volatility-matching, smoothness and Lipschitz loss terms.

use regimenas_tensor::spectral::{COLD_ITERS, COLD_TOL};
use regimenas_tensor::{spectral_norm, Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::nn::{Bound, ParamStore};

pub const VOL_WINDOW: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub pred: f64,
    pub vol: f64,
    pub reg: f64,
    pub stable: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            pred: 1.0,
            vol: 0.1,
            reg: 0.05,
            stable: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.pred, self.vol, self.reg, self.stable];
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(CoreError::Config(format!("loss weights must be non-negative, got {self:?}")));
        }
        Ok(())
    }

    pub fn prediction_only() -> Self {
        Self {
            pred: 1.0,
            vol: 0.0,
            reg: 0.0,
            stable: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub pred: f64,
    pub vol: f64,
    pub reg: f64,
    pub stable: f64,
    /// `w_p·pred + w_v·vol + w_r·reg + w_s·stable`.
    pub total: f64,
}

impl LossBreakdown {
    pub fn compose(pred: f64, vol: f64, reg: f64, stable: f64, w: &LossWeights) -> Self {
        Self {
            pred,
            vol,
            reg,
            stable,
            total: w.pred * pred + w.vol * vol + w.reg * reg + w.stable * stable,
        }
    }

    /// Mean of several breakdowns (e.g. over batches), recomposed exactly.
    pub fn average(items: &[LossBreakdown], w: &LossWeights) -> Self {
        let n = items.len().max(1) as f64;
        let s = |f: fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
        Self::compose(s(|b| b.pred), s(|b| b.vol), s(|b| b.reg), s(|b| b.stable), w)
    }
}

fn population_variance(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n
}

pub fn loss_pred(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    if y.is_empty() || y.len() != y_hat.len() {
        return Err(CoreError::Training(format!(
            "prediction loss needs equal non-empty inputs, got {} and {}",
            y.len(),
            y_hat.len()
        )));
    }
    Ok(y.iter().zip(y_hat).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / y.len() as f64)
}

pub fn loss_vol(y_window: &[f64], y_hat_window: &[f64]) -> Result<f64> {
    if y_window.len() < 2 || y_window.len() != y_hat_window.len() {
        return Err(CoreError::Training("volatility loss needs equal windows of length ≥ 2".into()));
    }
    Ok((population_variance(y_hat_window) - population_variance(y_window)).abs())
}

pub fn loss_reg(y_hat: &[f64]) -> Result<f64> {
    if y_hat.len() < 2 {
        return Err(CoreError::Training("smoothness loss needs at least two outputs".into()));
    }
    Ok(y_hat.windows(2).map(|w| (w[1] - w[0]).powi(2)).sum::<f64>() / (y_hat.len() - 1) as f64)
}

/// `Σ max(0, σ(W) − L_target)²` over the spectrally designated weights,
/// with σ from a fresh power iteration.
pub fn loss_stable(store: &ParamStore, l_target: f64) -> Result<f64> {
    let mut total = 0.0;
    for p in store.params().iter().filter(|p| p.spectral) {
        let s = spectral_norm(&p.value, COLD_ITERS, COLD_TOL)?;
        total += (s - l_target).max(0.0).powi(2);
    }
    Ok(total)
}

/// Windows of length [`VOL_WINDOW`] tiling a batch of `n` consecutive
/// outputs; a batch shorter than one window is used whole.
pub fn vol_windows(n: usize) -> Vec<(usize, usize)> {
    if n < 2 {
        return Vec::new();
    }
    if n < VOL_WINDOW {
        return vec![(0, n)];
    }
    (0..n / VOL_WINDOW).map(|k| (k * VOL_WINDOW, VOL_WINDOW)).collect()
}

/// Tape versions of the loss terms.
pub struct LossTerms<'g> {
    pub pred: Var<'g>,
    pub vol: Var<'g>,
    pub reg: Var<'g>,
    pub stable: Var<'g>,
}

/// `[B×1]` predictions vs targets. `reg_multiplier` (one per consecutive
/// pair) implements regime-dependent smoothness; `None` is uniform.
pub fn loss_terms<'g>(
    g: &'g Graph,
    pred: Var<'g>,
    y: &[f64],
    reg_multiplier: Option<&[f64]>,
    stable: Var<'g>,
) -> Result<LossTerms<'g>> {
    let n = y.len();
    if n == 0 || pred.shape().iter().product::<usize>() != n {
        return Err(CoreError::Training("prediction/target size mismatch".into()));
    }
    let pred = pred.reshape(&[n])?;
    let target = g.constant_from(vec![n], y.to_vec())?;
    let mse = pred.sub(target)?.square()?.mean()?;

    let windows = vol_windows(n);
    let vol = if windows.is_empty() {
        g.scalar(0.0)
    } else {
        let mut acc: Option<Var<'g>> = None;
        for &(start, len) in &windows {
            let vp = pred.slice(0, start, len)?.variance()?;
            let vy = population_variance(&y[start..start + len]);
            let term = vp.add_scalar(-vy)?.abs()?;
            acc = Some(match acc {
                Some(a) => a.add(term)?,
                None => term,
            });
        }
        acc.expect("non-empty").scale(1.0 / windows.len() as f64)?
    };

    let reg = if n < 2 {
        g.scalar(0.0)
    } else {
        let diff = pred.slice(0, 1, n - 1)?.sub(pred.slice(0, 0, n - 1)?)?.square()?;
        match reg_multiplier {
            Some(m) => {
                if m.len() != n - 1 {
                    return Err(CoreError::Training("one smoothness multiplier per consecutive pair".into()));
                }
                diff.mul(g.constant_from(vec![n - 1], m.to_vec())?)?.mean()?
            }
            None => diff.mean()?,
        }
    };
    Ok(LossTerms {
        pred: mse,
        vol,
        reg,
        stable,
    })
}

/// Differentiable Lipschitz penalty using each layer's stored power-iteration
/// vectors (held fixed): `σ̂(W) = uᵀ·W·v`.
pub fn stable_term<'g>(g: &'g Graph, bound: &Bound<'g>, store: &ParamStore, l_target: f64) -> Result<Var<'g>> {
    let mut acc: Option<Var<'g>> = None;
    for (i, p) in store.params().iter().enumerate() {
        let Some(state) = p.power.as_ref().filter(|_| p.spectral) else {
            continue;
        };
        let (m, n) = (p.value.shape()[0], p.value.cols());
        let u = g.constant(&Tensor::new([1, m], state.u.clone())?);
        let v = g.constant(&Tensor::new([n, 1], state.v.clone())?);
        let sigma = u.matmul(bound.vars[i])?.matmul(v)?.reshape(&[1])?;
        let term = sigma.add_scalar(-l_target)?.relu()?.square()?;
        acc = Some(match acc {
            Some(a) => a.add(term)?,
            None => term,
        });
    }
    Ok(acc.unwrap_or_else(|| g.scalar(0.0)))
}

/// Weighted total on the tape plus its value breakdown.
pub fn combine<'g>(terms: &LossTerms<'g>, w: &LossWeights) -> Result<(Var<'g>, LossBreakdown)> {
    let total = terms
        .pred
        .scale(w.pred)?
        .add(terms.vol.scale(w.vol)?)?
        .add(terms.reg.scale(w.reg)?)?
        .add(terms.stable.scale(w.stable)?)?;
    let bd = LossBreakdown::compose(
        terms.pred.item(),
        terms.vol.item(),
        terms.reg.item(),
        terms.stable.item(),
        w,
    );
    Ok((total, bd))
}

/// Value-only total for a set of predictions, matching [`combine`].
pub fn total_loss(y: &[f64], y_hat: &[f64], stable: f64, w: &LossWeights) -> Result<LossBreakdown> {
    let pred = loss_pred(y, y_hat)?;
    let windows = vol_windows(y.len());
    let vol = if windows.is_empty() {
        0.0
    } else {
        let mut s = 0.0;
        for &(a, len) in &windows {
            s += loss_vol(&y[a..a + len], &y_hat[a..a + len])?;
        }
        s / windows.len() as f64
    };
    let reg = if y_hat.len() < 2 { 0.0 } else { loss_reg(y_hat)? };
    Ok(LossBreakdown::compose(pred, vol, reg, stable, w))
}
