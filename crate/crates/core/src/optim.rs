//! AdamW, cosine learning-rate schedule, adaptive gradient clipping,
//! spectral normalization and early stopping.

use std::f64::consts::PI;

use regimenas_tensor::spectral::{DEFAULT_ITERS, DEFAULT_TOL};

use crate::error::{CoreError, Result};
use crate::nn::ParamStore;

/// `lr₀·½·(1 + cos(π·t/T))`, with `t` clamped to `[0, T]`.
pub fn cosine_lr(lr0: f64, t: usize, t_total: usize) -> f64 {
    if t_total == 0 {
        return lr0;
    }
    let frac = t.min(t_total) as f64 / t_total as f64;
    lr0 * 0.5 * (1.0 + (PI * frac).cos())
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.params().iter().map(|p| vec![0.0; p.value.numel()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// One bias-corrected update with decoupled weight decay. Parameters
    /// flagged `no_decay` skip the decay term.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(CoreError::Training(format!(
                "{} gradient tensors for {} parameters",
                grads.len(),
                self.m.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (i, p) in store.params_mut().iter_mut().enumerate() {
            let g = &grads[i];
            if g.len() != p.value.numel() {
                return Err(CoreError::Training(format!("gradient shape mismatch for {}", p.name)));
            }
            let decay = if p.no_decay { 0.0 } else { self.weight_decay };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *w -= lr * (mh / (vh.sqrt() + self.eps) + decay * *w);
            }
        }
        Ok(())
    }
}

pub fn global_norm(grads: &[Vec<f64>]) -> f64 {
    grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

/// `g ← g·min(1, τ/‖g‖₂)` over all tensors jointly. Returns the pre-clip norm.
pub fn clip_gradients(grads: &mut [Vec<f64>], tau: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > tau && norm > 0.0 {
        let s = tau / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// `τ₀ / (1 + c_σ·σ + c_r·p_HighVol)`.
pub fn adaptive_tau(tau0: f64, c_sigma: f64, c_regime: f64, sigma: f64, p_high_vol: f64) -> f64 {
    tau0 / (1.0 + c_sigma * sigma.max(0.0) + c_regime * p_high_vol.max(0.0))
}

/// Divides each spectrally designated weight by `max(1, σ(W)/L_target)`,
/// warm-starting the stored power-iteration vectors. Returns the estimated
/// norms before normalization.
pub fn apply_spectral_normalization(store: &mut ParamStore, l_target: f64) -> Result<Vec<f64>> {
    if l_target <= 0.0 {
        return Err(CoreError::Config(format!("spectral target must be positive, got {l_target}")));
    }
    let mut sigmas = Vec::new();
    for p in store.params_mut().iter_mut().filter(|p| p.spectral) {
        let state = p.power.as_mut().expect("spectral parameters carry power-iteration state");
        let sigma = state.refine(&p.value, DEFAULT_ITERS, DEFAULT_TOL)?;
        if sigma > l_target {
            let s = l_target / sigma;
            p.value.data_mut().iter_mut().for_each(|w| *w *= s);
        }
        sigmas.push(sigma);
    }
    Ok(sigmas)
}

/// Refreshes the stored power-iteration vectors without modifying weights.
pub fn refresh_power_states(store: &mut ParamStore) -> Result<()> {
    for p in store.params_mut().iter_mut().filter(|p| p.spectral) {
        let state = p.power.as_mut().expect("spectral parameters carry power-iteration state");
        state.refine(&p.value, DEFAULT_ITERS, DEFAULT_TOL)?;
    }
    Ok(())
}

pub const MIN_IMPROVEMENT: f64 = 1e-9;

/// Stops after `patience` consecutive epochs without improving the best
/// validation loss by more than [`MIN_IMPROVEMENT`].
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: usize,
    pub bad_epochs: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            bad_epochs: 0,
        }
    }

    /// Records an epoch's validation loss; returns whether it is the new best.
    pub fn update(&mut self, epoch: usize, val_loss: f64) -> bool {
        if val_loss < self.best - MIN_IMPROVEMENT {
            self.best = val_loss;
            self.best_epoch = epoch;
            self.bad_epochs = 0;
            true
        } else {
            self.bad_epochs += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.bad_epochs >= self.patience
    }
}
