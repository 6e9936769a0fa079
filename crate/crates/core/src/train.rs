//! Candidate training loop, evaluation and per-epoch logging.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regimenas_tensor::Graph;
use serde::{Deserialize, Serialize};

use crate::arch::ArchSpec;
use crate::data::{FeaturePanel, Regime, Split};
use crate::error::{CoreError, Result};
use crate::model::{Batch, Forecaster, GateMode, ModelConfig, RegimeModel};
use crate::objective::{combine, loss_stable, loss_terms, stable_term, total_loss, LossBreakdown, LossWeights};
use crate::optim::{
    adaptive_tau, apply_spectral_normalization, clip_gradients, cosine_lr, global_norm, refresh_power_states, AdamW,
    EarlyStopping,
};
use crate::regime::AttentionConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// τ₀ in `τ = τ₀ / (1 + c_σ·σ + c_r·p_HighVol)`.
    pub clip_base: f64,
    pub clip_sigma: f64,
    pub clip_regime: f64,
    /// When false, clipping uses τ₀ throughout.
    pub adaptive_clip: bool,
    pub spectral_norm: bool,
    pub l_target: f64,
    /// Target used when the batch-mean high-volatility probability exceeds 0.5.
    pub l_target_high_vol: f64,
    pub adaptive_l_target: bool,
    pub weights: LossWeights,
    /// Smoothness multiplier per detected regime (Trend, HighVolatility, Range).
    pub regime_smoothness: Option<[f64; 3]>,
    /// Weight of a cross-entropy term against post-hoc regime labels; 0 trains the detector end to end only.
    pub aux_regime_weight: f64,
    pub window: usize,
    pub stride: usize,
    /// Targets (next-step log returns) are multiplied by this before training and evaluation.
    pub target_scale: f64,
    /// Random subset of training batches visited per epoch; `None` visits all.
    pub max_batches_per_epoch: Option<usize>,
    pub width_scale: f64,
    pub heads: usize,
    pub d_k: usize,
    pub vol_coupling: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-4,
            batch_size: 64,
            max_epochs: 20,
            patience: 3,
            clip_base: 1.0,
            clip_sigma: 1.0,
            clip_regime: 1.0,
            adaptive_clip: true,
            spectral_norm: true,
            l_target: 1.0,
            l_target_high_vol: 0.8,
            adaptive_l_target: true,
            weights: LossWeights::default(),
            regime_smoothness: None,
            aux_regime_weight: 0.0,
            window: 32,
            stride: 1,
            target_scale: 100.0,
            max_batches_per_epoch: None,
            width_scale: 1.0,
            heads: 4,
            d_k: 64,
            vol_coupling: 50.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if self.max_epochs == 0 || self.patience > self.max_epochs {
            return bad(format!("need 0 < patience ≤ max_epochs, got {} and {}", self.patience, self.max_epochs));
        }
        if self.batch_size == 0 || self.window == 0 || self.stride == 0 {
            return bad("batch size, window and stride must be positive".into());
        }
        if self.clip_base <= 0.0 || self.clip_sigma < 0.0 || self.clip_regime < 0.0 {
            return bad("clip coefficients must be non-negative with τ₀ > 0".into());
        }
        if self.l_target <= 0.0 || self.l_target_high_vol <= 0.0 {
            return bad("spectral targets must be positive".into());
        }
        if self.width_scale <= 0.0 || self.target_scale <= 0.0 || self.weight_decay < 0.0 || self.aux_regime_weight < 0.0 {
            return bad("scales and decay must be positive".into());
        }
        if self.max_batches_per_epoch == Some(0) {
            return bad("max_batches_per_epoch must be positive".into());
        }
        self.weights.validate()
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            heads: self.heads,
            d_k: self.d_k,
            n_regimes: 3,
            window: self.window,
        }
    }

    pub fn model_config(&self, arch: &ArchSpec, n_features: usize, gate_mode: GateMode) -> ModelConfig {
        ModelConfig {
            arch: arch.clone(),
            n_features,
            attention: self.attention(),
            width_scale: self.width_scale,
            vol_coupling: self.vol_coupling,
            gate_mode,
        }
    }

    /// Settings with spectral normalization, the Lipschitz term and adaptive clipping removed.
    pub fn without_stability(&self) -> Self {
        let mut c = self.clone();
        c.spectral_norm = false;
        c.adaptive_clip = false;
        c.adaptive_l_target = false;
        c.weights.stable = 0.0;
        c
    }
}

/// Last-row indices of every complete window whose last row lies in `split`.
pub fn window_rows(panel: &FeaturePanel, split: Split, window: usize, stride: usize) -> Vec<usize> {
    let Some((first, last)) = panel.split_range(split) else {
        return Vec::new();
    };
    (first.max(window - 1)..=last).step_by(stride.max(1)).collect()
}

pub fn make_batch(panel: &FeaturePanel, rows: &[usize], window: usize, target_scale: f64) -> Batch {
    let f = panel.n_features;
    let mut x = Vec::with_capacity(rows.len() * window * f);
    let mut sigma = Vec::with_capacity(rows.len() * window);
    let mut volume = Vec::with_capacity(rows.len() * window);
    for &r in rows {
        let start = r + 1 - window;
        x.extend_from_slice(&panel.x[start * f..(r + 1) * f]);
        sigma.extend_from_slice(&panel.sigma[start..=r]);
        volume.extend_from_slice(&panel.volume[start..=r]);
    }
    Batch {
        b: rows.len(),
        t: window,
        f,
        x,
        sigma,
        volume,
        y: rows.iter().map(|&r| panel.target[r] * target_scale).collect(),
        rows: rows.to_vec(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train: LossBreakdown,
    pub val: LossBreakdown,
    /// Mean auxiliary regime cross-entropy (0 when disabled).
    pub aux: f64,
    pub max_grad_norm: f64,
    pub mean_tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n: usize,
    pub mae: f64,
    pub rmse: f64,
    pub r2: f64,
    pub loss: LossBreakdown,
    /// MAE per post-hoc regime (Trend, HighVolatility, Range); `None` where a regime is absent.
    pub regime_mae: [Option<f64>; 3],
    pub regime_count: [usize; 3],
    pub mean_uncertainty: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub early_stopped: bool,
    pub failed: Option<String>,
    pub val: Option<Metrics>,
    pub param_count: usize,
    pub steps: usize,
    pub wall_time_s: f64,
}

impl TrainReport {
    pub fn best_val_loss(&self) -> Option<f64> {
        self.epochs.get(self.best_epoch).map(|e| e.val.total)
    }

    /// One JSON object per epoch.
    pub fn log_lines(&self) -> Vec<String> {
        self.epochs
            .iter()
            .map(|e| serde_json::to_string(e).expect("epoch records serialize"))
            .collect()
    }
}

/// Model outputs over a set of windows.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub rows: Vec<usize>,
    pub y: Vec<f64>,
    pub y_hat: Vec<f64>,
    /// Detector probabilities per window, when the model has a detector.
    pub probs: Option<Vec<Vec<f64>>>,
    pub uncertainty: Option<Vec<f64>>,
}

pub fn predict<M: Forecaster>(model: &M, panel: &FeaturePanel, rows: &[usize], cfg: &TrainConfig) -> Result<Predictions> {
    let mut out = Predictions {
        rows: rows.to_vec(),
        y: Vec::with_capacity(rows.len()),
        y_hat: Vec::with_capacity(rows.len()),
        probs: None,
        uncertainty: None,
    };
    let mut probs = Vec::new();
    let mut unc = Vec::new();
    for chunk in rows.chunks(cfg.batch_size) {
        let batch = make_batch(panel, chunk, model.window(), cfg.target_scale);
        let g = Graph::new();
        let bound = model.store().bind(&g);
        let fwd = model.forward_batch(&bound, &batch, None)?;
        out.y.extend_from_slice(&batch.y);
        out.y_hat.extend(fwd.pred.to_vec());
        if let Some(p) = fwd.p {
            let nr = p.shape()[1];
            probs.extend(p.to_vec().chunks(nr).map(<[f64]>::to_vec));
        }
        if let Some(u) = model.head_uncertainty(&fwd) {
            unc.extend(u?);
        }
    }
    if !probs.is_empty() {
        out.probs = Some(probs);
    }
    if !unc.is_empty() {
        out.uncertainty = Some(unc);
    }
    Ok(out)
}

/// Loss breakdown of predictions chunked exactly as in training.
pub fn chunked_breakdown(y: &[f64], y_hat: &[f64], batch: usize, stable: f64, w: &LossWeights) -> Result<LossBreakdown> {
    let parts = y
        .chunks(batch)
        .zip(y_hat.chunks(batch))
        .map(|(a, b)| total_loss(a, b, stable, w))
        .collect::<Result<Vec<_>>>()?;
    Ok(LossBreakdown::average(&parts, w))
}

pub fn metrics_from(pred: &Predictions, regimes: &[Regime], loss: LossBreakdown) -> Result<Metrics> {
    let n = pred.y.len();
    if n == 0 {
        return Err(CoreError::Training("cannot evaluate an empty split".into()));
    }
    let abs: Vec<f64> = pred.y.iter().zip(&pred.y_hat).map(|(a, b)| (a - b).abs()).collect();
    let mae = abs.iter().sum::<f64>() / n as f64;
    let sse: f64 = pred.y.iter().zip(&pred.y_hat).map(|(a, b)| (a - b).powi(2)).sum();
    let mean_y = pred.y.iter().sum::<f64>() / n as f64;
    let sst: f64 = pred.y.iter().map(|a| (a - mean_y).powi(2)).sum();
    let r2 = if sst > 0.0 { 1.0 - sse / sst } else if sse == 0.0 { 1.0 } else { 0.0 };
    let mut sums = [0.0; 3];
    let mut counts = [0usize; 3];
    for (i, &row) in pred.rows.iter().enumerate() {
        let r = regimes[row].index();
        sums[r] += abs[i];
        counts[r] += 1;
    }
    let regime_mae = std::array::from_fn(|r| (counts[r] > 0).then(|| sums[r] / counts[r] as f64));
    let mean_uncertainty = pred
        .uncertainty
        .as_ref()
        .map(|u| u.iter().sum::<f64>() / u.len().max(1) as f64);
    Ok(Metrics {
        n,
        mae,
        rmse: (sse / n as f64).sqrt(),
        r2,
        loss,
        regime_mae,
        regime_count: counts,
        mean_uncertainty,
    })
}

/// MAE, RMSE, R², loss breakdown and per-regime MAE on a split.
pub fn evaluate<M: Forecaster>(model: &M, panel: &FeaturePanel, split: Split, cfg: &TrainConfig) -> Result<Metrics> {
    let rows = window_rows(panel, split, model.window(), 1);
    evaluate_rows(model, panel, &rows, cfg)
}

pub fn evaluate_rows<M: Forecaster>(model: &M, panel: &FeaturePanel, rows: &[usize], cfg: &TrainConfig) -> Result<Metrics> {
    if rows.is_empty() {
        return Err(CoreError::Training("cannot evaluate an empty split".into()));
    }
    let pred = predict(model, panel, rows, cfg)?;
    let stable = loss_stable(model.store(), cfg.l_target)?;
    let loss = chunked_breakdown(&pred.y, &pred.y_hat, cfg.batch_size, stable, &cfg.weights)?;
    metrics_from(&pred, &panel.regime, loss)
}

/// Trains `model` on the windows ending at `train_rows`, early-stopping on
/// `val_rows`, and leaves the best-epoch weights in place.
pub fn fit<M: Forecaster>(
    model: &mut M,
    panel: &FeaturePanel,
    train_rows: &[usize],
    val_rows: &[usize],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_rows.is_empty() || val_rows.is_empty() {
        return Err(CoreError::Training(format!(
            "need training and validation windows, got {} and {}",
            train_rows.len(),
            val_rows.len()
        )));
    }
    if model.window() != cfg.window {
        return Err(CoreError::Config(format!(
            "model window {} differs from configured {}",
            model.window(),
            cfg.window
        )));
    }
    let start = Instant::now();
    let chunks: Vec<&[usize]> = train_rows.chunks(cfg.batch_size).collect();
    let per_epoch = cfg.max_batches_per_epoch.map_or(chunks.len(), |m| m.min(chunks.len()));
    let t_total = cfg.max_epochs * per_epoch;
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    order_rng.set_stream(1);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(2);
    let mut opt = AdamW::new(model.store(), cfg.weight_decay);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = model.store().snapshot();
    let mut report = TrainReport {
        epochs: Vec::new(),
        best_epoch: 0,
        epochs_run: 0,
        early_stopped: false,
        failed: None,
        val: None,
        param_count: model.store().count(),
        steps: 0,
        wall_time_s: 0.0,
    };
    let has_spectral = model.store().params().iter().any(|p| p.spectral);

    'epochs: for epoch in 0..cfg.max_epochs {
        let mut idx: Vec<usize> = (0..chunks.len()).collect();
        idx.shuffle(&mut order_rng);
        idx.truncate(per_epoch);
        let mut parts = Vec::with_capacity(per_epoch);
        let (mut aux_sum, mut max_norm, mut tau_sum, mut lr) = (0.0, 0.0f64, 0.0, cfg.lr);
        for &ci in &idx {
            let batch = make_batch(panel, chunks[ci], cfg.window, cfg.target_scale);
            let step = report.steps;
            lr = cosine_lr(cfg.lr, step, t_total);
            let g = Graph::new();
            let bound = model.store().bind(&g);
            let fwd = model.forward_batch(&bound, &batch, Some(&mut dropout_rng))?;
            let p_vals = fwd.p.map(|p| p.to_vec());
            let p_hv = p_vals.as_ref().map_or(0.0, |p| {
                p.chunks(3).map(|row| row[Regime::HighVolatility.index()]).sum::<f64>() / batch.b as f64
            });
            let l_target = if cfg.adaptive_l_target && p_hv > 0.5 {
                cfg.l_target_high_vol
            } else {
                cfg.l_target
            };
            if !cfg.spectral_norm && cfg.weights.stable > 0.0 && has_spectral {
                refresh_power_states(model.store_mut())?;
            }
            let stable = if cfg.weights.stable > 0.0 {
                stable_term(&g, &bound, model.store(), l_target)?
            } else {
                g.scalar(0.0)
            };
            let multipliers = match (&cfg.regime_smoothness, &p_vals) {
                (Some(m), Some(p)) => Some(
                    p.chunks(3)
                        .skip(1)
                        .map(|row| m[argmax(row)])
                        .collect::<Vec<f64>>(),
                ),
                _ => None,
            };
            let terms = loss_terms(&g, fwd.pred, &batch.y, multipliers.as_deref(), stable)?;
            let (mut total, bd) = combine(&terms, &cfg.weights)?;
            if cfg.aux_regime_weight > 0.0 {
                if let Some(p) = fwd.p {
                    let onehot: Vec<f64> = batch
                        .rows
                        .iter()
                        .flat_map(|&r| {
                            let mut v = [0.0; 3];
                            v[panel.regime[r].index()] = 1.0;
                            v
                        })
                        .collect();
                    let target = g.constant_from(vec![batch.b, 3], onehot)?;
                    let ce = p.add_scalar(1e-12)?.log()?.mul(target)?.sum()?.scale(-1.0 / batch.b as f64)?;
                    aux_sum += ce.item();
                    total = total.add(ce.scale(cfg.aux_regime_weight)?)?;
                }
            }
            if !bd.total.is_finite() {
                report.failed = Some(format!("non-finite loss at epoch {epoch}, step {step}"));
                break 'epochs;
            }
            let grads = g.backward(total)?;
            let mut flat = model.store().collect_grads(&bound, &grads);
            drop(bound);
            let tau = if cfg.adaptive_clip {
                let sigma = batch.sigma.chunks(cfg.window).map(|w| w[w.len() - 1]).sum::<f64>() / batch.b as f64;
                adaptive_tau(cfg.clip_base, cfg.clip_sigma, cfg.clip_regime, sigma * model.vol_coupling(), p_hv)
            } else {
                cfg.clip_base
            };
            max_norm = max_norm.max(clip_gradients(&mut flat, tau));
            if !global_norm(&flat).is_finite() {
                report.failed = Some(format!("non-finite gradient at epoch {epoch}, step {step}"));
                break 'epochs;
            }
            tau_sum += tau;
            opt.step(model.store_mut(), &flat, lr)?;
            if cfg.spectral_norm {
                apply_spectral_normalization(model.store_mut(), l_target)?;
            }
            report.steps += 1;
            parts.push(bd);
        }
        let train = LossBreakdown::average(&parts, &cfg.weights);
        let pred = predict(model, panel, val_rows, cfg)?;
        let stable = loss_stable(model.store(), cfg.l_target)?;
        let val = chunked_breakdown(&pred.y, &pred.y_hat, cfg.batch_size, stable, &cfg.weights)?;
        report.epochs.push(EpochRecord {
            epoch,
            lr,
            train,
            val,
            aux: aux_sum / parts.len().max(1) as f64,
            max_grad_norm: max_norm,
            mean_tau: tau_sum / parts.len().max(1) as f64,
        });
        report.epochs_run = epoch + 1;
        if !val.total.is_finite() {
            report.failed = Some(format!("non-finite validation loss at epoch {epoch}"));
            break;
        }
        if stopper.update(epoch, val.total) {
            best = model.store().snapshot();
        }
        if stopper.should_stop() {
            report.early_stopped = true;
            break;
        }
    }
    report.best_epoch = stopper.best_epoch;
    model.store_mut().restore(&best)?;
    if report.failed.is_none() {
        report.val = Some(evaluate_rows(model, panel, val_rows, cfg)?);
    }
    report.wall_time_s = start.elapsed().as_secs_f64();
    Ok(report)
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

pub struct Trained<M> {
    pub model: M,
    pub report: TrainReport,
}

/// Builds `arch` (rejecting it if the full-size model exceeds the parameter
/// cap) and trains it on the train split with early stopping on validation.
pub fn train_candidate(arch: &ArchSpec, panel: &FeaturePanel, cfg: &TrainConfig) -> Result<Trained<RegimeModel>> {
    train_candidate_with(arch, panel, cfg, GateMode::Learned)
}

pub fn train_candidate_with(
    arch: &ArchSpec,
    panel: &FeaturePanel,
    cfg: &TrainConfig,
    gate_mode: GateMode,
) -> Result<Trained<RegimeModel>> {
    cfg.validate()?;
    RegimeModel::check_param_cap(arch, panel.n_features, &cfg.attention())?;
    let mut model = RegimeModel::new(cfg.model_config(arch, panel.n_features, gate_mode), cfg.seed)?;
    let train = window_rows(panel, Split::Train, cfg.window, cfg.stride);
    let val = window_rows(panel, Split::Val, cfg.window, 1);
    let report = fit(&mut model, panel, &train, &val, cfg)?;
    Ok(Trained { model, report })
}

/// Training and holdout windows for the final retrain: train ∪ val with the
/// last 10% of those windows held out for early stopping.
pub fn retrain_rows(panel: &FeaturePanel, cfg: &TrainConfig) -> (Vec<usize>, Vec<usize>) {
    let mut rows = window_rows(panel, Split::Train, cfg.window, 1);
    rows.extend(window_rows(panel, Split::Val, cfg.window, 1));
    let hold = (rows.len() / 10).max(1);
    let holdout = rows.split_off(rows.len() - hold);
    let train = rows.into_iter().step_by(cfg.stride).collect();
    (train, holdout)
}

pub fn retrain_final(arch: &ArchSpec, panel: &FeaturePanel, cfg: &TrainConfig, gate_mode: GateMode) -> Result<Trained<RegimeModel>> {
    cfg.validate()?;
    RegimeModel::check_param_cap(arch, panel.n_features, &cfg.attention())?;
    let mut model = RegimeModel::new(cfg.model_config(arch, panel.n_features, gate_mode), cfg.seed)?;
    let (train, holdout) = retrain_rows(panel, cfg);
    let report = fit(&mut model, panel, &train, &holdout, cfg)?;
    Ok(Trained { model, report })
}
