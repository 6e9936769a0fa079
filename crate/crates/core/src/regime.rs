//! Multi-head self-attention regime classifier with a head-disagreement
//! uncertainty score.

use rand::Rng;
use regimenas_tensor::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::nn::{Bound, Linear, ParamId, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub heads: usize,
    /// Total key/value width, split evenly across heads.
    pub d_k: usize,
    pub n_regimes: usize,
    pub window: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            heads: 4,
            d_k: 64,
            n_regimes: 3,
            window: 32,
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_k == 0 || self.n_regimes < 2 || self.window == 0 {
            return Err(CoreError::Config(format!("invalid attention config {self:?}")));
        }
        if self.d_k % self.heads != 0 {
            return Err(CoreError::Config(format!(
                "d_k = {} is not divisible by {} heads",
                self.d_k, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_k / self.heads
    }
}

/// Per-window regime estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeOutput {
    pub p: Vec<f64>,
    /// `heads × n_regimes`, row-major.
    pub per_head_p: Vec<Vec<f64>>,
    pub uncertainty: f64,
}

#[derive(Debug, Clone)]
pub struct RegimeDetector {
    pub cfg: AttentionConfig,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    /// Additive `window × window` attention bias shared by all heads.
    pub m: ParamId,
    pub o: ParamId,
    pub classifier: Linear,
}

/// Graph outputs of a batched detector pass.
pub struct DetectorOut<'g> {
    /// `[B × n_regimes]` probabilities.
    pub p: Var<'g>,
    /// Pooled per-head outputs, one `[B × head_dim]` node per head.
    pub heads: Vec<Var<'g>>,
}

impl RegimeDetector {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, n_features: usize, cfg: AttentionConfig) -> Result<Self> {
        cfg.validate()?;
        let q = store.linear(rng, "detector.q", n_features, cfg.d_k, false);
        let k = store.linear(rng, "detector.k", n_features, cfg.d_k, false);
        let v = store.linear(rng, "detector.v", n_features, cfg.d_k, false);
        let m = store.constant_init("detector.m", &[cfg.window, cfg.window], 0.0);
        let bound = (3.0 / cfg.d_k as f64).sqrt();
        let o = store.matrix(rng, "detector.o", cfg.d_k, cfg.d_k, bound, false);
        let classifier = store.linear(rng, "detector.classifier", cfg.d_k, cfg.n_regimes, false);
        Ok(Self {
            cfg,
            q,
            k,
            v,
            m,
            o,
            classifier,
        })
    }

    /// Regime probabilities at the last step of each `[B×T×F]` window.
    ///
    /// Pooling takes the last position, so only the last query row of each
    /// head's attention is evaluated; the other rows cannot reach the output.
    pub fn forward<'g>(&self, bound: &Bound<'g>, x: Var<'g>) -> Result<DetectorOut<'g>> {
        let shape = x.shape();
        if shape.len() != 3 {
            return Err(CoreError::Config(format!("detector expects [B×T×F], got {shape:?}")));
        }
        let (b, t, f) = (shape[0], shape[1], shape[2]);
        if t != self.cfg.window {
            return Err(CoreError::Config(format!("window length {t} but detector built for {}", self.cfg.window)));
        }
        let dh = self.cfg.head_dim();
        let last = x.slice(1, t - 1, 1)?.reshape(&[b, f])?;
        let q = bound.linear(&self.q, last)?; // [B×d_k]
        let k = bound.linear(&self.k, x)?; // [B×T×d_k]
        let v = bound.linear(&self.v, x)?;
        let bias = bound.get(self.m).slice(0, t - 1, 1)?; // [1×T]
        let scale = 1.0 / (self.cfg.d_k as f64).sqrt();
        let mut heads = Vec::with_capacity(self.cfg.heads);
        for h in 0..self.cfg.heads {
            let qh = q.slice(1, h * dh, dh)?.reshape(&[b, 1, dh])?;
            let kh = k.slice(2, h * dh, dh)?.transpose()?; // [B×dh×T]
            let vh = v.slice(2, h * dh, dh)?;
            let scores = qh.bmm(kh)?.scale(scale)?.add(bias)?; // [B×1×T]
            let w = scores.softmax(2)?;
            heads.push(w.bmm(vh)?.reshape(&[b, dh])?);
        }
        let concat = x.graph().concat(&heads, 1)?;
        let pooled = concat.matmul(bound.get(self.o))?;
        let logits = bound.linear(&self.classifier, pooled)?;
        Ok(DetectorOut {
            p: logits.softmax(1)?,
            heads,
        })
    }

    /// Per-head distributions `softmax(classifier(H · head_h · W_O[rows of h]))`,
    /// evaluated on values outside the tape. Returns `[B][H][n_regimes]`.
    pub fn per_head_distributions(&self, store: &ParamStore, heads: &[Var<'_>]) -> Vec<Vec<Vec<f64>>> {
        let dh = self.cfg.head_dim();
        let h_count = self.cfg.heads;
        let o = store.get(self.o);
        let wc = store.get(self.classifier.w);
        let bc = store.get(self.classifier.b);
        let d = self.cfg.d_k;
        let nr = self.cfg.n_regimes;
        let vals: Vec<Vec<f64>> = heads.iter().map(|v| v.to_vec()).collect();
        let b = vals.first().map_or(0, |v| v.len() / dh);
        (0..b)
            .map(|bi| {
                (0..h_count)
                    .map(|h| {
                        let head = &vals[h][bi * dh..(bi + 1) * dh];
                        let mut pooled = vec![0.0; d];
                        for (i, hv) in head.iter().enumerate() {
                            let row = h * dh + i;
                            for (j, p) in pooled.iter_mut().enumerate() {
                                *p += h_count as f64 * hv * o.data()[row * d + j];
                            }
                        }
                        let logits: Vec<f64> = (0..nr)
                            .map(|r| bc.data()[r] + (0..d).map(|j| pooled[j] * wc.data()[j * nr + r]).sum::<f64>())
                            .collect();
                        softmax(&logits)
                    })
                    .collect()
            })
            .collect()
    }

    /// Single-window convenience wrapper returning the full [`RegimeOutput`].
    pub fn regime_forward(&self, store: &ParamStore, window: &Tensor) -> Result<RegimeOutput> {
        let g = Graph::new();
        let bound = store.bind(&g);
        let (t, f) = (window.shape()[0], window.cols());
        let x = g.constant(&window.clone().reshape([1, t, f])?);
        let out = self.forward(&bound, x)?;
        let p = out.p.to_vec();
        let per_head_p = self.per_head_distributions(store, &out.heads).remove(0);
        let uncertainty = head_uncertainty(&per_head_p)?;
        Ok(RegimeOutput {
            p,
            per_head_p,
            uncertainty,
        })
    }
}

/// Scaled dot-product attention for one head on 2-D inputs:
/// `softmax(Q·Kᵀ/√d_k + M)·V`. Returns the output and the weight matrix.
pub fn attention_head<'g>(q: Var<'g>, k: Var<'g>, v: Var<'g>, m: Var<'g>, d_k: usize) -> Result<(Var<'g>, Var<'g>)> {
    let (qs, ks) = (q.shape(), k.shape());
    if qs.len() != 2 || ks.len() != 2 || qs[1] != ks[1] {
        return Err(CoreError::Config(format!("attention key width mismatch: {qs:?} vs {ks:?}")));
    }
    let scores = q.matmul(k.transpose()?)?.scale(1.0 / (d_k as f64).sqrt())?.add(m)?;
    let w = scores.softmax(1)?;
    Ok((w.matmul(v)?, w))
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// `0.5 · mean_h H(p_h)/ln N + 0.5 · mean_r Var_h(p_{h,r}) / 0.25`, clipped to `[0, 1]`.
pub fn head_uncertainty(per_head_p: &[Vec<f64>]) -> Result<f64> {
    let h = per_head_p.len();
    if h == 0 {
        return Err(CoreError::Config("no head distributions".into()));
    }
    let n = per_head_p[0].len();
    if n < 2 {
        return Err(CoreError::Config("need at least two regimes".into()));
    }
    for (i, row) in per_head_p.iter().enumerate() {
        let s: f64 = row.iter().sum();
        if row.len() != n || (s - 1.0).abs() > 1e-6 || row.iter().any(|&p| p < 0.0) {
            return Err(CoreError::Config(format!("head {i} is not a distribution (sum {s})")));
        }
    }
    let ln_n = (n as f64).ln();
    let entropy = per_head_p
        .iter()
        .map(|row| -row.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>() / ln_n)
        .sum::<f64>()
        / h as f64;
    let variance = (0..n)
        .map(|r| {
            let mean = per_head_p.iter().map(|row| row[r]).sum::<f64>() / h as f64;
            per_head_p.iter().map(|row| (row[r] - mean).powi(2)).sum::<f64>() / h as f64
        })
        .sum::<f64>()
        / n as f64;
    Ok((0.5 * entropy + 0.5 * variance / 0.25).clamp(0.0, 1.0))
}
