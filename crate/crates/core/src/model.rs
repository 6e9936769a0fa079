//! Full forecaster: regime detector → gate → blended blocks → scalar head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regimenas_tensor::{Graph, Var};
use serde::{Deserialize, Serialize};

use crate::arch::{ArchSpec, PARAM_CAP};
use crate::arch::CellType;
use crate::blocks::{run_cell, Gate, RangeBlock, SideInputs, TrendBlock, VolatilityBlock};
use crate::error::{CoreError, Result};
use crate::nn::{dropout, Bound, Linear, ParamId, ParamStore};
use crate::regime::{head_uncertainty, AttentionConfig, RegimeDetector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GateMode {
    /// Gate driven by the detector's regime probabilities.
    Learned,
    /// Uniform weights over the enabled blocks; no detector.
    Static,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: ArchSpec,
    pub n_features: usize,
    pub attention: AttentionConfig,
    /// Multiplies every layer width (floor 4); 1.0 builds the architecture as specified.
    pub width_scale: f64,
    /// Factor applied to realized volatility before it enters the volatility block.
    pub vol_coupling: f64,
    pub gate_mode: GateMode,
}

impl ModelConfig {
    pub fn new(arch: ArchSpec, n_features: usize) -> Self {
        Self {
            arch,
            n_features,
            attention: AttentionConfig::default(),
            width_scale: 1.0,
            vol_coupling: 50.0,
            gate_mode: GateMode::Learned,
        }
    }

    pub fn scaled(&self, width: usize) -> usize {
        ((width as f64 * self.width_scale).round() as usize).max(4)
    }
}

/// One batch of windows.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub b: usize,
    pub t: usize,
    pub f: usize,
    /// `[B×T×F]` normalized features.
    pub x: Vec<f64>,
    /// `[B×T]` raw realized volatility.
    pub sigma: Vec<f64>,
    /// `[B×T]` raw log-volume change.
    pub volume: Vec<f64>,
    /// `[B]` targets for the last step of each window.
    pub y: Vec<f64>,
    /// Panel row of each window's last step.
    pub rows: Vec<usize>,
}

pub struct ForwardOut<'g> {
    /// `[B×1]` predictions.
    pub pred: Var<'g>,
    /// `[B×N_r]` regime probabilities (absent in static mode).
    pub p: Option<Var<'g>>,
    /// `[B×n_enabled]` gate weights (absent for models without a gate).
    pub gate: Option<Var<'g>>,
    /// Last-step output of each enabled block, `[B×d]`.
    pub blocks: Vec<Var<'g>>,
    /// Pooled per-head detector outputs.
    pub heads: Vec<Var<'g>>,
}

#[derive(Debug, Clone)]
pub struct RegimeModel {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub detector: Option<RegimeDetector>,
    pub volatility: Option<VolatilityBlock>,
    pub trend: Option<TrendBlock>,
    pub range: Option<RangeBlock>,
    pub gate: Gate,
    pub skip: ParamId,
    /// Per-regime residual scale logits, `[N_r × 1]`.
    pub alpha: ParamId,
    pub head: Linear,
    pub d: usize,
}

impl RegimeModel {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.arch.validate()?;
        cfg.attention.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let arch = &cfg.arch;
        let f = cfg.n_features;
        let hidden: Vec<usize> = arch.hidden.iter().map(|&h| cfg.scaled(h)).collect();
        let d = *hidden.last().expect("validated depth ≥ 1");
        let detector = match cfg.gate_mode {
            GateMode::Learned => Some(RegimeDetector::new(&mut store, &mut rng, f, cfg.attention.clone())?),
            GateMode::Static => None,
        };
        let volatility = arch.blocks[0].then(|| VolatilityBlock::new(&mut store, &mut rng, f, &arch.cells, &hidden));
        let trend = arch.blocks[1]
            .then(|| TrendBlock::new(&mut store, &mut rng, f, arch.kernels(), d, arch.activation));
        let range = arch.blocks[2]
            .then(|| RangeBlock::new(&mut store, &mut rng, f, arch.range_lookback, d, arch.activation));
        let n_enabled = arch.blocks.iter().filter(|&&b| b).count();
        let gate = Gate::new(&mut store, &mut rng, cfg.attention.n_regimes, arch.gate_width, n_enabled);
        let bound = (6.0 / (f + d) as f64).sqrt();
        let skip = store.matrix(&mut rng, "residual.skip", f, d, bound, true);
        let alpha = store.constant_init("residual.alpha", &[cfg.attention.n_regimes, 1], 0.0);
        let head = store.linear(&mut rng, "head", d, 1, true);
        let model = Self {
            cfg,
            store,
            detector,
            volatility,
            trend,
            range,
            gate,
            skip,
            alpha,
            head,
            d,
        };
        if let Some(t) = &model.trend {
            if model.cfg.attention.window < t.max_kernel() {
                return Err(CoreError::Arch(format!(
                    "window {} shorter than trend kernel {}",
                    model.cfg.attention.window,
                    t.max_kernel()
                )));
            }
        }
        Ok(model)
    }

    pub fn param_count(&self) -> usize {
        self.store.count()
    }

    pub fn n_enabled(&self) -> usize {
        self.cfg.arch.blocks.iter().filter(|&&b| b).count()
    }

    /// Parameter count of `arch` built at full width.
    pub fn full_size_param_count(arch: &ArchSpec, n_features: usize, attention: &AttentionConfig) -> Result<usize> {
        let mut cfg = ModelConfig::new(arch.clone(), n_features);
        cfg.attention = attention.clone();
        Ok(RegimeModel::new(cfg, 0)?.param_count())
    }

    pub fn check_param_cap(arch: &ArchSpec, n_features: usize, attention: &AttentionConfig) -> Result<usize> {
        let n = Self::full_size_param_count(arch, n_features, attention)?;
        if n > PARAM_CAP {
            return Err(CoreError::Arch(format!("{n} parameters exceed the cap of {PARAM_CAP}")));
        }
        Ok(n)
    }

    /// Places a batch on the graph: `x [B×T×F]`, `sigma` and `volume` `[B×T×1]`.
    pub fn batch_inputs<'g>(&self, g: &'g Graph, batch: &Batch) -> Result<(Var<'g>, SideInputs<'g>)> {
        let x = g.constant_from(vec![batch.b, batch.t, batch.f], batch.x.clone())?;
        let sigma = g.constant_from(
            vec![batch.b, batch.t, 1],
            batch.sigma.iter().map(|s| s * self.cfg.vol_coupling).collect(),
        )?;
        let volume = g.constant_from(vec![batch.b, batch.t, 1], batch.volume.clone())?;
        Ok((x, SideInputs { sigma, volume }))
    }

    /// Full sequence output of every enabled block, `[B×T×d]` each.
    pub fn block_sequences<'g>(&self, p: &Bound<'g>, x: Var<'g>, side: SideInputs<'g>) -> Result<Vec<Var<'g>>> {
        let mut out = Vec::with_capacity(3);
        if let Some(v) = &self.volatility {
            out.push(v.forward(p, x, side)?);
        }
        if let Some(t) = &self.trend {
            out.push(t.forward(p, x)?);
        }
        if let Some(r) = &self.range {
            out.push(r.forward(p, x)?);
        }
        Ok(out)
    }

    /// Gate-weighted sum of last-step block outputs for given regime probabilities.
    pub fn adaptive_output<'g>(&self, p: &Bound<'g>, blocks: &[Var<'g>], probs: Var<'g>) -> Result<(Var<'g>, Var<'g>)> {
        let gate = self.gate_weights(p, probs, blocks[0].shape()[0])?;
        Ok((blend(blocks, gate)?, gate))
    }

    fn gate_weights<'g>(&self, p: &Bound<'g>, probs: Var<'g>, b: usize) -> Result<Var<'g>> {
        match self.cfg.gate_mode {
            GateMode::Learned => self.gate.forward(p, probs),
            GateMode::Static => {
                let n = self.n_enabled();
                Ok(probs.graph().constant_from(vec![b, n], vec![1.0 / n as f64; b * n])?)
            }
        }
    }

    /// Forward pass. Dropout is applied when `rng` is given.
    pub fn forward<'g, R: Rng>(&self, p: &Bound<'g>, batch: &Batch, rng: Option<&mut R>) -> Result<ForwardOut<'g>> {
        let g = p.vars.first().map(|v| v.graph()).ok_or_else(|| CoreError::Config("empty model".into()))?;
        if batch.t != self.cfg.attention.window || batch.f != self.cfg.n_features {
            return Err(CoreError::Config(format!(
                "batch windows are {}×{} but the model expects {}×{}",
                batch.t, batch.f, self.cfg.attention.window, self.cfg.n_features
            )));
        }
        let (b, t) = (batch.b, batch.t);
        let (x, side) = self.batch_inputs(g, batch)?;
        let (probs, heads) = match &self.detector {
            Some(det) => {
                let out = det.forward(p, x)?;
                (out.p, out.heads)
            }
            None => {
                let nr = self.cfg.attention.n_regimes;
                (g.constant_from(vec![b, nr], vec![1.0 / nr as f64; b * nr])?, Vec::new())
            }
        };
        let seqs = self.block_sequences(p, x, side)?;
        let blocks: Vec<Var<'g>> = seqs
            .iter()
            .map(|s| s.slice(1, t - 1, 1)?.reshape(&[b, self.d]))
            .collect::<std::result::Result<_, _>>()?;
        let (mixed, gate) = self.adaptive_output(p, &blocks, probs)?;
        let last = x.slice(1, t - 1, 1)?.reshape(&[b, batch.f])?;
        let residual = last.matmul(p.get(self.skip))?;
        let y = if self.cfg.arch.skip_scaling {
            // α(p) = Σ_r p_r·sigmoid(a_r) ∈ (0, 1)
            let alpha = probs.matmul(p.get(self.alpha).sigmoid()?)?;
            residual.add(mixed.mul(alpha)?)?
        } else {
            residual.add(mixed)?
        };
        let y = match rng {
            Some(r) => dropout(y, self.cfg.arch.dropout, r)?,
            None => y,
        };
        let pred = p.linear(&self.head, y)?;
        Ok(ForwardOut {
            pred,
            p: self.detector.as_ref().map(|_| probs),
            gate: Some(gate),
            blocks,
            heads,
        })
    }
}

/// `Σ_i gate[:, i] · blocks[i]`.
pub fn blend<'g>(blocks: &[Var<'g>], gate: Var<'g>) -> Result<Var<'g>> {
    let mut acc: Option<Var<'g>> = None;
    for (i, blk) in blocks.iter().enumerate() {
        let term = blk.mul(gate.slice(1, i, 1)?)?;
        acc = Some(match acc {
            Some(a) => a.add(term)?,
            None => term,
        });
    }
    acc.ok_or_else(|| CoreError::Arch("no enabled blocks".into()))
}

/// Anything the trainer can fit: a parameter store plus a batched forward pass.
pub trait Forecaster {
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    fn window(&self) -> usize;
    fn n_features(&self) -> usize;
    /// Scale applied to raw realized volatility inside the model.
    fn vol_coupling(&self) -> f64;
    fn forward_batch<'g>(&self, p: &Bound<'g>, batch: &Batch, rng: Option<&mut ChaCha8Rng>) -> Result<ForwardOut<'g>>;
    /// Head-disagreement uncertainty per window, for models with a detector.
    fn head_uncertainty(&self, out: &ForwardOut<'_>) -> Option<Result<Vec<f64>>> {
        let _ = out;
        None
    }
}

impl Forecaster for RegimeModel {
    fn store(&self) -> &ParamStore {
        &self.store
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
    fn window(&self) -> usize {
        self.cfg.attention.window
    }
    fn n_features(&self) -> usize {
        self.cfg.n_features
    }
    fn vol_coupling(&self) -> f64 {
        self.cfg.vol_coupling
    }
    fn forward_batch<'g>(&self, p: &Bound<'g>, batch: &Batch, rng: Option<&mut ChaCha8Rng>) -> Result<ForwardOut<'g>> {
        self.forward(p, batch, rng)
    }
    fn head_uncertainty(&self, out: &ForwardOut<'_>) -> Option<Result<Vec<f64>>> {
        let det = self.detector.as_ref()?;
        let per_window = det.per_head_distributions(&self.store, &out.heads);
        Some(per_window.iter().map(|h| head_uncertainty(h)).collect())
    }
}

/// Plain stacked GRU on the last hidden state, no regime machinery.
#[derive(Debug, Clone)]
pub struct GruBaseline {
    pub store: ParamStore,
    /// `(wx, wh, b, hidden)` per layer.
    pub layers: Vec<(ParamId, ParamId, ParamId, usize)>,
    pub head: Linear,
    pub window: usize,
    pub n_features: usize,
}

impl GruBaseline {
    pub fn new(n_features: usize, hidden: &[usize], window: usize, seed: u64) -> Result<Self> {
        if hidden.is_empty() || hidden.contains(&0) || window == 0 {
            return Err(CoreError::Arch(format!("invalid baseline shape {hidden:?}, window {window}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut layers = Vec::new();
        let mut fan_in = n_features;
        for (l, &d) in hidden.iter().enumerate() {
            let sx = (1.0 / fan_in as f64).sqrt();
            let sh = (1.0 / d as f64).sqrt();
            let wx = store.matrix(&mut rng, &format!("gru.l{l}.wx"), fan_in, 3 * d, sx, false);
            let wh = store.matrix(&mut rng, &format!("gru.l{l}.wh"), d, 3 * d, sh, false);
            let b = store.constant_init(format!("gru.l{l}.b"), &[1, 3 * d], 0.0);
            layers.push((wx, wh, b, d));
            fan_in = d;
        }
        let head = store.linear(&mut rng, "gru.head", fan_in, 1, false);
        Ok(Self {
            store,
            layers,
            head,
            window,
            n_features,
        })
    }
}

impl Forecaster for GruBaseline {
    fn store(&self) -> &ParamStore {
        &self.store
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
    fn window(&self) -> usize {
        self.window
    }
    fn n_features(&self) -> usize {
        self.n_features
    }
    fn vol_coupling(&self) -> f64 {
        1.0
    }
    fn forward_batch<'g>(&self, p: &Bound<'g>, batch: &Batch, rng: Option<&mut ChaCha8Rng>) -> Result<ForwardOut<'g>> {
        let _ = rng;
        let g = p.vars[0].graph();
        let (b, t) = (batch.b, batch.t);
        let mut seq = g.constant_from(vec![b, t, batch.f], batch.x.clone())?;
        for &(wx, wh, bias, d) in &self.layers {
            let fan_in = seq.shape()[2];
            let pre = seq
                .reshape(&[b * t, fan_in])?
                .matmul(p.get(wx))?
                .add(p.get(bias))?
                .reshape(&[b, t, 3 * d])?;
            seq = run_cell(CellType::Gru, d, pre, p.get(wh))?;
        }
        let d = seq.shape()[2];
        let last = seq.slice(1, t - 1, 1)?.reshape(&[b, d])?;
        Ok(ForwardOut {
            pred: p.linear(&self.head, last)?,
            p: None,
            gate: None,
            blocks: Vec::new(),
            heads: Vec::new(),
        })
    }
}
