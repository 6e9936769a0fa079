//! Volatility, trend and range blocks plus the regime gate.
//!
//! Blocks map a `[B×T×F]` window to a `[B×T×d]` sequence and are causal:
//! position `t` only reads inputs at positions `≤ t`.

use std::collections::BTreeMap;

use rand::Rng;
use regimenas_tensor::Var;

use crate::arch::CellType;
use crate::error::{CoreError, Result};
use crate::nn::{Activation, Bound, Linear, ParamId, ParamStore};

/// Per-step side inputs for the volatility block, both `[B×T×1]`.
#[derive(Clone, Copy)]
pub struct SideInputs<'g> {
    /// Effective volatility (realized volatility times the coupling scale), ≥ 0.
    pub sigma: Var<'g>,
    /// Raw log-volume change.
    pub volume: Var<'g>,
}

#[derive(Debug, Clone)]
pub struct RecurrentLayer {
    pub cell: CellType,
    pub hidden: usize,
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
    /// Volatility coupling on the gate pre-activations, `[1 × n_coupled·hidden]`.
    pub vg: ParamId,
}

impl RecurrentLayer {
    /// Projections that receive the `v_g·σ` term: update/reset for GRU,
    /// input/forget/output for LSTM, the single pre-activation for RNN.
    pub fn n_coupled(cell: CellType) -> usize {
        match cell {
            CellType::Rnn => 1,
            CellType::Gru => 2,
            CellType::Lstm => 3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct VolatilityBlock {
    pub layers: Vec<RecurrentLayer>,
    /// Negative-side slope numerator of the adaptive activation.
    pub a0: ParamId,
    pub skip: ParamId,
    pub vol_scale: ParamId,
    pub vol_shift: ParamId,
    pub out_dim: usize,
}

impl VolatilityBlock {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, n_features: usize, cells: &[CellType], hidden: &[usize]) -> Self {
        let mut layers = Vec::new();
        let mut fan_in = n_features;
        for (l, (&cell, &d)) in cells.iter().zip(hidden).enumerate() {
            let g = cell.n_gates();
            let sx = (1.0 / fan_in as f64).sqrt();
            let sh = (1.0 / d as f64).sqrt();
            let wx = store.matrix(rng, &format!("vol.l{l}.wx"), fan_in, g * d, sx, true);
            let wh = store.matrix(rng, &format!("vol.l{l}.wh"), d, g * d, sh, true);
            let b = store.constant_init(format!("vol.l{l}.b"), &[1, g * d], 0.0);
            let vg = store.constant_init(format!("vol.l{l}.vg"), &[1, RecurrentLayer::n_coupled(cell) * d], 0.0);
            layers.push(RecurrentLayer { cell, hidden: d, wx, wh, b, vg });
            fan_in = d;
        }
        let out_dim = fan_in;
        let a0 = store.constant_init("vol.a0", &[1], 0.1);
        let bound = (6.0 / (n_features + out_dim) as f64).sqrt();
        let skip = store.matrix(rng, "vol.skip", n_features, out_dim, bound, true);
        let vol_scale = store.constant_init("vol.volume_scale", &[1], 0.5);
        let vol_shift = store.constant_init("vol.volume_shift", &[1], 0.0);
        Self {
            layers,
            a0,
            skip,
            vol_scale,
            vol_shift,
            out_dim,
        }
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>, side: SideInputs<'g>) -> Result<Var<'g>> {
        let shape = x.shape();
        let (b, t) = (shape[0], shape[1]);
        let g = x.graph();
        if side.sigma.to_vec().iter().any(|s| !(*s >= 0.0)) {
            return Err(CoreError::Config("volatility input must be non-negative".into()));
        }
        let sigma_flat = side.sigma.reshape(&[b * t, 1])?;
        let mut seq = x;
        for layer in &self.layers {
            let d = layer.hidden;
            let gd = layer.cell.n_gates() * d;
            let nc = RecurrentLayer::n_coupled(layer.cell) * d;
            let fan_in = seq.shape()[2];
            let xproj = seq.reshape(&[b * t, fan_in])?.matmul(p.get(layer.wx))?.add(p.get(layer.b))?;
            let coupling = sigma_flat.matmul(p.get(layer.vg))?;
            let coupling = if nc < gd {
                let zeros = g.constant_from(vec![b * t, gd - nc], vec![0.0; b * t * (gd - nc)])?;
                g.concat(&[coupling, zeros], 1)?
            } else {
                coupling
            };
            let pre = xproj.add(coupling)?.reshape(&[b, t, gd])?;
            seq = run_cell(layer.cell, d, pre, p.get(layer.wh))?;
        }
        // φ_σ(h) = h for h ≥ 0, a0/(1+σ)·h otherwise
        let sigma_vals = side.sigma.to_vec();
        let inv = g.constant_from(vec![b, t, 1], sigma_vals.iter().map(|s| 1.0 / (1.0 + s)).collect())?;
        let slope = inv.mul(p.get(self.a0))?;
        let pos = seq.relu()?;
        let activated = pos.add(slope.mul(seq.sub(pos)?)?)?;
        let strength = side
            .volume
            .mul(p.get(self.vol_scale))?
            .add(p.get(self.vol_shift))?
            .sigmoid()?;
        let f = shape[2];
        let proj = x.reshape(&[b * t, f])?.matmul(p.get(self.skip))?.reshape(&[b, t, self.out_dim])?;
        Ok(activated.add(proj.mul(strength)?)?)
    }
}

/// Unrolls one recurrent layer over `[B×T×gates·d]` input pre-activations
/// (bias and any coupling already added). Returns the `[B×T×d]` hidden states.
pub fn run_cell<'g>(cell: CellType, d: usize, pre: Var<'g>, wh: Var<'g>) -> Result<Var<'g>> {
    let shape = pre.shape();
    let (b, t, gd) = (shape[0], shape[1], shape[2]);
    let g = pre.graph();
    let mut h: Option<Var<'g>> = None;
    let mut c: Option<Var<'g>> = None;
    let mut outs = Vec::with_capacity(t);
    for step in 0..t {
        let xt = pre.slice(1, step, 1)?.reshape(&[b, gd])?;
        let hp = match h {
            Some(hv) => Some(hv.matmul(wh)?),
            None => None,
        };
        let gate = |k: usize| -> Result<Var<'g>> {
            let xs = xt.slice(1, k * d, d)?;
            Ok(match hp {
                Some(hpv) => xs.add(hpv.slice(1, k * d, d)?)?,
                None => xs,
            })
        };
        let next = match cell {
            CellType::Rnn => gate(0)?.tanh()?,
            CellType::Gru => {
                let z = gate(0)?.sigmoid()?;
                let r = gate(1)?.sigmoid()?;
                let xn = xt.slice(1, 2 * d, d)?;
                let n = match (hp, h) {
                    (Some(hpv), Some(_)) => xn.add(r.mul(hpv.slice(1, 2 * d, d)?)?)?.tanh()?,
                    _ => xn.tanh()?,
                };
                match h {
                    // (1 − z)·n + z·h = n + z·(h − n)
                    Some(hv) => n.add(z.mul(hv.sub(n)?)?)?,
                    None => n.sub(z.mul(n)?)?,
                }
            }
            CellType::Lstm => {
                let i = gate(0)?.sigmoid()?;
                let f = gate(1)?.sigmoid()?;
                let o = gate(2)?.sigmoid()?;
                let cand = gate(3)?.tanh()?;
                let cn = match c {
                    Some(cv) => f.mul(cv)?.add(i.mul(cand)?)?,
                    None => i.mul(cand)?,
                };
                c = Some(cn);
                o.mul(cn.tanh()?)?
            }
        };
        h = Some(next);
        outs.push(next.reshape(&[b, 1, d])?);
    }
    Ok(g.concat(&outs, 1)?)
}

#[derive(Debug, Clone)]
pub struct TrendBlock {
    /// `(kernel, dilation, projection)` per parallel convolution.
    pub convs: Vec<(usize, usize, Linear)>,
    pub log_tau: ParamId,
    pub mixer: Linear,
    pub activation: Activation,
    pub out_dim: usize,
}

pub const TREND_DILATIONS: [usize; 2] = [1, 2];

impl TrendBlock {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        n_features: usize,
        kernels: &[usize],
        out_dim: usize,
        activation: Activation,
    ) -> Self {
        let channels = (out_dim / 4).max(4);
        let mut convs = Vec::new();
        for &k in kernels {
            for &dil in &TREND_DILATIONS {
                let lin = store.linear(rng, &format!("trend.conv{k}d{dil}"), k * n_features, channels, true);
                convs.push((k, dil, lin));
            }
        }
        let log_tau = store.constant_init("trend.log_tau", &[1], 1.0);
        let mixer = store.linear(rng, "trend.mixer", convs.len() * channels + n_features, out_dim, true);
        Self {
            convs,
            log_tau,
            mixer,
            activation,
            out_dim,
        }
    }

    pub fn max_kernel(&self) -> usize {
        self.convs.iter().map(|c| c.0).max().unwrap_or(1)
    }

    /// Momentum weights `softmax_i(−i/τ)` over lags `0..t`.
    pub fn momentum_weights<'g>(&self, p: &Bound<'g>, t: usize) -> Result<Var<'g>> {
        let g = p.get(self.log_tau).graph();
        let lags = g.constant_from(vec![t], (0..t).map(|i| -(i as f64)).collect())?;
        let inv_tau = p.get(self.log_tau).neg()?.exp()?;
        Ok(lags.mul(inv_tau)?.softmax(0)?)
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Result<Var<'g>> {
        let shape = x.shape();
        let t = shape[1];
        if t < self.max_kernel() {
            return Err(CoreError::Config(format!(
                "window of {t} steps is shorter than kernel {}",
                self.max_kernel()
            )));
        }
        let g = x.graph();
        let mut shifted: BTreeMap<usize, Var<'g>> = BTreeMap::new();
        let mut feats = Vec::with_capacity(self.convs.len() + 1);
        for (k, dil, lin) in &self.convs {
            let mut taps = Vec::with_capacity(*k);
            for j in 0..*k {
                let lag = j * dil;
                let v = match shifted.get(&lag) {
                    Some(v) => *v,
                    None => {
                        let v = if lag == 0 { x } else { x.shift_time(lag)? };
                        shifted.insert(lag, v);
                        v
                    }
                };
                taps.push(v);
            }
            let window = g.concat(&taps, 2)?;
            feats.push(self.activation.apply(p.linear(lin, window)?)?);
        }
        let lambda = self.momentum_weights(p, t)?;
        feats.push(x.lag_mix(lambda)?);
        let h = g.concat(&feats, 2)?;
        self.activation.apply(p.linear(&self.mixer, h)?)
    }
}

#[derive(Debug, Clone)]
pub struct RangeBlock {
    pub log_h: ParamId,
    pub lookback: usize,
    pub mixer: Linear,
    pub activation: Activation,
    pub out_dim: usize,
}

impl RangeBlock {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        n_features: usize,
        lookback: usize,
        out_dim: usize,
        activation: Activation,
    ) -> Self {
        // squared distances between z-scored rows are of order 2F
        let log_h = store.constant_init("range.log_h", &[1], (n_features as f64).ln());
        let mixer = store.linear(rng, "range.mixer", 2 * n_features, out_dim, true);
        Self {
            log_h,
            lookback,
            mixer,
            activation,
            out_dim,
        }
    }

    /// Kernel-weighted local mean of the previous `lookback` rows.
    pub fn local_mean<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Result<Var<'g>> {
        let h = p.get(self.log_h).exp()?;
        Ok(x.graph().kernel_lag_average(x, h, self.lookback)?)
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Result<Var<'g>> {
        let a = self.local_mean(p, x)?;
        let dev = x.sub(a)?;
        let h = x.graph().concat(&[a, dev], 2)?;
        self.activation.apply(p.linear(&self.mixer, h)?)
    }
}

/// `softmax(W2·tanh(W1·p + b1) + b2)` over the enabled blocks.
#[derive(Debug, Clone)]
pub struct Gate {
    pub hidden: Linear,
    pub out: Linear,
}

impl Gate {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, n_regimes: usize, width: usize, n_out: usize) -> Self {
        let hidden = store.linear(rng, "gate.hidden", n_regimes, width, true);
        let out = Linear {
            w: store.add(
                "gate.out.w",
                regimenas_tensor::Tensor::zeros([width, n_out]),
                true,
                false,
            ),
            b: store.constant_init("gate.out.b", &[1, n_out], 0.0),
            fan_in: width,
            fan_out: n_out,
        };
        Self { hidden, out }
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, probs: Var<'g>) -> Result<Var<'g>> {
        let h = p.linear(&self.hidden, probs)?.tanh()?;
        Ok(p.linear(&self.out, h)?.softmax(1)?)
    }
}
