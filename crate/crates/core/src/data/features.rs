use std::io::Write;

use serde::{Deserialize, Serialize};

use super::indicators::{atr, bollinger_percent_b, ema, macd, rolling_std, rsi, sma};
use super::labels::label_regimes_posthoc;
use super::ohlcv::OhlcvSeries;
use crate::error::{CoreError, Result};

pub const N_FEATURES: usize = 16;

pub const FEATURE_NAMES: [&str; N_FEATURES] = [
    "log_return",
    "hl_range",
    "body",
    "log_volume_change",
    "close_sma7",
    "close_sma14",
    "close_sma30",
    "close_ema7",
    "close_ema14",
    "close_ema30",
    "macd_line",
    "macd_signal",
    "rsi14",
    "bollinger_pct_b",
    "atr14_rel",
    "realized_vol20",
];

/// Column of the raw log-volume change, used by the volume-modulated skip.
pub const VOLUME_FEATURE: usize = 3;
/// Column of the 20-step realized volatility.
pub const VOL_FEATURE: usize = 15;

/// First index at which every standard feature is defined: the MACD signal
/// needs 26 closes for the slow average plus 8 more for its own seed.
pub const FEATURE_WARMUP: usize = 26 - 1 + 9 - 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Regime {
    Trend,
    HighVolatility,
    Range,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::Trend, Regime::HighVolatility, Regime::Range];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Regime> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Regime::Trend => "Trend",
            Regime::HighVolatility => "HighVolatility",
            Regime::Range => "Range",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Time-indexed feature matrix with aligned targets, labels and split markers.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePanel {
    pub feature_names: Vec<String>,
    /// Row-major `n_rows × n_features`.
    pub x: Vec<f64>,
    pub n_features: usize,
    pub timestamps: Vec<i64>,
    /// Next-step log return.
    pub target: Vec<f64>,
    pub regime: Vec<Regime>,
    pub split: Vec<Split>,
    /// Raw (un-normalized) realized volatility, always ≥ 0.
    pub sigma: Vec<f64>,
    /// Raw log-volume change.
    pub volume: Vec<f64>,
}

impl FeaturePanel {
    pub fn n_rows(&self) -> usize {
        self.target.len()
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.x[t * self.n_features..(t + 1) * self.n_features]
    }

    pub fn column(&self, f: usize) -> Vec<f64> {
        (0..self.n_rows()).map(|t| self.x[t * self.n_features + f]).collect()
    }

    /// Rows `[start, end)`.
    pub fn slice_rows(&self, start: usize, end: usize) -> FeaturePanel {
        let f = self.n_features;
        FeaturePanel {
            feature_names: self.feature_names.clone(),
            x: self.x[start * f..end * f].to_vec(),
            n_features: f,
            timestamps: self.timestamps[start..end].to_vec(),
            target: self.target[start..end].to_vec(),
            regime: self.regime[start..end].to_vec(),
            split: self.split[start..end].to_vec(),
            sigma: self.sigma[start..end].to_vec(),
            volume: self.volume[start..end].to_vec(),
        }
    }

    /// `[first, last]` row range of a split, if present. Splits are contiguous.
    pub fn split_range(&self, split: Split) -> Option<(usize, usize)> {
        let first = self.split.iter().position(|&s| s == split)?;
        let last = self.split.iter().rposition(|&s| s == split)?;
        Some((first, last))
    }

    pub fn split_counts(&self) -> (usize, usize, usize) {
        let c = |s| self.split.iter().filter(|&&x| x == s).count();
        (c(Split::Train), c(Split::Val), c(Split::Test))
    }

    pub fn regime_counts(&self) -> [usize; 3] {
        let mut c = [0; 3];
        for r in &self.regime {
            c[r.index()] += 1;
        }
        c
    }

    /// CSV export: feature columns then `target,regime,split`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = self.feature_names.clone();
        header.extend(["target", "regime", "split"].map(String::from));
        let csv_err = |e: csv::Error| CoreError::Data(format!("csv write: {e}"));
        wtr.write_record(&header).map_err(csv_err)?;
        for t in 0..self.n_rows() {
            let mut rec: Vec<String> = self.row(t).iter().map(|v| v.to_string()).collect();
            rec.push(self.target[t].to_string());
            rec.push(self.regime[t].name().to_string());
            rec.push(self.split[t].name().to_string());
            wtr.write_record(&rec).map_err(csv_err)?;
        }
        wtr.flush().map_err(|e| CoreError::io("<csv>", e))?;
        Ok(())
    }
}

/// Builds the 16 standard features. Rows before [`FEATURE_WARMUP`] and the
/// final row (no next-step target) are dropped. Regime labels come from
/// [`label_regimes_posthoc`] with its default parameters.
pub fn engineer_features(s: &OhlcvSeries) -> Result<FeaturePanel> {
    let n = s.len();
    if n < FEATURE_WARMUP + 2 {
        return Err(CoreError::Data(format!(
            "series too short: {n} rows, need at least {}",
            FEATURE_WARMUP + 2
        )));
    }
    let rows = s.rows();
    let close = s.closes();
    let high = s.highs();
    let low = s.lows();

    let mut log_ret = vec![f64::NAN; n];
    let mut log_vol = vec![f64::NAN; n];
    for t in 1..n {
        log_ret[t] = (close[t] / close[t - 1]).ln();
        log_vol[t] = rows[t].volume.ln_1p() - rows[t - 1].volume.ln_1p();
    }
    let smas = [sma(&close, 7), sma(&close, 14), sma(&close, 30)];
    let emas = [ema(&close, 7), ema(&close, 14), ema(&close, 30)];
    let m = macd(&close, 12, 26, 9);
    let rsi14 = rsi(&close, 14);
    let pct_b = bollinger_percent_b(&close, 20, 2.0);
    let atr14 = atr(&high, &low, &close, 14);
    let rv = rolling_std(&log_ret, 20);
    let labels = label_regimes_posthoc(s, 14, 14, 0.75)?;

    let mut panel = FeaturePanel {
        feature_names: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
        x: Vec::with_capacity((n - FEATURE_WARMUP) * N_FEATURES),
        n_features: N_FEATURES,
        timestamps: Vec::new(),
        target: Vec::new(),
        regime: Vec::new(),
        split: Vec::new(),
        sigma: Vec::new(),
        volume: Vec::new(),
    };
    for t in FEATURE_WARMUP..n - 1 {
        let c = close[t];
        let r = &rows[t];
        let feats = [
            log_ret[t],
            (r.high - r.low) / c,
            (c - r.open) / r.open,
            log_vol[t],
            c / smas[0][t] - 1.0,
            c / smas[1][t] - 1.0,
            c / smas[2][t] - 1.0,
            c / emas[0][t] - 1.0,
            c / emas[1][t] - 1.0,
            c / emas[2][t] - 1.0,
            m.line[t],
            m.signal[t],
            rsi14[t] / 100.0,
            pct_b[t],
            atr14[t] / c,
            rv[t],
        ];
        if let Some(i) = feats.iter().position(|v| !v.is_finite()) {
            return Err(CoreError::Data(format!(
                "feature {} is not finite at row {}",
                FEATURE_NAMES[i],
                t + 1
            )));
        }
        panel.x.extend_from_slice(&feats);
        panel.timestamps.push(r.timestamp);
        panel.target.push((close[t + 1] / c).ln());
        panel.regime.push(labels[t].expect("labels are defined after the feature warm-up"));
        panel.split.push(Split::Train);
        panel.sigma.push(rv[t]);
        panel.volume.push(log_vol[t]);
    }
    Ok(panel)
}

pub const Z_EPS: f64 = 1e-8;

/// Replaces each feature with its trailing-window z-score and drops the first
/// `window − 1` rows, which lack a full window.
pub fn normalize_rolling_z(panel: &FeaturePanel, window: usize) -> Result<FeaturePanel> {
    if window < 2 {
        return Err(CoreError::Config("normalization window must be at least 2".into()));
    }
    let n = panel.n_rows();
    if window > n {
        return Err(CoreError::Data(format!(
            "normalization window {window} exceeds the {n} available rows"
        )));
    }
    let f = panel.n_features;
    let mut out = panel.slice_rows(window - 1, n);
    let w = window as f64;
    for t in window - 1..n {
        for j in 0..f {
            let col = (t + 1 - window..=t).map(|s| panel.x[s * f + j]);
            let mean = col.clone().sum::<f64>() / w;
            let var = col.map(|v| (v - mean).powi(2)).sum::<f64>() / w;
            let z = (panel.x[t * f + j] - mean) / var.sqrt().max(Z_EPS);
            out.x[(t + 1 - window) * f + j] = z;
        }
    }
    Ok(out)
}

/// Assigns train/val/test by index order: floor for train and val, remainder to test.
pub fn chronological_split(panel: &FeaturePanel, ratios: (f64, f64, f64)) -> Result<FeaturePanel> {
    let (a, b, c) = ratios;
    if a <= 0.0 || b <= 0.0 || c <= 0.0 {
        return Err(CoreError::Config(format!("split ratios must be positive, got {ratios:?}")));
    }
    if (a + b + c - 1.0).abs() > 1e-9 {
        return Err(CoreError::Config(format!("split ratios must sum to 1, got {ratios:?}")));
    }
    let n = panel.n_rows();
    // the small offset keeps e.g. 0.29·100 from flooring to 28
    let n_train = ((n as f64 * a) + 1e-9).floor() as usize;
    let n_val = ((n as f64 * b) + 1e-9).floor() as usize;
    let mut out = panel.clone();
    for (t, s) in out.split.iter_mut().enumerate() {
        *s = if t < n_train {
            Split::Train
        } else if t < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(out)
}

pub const DEFAULT_SPLIT: (f64, f64, f64) = (0.70, 0.15, 0.15);
pub const DEFAULT_Z_WINDOW: usize = 60;

/// Features, default rolling normalization and default split in one call.
pub fn prepare_panel(s: &OhlcvSeries, z_window: usize) -> Result<FeaturePanel> {
    let raw = engineer_features(s)?;
    let norm = normalize_rolling_z(&raw, z_window)?;
    chronological_split(&norm, DEFAULT_SPLIT)
}
