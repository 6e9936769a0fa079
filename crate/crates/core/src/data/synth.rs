use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::features::Regime;
use super::ohlcv::{OhlcvRow, OhlcvSeries};
use crate::error::{CoreError, Result};

/// Regime-switching market. Regime order is Trend, HighVolatility, Range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthMarketConfig {
    pub n_steps: usize,
    pub transition_matrix: [[f64; 3]; 3],
    /// Per-step log drift.
    pub drift: [f64; 3],
    /// Per-step log volatility.
    pub volatility: [f64; 3],
    /// Pull rate toward the anchor set when the regime was entered.
    pub mean_reversion: [f64; 3],
    pub seed: u64,
    #[serde(default = "default_start_price")]
    pub start_price: f64,
    /// Intra-step samples used to build high/low.
    #[serde(default = "default_substeps")]
    pub substeps: usize,
    /// Mean traded volume per regime.
    #[serde(default = "default_volume")]
    pub volume_level: [f64; 3],
    #[serde(default = "default_start_timestamp")]
    pub start_timestamp: i64,
    #[serde(default = "default_step_seconds")]
    pub step_seconds: i64,
    /// Draw the sign of the drift afresh each time a regime is entered.
    #[serde(default)]
    pub random_drift_sign: bool,
}

fn default_start_price() -> f64 {
    100.0
}
fn default_substeps() -> usize {
    8
}
fn default_volume() -> [f64; 3] {
    [1.0e6, 2.5e6, 0.6e6]
}
fn default_start_timestamp() -> i64 {
    1_500_000_000
}
fn default_step_seconds() -> i64 {
    86_400
}

impl SynthMarketConfig {
    /// Benchmark market: persistent regimes, positive drift in Trend, wide
    /// driftless noise in HighVolatility, tight mean reversion in Range.
    pub fn benchmark(n_steps: usize, seed: u64) -> Self {
        Self {
            n_steps,
            transition_matrix: [
                [0.97, 0.015, 0.015],
                [0.02, 0.96, 0.02],
                [0.015, 0.015, 0.97],
            ],
            drift: [0.006, 0.0, 0.0],
            volatility: [0.006, 0.02, 0.006],
            mean_reversion: [0.0, 0.0, 0.35],
            seed,
            start_price: default_start_price(),
            substeps: default_substeps(),
            volume_level: default_volume(),
            start_timestamp: default_start_timestamp(),
            step_seconds: default_step_seconds(),
            random_drift_sign: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(m));
        if self.n_steps < 2 {
            return bad("n_steps must be at least 2".into());
        }
        for (i, row) in self.transition_matrix.iter().enumerate() {
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return bad(format!("transition row {i} has entries outside [0, 1]"));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-12 {
                return bad(format!("transition row {i} sums to {s}, not 1"));
            }
        }
        if self.volatility.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return bad("volatility must be non-negative".into());
        }
        if self.mean_reversion.iter().any(|k| !k.is_finite() || *k < 0.0) {
            return bad("mean_reversion must be non-negative".into());
        }
        if self.drift.iter().any(|d| !d.is_finite()) {
            return bad("drift must be finite".into());
        }
        if !(self.start_price > 0.0) || self.substeps == 0 || self.step_seconds <= 0 {
            return bad("start_price, substeps and step_seconds must be positive".into());
        }
        if self.volume_level.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return bad("volume_level must be non-negative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthMarket {
    pub series: OhlcvSeries,
    /// Hidden regime at each step.
    pub regimes: Vec<Regime>,
}

pub fn generate_synthetic(cfg: &SynthMarketConfig) -> Result<SynthMarket> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sub = cfg.substeps as f64;
    let mut regime = rng.random_range(0..3usize);
    let mut level = cfg.start_price.ln();
    let mut anchor = level;
    let mut sign = 1.0;
    let mut rows = Vec::with_capacity(cfg.n_steps);
    let mut regimes = Vec::with_capacity(cfg.n_steps);
    for t in 0..cfg.n_steps {
        if t > 0 {
            let u: f64 = rng.random();
            let row = cfg.transition_matrix[regime];
            let mut next = 2;
            let mut acc = 0.0;
            for (j, p) in row.iter().enumerate() {
                acc += p;
                if u < acc {
                    next = j;
                    break;
                }
            }
            if next != regime {
                anchor = level;
                if cfg.random_drift_sign {
                    sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                }
            }
            regime = next;
        }
        let (mu, sigma, kappa) = (sign * cfg.drift[regime], cfg.volatility[regime], cfg.mean_reversion[regime]);
        let open = level;
        let (mut hi, mut lo) = (open, open);
        for _ in 0..cfg.substeps {
            let z: f64 = rng.sample(StandardNormal);
            level += mu / sub + kappa / sub * (anchor - level) + sigma / sub.sqrt() * z;
            hi = hi.max(level);
            lo = lo.min(level);
        }
        let vz: f64 = rng.sample(StandardNormal);
        rows.push(OhlcvRow {
            timestamp: cfg.start_timestamp + t as i64 * cfg.step_seconds,
            open: open.exp(),
            high: hi.exp(),
            low: lo.exp(),
            close: level.exp(),
            volume: cfg.volume_level[regime] * (0.25 * vz).exp(),
        });
        regimes.push(Regime::from_index(regime).expect("regime index below 3"));
    }
    Ok(SynthMarket {
        series: OhlcvSeries::new(rows)?,
        regimes,
    })
}

/// Stationary distribution of a row-stochastic matrix by power iteration.
pub fn stationary_distribution(p: &[[f64; 3]; 3]) -> [f64; 3] {
    let mut pi = [1.0 / 3.0; 3];
    for _ in 0..100_000 {
        let mut next = [0.0; 3];
        for (i, row) in p.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                next[j] += pi[i] * v;
            }
        }
        let diff: f64 = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
        pi = next;
        if diff < 1e-15 {
            break;
        }
    }
    pi
}
