use super::features::Regime;
use super::indicators::{adx, atr, quantile};
use super::ohlcv::OhlcvSeries;
use crate::error::{CoreError, Result};

pub const ADX_TREND_THRESHOLD: f64 = 25.0;
/// Trailing window for the ATR percentile.
pub const ATR_PERCENTILE_WINDOW: usize = 100;

/// Rule-based labels: Trend when ADX > 25; HighVolatility when ATR exceeds its
/// trailing `vol_quantile` (over up to 100 defined ATR values) and ADX ≤ 25;
/// Range otherwise. `None` until ADX is defined.
pub fn label_regimes_posthoc(
    s: &OhlcvSeries,
    adx_period: usize,
    atr_window: usize,
    vol_quantile: f64,
) -> Result<Vec<Option<Regime>>> {
    if s.len() <= 2 * adx_period {
        return Err(CoreError::Data(format!(
            "series too short for regime labels: {} rows, need more than {}",
            s.len(),
            2 * adx_period
        )));
    }
    if !(0.0..=1.0).contains(&vol_quantile) {
        return Err(CoreError::Config(format!("vol_quantile {vol_quantile} outside [0, 1]")));
    }
    let (h, l, c) = (s.highs(), s.lows(), s.closes());
    let adx_v = adx(&h, &l, &c, adx_period);
    let atr_v = atr(&h, &l, &c, atr_window);
    Ok((0..s.len())
        .map(|t| {
            if adx_v[t].is_nan() || atr_v[t].is_nan() {
                return None;
            }
            let start = t.saturating_sub(ATR_PERCENTILE_WINDOW - 1).max(atr_window);
            let threshold = quantile(&atr_v[start..=t], vol_quantile);
            Some(classify(adx_v[t], atr_v[t], threshold))
        })
        .collect())
}

pub fn classify(adx: f64, atr: f64, atr_threshold: f64) -> Regime {
    if adx > ADX_TREND_THRESHOLD {
        Regime::Trend
    } else if atr > atr_threshold {
        Regime::HighVolatility
    } else {
        Regime::Range
    }
}
