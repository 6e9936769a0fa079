//! Technical indicators over price arrays. Entries before an indicator's
//! warm-up are `NaN`; every value at index `t` uses inputs at or before `t`.

pub fn sma(x: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![f64::NAN; x.len()];
    for t in n.saturating_sub(1)..x.len() {
        out[t] = x[t + 1 - n..=t].iter().sum::<f64>() / n as f64;
    }
    out
}

/// Exponential average with smoothing 2/(n+1), seeded by the simple average
/// of the first `n` defined inputs. Leading `NaN`s in `x` are skipped.
pub fn ema(x: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![f64::NAN; x.len()];
    let Some(start) = x.iter().position(|v| !v.is_nan()) else {
        return out;
    };
    let seed_at = start + n - 1;
    if seed_at >= x.len() {
        return out;
    }
    let alpha = 2.0 / (n as f64 + 1.0);
    let mut prev = x[start..=seed_at].iter().sum::<f64>() / n as f64;
    out[seed_at] = prev;
    for t in seed_at + 1..x.len() {
        prev = alpha * x[t] + (1.0 - alpha) * prev;
        out[t] = prev;
    }
    out
}

/// Population standard deviation over a trailing window.
pub fn rolling_std(x: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![f64::NAN; x.len()];
    for t in n.saturating_sub(1)..x.len() {
        let w = &x[t + 1 - n..=t];
        if w.iter().any(|v| v.is_nan()) {
            continue;
        }
        let m = w.iter().sum::<f64>() / n as f64;
        out[t] = (w.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64).sqrt();
    }
    out
}

pub struct Macd {
    pub line: Vec<f64>,
    pub signal: Vec<f64>,
}

pub fn macd(close: &[f64], fast: usize, slow: usize, signal: usize) -> Macd {
    let (f, s) = (ema(close, fast), ema(close, slow));
    let line: Vec<f64> = f.iter().zip(&s).map(|(a, b)| a - b).collect();
    let signal = ema(&line, signal);
    Macd { line, signal }
}

/// Wilder RSI on a 0–100 scale; 50 when the window saw no movement at all.
pub fn rsi(close: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![f64::NAN; close.len()];
    if close.len() <= n {
        return out;
    }
    let change = |t: usize| close[t] - close[t - 1];
    let (mut gain, mut loss) = (0.0, 0.0);
    for t in 1..=n {
        gain += change(t).max(0.0);
        loss += (-change(t)).max(0.0);
    }
    gain /= n as f64;
    loss /= n as f64;
    let value = |g: f64, l: f64| {
        if g == 0.0 && l == 0.0 {
            50.0
        } else if l == 0.0 {
            100.0
        } else {
            100.0 - 100.0 / (1.0 + g / l)
        }
    };
    out[n] = value(gain, loss);
    let k = n as f64;
    for t in n + 1..close.len() {
        gain = (gain * (k - 1.0) + change(t).max(0.0)) / k;
        loss = (loss * (k - 1.0) + (-change(t)).max(0.0)) / k;
        out[t] = value(gain, loss);
    }
    out
}

pub fn true_range(high: &[f64], low: &[f64], close: &[f64]) -> Vec<f64> {
    let mut out = vec![f64::NAN; close.len()];
    for t in 1..close.len() {
        let pc = close[t - 1];
        out[t] = (high[t] - low[t]).max((high[t] - pc).abs()).max((low[t] - pc).abs());
    }
    out
}

/// Wilder ATR, first defined at index `n` as the mean of the first `n` true ranges.
pub fn atr(high: &[f64], low: &[f64], close: &[f64], n: usize) -> Vec<f64> {
    let tr = true_range(high, low, close);
    let mut out = vec![f64::NAN; close.len()];
    if close.len() <= n {
        return out;
    }
    let mut a = tr[1..=n].iter().sum::<f64>() / n as f64;
    out[n] = a;
    for t in n + 1..close.len() {
        a = (a * (n as f64 - 1.0) + tr[t]) / n as f64;
        out[t] = a;
    }
    out
}

/// Wilder ADX, first defined at index `2n − 1`.
pub fn adx(high: &[f64], low: &[f64], close: &[f64], n: usize) -> Vec<f64> {
    let len = close.len();
    let mut out = vec![f64::NAN; len];
    if len < 2 * n {
        return out;
    }
    let tr = true_range(high, low, close);
    let mut plus_dm = vec![0.0; len];
    let mut minus_dm = vec![0.0; len];
    for t in 1..len {
        let up = high[t] - high[t - 1];
        let down = low[t - 1] - low[t];
        if up > down && up > 0.0 {
            plus_dm[t] = up;
        }
        if down > up && down > 0.0 {
            minus_dm[t] = down;
        }
    }
    let k = n as f64;
    let (mut s_tr, mut s_p, mut s_m) = (0.0, 0.0, 0.0);
    for t in 1..=n {
        s_tr += tr[t];
        s_p += plus_dm[t];
        s_m += minus_dm[t];
    }
    let dx = |s_tr: f64, s_p: f64, s_m: f64| {
        if s_tr == 0.0 {
            return 0.0;
        }
        let (pdi, mdi) = (100.0 * s_p / s_tr, 100.0 * s_m / s_tr);
        if pdi + mdi == 0.0 {
            0.0
        } else {
            100.0 * (pdi - mdi).abs() / (pdi + mdi)
        }
    };
    let mut dxs = vec![dx(s_tr, s_p, s_m)];
    let mut adx_val = f64::NAN;
    for t in n + 1..len {
        s_tr = s_tr - s_tr / k + tr[t];
        s_p = s_p - s_p / k + plus_dm[t];
        s_m = s_m - s_m / k + minus_dm[t];
        let d = dx(s_tr, s_p, s_m);
        if dxs.len() < n {
            dxs.push(d);
            if dxs.len() == n {
                adx_val = dxs.iter().sum::<f64>() / k;
                out[t] = adx_val;
            }
        } else {
            adx_val = (adx_val * (k - 1.0) + d) / k;
            out[t] = adx_val;
        }
    }
    out
}

/// Bollinger %B: position of the close inside the (mean ± `width`·std) band;
/// 0.5 when the band has zero width.
pub fn bollinger_percent_b(close: &[f64], n: usize, width: f64) -> Vec<f64> {
    let mean = sma(close, n);
    let sd = rolling_std(close, n);
    close
        .iter()
        .zip(mean.iter().zip(&sd))
        .map(|(&c, (&m, &s))| {
            if m.is_nan() {
                f64::NAN
            } else if s == 0.0 {
                0.5
            } else {
                (c - (m - width * s)) / (2.0 * width * s)
            }
        })
        .collect()
}

/// Linear-interpolated quantile (the "type 7" definition).
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sma7_of_one_to_ten() {
        let x: Vec<f64> = (1..=10).map(f64::from).collect();
        let s = sma(&x, 7);
        assert!(s[5].is_nan());
        assert_eq!(s[6], 4.0);
    }

    #[test]
    fn rsi_neutral_on_flat_prices() {
        let r = rsi(&[5.0; 30], 14);
        assert!(r[13].is_nan());
        assert!(r[14..].iter().all(|&v| v == 50.0));
    }

    #[test]
    fn rsi_saturates_on_rising_prices() {
        let x: Vec<f64> = (0..30).map(|i| 10.0 + i as f64).collect();
        assert_eq!(rsi(&x, 14)[20], 100.0);
    }

    #[test]
    fn quantile_interpolates() {
        assert_eq!(quantile(&[4.0, 1.0, 3.0, 2.0], 0.5), 2.5);
        assert_eq!(quantile(&[1.0, 2.0, 3.0, 4.0, 5.0], 0.75), 4.0);
    }

    #[test]
    fn ema_seeds_with_sma() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let e = ema(&x, 3);
        assert_eq!(e[2], 2.0);
        assert_eq!(e[3], 0.5 * 4.0 + 0.5 * 2.0);
    }
}
