use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

pub const CSV_HEADER: [&str; 6] = ["timestamp", "open", "high", "low", "close", "volume"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OhlcvRow {
    pub timestamp: i64,
    pub open: f64,
    pub high: f64,
    pub low: f64,
    pub close: f64,
    pub volume: f64,
}

impl OhlcvRow {
    fn check(&self) -> std::result::Result<(), String> {
        let prices = [self.open, self.high, self.low, self.close];
        if prices.iter().any(|p| !p.is_finite() || *p <= 0.0) {
            return Err("prices must be finite and positive".into());
        }
        if !self.volume.is_finite() || self.volume < 0.0 {
            return Err("volume must be finite and non-negative".into());
        }
        if self.high < self.low {
            return Err(format!("high {} < low {}", self.high, self.low));
        }
        if self.low > self.open.min(self.close) {
            return Err(format!("low {} above min(open, close)", self.low));
        }
        if self.high < self.open.max(self.close) {
            return Err(format!("high {} below max(open, close)", self.high));
        }
        Ok(())
    }
}

/// Validated, strictly time-ordered OHLCV records.
#[derive(Debug, Clone, PartialEq)]
pub struct OhlcvSeries {
    rows: Vec<OhlcvRow>,
}

impl OhlcvSeries {
    pub fn new(rows: Vec<OhlcvRow>) -> Result<Self> {
        for (i, row) in rows.iter().enumerate() {
            row.check()
                .map_err(|e| CoreError::Data(format!("row {}: {e}", i + 1)))?;
            if i > 0 && row.timestamp <= rows[i - 1].timestamp {
                return Err(CoreError::Data(format!(
                    "row {}: timestamp {} not after previous {}",
                    i + 1,
                    row.timestamp,
                    rows[i - 1].timestamp
                )));
            }
        }
        Ok(Self { rows })
    }

    pub fn rows(&self) -> &[OhlcvRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// First `n` rows.
    pub fn prefix(&self, n: usize) -> Self {
        Self {
            rows: self.rows[..n.min(self.rows.len())].to_vec(),
        }
    }

    pub fn closes(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.close).collect()
    }

    pub fn highs(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.high).collect()
    }

    pub fn lows(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.low).collect()
    }
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<OhlcvSeries> {
    let file = std::fs::File::open(path.as_ref()).map_err(|e| CoreError::io(path.as_ref(), e))?;
    read_csv(file)
}

/// Parses the `timestamp,open,high,low,close,volume` schema. Errors name the
/// 1-based file line (the header is line 1).
pub fn read_csv<R: Read>(reader: R) -> Result<OhlcvSeries> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| CoreError::Data(format!("line 1: unreadable header: {e}")))?
        .clone();
    let got: Vec<&str> = headers.iter().map(str::trim).collect();
    if got != CSV_HEADER {
        return Err(CoreError::Data(format!(
            "line 1: header must be `{}`, got `{}`",
            CSV_HEADER.join(","),
            got.join(",")
        )));
    }
    let mut rows: Vec<OhlcvRow> = Vec::new();
    for (i, record) in rdr.deserialize::<OhlcvRow>().enumerate() {
        let line = i + 2;
        let row = record.map_err(|e| CoreError::Data(format!("line {line}: parse failure: {e}")))?;
        row.check()
            .map_err(|e| CoreError::Data(format!("line {line}: {e}")))?;
        if let Some(prev) = rows.last() {
            if row.timestamp <= prev.timestamp {
                return Err(CoreError::Data(format!(
                    "line {line}: timestamps must be strictly increasing ({} after {})",
                    row.timestamp, prev.timestamp
                )));
            }
        }
        rows.push(row);
    }
    Ok(OhlcvSeries { rows })
}

pub fn write_csv<W: Write>(series: &OhlcvSeries, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    for row in series.rows() {
        wtr.serialize(row)
            .map_err(|e| CoreError::Data(format!("csv write: {e}")))?;
    }
    wtr.flush().map_err(|e| CoreError::io("<csv>", e))?;
    Ok(())
}
