//! OHLCV ingestion, feature engineering, normalization, splitting, synthetic
//! markets and rule-based regime labels.

mod features;
pub mod indicators;
mod labels;
mod ohlcv;
mod synth;

pub use features::{
    chronological_split, engineer_features, normalize_rolling_z, prepare_panel, FeaturePanel, Regime, Split,
    DEFAULT_SPLIT, DEFAULT_Z_WINDOW, FEATURE_NAMES, FEATURE_WARMUP, N_FEATURES, VOLUME_FEATURE, VOL_FEATURE, Z_EPS,
};
pub use labels::{classify, label_regimes_posthoc, ADX_TREND_THRESHOLD, ATR_PERCENTILE_WINDOW};
pub use ohlcv::{load_csv, read_csv, write_csv, OhlcvRow, OhlcvSeries, CSV_HEADER};
pub use synth::{generate_synthetic, stationary_distribution, SynthMarket, SynthMarketConfig};
