//! Regime-aware architecture search for return forecasting.
//!
//! The pipeline: engineer features from OHLCV data ([`data`]), detect regimes
//! with multi-head attention ([`regime`]), blend volatility/trend/range blocks
//! through a learned gate ([`blocks`]), train under a four-term loss
//! ([`objective`], [`train`]) and search architectures with a Gaussian-process
//! optimizer ([`nas`]).

pub mod arch;
pub mod blocks;
pub mod data;
pub mod error;
pub mod model;
pub mod nas;
pub mod nn;
pub mod objective;
pub mod optim;
pub mod regime;
pub mod train;

pub use error::{CoreError, Result};
