//! Global-local video captioning: feature fusion, an LSTM caption decoder,
//! metric-weighted cross-entropy seeding and discrepant-reward boosting,
//! plus the caption metrics used both for evaluation and as training signal.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod grad;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod text;
pub mod training;
