//! Multi-modal face anti-spoofing with uncertainty-gated cross-modal adapters
//! and rebalanced per-modality gradient modulation.

pub mod adapter;
pub mod backbone;
pub mod checkpoint;
pub mod composite;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod losses;
pub mod metrics;
pub mod modality;
pub mod model;
pub mod optim;
pub mod params;
pub mod protocol;
pub mod regrad;
pub mod synth;
pub mod trainer;
pub mod uem;

pub use error::{MmdgError, Result};
pub use modality::{Modality, PerModality};
