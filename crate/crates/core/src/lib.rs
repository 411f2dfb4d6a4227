//! Simulation, forecasting and perturbational connectivity for EEG-like
//! neural-mass data. The guide under `book/` walks through each module.

pub mod checkpoint;
pub mod config;
pub mod connectome;
pub mod dataset;
pub mod ec;
pub mod error;
pub mod granger;
pub mod jansen_rit;
pub mod metrics;
pub mod models;
pub mod npi;
pub mod plot;
pub mod series;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};

// The guide's listings run as doc-tests, one module per chapter.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/simulator.md")]
    mod simulator {}
    #[doc = include_str!("../../../book/src/ground-truth.md")]
    mod ground_truth {}
    #[doc = include_str!("../../../book/src/forecasters.md")]
    mod forecasters {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/perturbation.md")]
    mod perturbation {}
    #[doc = include_str!("../../../book/src/granger.md")]
    mod granger {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
