//! Weather-conditioned forecasting of vegetation greenness (NDVI) from
//! satellite minicubes.
//!
//! The crate bundles the data model and synthetic benchmark ([`minicube`]),
//! weather-conditioning layers ([`conditioning`]), spatio-temporal building
//! blocks ([`backbones`]), assembled forecasters ([`models`]), non-ML
//! references ([`baselines`]), the masked training loop ([`training`]) and the
//! scoring protocol ([`evaluation`]). The `vegcast` binary wraps them in a CLI.

pub mod backbones;
pub mod baselines;
pub mod binio;
pub mod cli;
pub mod conditioning;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod hashing;
pub mod minicube;
pub mod models;
pub mod nn;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
