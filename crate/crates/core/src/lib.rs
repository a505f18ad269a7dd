// Negated comparisons are used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! Leave-future-out cross-validation for Bayesian time-series models.
//!
//! The crate provides Pareto smoothed importance sampling ([`psis`]), a
//! model interface ([`model`]), an autoregressive trend model with its own
//! sampler ([`ar_trend`]), the LFO-CV engine ([`lfo`]) and a simulation
//! harness ([`simlab`]).

pub mod ar_trend;
pub mod error;
pub mod lfo;
pub mod model;
pub mod psis;
pub mod seed;
pub mod simlab;
pub mod stats;

pub use ar_trend::{ArTrend, ArTrendSpec};
pub use error::{Error, Result};
pub use lfo::{LfoConfig, LfoResult, Measure, Mode};
pub use model::{PosteriorDraws, SamplerConfig, TimeSeries, TimeSeriesModel};
