//! Pyramidal residual networks of residual networks.
//!
//! This crate turns a small architecture description (depth, widening
//! factor `alpha`, block variant, terminal survival probability) into an
//! explicit layer graph with three shortcut levels, analyzes it statically
//! (shapes, parameters, MACs, expected compute under stochastic depth), and
//! trains it at desk scale on a built-in `f64` tensor engine.
//!
//! ```
//! use pyror::archspec::{ArchConfig, BlockVariant};
//! use pyror::{analyzer, graph};
//!
//! let cfg = ArchConfig::new(110, 48, BlockVariant::PyramidBn);
//! let g = graph::build_graph(&cfg).unwrap();
//! assert_eq!(g.schedule().final_width(), 64);
//! let params = analyzer::count_params(&g).unwrap().total_params;
//! assert!((1_600_000..1_800_000).contains(&params));
//! ```
//!
//! Module map:
//!
//! - [`archspec`]: configurations, depth algebra, channel schedules
//! - [`graph`]: graph construction, validation, JSON export/import
//! - [`analyzer`]: shapes, parameter and MAC counts, expected compute
//! - [`stochdepth`]: survival schedules and block masks
//! - [`nnkernel`]: tensors, kernels, forward/backward, gradcheck, checkpoints
//! - [`trainer`]: datasets, augmentation, SGD training and evaluation
//! - [`cli`]: the `pyror` command line

pub mod analyzer;
pub mod archspec;
pub mod cli;
mod error;
pub mod graph;
pub mod nnkernel;
pub mod stochdepth;
pub mod trainer;

pub use error::{Error, Result};
