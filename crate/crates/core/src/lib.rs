//! Synthetic control estimation of consumer-price pass-through for an
//! indirect-tax change on monthly price-index panels.
//!
//! The pipeline is: [`ingest`] a long-format CSV into a [`panel::Panel`],
//! fit simplex-constrained donor weights with [`scm`], turn the gap into
//! pass-through rates with [`passthrough`], and check robustness with the
//! leave-one-out and placebo refits in [`inference`]. [`report`] wires the
//! steps together and renders CSV/SVG/JSON artifacts; [`datagen`] builds
//! panels with known ground truth for validation.
//!
//! Refits fan out over rayon when the `parallel` feature is enabled (the
//! default); see [`exec`].

// NaN must fail positivity checks, so `!(x > 0.0)` is used on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod datagen;
pub mod error;
pub mod exec;
pub mod inference;
pub mod ingest;
pub mod month;
pub mod panel;
pub mod passthrough;
pub mod report;
pub mod scm;
pub mod simplex;

pub use error::{Error, Result};
pub use exec::Execution;
pub use month::MonthKey;
pub use panel::{Panel, PriceSeries, StudyDesign};
pub use scm::{fit_weights, ScmFit, SolverOptions, WeightVector};
