//! Anchoring-based causal design: estimate the effect of beliefs on outcomes
//! using randomly assigned anchors as instruments.
//!
//! Modules, bottom-up:
//! - [`datamodel`]: participant records, CSV ingestion, transforms, exclusions
//! - [`linreg`]: OLS with classical/HC1 errors and nested F-tests
//! - [`iv`]: 2SLS, the Wald estimator, anchoring effects, the F > 10 gate
//! - [`design`]: choosing anchor values from baseline and pilot data
//! - [`diagnostics`]: placebo matrices, decay across waves, manipulation checks
//! - [`curves`]: kernel densities and local-linear smoothers for plotting
//! - [`simulate`]: the synthetic DGP and Monte Carlo harness

// `!(x > 0.0)` rejects NaN on purpose; matrix loops read best indexed.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod curves;
pub mod datamodel;
pub mod design;
pub mod diagnostics;
pub mod dist;
pub mod error;
pub mod iv;
pub mod linreg;
pub mod simulate;

pub use error::{Error, Result};
