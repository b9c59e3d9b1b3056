//! Core library of the valley workbench.
//!
//! The workbench studies feed-forward networks whose outputs are driven by
//! *skip connections*: a chosen set of hidden units feeds the output layer
//! directly, each with its own free weight. For a dataset of `N` samples and
//! `M` skip units, stacking the skip-unit activations row per sample yields
//! the hidden feature matrix `Ψ` (`N × M`). Everything the workbench verifies
//! hangs off that matrix:
//!
//! * when `Ψ` has full row rank, the linear system `Ψ V = G` is solvable for
//!   any output targets, so a zero-training-error classifier exists;
//! * [`certificate`] constructs hidden-layer parameters for which `|det Ψ|`
//!   is bounded away from zero by an explicit product formula, giving a
//!   machine-checkable rank witness instead of a numerical rank guess;
//! * [`solvers`] exploits the same structure to fit output weights in closed
//!   form, to train with SGD, and to walk a non-increasing segment in `V`
//!   from any starting point down to arbitrarily small cross-entropy loss;
//! * [`landscape`] samples 2-D loss slices so the absence of visible valley
//!   floors above the target loss can be eyeballed as well as asserted.
//!
//! Module map:
//!
//! * [`linalg`] — dense row-major matrices, pivoted QR least squares,
//!   determinants, numerical rank;
//! * [`netgraph`] — network specifications as validated DAGs, skip-set
//!   augmentation, structural assumption checks;
//! * [`engine`] — deterministic forward evaluation, `Ψ` extraction, exact
//!   reverse-mode gradients, parameter (de)serialization;
//! * [`losses`] — cross-entropy, square and hinge losses with error reports
//!   and the per-column output Hessian;
//! * [`certificate`] — constructive full-rank witness for `Ψ`;
//! * [`solvers`] — random-feature fitting, SGD with Nesterov momentum,
//!   escape-path construction;
//! * [`data`] — datasets, CSV/IDX loaders, synthetic generators;
//! * [`landscape`] — 2-D loss-surface slices and the deep-skinny demo
//!   network builder.

pub mod certificate;
pub mod data;
pub mod engine;
pub mod error;
pub mod landscape;
pub mod linalg;
pub mod losses;
pub mod netgraph;
pub mod solvers;

pub use error::{Error, Result};
