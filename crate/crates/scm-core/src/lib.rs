//! Spatial compositional model (SCM) for linear hyperspectral unmixing.
//!
//! The library estimates endmembers, abundances, the noise level and a
//! per-endmember covariance from a hyperspectral cube `Y = A M + N`, using
//! graph-Laplacian spatial priors on the abundances, pairwise-closeness and
//! wavelength-smoothness priors on the endmembers, and a likelihood that does
//! not assume pixel independence. The covariance of each estimated endmember
//! is summarized as an uncertainty amount, direction and band range.
//!
//! The crate is organized around the solver pipeline:
//!
//! * [`types`] — validated domain types (cubes, abundances, endmember sets).
//! * [`laplacian`] — the three graph Laplacians (spatial, endmember, wavelength).
//! * [`objective`] — the reduced energies, their gradients, and the `Q`/`z`
//!   reduction that keeps all linear algebra at `MB x MB` instead of `NB x NB`.
//! * [`projection`] — simplex projection for abundance rows and eigenvalue
//!   flooring for precision matrices.
//! * [`solver`] — the two-phase block-coordinate descent.
//! * [`uncertainty`], [`metrics`], [`synth`], [`bench`], [`io`] — analysis,
//!   scoring, synthetic-scene generation and file formats.
//!
//! With the default `parallel` feature, trial batches and row/edge-level inner
//! loops run on rayon; disabling the feature yields a dependency-free
//! sequential build with identical output.

pub mod bench;
pub mod error;
pub mod io;
pub mod kmeans;
pub mod laplacian;
pub mod metrics;
pub mod objective;
pub(crate) mod par;
pub mod projection;
pub mod solver;
pub mod synth;
pub mod types;
pub mod uncertainty;

pub use error::ScmError;
pub use types::{
    AbundanceMatrix, EndmemberSet, HsiCube, Neighborhood, PrecisionSet, ScmConfig, ScmResult,
};
