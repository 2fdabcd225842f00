//! Set-based differential covariance testing.
//!
//! Given a feature matrix (p features, n samples) and an outcome over the
//! samples, this crate tests whether the covariance structure among the
//! features is associated with the outcome. Four statistics are provided:
//!
//! * `S` - directional sum, `y'w` with `w_k` the squared column sum
//! * `Q` - quadratic form `y'Ay` with `A` the Hadamard square of the Gram matrix
//! * `C` - connectivity, `y'b` with `b` the row sums of `A`
//! * `M` - maximum of `(n-1) r^2` over feature pairs, `r` the correlation
//!   between the pairwise product vector and the outcome
//!
//! P-values come from a seeded permutation engine or from analytic
//! approximations (normal limit, moment-corrected correlation, extreme-value).
//! The [`sim`] module reproduces calibration and power studies; [`genesets`]
//! runs batches of feature sets with FDR control.

pub mod error;
pub mod genesets;
pub mod matrix;
pub mod perm;
pub mod pvalue;
pub mod sim;
pub mod stats;
pub mod testing;

pub use error::{Error, Result};
pub use genesets::{GeneSetCatalog, PathwayResultTable};
pub use matrix::{Covariates, CovarianceMatrix, FeatureMatrix, Outcome};
pub use perm::{PermutationPlan, PermutationResult};
pub use stats::Statistic;
pub use testing::{run_test, CovTestResult, MethodChoice, MethodUsed};
