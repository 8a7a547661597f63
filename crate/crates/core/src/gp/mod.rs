//! Sparse variational Gaussian processes with pathwise posterior sampling.

mod kernel;
mod kl;
mod pathwise;
mod sparse;

pub use kernel::{se_kernel_matrix, SeKernel};
pub use kl::kl_diag_gaussian_vs_standard;
pub use pathwise::{draw_pathwise, kl_for_draw, PathwiseFunction, RffBasis};
pub use sparse::{
    inducing_prior_covariance, kl_inducing, sample_inducing_outputs, BoundGp, SparseGp, SparseGpConfig,
};
