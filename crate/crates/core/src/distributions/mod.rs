//! Special functions, base samplers and log-densities.

mod density;
mod matrix;
mod sampling;
pub mod special;
mod stream;

pub use density::{
    log_pdf_beta, log_pdf_dirichlet, log_pdf_gamma, log_pdf_normal_diag, log_pdf_student_mv, log_pdf_wishart,
    log_pmf_poisson,
};
pub use matrix::{inverse_spd, ln_det_spd, map_eigenvalues, min_eigenvalue, sqrt_spd, symmetrize, PsdMatrix};
pub use sampling::{
    sample_chi_square, sample_gamma, sample_poisson, sample_poisson_positive, sample_std_normal,
    sample_std_normal_vec, sample_wishart_identity,
};
pub(crate) use sampling::{
    poisson_positive_unchecked, poisson_unchecked as sample_poisson_unchecked, sample_unit_gamma,
    wishart_identity_unchecked,
};
pub use special::{digamma, ln_gamma, ln_mv_gamma, mv_digamma, trigamma};
pub use stream::RandomStream;
