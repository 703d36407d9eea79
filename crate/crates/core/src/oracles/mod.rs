//! Reference solutions that do not share code paths with the solvers.

mod gheat;
mod hopf_cole;
mod monotonicity;
mod riccati;

pub use gheat::{gexp_exact_quadratic, gheat_1d, gheat_2d, GHeatGrid};
pub use hopf_cole::{hopf_cole_mc, hopf_cole_mc_with, MonteCarloEstimate};
pub use monotonicity::{lq_fbsde_coefficients, monotonicity_check, FbsdeCoefficients, MonotonicityReport};
pub use riccati::{rk4_matrix, riccati_rk4, RiccatiSolution};
