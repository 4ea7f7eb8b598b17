//! Numerical laboratory for the nonlocal Bernoulli functional
//!
//! ```text
//! J(u) = ∬_{R^2d \ (Ω^c)^2} |u(x) - u(y)|^2 K(x, y) dx dy + ρ |{u > ξ} ∩ Ω|
//! ```
//!
//! for kernels `K` comparable to the fractional kernel of order `2s`.
//! The crate builds lattice discretizations, minimizes them with exact
//! coordinate descent, checks results against an enumeration oracle and
//! measures free-boundary properties of the minimizers.

pub mod analysis;
pub mod energy;
pub mod error;
pub mod grid;
pub mod kernel;
pub mod linalg;
pub mod solver;

pub use analysis::{
    analyze, density, free_boundary, growth_exponent, lifting_distance, nondegeneracy, scaling_discrepancy,
    subsolution_residual, AnalysisOptions, DensityRow, FreeBoundary, FreeBoundaryReport, GrowthFit,
    PointSelection,
};
pub use energy::{
    assemble_form, dirichlet_energy, tail, total_energy, truncation_error_bound, EnergyBreakdown, QuadraticForm,
    StoragePolicy,
};
pub use error::{NlfbError, Result};
pub use grid::{build_grid, sample_field, Field, Grid, GridSignature, Point, Role};
pub use kernel::{check_ellipticity, eval_kernel, rescale_kernel, EllipticityReport, KernelFamily, KernelSpec};
pub use solver::{
    coordinate_descent, harmonic_lifting, minimize, oracle_minimize, Ball, MinimizeResult, Phase, Problem,
};

/// Environment variable capping the worker thread count.
pub const THREADS_ENV: &str = "NLFB_THREADS";

/// Reads [`THREADS_ENV`]; `None` when unset or empty.
pub fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) if v.trim().is_empty() => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(NlfbError::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(None),
    }
}

/// Worker pool with `threads` workers, or the rayon default when `None`.
pub fn thread_pool(threads: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    builder
        .build()
        .map_err(|e| NlfbError::Config(format!("cannot start worker pool: {e}")))
}
