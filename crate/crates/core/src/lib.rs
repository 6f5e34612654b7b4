//! Cramér-Rao-induced bounds (CRIB) on the angular error of CP decomposition
//! factors, with the CP solvers and Monte Carlo tools used to check them.
//!
//! Tensors are vectorized column-major with mode 1 fastest. Parameters are
//! stacked as `θ = [vec A₁; …; vec A_N]`.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod analysis;
pub mod closed_forms;
pub mod crib;
pub mod error;
pub mod hessian;
pub mod io;
pub mod linalg;
pub mod solver;
pub mod tensor;

pub use crib::{crib, crib_from_grams, crib_masked, CribReport, CribRequest, Method};
pub use error::{CribError, Result};
pub use solver::{fit_als, fit_gn, FitResult, Init, SolverConfig};
pub use tensor::{full_tensor, gram_cache, DenseTensor, GramCache, KruskalModel};
