//! Lagrangian mean-field simulation of the three-dimensional Vlasov–Riesz
//! system with interaction potential `λ|x|^{-α}`, `0 < α < 1`, together with
//! the asymptotic diagnostics used to check its long-time behaviour:
//! field decay, momentum limits, the velocity correction `A_t`, modified
//! wave operators and the modified-scattering residual.
//!
//! The crate is organised bottom-up:
//!
//! * [`kernel`]: the softened Riesz interaction law.
//! * [`initial_data`]: Gaussian initial data and its particle discretization.
//! * [`meanfield`]: direct and tree evaluation of the self-consistent field.
//! * [`characteristics`]: forward flow, snapshot history and traced characteristics.
//! * [`scattering`]: momentum limits, `A_t`, wave operators, `g`, `F`, residuals.
//! * [`analysis`]: log–log rate fits, the interpolation ratio, the rate report.
//! * [`config`] / [`run`] / [`cli`]: configuration and the command surface.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod characteristics;
pub mod cli;
pub mod config;
pub mod error;
pub mod initial_data;
pub mod io;
pub mod kernel;
pub mod meanfield;
pub mod quadrature;
pub mod run;
pub mod scattering;

pub use error::{Error, Result};
pub use kernel::RieszParams;

/// Position or velocity in three dimensions.
pub type Vec3 = nalgebra::Vector3<f64>;
/// 3×3 matrix (field gradients, kernel Hessians).
pub type Mat3 = nalgebra::Matrix3<f64>;

/// Japanese bracket `⟨x⟩ = (1 + |x|²)^{1/2}`.
#[inline]
pub fn bracket(x: &Vec3) -> f64 {
    (1.0 + x.norm_squared()).sqrt()
}
