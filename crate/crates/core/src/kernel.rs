//! The softened Riesz interaction `w(x) = λ (|x|² + ε²)^{-α/2}`.
//!
//! Everything else in the crate reaches the interaction law through
//! [`RieszParams`]; nothing else knows the formula.

use serde::{Deserialize, Serialize};

use crate::{Error, Mat3, Result, Vec3};

/// Exponent, sign and Plummer softening of the interaction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RieszParams {
    pub alpha: f64,
    pub lambda: f64,
    pub eps: f64,
}

impl RieszParams {
    pub fn new(alpha: f64, lambda: f64, eps: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 3.0) {
            return Err(Error::InvalidParameter(format!("alpha = {alpha} outside (0, 3)")));
        }
        if lambda != 1.0 && lambda != -1.0 {
            return Err(Error::InvalidParameter(format!("lambda = {lambda} must be +1 or -1")));
        }
        if !(eps >= 0.0 && eps.is_finite()) {
            return Err(Error::InvalidParameter(format!("eps = {eps} must be finite and >= 0")));
        }
        Ok(Self { alpha, lambda, eps })
    }

    /// Simulation runs additionally need the strictly long-range regime.
    pub fn validate_long_range(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "simulation needs 0 < alpha < 1, got {}",
                self.alpha
            )));
        }
        Ok(())
    }

    pub fn with_eps(self, eps: f64) -> Self {
        Self { eps, ..self }
    }

    #[inline]
    fn softened_r2(&self, x: &Vec3) -> Result<f64> {
        let s = x.norm_squared() + self.eps * self.eps;
        if s > 0.0 {
            Ok(s)
        } else {
            Err(Error::KernelDomain)
        }
    }

    pub fn potential(&self, x: &Vec3) -> Result<f64> {
        let s = self.softened_r2(x)?;
        Ok(self.lambda * s.powf(-0.5 * self.alpha))
    }

    pub fn grad(&self, x: &Vec3) -> Result<Vec3> {
        let s = self.softened_r2(x)?;
        Ok(self.grad_from_r2(x, s))
    }

    pub fn hessian(&self, x: &Vec3) -> Result<Mat3> {
        let s = self.softened_r2(x)?;
        Ok(self.hessian_from_r2(x, s))
    }

    /// `∇w(x)` given `s = |x|² + ε² > 0`; the hot-loop entry point.
    #[inline(always)]
    pub fn grad_from_r2(&self, x: &Vec3, s: f64) -> Vec3 {
        let c = -self.alpha * self.lambda * s.powf(-0.5 * self.alpha - 1.0);
        x * c
    }

    #[inline(always)]
    pub fn hessian_from_r2(&self, x: &Vec3, s: f64) -> Mat3 {
        let a = self.alpha;
        let p2 = s.powf(-0.5 * a - 1.0);
        let p4 = p2 / s;
        let diag = -a * self.lambda * p2;
        let outer = a * (a + 2.0) * self.lambda * p4;
        let mut h = x * x.transpose() * outer;
        h[(0, 0)] += diag;
        h[(1, 1)] += diag;
        h[(2, 2)] += diag;
        h
    }

    /// Gradient and Hessian sharing one power evaluation.
    #[inline(always)]
    pub fn grad_hessian_from_r2(&self, x: &Vec3, s: f64) -> (Vec3, Mat3) {
        let a = self.alpha;
        let p2 = s.powf(-0.5 * a - 1.0);
        let p4 = p2 / s;
        let g = x * (-a * self.lambda * p2);
        let diag = -a * self.lambda * p2;
        let mut h = x * x.transpose() * (a * (a + 2.0) * self.lambda * p4);
        h[(0, 0)] += diag;
        h[(1, 1)] += diag;
        h[(2, 2)] += diag;
        (g, h)
    }
}

/// How the softening length evolves with time.
///
/// `Comoving` keeps `ε(t) = ε₀ max(1, t)`, so that the position-space kernel
/// at time `t` and the velocity-space kernel used by `A_t` are related by the
/// exact scaling `∇w_{ε₀t}(t u) = t^{-(1+α)} ∇w_{ε₀}(u)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SofteningMode {
    Fixed,
    #[default]
    Comoving,
}

/// Time-dependent softening schedule built on a base [`RieszParams`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub params: RieszParams,
    pub softening: SofteningMode,
}

impl Interaction {
    pub fn new(params: RieszParams, softening: SofteningMode) -> Self {
        Self { params, softening }
    }

    pub fn fixed(params: RieszParams) -> Self {
        Self::new(params, SofteningMode::Fixed)
    }

    pub fn eps_at(&self, t: f64) -> f64 {
        match self.softening {
            SofteningMode::Fixed => self.params.eps,
            SofteningMode::Comoving => self.params.eps * t.abs().max(1.0),
        }
    }

    /// Position-space kernel at time `t`.
    pub fn at(&self, t: f64) -> RieszParams {
        self.params.with_eps(self.eps_at(t))
    }

    /// Velocity-space kernel used for `A_t`, `A_∞` and their derivatives.
    pub fn velocity_kernel(&self) -> RieszParams {
        self.params
    }
}

/// Object-safe view of an interaction law, used by the invariant checks so
/// that they can be pointed at a deliberately broken kernel.
pub trait InteractionKernel: Sync {
    fn alpha(&self) -> f64;
    fn potential(&self, x: &Vec3) -> Result<f64>;
    fn grad(&self, x: &Vec3) -> Result<Vec3>;
    fn hessian(&self, x: &Vec3) -> Result<Mat3>;
}

impl InteractionKernel for RieszParams {
    fn alpha(&self) -> f64 {
        self.alpha
    }
    fn potential(&self, x: &Vec3) -> Result<f64> {
        RieszParams::potential(self, x)
    }
    fn grad(&self, x: &Vec3) -> Result<Vec3> {
        RieszParams::grad(self, x)
    }
    fn hessian(&self, x: &Vec3) -> Result<Mat3> {
        RieszParams::hessian(self, x)
    }
}
