//! Step-size and momentum schedules.
//!
//! `α_t = (w+t)^{-1/3}`, `β_t = c_β α_t`, `λ_t = c_λ α_t` and
//! `η_t = min(1, c_η α_t²)` for each of the three momentum buffers, with
//! every `η` forced to 1 at `t = 0` so the buffers start from a plain
//! stochastic gradient.

use serde::{Deserialize, Serialize};

use crate::error::{BilevelError, Result};
use crate::oracle::ProblemConstants;
use crate::scalar::Scalar;

/// Perturbation used when no certified bound is available.
pub const DEFAULT_DELTA: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams<T> {
    pub w: T,
    pub c_beta: T,
    pub c_lambda: T,
    pub c_eta_f: T,
    pub c_eta_g: T,
    pub c_eta_r: T,
    pub r_v: T,
    pub delta_eps: T,
    pub iterations: u64,
}

/// Schedule values at one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule<T> {
    pub alpha: T,
    pub beta: T,
    pub lambda: T,
    pub eta_f: T,
    pub eta_g: T,
    pub eta_r: T,
}

/// Which family of constants [`ScheduleParams::theory`] reproduces: the
/// finite-difference method needs larger `c_η` and a bound on `δ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    FiniteDifference,
    ExactProducts,
}

fn positive<T: Scalar>(name: &str, v: T) -> Result<()> {
    if v > T::zero() && v.is_finite() {
        Ok(())
    } else {
        Err(BilevelError::InvalidArgument(format!("{name} must be positive and finite, got {v}")))
    }
}

fn require<T: Scalar>(name: &str, v: Option<T>) -> Result<T> {
    v.ok_or_else(|| {
        BilevelError::UnsupportedCapability(format!("problem does not certify {name}"))
    })
}

impl<T: Scalar> ScheduleParams<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.w >= T::one()) || !self.w.is_finite() {
            return Err(BilevelError::InvalidArgument(format!("w must be ≥ 1, got {}", self.w)));
        }
        positive("c_beta", self.c_beta)?;
        positive("c_lambda", self.c_lambda)?;
        positive("c_eta_f", self.c_eta_f)?;
        positive("c_eta_g", self.c_eta_g)?;
        positive("c_eta_r", self.c_eta_r)?;
        positive("r_v", self.r_v)?;
        positive("delta_eps", self.delta_eps)?;
        if self.iterations == 0 {
            return Err(BilevelError::InvalidArgument("iterations must be ≥ 1".into()));
        }
        Ok(())
    }

    pub fn schedule_at(&self, t: u64) -> Schedule<T> {
        let alpha = (self.w + T::lit(t as f64)).powf(T::lit(-1.0 / 3.0));
        let eta = |c: T| {
            if t == 0 {
                T::one()
            } else {
                (c * alpha * alpha).min(T::one())
            }
        };
        Schedule {
            alpha,
            beta: self.c_beta * alpha,
            lambda: self.c_lambda * alpha,
            eta_f: eta(self.c_eta_f),
            eta_g: eta(self.c_eta_g),
            eta_r: eta(self.c_eta_r),
        }
    }

    /// A warning when the radius is below `C_fy/μ_g` for a problem that
    /// certifies both.
    pub fn radius_warning(&self, constants: &ProblemConstants<T>) -> Option<String> {
        let min = constants.default_radius()?;
        (self.r_v < min).then(|| {
            format!("r_v = {} is below C_fy/mu_g = {min}; the ball may exclude v*", self.r_v)
        })
    }

    /// Largest `δ` the convergence analysis allows for this schedule, or
    /// `None` without a positive certified `L_gxy`.
    pub fn delta_bound(&self, constants: &ProblemConstants<T>) -> Option<T> {
        let l_gxy = constants.l_gxy.filter(|&l| l > T::zero())?;
        let horizon = (self.w + T::lit(self.iterations as f64) - T::one()).powf(T::lit(2.0 / 3.0));
        Some(self.c_eta_f.min(self.c_eta_r) / (T::lit(8.0) * l_gxy * self.r_v * self.r_v * horizon))
    }

    /// Constants at the lower bounds of the convergence analysis, with every
    /// free slack constant `c̄_η` set to `c_bar`.
    ///
    /// These bounds are worst-case: `w` is typically astronomically large, so
    /// `α_t` is nearly constant over any affordable horizon.
    pub fn theory(constants: &ProblemConstants<T>, iterations: u64, variant: Variant, c_bar: T) -> Result<Self> {
        constants.validate()?;
        positive("c_bar", c_bar)?;
        let mu = require("mu_g", constants.mu_g)?;
        let l_g = require("L_g", constants.l_g)?;
        let l_gxy = require("L_gxy", constants.l_gxy)?;
        let l_gyy = require("L_gyy", constants.l_gyy)?;
        let l_fx = require("L_fx", constants.l_fx)?;
        let l_fy = require("L_fy", constants.l_fy)?;
        let c_fy = require("C_fy", constants.c_fy)?;
        let c_gxy = require("C_gxy", constants.c_gxy)?;
        let lit = T::lit;
        let l_mu = mu * l_g / (mu + l_g);
        let l_y = c_gxy / mu;
        let l = l_fx + l_fy * c_gxy / mu + c_fy * (l_gxy / mu + l_gyy * c_gxy / (mu * mu));
        let l_f = l + l * c_gxy / mu;
        let coupling = l_fy * l_fy + c_fy * l_gxy * l_gxy / (mu * mu);
        let c_beta = (lit(512.0) * l_y * l_y * coupling / (l_mu * l_mu)).sqrt();
        let c_fy_pow = match variant {
            Variant::FiniteDifference => c_fy * c_fy,
            Variant::ExactProducts => c_fy,
        };
        let first = lit(1024.0) * c_gxy / (l_mu * l_mu)
            * (l_fy * l_fy / (mu * mu) + c_fy_pow * l_gyy * l_gyy / mu.powi(4));
        let second = lit(128.0) * (mu + l_g) * c_gxy / l_mu * c_beta * c_beta;
        let third = lit(128.0) * c_gxy * c_beta * c_beta;
        let c_lambda = first.max(second).max(third).sqrt();
        let third_lf = T::one() / (lit(3.0) * l_f);
        let c_eta_g = third_lf + lit(32.0) * l_g * l_g * c_beta * c_beta + lit(17.0) * coupling / (l_mu * l_mu) * c_bar;
        let (c_eta_f, c_eta_r) = match variant {
            Variant::FiniteDifference => (
                lit(2.0) * third_lf + lit(2.0) * c_bar,
                lit(2.0) * third_lf + lit(192.0) * l_g * l_g * c_lambda * c_lambda + lit(32.0) * c_gxy / (l_mu * l_mu) * c_bar,
            ),
            Variant::ExactProducts => (
                third_lf + c_bar,
                third_lf + lit(48.0) * l_g * l_g * c_lambda * c_lambda + lit(16.0) * c_gxy / (l_mu * l_mu) * c_bar,
            ),
        };
        let w_root = (c_beta * (mu + l_g)).max(c_lambda * (mu + l_g) / (lit(2.0) * mu * l_g));
        let w = (w_root.powi(3) - T::one()).max(T::one());
        let mut params = Self {
            w,
            c_beta,
            c_lambda,
            c_eta_f,
            c_eta_g,
            c_eta_r,
            r_v: default_radius(constants)?,
            delta_eps: T::lit(DEFAULT_DELTA),
            iterations,
        };
        if let Some(bound) = params.delta_bound(constants) {
            params.delta_eps = params.delta_eps.min(bound);
        }
        params.validate()?;
        Ok(params)
    }

    /// Schedule scaled by the smoothness of `Φ` instead of the proof
    /// constants.
    ///
    /// With `L_Φ = (L_fx + L_fy‖∇²_xy g‖/μ_g)(1 + ‖∇²_xy g‖/μ_g)`: `w = L_Φ³` so
    /// `α_0 = 1/L_Φ`; `β_0 = λ_0 = 1/L_g`; `c_η = w^{2/3}` so every `η`
    /// decays from 1 like `(w/(w+t))^{2/3}`.
    pub fn from_moduli(constants: &ProblemConstants<T>, iterations: u64) -> Result<Self> {
        constants.validate()?;
        let mu = require("mu_g", constants.mu_g)?;
        let l_g = require("L_g", constants.l_g)?;
        let l_fx = require("L_fx", constants.l_fx)?;
        let l_fy = require("L_fy", constants.l_fy)?;
        let c_gxy = require("C_gxy", constants.c_gxy)?;
        let kappa = c_gxy.sqrt() / mu;
        let l_phi = ((l_fx + l_fy * kappa) * (T::one() + kappa)).max(T::one());
        let w = l_phi.powi(3);
        let c_step = l_phi / l_g;
        let c_eta = l_phi * l_phi;
        let mut params = Self {
            w,
            c_beta: c_step,
            c_lambda: c_step,
            c_eta_f: c_eta,
            c_eta_g: c_eta,
            c_eta_r: c_eta,
            r_v: default_radius(constants)?,
            delta_eps: T::lit(DEFAULT_DELTA),
            iterations,
        };
        if let Some(bound) = params.delta_bound(constants) {
            params.delta_eps = params.delta_eps.min(bound);
        }
        params.validate()?;
        Ok(params)
    }
}

/// `max(C_fy/μ_g, √C_fy/μ_g)`: the documented rule, raised when needed so
/// the ball always contains every `v*` (`‖v*‖ ≤ √C_fy/μ_g`).
pub fn default_radius<T: Scalar>(constants: &ProblemConstants<T>) -> Result<T> {
    let mu = require("mu_g", constants.mu_g)?;
    let c_fy = require("C_fy", constants.c_fy)?;
    let r = (c_fy / mu).max(c_fy.sqrt() / mu);
    positive("default r_v", r)?;
    Ok(r)
}
