//! Ground-truth diagnostics: estimator errors against exact full-batch
//! quantities, finite-difference error audits and power-law rate fits.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{BilevelError, Result};
use crate::estimators::{self, FdParams};
use crate::linalg;
use crate::optimizers::OptimizerState;
use crate::oracle::{BilevelOracle, Point, Sample};
use crate::scalar::Scalar;

/// Squared errors at the snapshot the state's buffers were formed at.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EstimationErrors {
    pub grad_phi_norm_sq: f64,
    /// `‖y − y*(x)‖²`
    pub err_y: f64,
    /// `‖v − v*(x, y)‖²`
    pub err_v: f64,
    /// `‖h^g − ∇_y g(x, y)‖²`
    pub err_g: f64,
    /// `‖h^f − (∇_x f − ∇²_xy g·v)‖²`; needs exact products
    pub err_f: Option<f64>,
    /// `‖h^R − (∇²_yy g·v − ∇_y f)‖²`; needs exact products
    pub err_r: Option<f64>,
}

pub fn estimation_errors<T: Scalar, O: BilevelOracle<T> + ?Sized>(
    state: &OptimizerState<T>,
    oracle: &O,
) -> Result<EstimationErrors> {
    let snap = state.buffer_snapshot();
    let pt = snap.point();
    let gt = oracle.ground_truth(&pt)?;
    let gy = oracle.grad_g_y(&pt, Sample::Full)?;
    let (err_f, err_r) = if oracle.capabilities().second_order {
        let r = estimators::exact_ls_gradient(oracle, &pt, &snap.v, Sample::Full)?;
        let f = estimators::exact_hypergradient_surrogate(oracle, &pt, &snap.v, Sample::Full)?;
        (
            Some(linalg::dist_sq(state.h_f.value(), &f).as_f64()),
            Some(linalg::dist_sq(state.h_r.value(), &r).as_f64()),
        )
    } else {
        (None, None)
    };
    Ok(EstimationErrors {
        grad_phi_norm_sq: linalg::norm_sq(&gt.grad_phi).as_f64(),
        err_y: linalg::dist_sq(&snap.y, &gt.y_star).as_f64(),
        err_v: linalg::dist_sq(&snap.v, &gt.v_star).as_f64(),
        err_g: linalg::dist_sq(state.h_g.value(), &gy).as_f64(),
        err_f,
        err_r,
    })
}

/// Least-squares fit of `log value = intercept + slope · log t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub window: (f64, f64),
}

/// Fits a power law to the points of `series` with `t` in `[window.0, window.1]`.
pub fn fit_rate(series: &[(f64, f64)], window: (f64, f64)) -> Result<RateFit> {
    if !(window.0 > 0.0 && window.0 < window.1) {
        return Err(BilevelError::InvalidArgument(format!(
            "window must satisfy 0 < start < end, got {window:?}"
        )));
    }
    let pts: Vec<(f64, f64)> = series
        .iter()
        .copied()
        .filter(|&(t, _)| t >= window.0 && t <= window.1)
        .collect();
    if pts.len() < 10 {
        return Err(BilevelError::InvalidArgument(format!(
            "need at least 10 points in the window, got {}",
            pts.len()
        )));
    }
    if let Some(&(t, v)) = pts.iter().find(|&&(_, v)| !(v > 0.0) || !v.is_finite()) {
        return Err(BilevelError::InvalidArgument(format!(
            "value at t = {t} is not positive: {v}"
        )));
    }
    let n = pts.len() as f64;
    let (lx, ly): (Vec<f64>, Vec<f64>) = pts.iter().map(|&(t, v)| (t.ln(), v.ln())).unzip();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ly.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(BilevelError::InvalidArgument("all points share one t".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r_squared = if syy <= n * (4.0 * f64::EPSILON * my.abs().max(1.0)).powi(2) {
        1.0
    } else {
        (sxy * sxy / (sxx * syy)).clamp(0.0, 1.0)
    };
    Ok(RateFit {
        slope,
        intercept,
        r_squared,
        window,
    })
}

/// Finite-difference error statistics at one `δ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FdDeltaReport {
    pub delta: f64,
    pub max_err_h: f64,
    pub max_err_j: f64,
    pub mean_err_h: f64,
    pub mean_err_j: f64,
    /// Trials with `‖e^H‖ > L_gyy r_v² δ` (plus roundoff, see [`fd_bound_audit`]).
    pub violations_h: usize,
    /// Trials with `‖e^J‖ > L_gxy r_v² δ`.
    pub violations_j: usize,
    /// Trials exceeding the sharper `L δ ‖v‖²` form of either bound.
    pub tight_violations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FdAuditReport {
    pub n_trials: usize,
    pub r_v: f64,
    pub l_gyy: f64,
    pub l_gxy: f64,
    pub per_delta: Vec<FdDeltaReport>,
    /// Points where a smaller `δ` gave a larger error (beyond 1e-12).
    pub monotone_violations: usize,
}

impl FdAuditReport {
    pub fn total_violations(&self) -> usize {
        self.per_delta
            .iter()
            .map(|d| d.violations_h + d.violations_j + d.tight_violations)
            .sum()
    }
}

const MONOTONE_SLACK: f64 = 1e-12;

/// Compares finite-difference products with exact ones at `n_trials` random
/// standard-normal points and directions `v` with `‖v‖ ≤ r_v`.
///
/// Each bound is checked with a floating-point allowance of
/// `4ε(‖g₊‖ + ‖g₋‖)/2δ + 4ε‖exact‖`, the rounding error of forming the
/// central difference from the two gradients `g±`; without it a problem
/// whose certified modulus is exactly zero would fail on roundoff alone.
pub fn fd_bound_audit<T: Scalar, O: BilevelOracle<T> + ?Sized>(
    oracle: &O,
    n_trials: usize,
    delta_grid: &[f64],
    r_v: f64,
    seed: u64,
) -> Result<FdAuditReport> {
    if !oracle.capabilities().second_order {
        return Err(BilevelError::UnsupportedCapability(
            "finite-difference audit needs exact Hessian- and Jacobian-vector products".into(),
        ));
    }
    let c = oracle.constants();
    let (Some(l_gyy), Some(l_gxy)) = (c.l_gyy, c.l_gxy) else {
        return Err(BilevelError::UnsupportedCapability(
            "finite-difference audit needs certified L_gyy and L_gxy".into(),
        ));
    };
    if delta_grid.is_empty() || n_trials == 0 {
        return Err(BilevelError::InvalidArgument("empty audit grid or zero trials".into()));
    }
    if !(r_v > 0.0) || !r_v.is_finite() {
        return Err(BilevelError::InvalidArgument(format!("r_v must be positive, got {r_v}")));
    }
    let fds = delta_grid
        .iter()
        .map(|&d| FdParams::new(T::lit(d)))
        .collect::<Result<Vec<_>>>()?;
    let (l_gyy, l_gxy) = (l_gyy.as_f64(), l_gxy.as_f64());
    let dims = oracle.dims();
    let eps = T::eps().as_f64();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_delta: Vec<FdDeltaReport> = delta_grid
        .iter()
        .map(|&delta| FdDeltaReport {
            delta,
            max_err_h: 0.0,
            max_err_j: 0.0,
            mean_err_h: 0.0,
            mean_err_j: 0.0,
            violations_h: 0,
            violations_j: 0,
            tight_violations: 0,
        })
        .collect();
    let mut order: Vec<usize> = (0..delta_grid.len()).collect();
    order.sort_by(|&a, &b| delta_grid[a].total_cmp(&delta_grid[b]));
    let mut monotone_violations = 0;
    for _ in 0..n_trials {
        let pt = Point::new(
            linalg::standard_normal(&mut rng, dims.p),
            linalg::standard_normal(&mut rng, dims.q),
        );
        let dir: Vec<T> = linalg::standard_normal(&mut rng, dims.q);
        let dn = linalg::norm(&dir);
        let radius = T::lit(r_v * rng.random_range(0.0..=1.0));
        let v = if dn > T::zero() {
            estimators::project_ball(&linalg::scale(radius / dn, &dir), T::lit(r_v))?
        } else {
            dir
        };
        let v_sq = linalg::norm_sq(&v).as_f64();
        let hv = oracle.hess_g_yy_vec(&pt, &v, Sample::Full)?;
        let jv = oracle.jac_g_xy_vec(&pt, &v, Sample::Full)?;
        let mut errs = Vec::with_capacity(fds.len());
        for (rep, fd) in per_delta.iter_mut().zip(&fds) {
            let h = estimators::fd_hessian_vec(oracle, &pt, &v, *fd, Sample::Full)?;
            let j = estimators::fd_jacobian_vec(oracle, &pt, &v, *fd, Sample::Full)?;
            let eh = linalg::dist_sq(&h, &hv).as_f64().sqrt();
            let ej = linalg::dist_sq(&j, &jv).as_f64().sqrt();
            let d = rep.delta;
            let (plus, minus) = (pt.shift_y(fd.delta(), &v), pt.shift_y(-fd.delta(), &v));
            let spread = |a: Vec<T>, b: Vec<T>, exact: &[T]| {
                4.0 * eps * ((linalg::norm(&a) + linalg::norm(&b)).as_f64() / (2.0 * d) + linalg::norm(exact).as_f64())
            };
            let round_h = spread(oracle.grad_g_y(&plus, Sample::Full)?, oracle.grad_g_y(&minus, Sample::Full)?, &hv);
            let round_j = spread(oracle.grad_g_x(&plus, Sample::Full)?, oracle.grad_g_x(&minus, Sample::Full)?, &jv);
            rep.max_err_h = rep.max_err_h.max(eh);
            rep.max_err_j = rep.max_err_j.max(ej);
            rep.mean_err_h += eh / n_trials as f64;
            rep.mean_err_j += ej / n_trials as f64;
            rep.violations_h += usize::from(eh > l_gyy * r_v * r_v * d + round_h);
            rep.violations_j += usize::from(ej > l_gxy * r_v * r_v * d + round_j);
            rep.tight_violations +=
                usize::from(eh > l_gyy * d * v_sq + round_h || ej > l_gxy * d * v_sq + round_j);
            errs.push((eh, ej));
        }
        let bad = order.windows(2).any(|w| {
            let (small, large) = (errs[w[0]], errs[w[1]]);
            small.0 > large.0 + MONOTONE_SLACK || small.1 > large.1 + MONOTONE_SLACK
        });
        monotone_violations += usize::from(bad);
    }
    Ok(FdAuditReport {
        n_trials,
        r_v,
        l_gyy,
        l_gxy,
        per_delta,
        monotone_violations,
    })
}
